"""Smoothed saliency, gradient-guided masking, the training step and two-step inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import (AdamWState, EmbeddingGrad, ModelConfig, adamw_step, backward,
                 ce_logit_grad, cross_entropy, forward, pad_batch, softmax)
from .numerics import Decision, RngStream, VoteGate, binom_consensus
from .textdata import MASK, RESERVED_IDS, SynonymTable

MAJORITY = "majority"
LOGIT_AVERAGE = "logit_average"


@dataclass
class RsmiTrainConfig:
    M: int = 2
    nu: int = 1
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 0.01
    normalize_grad: bool = False
    mask_strategy: str = "gradient"

    def __post_init__(self):
        if self.M < 0 or self.nu < 1 or self.beta < 0:
            raise ValueError("need M >= 0, nu >= 1, beta >= 0")
        if self.mask_strategy not in ("gradient", "random"):
            raise ValueError("mask_strategy must be 'gradient' or 'random'")


@dataclass
class RsmiInferConfig:
    M: int = 2
    N: int | None = None
    k0: int = 5
    k1: int = 50
    alpha: float = 0.98
    mode: str = LOGIT_AVERAGE
    nu: int = 1

    def __post_init__(self):
        if self.N is None:
            self.N = 2 * self.M
        if not 0 <= self.M <= self.N:
            raise ValueError("need 0 <= M <= N")
        if not 1 <= self.k0 <= self.k1:
            raise ValueError("need 1 <= k0 <= k1")
        if self.mode not in (MAJORITY, LOGIT_AVERAGE):
            raise ValueError(f"mode must be {MAJORITY!r} or {LOGIT_AVERAGE!r}")
        VoteGate(self.k0, self.alpha)

    @property
    def gate(self) -> VoteGate:
        return VoteGate(self.k0, self.alpha)


@dataclass
class SaliencyReport:
    norms: np.ndarray
    ranking: np.ndarray
    excluded: np.ndarray

    def top(self, m: int) -> list[int]:
        return sorted(int(i) for i in self.ranking[:m])


def _rows(seqs) -> list[list[int]]:
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return [[int(t) for t in row if t != 0] for row in seqs]
    return [list(s) for s in seqs]


def smoothed_embedding_grad(params, cfg: ModelConfig, seqs, labels, nu: int = 1,
                            rngs=None) -> EmbeddingGrad:
    """Gradient of ``-log(mean_i p(y | x + delta_i))`` with respect to word embeddings.

    Each sequence is replicated ``nu`` times and every replica draws from the
    sequence's own stream in order. Returns per-sequence vectors ``[B, T, d]``.
    """
    if nu < 1:
        raise ValueError("nu must be >= 1")
    seqs = _rows(seqs)
    labels = np.atleast_1d(np.asarray(labels))
    B = len(seqs)
    if rngs is None or isinstance(rngs, RngStream):
        rngs = [rngs] * B
    if nu == 1:
        tr = forward(params, cfg, seqs, None if rngs[0] is None else rngs)
        dx, _ = backward(params, cfg, tr, ce_logit_grad(tr.probs, labels, "sum"))
        return EmbeddingGrad.from_vectors(dx)
    rep = [s for s in seqs for _ in range(nu)]
    rep_rngs = None if rngs[0] is None else [r for r in rngs for _ in range(nu)]
    tr = forward(params, cfg, rep, rep_rngs)
    probs = tr.probs.reshape(B, nu, -1)
    p_bar = probs.mean(axis=1)
    rows = np.arange(B)
    p_y = probs[rows, :, labels]                    # [B, nu]
    coef = p_y / (nu * p_bar[rows, labels])[:, None]
    onehot = np.zeros_like(probs)
    onehot[rows, :, labels] = 1.0
    dlogits = coef[..., None] * (probs - onehot)
    dx, _ = backward(params, cfg, tr, dlogits.reshape(B * nu, -1))
    dx = dx.reshape(B, nu, *dx.shape[1:]).sum(axis=1)
    return EmbeddingGrad.from_vectors(dx)


def rank_saliency(norms, tokens: Sequence[int]) -> SaliencyReport:
    """Descending gradient-norm order over non-reserved positions; ties go to the lower index."""
    tokens = list(tokens)
    norms = np.asarray(norms, dtype=np.float64)[:len(tokens)]
    if len(norms) != len(tokens):
        raise ValueError("norms and tokens differ in length")
    excluded = np.array([i for i, t in enumerate(tokens) if t in RESERVED_IDS], dtype=np.int64)
    keep = np.array([i for i, t in enumerate(tokens) if t not in RESERVED_IDS], dtype=np.int64)
    order = keep[np.argsort(-norms[keep], kind="stable")] if len(keep) else keep
    return SaliencyReport(norms, order, excluded)


def rand_grad_mask(report: SaliencyReport, M: int, N: int, k1: int,
                   rng: RngStream) -> list[tuple[int, ...]]:
    """``k1`` independent uniform draws of ``M`` distinct positions from the top-``N`` ranking."""
    avail = len(report.ranking)
    if M > N:
        raise ValueError("M must not exceed N")
    if M > avail or N > avail:
        raise ValueError(f"cannot draw M={M} of top-N={N} from {avail} ranked positions")
    pool = report.ranking[:N]
    out = []
    for _ in range(k1):
        picks = pool[rng.choice(N, M)] if M else pool[:0]
        out.append(tuple(sorted(int(p) for p in picks)))
    return out


def _masked(tokens, positions) -> list[int]:
    out = list(tokens)
    for p in positions:
        out[p] = MASK
    return out


def _random_positions(tokens, m: int, rng: RngStream) -> list[int]:
    cand = [i for i, t in enumerate(tokens) if t not in RESERVED_IDS]
    m = min(m, len(cand))
    return sorted(cand[i] for i in rng.choice(len(cand), m)) if m else []


def train_step(params, state: AdamWState, batch, train_cfg: RsmiTrainConfig,
               model_cfg: ModelConfig, rngs):
    """One update on ``batch = (seqs, labels)``; returns ``(params, state, mean_loss, masked_seqs)``.

    Saliency uses the ground-truth labels. The top-``M`` positions are masked,
    ``beta * g`` is added to the remaining embeddings and the masked,
    perturbed batch is forwarded with noise for the parameter update.
    """
    seqs, labels = batch
    seqs = _rows(seqs)
    labels = np.asarray(labels)
    if isinstance(rngs, RngStream):
        rngs = [rngs.substream(i) for i in range(len(seqs))]
    M, beta = train_cfg.M, train_cfg.beta
    need_grad = beta > 0 or (M > 0 and train_cfg.mask_strategy == "gradient")
    grad = smoothed_embedding_grad(params, model_cfg, seqs, labels, train_cfg.nu, rngs) if need_grad else None

    masked, mask_sets = [], []
    for b, s in enumerate(seqs):
        if M == 0:
            pos = []
        elif train_cfg.mask_strategy == "random":
            pos = _random_positions(s, M, rngs[b])
        else:
            pos = rank_saliency(grad.norms[b], s).top(M)
        mask_sets.append(pos)
        masked.append(_masked(s, pos))

    delta = None
    if beta > 0:
        vec = grad.vectors.astype(np.float64)
        if train_cfg.normalize_grad:
            vec = vec / np.maximum(grad.norms[..., None], 1e-12)
        delta = beta * vec
        for b, pos in enumerate(mask_sets):
            delta[b, pos] = 0.0
            delta[b, len(seqs[b]):] = 0.0
    tr = forward(params, model_cfg, masked, rngs, embed_delta=delta)
    loss = float(cross_entropy(tr.probs, labels).mean())
    _, grads = backward(params, model_cfg, tr, ce_logit_grad(tr.probs, labels, "mean"))
    params, state = adamw_step(params, grads, state, train_cfg.lr,
                               weight_decay=train_cfg.weight_decay)
    return params, state, loss, masked


@dataclass
class TwoStepResult:
    label: int
    probs: np.ndarray
    first_votes: np.ndarray
    n_a: int
    decision: Decision
    first_mask: list[int]
    forward_passes: int
    second_votes: np.ndarray | None = None
    mean_logits: np.ndarray | None = None
    second_masks: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def escalated(self) -> bool:
        return self.decision is Decision.ESCALATE


def _vote(preds: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(preds, minlength=n_classes)


def predict_two_step(params, cfg: ModelConfig, infer: RsmiInferConfig, seqs,
                     rngs) -> list[TwoStepResult]:
    """Batched two-step sampling inference, one stream per sequence.

    Forward passes per sequence: 1 (initial guess) + nu (saliency) + k0
    (first vote), plus k1 when the binomial gate escalates.
    """
    seqs = _rows(seqs)
    B = len(seqs)
    if isinstance(rngs, RngStream):
        rngs = [rngs.substream(i) for i in range(B)]
    C = cfg.n_classes
    k0, k1 = infer.k0, infer.k1

    guess = forward(params, cfg, seqs, rngs).probs.argmax(axis=1)
    grad = smoothed_embedding_grad(params, cfg, seqs, guess, infer.nu, rngs)
    reports, first_masks, masked = [], [], []
    for b, s in enumerate(seqs):
        rep = rank_saliency(grad.norms[b], s)
        pos = rep.top(min(infer.M, len(rep.ranking)))
        reports.append(rep)
        first_masks.append(pos)
        masked.append(_masked(s, pos))

    rep_seqs = [m for m in masked for _ in range(k0)]
    tr = forward(params, cfg, rep_seqs, [r for r in rngs for _ in range(k0)])
    logits0 = tr.logits.astype(np.float64).reshape(B, k0, C)
    preds0 = tr.probs.argmax(axis=1).reshape(B, k0)

    results = []
    escalate = []
    for b in range(B):
        votes = _vote(preds0[b], C)
        n_a = int(votes.max())
        decision = binom_consensus(n_a, infer.gate)
        label = int(votes.argmax())
        if infer.mode == MAJORITY:
            probs = votes / k0
        else:
            probs = softmax(logits0[b].mean(axis=0))
        res = TwoStepResult(label, probs, votes, n_a, decision, first_masks[b], 1 + infer.nu + k0)
        results.append(res)
        if decision is Decision.ESCALATE:
            escalate.append(b)

    if escalate:
        variants, var_rngs = [], []
        for b in escalate:
            rep = reports[b]
            avail = len(rep.ranking)
            m_eff = min(infer.M, avail)
            n_eff = min(infer.N, avail)
            sets = rand_grad_mask(rep, m_eff, n_eff, k1, rngs[b])
            results[b].second_masks = sets
            variants.extend(_masked(seqs[b], s) for s in sets)
            var_rngs.extend([rngs[b]] * k1)
        tr = forward(params, cfg, variants, var_rngs)
        logits1 = tr.logits.astype(np.float64).reshape(len(escalate), k1, C)
        preds1 = tr.probs.argmax(axis=1).reshape(len(escalate), k1)
        for j, b in enumerate(escalate):
            res = results[b]
            res.forward_passes += k1
            res.second_votes = _vote(preds1[j], C)
            res.mean_logits = logits1[j].mean(axis=0)
            if infer.mode == MAJORITY:
                res.label = int(res.second_votes.argmax())
                res.probs = res.second_votes / k1
            else:
                res.label = int(res.mean_logits.argmax())
                res.probs = softmax(res.mean_logits)
    return results


def predict_gradient_masked(params, cfg: ModelConfig, seqs, M: int, nu: int = 1, rngs=None):
    """Deterministic top-``M`` gradient mask on the model's own guess, then one pass.

    With ``rngs=None`` and a noise-free config this is the GM ablation model.
    Returns ``(probs, masked_seqs)``.
    """
    seqs = _rows(seqs)
    guess = forward(params, cfg, seqs, rngs).probs.argmax(axis=1)
    grad = smoothed_embedding_grad(params, cfg, seqs, guess, nu, rngs)
    masked = [_masked(s, rank_saliency(grad.norms[b], s).top(M)) for b, s in enumerate(seqs)]
    return forward(params, cfg, masked, rngs).probs, masked


def predict_random_masked(params, cfg: ModelConfig, seqs, M: int, k: int, rngs):
    """Probability mean over ``k`` uniformly random ``M``-masks per sequence (RM ablation model)."""
    seqs = _rows(seqs)
    if isinstance(rngs, RngStream):
        rngs = [rngs.substream(i) for i in range(len(seqs))]
    variants = []
    for b, s in enumerate(seqs):
        variants.extend(_masked(s, _random_positions(s, M, rngs[b])) for _ in range(k))
    probs = forward(params, cfg, variants, None).probs
    return probs.reshape(len(seqs), k, -1).mean(axis=1)


def synonym_marginal_predict(predict_fn: Callable, tokens: Sequence[int], mask_pos: int,
                             table: SynonymTable) -> np.ndarray:
    """Uniform average of predictions over the original word and its synonyms at ``mask_pos``."""
    tokens = list(tokens)
    if not 0 <= mask_pos < len(tokens):
        raise IndexError(f"mask position {mask_pos} out of range")
    original = tokens[mask_pos]
    choices = [original] + [t for t in table.candidates(original) if t != original]
    variants = []
    for t in choices:
        v = list(tokens)
        v[mask_pos] = t
        variants.append(v)
    probs = np.asarray(predict_fn(variants), dtype=np.float64)
    return probs.mean(axis=0)


def noise_free_predictor(params, cfg: ModelConfig) -> Callable:
    def predict(seqs):
        return forward(params, cfg, seqs, None).probs
    return predict


def padded(seqs) -> np.ndarray:
    return pad_batch(_rows(seqs))
