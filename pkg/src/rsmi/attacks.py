"""Word-substitution attacks with exact query accounting.

Both attacks talk to the victim only through :class:`VictimHandle`, which
counts every sequence whose class probabilities are requested.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import RngStream
from .textdata import UNK, LabeledExample, SynonymTable

logger = logging.getLogger(__name__)

GREEDY = "greedy"
PWWS = "pwws"

SUCCESS = "success"
EXHAUSTED = "exhausted"
BUDGET = "budget"
SKIPPED = "skipped"


class BudgetExhausted(RuntimeError):
    pass


class VictimHandle:
    """Counts probability requests made against one victim for one attack."""

    def __init__(self, predict_proba: Callable, label: int, budget: int = 3000):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self._predict = predict_proba
        self.label = int(label)
        self.budget = budget
        self.queries = 0
        self.original_prediction: int | None = None

    @property
    def remaining(self) -> int:
        return self.budget - self.queries

    def query(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        seqs = [list(s) for s in seqs]
        if len(seqs) > self.remaining:
            raise BudgetExhausted(f"{len(seqs)} queries requested, {self.remaining} left")
        probs = np.asarray(self._predict(seqs), dtype=np.float64)
        self.queries += len(seqs)
        return probs


@dataclass
class AttackConfig:
    strategy: str = GREEDY
    synonyms: SynonymTable = field(default_factory=SynonymTable)
    max_candidates: int = 8
    budget: int = 3000

    def __post_init__(self):
        if self.strategy not in (GREEDY, PWWS):
            raise ValueError(f"strategy must be {GREEDY!r} or {PWWS!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    def candidates(self, token: int) -> list[int]:
        return self.synonyms.candidates(token)[:self.max_candidates]


@dataclass
class AttackRecord:
    original: list[int]
    perturbed: list[int]
    label: int
    success: bool
    skipped: bool
    queries: int
    substitutions: list[tuple[int, int, int]]
    outcome: str
    phase_queries: dict[str, int]
    original_prediction: int
    final_prediction: int
    example_index: int = -1
    seed: int = 0
    stream_id: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["substitutions"] = [list(s) for s in self.substitutions]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttackRecord":
        d = json.loads(line)
        d["substitutions"] = [tuple(s) for s in d["substitutions"]]
        return cls(**d)


def write_records(path, records: Sequence[AttackRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[AttackRecord]:
    with open(path, encoding="utf-8") as fh:
        return [AttackRecord.from_json(line) for line in fh if line.strip()]


def _with(tokens, pos, new) -> list[int]:
    out = list(tokens)
    out[pos] = new
    return out


def importance_rank(victim: VictimHandle, tokens: Sequence[int],
                    base_probs: np.ndarray | None = None) -> np.ndarray:
    """Drop in true-class probability when each position is replaced by UNK.

    Costs one query per position, plus one for the original unless
    ``base_probs`` is supplied.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("tokens must be non-empty")
    if base_probs is None:
        base_probs = victim.query([tokens])[0]
    probes = [_with(tokens, i, UNK) for i in range(len(tokens))]
    if len(probes) > victim.remaining:
        raise BudgetExhausted("budget exhausted during importance ranking")
    probs = victim.query(probes)
    return base_probs[victim.label] - probs[:, victim.label]


def _order(scores: np.ndarray) -> list[int]:
    return [int(i) for i in np.argsort(-np.asarray(scores), kind="stable")]


def _record(tokens, perturbed, label, success, outcome, victim, subs, phases,
            first_pred, final_pred):
    return AttackRecord(list(tokens), list(perturbed), int(label), bool(success),
                        outcome == SKIPPED, victim.queries, list(subs), outcome,
                        dict(phases), int(first_pred), int(final_pred))


def _begin(victim: VictimHandle, tokens):
    probs = victim.query([tokens])[0]
    pred = int(probs.argmax())
    victim.original_prediction = pred
    return probs, pred


def greedy_attack(victim: VictimHandle, tokens: Sequence[int], cfg: AttackConfig) -> AttackRecord:
    """Importance-ordered greedy substitution (TextFooler-like, no similarity filter)."""
    tokens = list(tokens)
    label = victim.label
    probs, pred = _begin(victim, tokens)
    phases = {"ranking": 1, "search": 0}
    if pred != label:
        return _record(tokens, tokens, label, False, SKIPPED, victim, [], phases, pred, pred)
    try:
        scores = importance_rank(victim, tokens, probs)
    except BudgetExhausted:
        return _record(tokens, tokens, label, False, BUDGET, victim, [], phases, pred, pred)
    phases["ranking"] += len(tokens)

    current = list(tokens)
    p_true = probs[label]
    cur_pred = pred
    subs = []
    for pos in _order(scores):
        cands = cfg.candidates(tokens[pos])
        if not cands:
            continue
        trials = [_with(current, pos, c) for c in cands]
        if len(trials) > victim.remaining:
            trials = trials[:victim.remaining]
        if not trials:
            return _record(tokens, current, label, False, BUDGET, victim, subs, phases, pred, cur_pred)
        out = victim.query(trials)
        phases["search"] += len(trials)
        preds = out.argmax(axis=1)
        flipped = np.flatnonzero(preds != label)
        if len(flipped):
            j = int(flipped[np.argmin(out[flipped, label])])
            subs.append((pos, tokens[pos], cands[j]))
            current = trials[j]
            return _record(tokens, current, label, True, SUCCESS, victim, subs, phases,
                           pred, int(preds[j]))
        j = int(np.argmin(out[:, label]))
        if out[j, label] < p_true:
            p_true = out[j, label]
            cur_pred = int(preds[j])
            subs.append((pos, tokens[pos], cands[j]))
            current = trials[j]
        if victim.remaining == 0:
            return _record(tokens, current, label, False, BUDGET, victim, subs, phases, pred, cur_pred)
    return _record(tokens, current, label, False, EXHAUSTED, victim, subs, phases, pred, cur_pred)


def pwws_order(saliency: np.ndarray, best_gain: np.ndarray, eligible: np.ndarray) -> list[int]:
    """Positions sorted by ``softmax(saliency) * best_gain``, restricted to ``eligible``."""
    s = np.asarray(saliency, dtype=np.float64)
    w = np.exp(s - s.max())
    w /= w.sum()
    score = w * np.asarray(best_gain, dtype=np.float64)
    score = np.where(eligible, score, -np.inf)
    return [i for i in _order(score) if eligible[i]]


def pwws_attack(victim: VictimHandle, tokens: Sequence[int], cfg: AttackConfig) -> AttackRecord:
    """Probability-weighted word saliency attack.

    Scores every position by ``softmax(S) * dP*`` where ``S`` is the UNK
    saliency and ``dP*`` the best single-substitution drop measured on the
    original text, then substitutes in that order, checking after each.
    """
    tokens = list(tokens)
    label = victim.label
    probs, pred = _begin(victim, tokens)
    phases = {"ranking": 1, "search": 0, "verify": 0}
    if pred != label:
        return _record(tokens, tokens, label, False, SKIPPED, victim, [], phases, pred, pred)
    try:
        saliency = importance_rank(victim, tokens, probs)
    except BudgetExhausted:
        return _record(tokens, tokens, label, False, BUDGET, victim, [], phases, pred, pred)
    phases["ranking"] += len(tokens)

    T = len(tokens)
    best_gain = np.zeros(T)
    best_sub = [None] * T
    eligible = np.zeros(T, dtype=bool)
    for pos in range(T):
        cands = cfg.candidates(tokens[pos])
        if not cands:
            continue
        trials = [_with(tokens, pos, c) for c in cands]
        if len(trials) > victim.remaining:
            return _record(tokens, tokens, label, False, BUDGET, victim, [], phases, pred, pred)
        out = victim.query(trials)
        phases["search"] += len(trials)
        j = int(np.argmin(out[:, label]))
        best_gain[pos] = probs[label] - out[j, label]
        best_sub[pos] = cands[j]
        eligible[pos] = best_gain[pos] > 0

    current = list(tokens)
    cur_pred = pred
    subs = []
    for pos in pwws_order(saliency, best_gain, eligible):
        if victim.remaining == 0:
            return _record(tokens, current, label, False, BUDGET, victim, subs, phases, pred, cur_pred)
        current = _with(current, pos, best_sub[pos])
        subs.append((pos, tokens[pos], best_sub[pos]))
        out = victim.query([current])[0]
        phases["verify"] += 1
        cur_pred = int(out.argmax())
        if cur_pred != label:
            return _record(tokens, current, label, True, SUCCESS, victim, subs, phases, pred, cur_pred)
    return _record(tokens, current, label, False, EXHAUSTED, victim, subs, phases, pred, cur_pred)


ATTACKS = {GREEDY: greedy_attack, PWWS: pwws_attack}


def sample_indices(n_total: int, n: int, seed: int) -> list[int]:
    n = min(n, n_total)
    return sorted(int(i) for i in RngStream(seed, 0xA7).choice(n_total, n))


@dataclass
class CampaignResult:
    records: list[AttackRecord]
    summary: object
    forward_passes: int
    indices: list[int]


def run_campaign(victim_factory: Callable[[RngStream], Callable], dataset: Sequence[LabeledExample],
                 cfg: AttackConfig, seed: int = 0, n: int | None = None,
                 jobs: int = 1) -> CampaignResult:
    """Attack a seeded sample of ``dataset``.

    ``victim_factory(stream)`` must return a probability oracle; each example
    gets its own stream ``RngStream(seed, example_index)``. If the oracle
    exposes a ``counter`` dict with ``forward_passes`` it is totalled.
    """
    from .analysis import summarize

    if not dataset:
        raise ValueError("dataset is empty")
    n = min(500, len(dataset)) if n is None else n
    indices = sample_indices(len(dataset), n, seed)
    attack = ATTACKS[cfg.strategy]

    def one(idx):
        ex = dataset[idx]
        stream = RngStream(seed, idx)
        oracle = victim_factory(stream)
        victim = VictimHandle(oracle, ex.label, cfg.budget)
        rec = attack(victim, ex.tokens, cfg)
        rec.example_index, rec.seed, rec.stream_id = idx, seed, stream.stream_id
        fp = getattr(oracle, "counter", {}).get("forward_passes", 0)
        return rec, fp

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(one, indices))
    else:
        outs = []
        for k, idx in enumerate(indices):
            outs.append(one(idx))
            if (k + 1) % 50 == 0:
                logger.info("attacked %d/%d examples", k + 1, len(indices))
    records = [r for r, _ in outs]
    return CampaignResult(records, summarize(records), sum(fp for _, fp in outs), indices)
