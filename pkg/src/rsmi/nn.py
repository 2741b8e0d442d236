"""Tiny post-norm transformer classifier with manual backprop, noise sites, AdamW and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import RngStream, gaussian_rows, gaussian_vector
from .textdata import PAD

_GELU_C = math.sqrt(2.0 / math.pi)
MAGIC = b"RSMI1\n"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def site_names(n_blocks: int) -> list[str]:
    return ["embed"] + [f"block{i}" for i in range(1, n_blocks + 1)]


def default_noise_sites(n_blocks: int, n_noise_layers: int) -> tuple[str, ...]:
    """Embedding output plus ``n_noise_layers`` evenly spaced block outputs.

    For 12 blocks and 3 noise layers this gives blocks 1, 5 and 9.
    """
    if n_noise_layers <= 0:
        return ("embed",)
    n = min(n_noise_layers, n_blocks)
    stride = max(n_blocks // n, 1)
    return ("embed",) + tuple(f"block{1 + i * stride}" for i in range(n))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 32
    n_blocks: int = 3
    d_ff: int = 64
    max_len: int = 64
    noise_sites: tuple[str, ...] = ()
    sigma: tuple[float, ...] = ()
    use_attention: bool = True
    use_ffn: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        sites = tuple(self.noise_sites)
        sigma = self.sigma
        if isinstance(sigma, (int, float)):
            sigma = (float(sigma),) * len(sites)
        sigma = tuple(float(s) for s in sigma)
        object.__setattr__(self, "noise_sites", sites)
        object.__setattr__(self, "sigma", sigma)
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if len(sigma) != len(sites):
            raise ValueError("need one sigma per noise site")
        if any(s < 0 for s in sigma):
            raise ValueError("sigma must be non-negative at every site")
        valid = set(site_names(self.n_blocks))
        bad = [s for s in sites if s not in valid]
        if bad:
            raise ValueError(f"unknown noise sites {bad}; valid: {sorted(valid)}")
        if len(set(sites)) != len(sites):
            raise ValueError("duplicate noise sites")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def site_sigma(self) -> dict[str, float]:
        return dict(zip(self.noise_sites, self.sigma))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_sites"] = list(self.noise_sites)
        d["sigma"] = list(self.sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["noise_sites"] = tuple(d.get("noise_sites", ()))
        d["sigma"] = tuple(d.get("sigma", ()))
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed": (cfg.vocab_size, d), "pos": (cfg.max_len, d)}
    for i in range(cfg.n_blocks):
        p = f"b{i}."
        shapes.update({
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
        })
    shapes["head_w"] = (d, cfg.n_classes)
    shapes["head_b"] = (cfg.n_classes,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = RngStream(seed, 0x1417)
    params = {}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(n)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(n)
        elif name in ("embed", "pos"):
            arr = gaussian_vector(rng, n, 1.0 if name == "embed" else 0.1)
        else:
            arr = gaussian_vector(rng, n, 1.0 / math.sqrt(shape[0]))
        params[name] = arr.reshape(shape).astype(cfg.dtype)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s, dtype=cfg.dtype) for k, s in param_shapes(cfg).items()}


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return seqs.astype(np.int64, copy=False)
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class BlockCache:
    h_in: np.ndarray
    q: np.ndarray = None
    k: np.ndarray = None
    v: np.ndarray = None
    attn: np.ndarray = None
    ctx: np.ndarray = None
    xhat1: np.ndarray = None
    inv1: np.ndarray = None
    u: np.ndarray = None
    a1: np.ndarray = None
    g1: np.ndarray = None
    xhat2: np.ndarray = None
    inv2: np.ndarray = None


@dataclass
class ForwardTrace:
    tokens: np.ndarray                 # [B, T]
    valid: np.ndarray                  # [B, T] bool
    pre_noise: dict[str, np.ndarray]   # site -> [B, T, d]
    post_noise: dict[str, np.ndarray]
    noise: dict[str, np.ndarray]
    pooled: np.ndarray                 # [B, d]
    pooled_layers: dict[str, np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    blocks: list[BlockCache] = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


@dataclass
class EmbeddingGrad:
    vectors: np.ndarray   # [B, T, d]
    norms: np.ndarray     # [B, T]

    @classmethod
    def from_vectors(cls, vectors: np.ndarray) -> "EmbeddingGrad":
        return cls(vectors, np.sqrt(np.sum(vectors.astype(np.float64) ** 2, axis=-1)))


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_back(dy, xhat, inv, g):
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def _gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    return 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x2)


def _outer(a, b):
    """Sum over batch and time of ``a^T b`` for [B, T, *] arrays."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _resolve_rngs(rngs, batch: int):
    if rngs is None:
        return None
    if isinstance(rngs, RngStream):
        return [rngs] * batch
    rngs = list(rngs)
    if len(rngs) != batch:
        raise ValueError(f"got {len(rngs)} rng streams for a batch of {batch}")
    return rngs


def _add_noise(h, site, cfg, rngs, lengths, trace_noise):
    sigma = cfg.site_sigma.get(site)
    if sigma is None or rngs is None:
        return h
    B, T, d = h.shape
    draws = gaussian_rows(rngs, lengths * d, sigma)
    delta = np.zeros((B, T, d), dtype=h.dtype)
    off = 0
    for b in range(B):
        n = int(lengths[b])
        delta[b, :n] = draws[off:off + n * d].reshape(n, d)
        off += n * d
    trace_noise[site] = delta
    return h + delta


def check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> None:
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("tokens must be a non-empty [batch, length] array")
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len={cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if not (tokens != PAD).any(axis=1).all():
        raise ValueError("every sequence needs at least one non-PAD token")


def forward(params, cfg: ModelConfig, tokens, rngs=None, embed_delta=None) -> ForwardTrace:
    """One pass over a padded batch.

    ``rngs`` is ``None`` for the noise-free network, a single stream shared
    by all rows, or one stream per row. Noise is drawn per row only for the
    non-PAD prefix, so a row's draws do not depend on the batch it sits in.
    ``embed_delta`` ([B, T, d]) is added to the token+position embeddings
    before the embedding noise site.
    """
    tokens = pad_batch(tokens)
    check_tokens(tokens, cfg)
    B, T = tokens.shape
    dt = np.dtype(cfg.dtype)
    valid = tokens != PAD
    lengths = valid.sum(axis=1)
    rngs = _resolve_rngs(rngs, B)
    keymask = valid[:, None, :]

    x = params["embed"][tokens] + params["pos"][:T][None]
    if embed_delta is not None:
        x = x + embed_delta.astype(dt)
    pre, post, noise, pooled_layers = {}, {}, {}, {}
    lens = lengths[:, None].astype(dt)
    vf = valid[..., None].astype(dt)

    pre["embed"] = x
    h = _add_noise(x, "embed", cfg, rngs, lengths, noise)
    post["embed"] = h
    pooled_layers["embed"] = (h * vf).sum(axis=1) / lens

    blocks = []
    scale = dt.type(1.0 / math.sqrt(cfg.d_model))
    for i in range(cfg.n_blocks):
        p = f"b{i}."
        c = BlockCache(h_in=h)
        r = h
        if cfg.use_attention:
            c.q = h @ params[p + "wq"]
            c.k = h @ params[p + "wk"]
            c.v = h @ params[p + "wv"]
            s = (c.q @ c.k.transpose(0, 2, 1)) * scale
            s = np.where(keymask, s, -np.inf)
            c.attn = softmax(s, axis=-1)
            c.ctx = c.attn @ c.v
            r = r + c.ctx @ params[p + "wo"]
        c.u, c.xhat1, c.inv1 = _layer_norm(r, params[p + "ln1_g"], params[p + "ln1_b"], cfg.ln_eps)
        r = c.u
        if cfg.use_ffn:
            c.a1 = c.u @ params[p + "w1"] + params[p + "b1"]
            c.g1 = _gelu(c.a1)
            r = r + c.g1 @ params[p + "w2"] + params[p + "b2"]
        out, c.xhat2, c.inv2 = _layer_norm(r, params[p + "ln2_g"], params[p + "ln2_b"], cfg.ln_eps)
        site = f"block{i + 1}"
        pre[site] = out
        h = _add_noise(out, site, cfg, rngs, lengths, noise)
        post[site] = h
        pooled_layers[site] = (h * vf).sum(axis=1) / lens
        blocks.append(c)

    pooled = pooled_layers[f"block{cfg.n_blocks}"] if cfg.n_blocks else pooled_layers["embed"]
    logits = pooled @ params["head_w"] + params["head_b"]
    probs = softmax(logits.astype(np.float64), axis=-1)
    return ForwardTrace(tokens, valid, pre, post, noise, pooled, pooled_layers,
                        logits, probs, blocks)


def cross_entropy(probs: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))


def ce_logit_grad(probs: np.ndarray, labels, reduction: str = "mean") -> np.ndarray:
    labels = np.asarray(labels)
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    if reduction == "mean":
        d /= len(labels)
    elif reduction != "sum":
        raise ValueError("reduction must be 'mean' or 'sum'")
    return d


def backward(params, cfg: ModelConfig, trace: ForwardTrace, dlogits: np.ndarray):
    """Reverse pass from a logit gradient.

    Returns ``(d_embed_input, grads)`` where ``d_embed_input`` is the gradient
    with respect to the summed token+position embedding of each position.
    Noise draws are constants.
    """
    if trace.pooled.shape[1] != cfg.d_model or len(trace.blocks) != cfg.n_blocks:
        raise ValueError("trace does not match this model configuration")
    if dlogits.shape != trace.logits.shape:
        raise ValueError("dlogits shape does not match the trace")
    dt = np.dtype(cfg.dtype)
    dlogits = dlogits.astype(dt)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tokens, valid = trace.tokens, trace.valid
    B, T = tokens.shape
    vf = valid[..., None].astype(dt)
    lens = trace.lengths[:, None, None].astype(dt)
    scale = dt.type(1.0 / math.sqrt(cfg.d_model))

    grads["head_w"] = trace.pooled.T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head_w"].T
    dh = vf * dpooled[:, None, :] / lens

    for i in reversed(range(cfg.n_blocks)):
        p = f"b{i}."
        c = trace.blocks[i]
        dr, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layer_norm_back(
            dh, c.xhat2, c.inv2, params[p + "ln2_g"])
        du = dr
        if cfg.use_ffn:
            grads[p + "b2"] = dr.sum(axis=(0, 1))
            grads[p + "w2"] = _outer(c.g1, dr)
            dg1 = dr @ params[p + "w2"].T
            da1 = dg1 * _gelu_grad(c.a1)
            grads[p + "b1"] = da1.sum(axis=(0, 1))
            grads[p + "w1"] = _outer(c.u, da1)
            du = du + da1 @ params[p + "w1"].T
        dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layer_norm_back(
            du, c.xhat1, c.inv1, params[p + "ln1_g"])
        dh = dr1
        if cfg.use_attention:
            grads[p + "wo"] = _outer(c.ctx, dr1)
            dctx = dr1 @ params[p + "wo"].T
            dattn = dctx @ c.v.transpose(0, 2, 1)
            dv = c.attn.transpose(0, 2, 1) @ dctx
            ds = c.attn * (dattn - (dattn * c.attn).sum(axis=-1, keepdims=True))
            dq = (ds @ c.k) * scale
            dk = (ds.transpose(0, 2, 1) @ c.q) * scale
            grads[p + "wq"] = _outer(c.h_in, dq)
            grads[p + "wk"] = _outer(c.h_in, dk)
            grads[p + "wv"] = _outer(c.h_in, dv)
            dh = dh + dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T

    dx = dh
    np.add.at(grads["embed"], tokens[valid], dx[valid])
    grads["pos"][:T] += (dx * vf).sum(axis=0)
    return dx, grads


def backward_to_embeddings(params, cfg: ModelConfig, trace: ForwardTrace, labels,
                           reduction: str = "mean"):
    """Cross-entropy gradients with respect to word embeddings and all parameters."""
    labels = np.atleast_1d(np.asarray(labels))
    if len(labels) != trace.logits.shape[0]:
        raise ValueError("need one label per row of the trace")
    dx, grads = backward(params, cfg, trace, ce_logit_grad(trace.probs, labels, reduction))
    return EmbeddingGrad.from_vectors(dx), grads


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0):
    """Decoupled weight decay Adam with bias correction; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    b1, b2 = betas
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = w
            continue
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        upd = w - lr * weight_decay * w - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = np.asarray(upd, dtype=w.dtype)
        m_new[name], v_new[name] = m, v
    return new_params, AdamWState(t, m_new, v_new)


# --- checkpoints ---------------------------------------------------------------

def checkpoint_save(path, params, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Magic, u32 LE metadata length, JSON metadata, then float32 LE arrays."""
    shapes = param_shapes(cfg)
    names = list(shapes)
    meta = {"config": cfg.to_dict(),
            "arrays": [{"name": n, "shape": list(shapes[n])} for n in names]}
    if extra:
        meta["extra"] = extra
    for n in names:
        if params[n].shape != shapes[n]:
            raise ShapeMismatchError(f"{n}: {params[n].shape} != {shapes[n]}")
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def checkpoint_load(path, cfg: ModelConfig | None = None):
    """Load ``(params, config)``; ``cfg`` overrides the stored config and is shape-checked."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise BadMagicError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + mlen:
        raise TruncatedCheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    off += mlen
    stored_cfg = ModelConfig.from_dict(meta["config"])
    cfg = cfg or stored_cfg
    expected = param_shapes(cfg)
    arrays = meta["arrays"]
    if [a["name"] for a in arrays] != list(expected):
        raise ShapeMismatchError(f"{path}: array names do not match the configuration")
    params = {}
    for a in arrays:
        shape = tuple(a["shape"])
        if shape != expected[a["name"]]:
            raise ShapeMismatchError(
                f"{path}: {a['name']} has shape {shape}, config expects {expected[a['name']]}")
        nbytes = 4 * int(np.prod(shape))
        if len(data) < off + nbytes:
            raise TruncatedCheckpointError(f"{path}: truncated payload at {a['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        params[a["name"]] = arr.astype(cfg.dtype)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return params, cfg
