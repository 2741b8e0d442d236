"""Metric aggregation, latent comparisons, stability runs and ablation drivers."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .nn import ModelConfig, forward
from .numerics import RngStream

logger = logging.getLogger(__name__)


@dataclass
class MetricsSummary:
    sacc: float
    racc: float
    asr: float
    avgq_all: float
    avgq_success: float
    n_total: int
    n_correct: int
    n_attacked: int
    n_fooled: int
    n_skipped: int

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self, tol: float = 1e-12) -> None:
        """Raise ``AssertionError`` if the identities between the fields are broken."""
        racc = (self.n_correct - self.n_fooled) / self.n_total if self.n_total else 0.0
        asr = self.n_fooled / self.n_attacked if self.n_attacked else 0.0
        if abs(racc - self.racc) > tol or abs(asr - self.asr) > tol:
            raise AssertionError(f"metric identities violated: {self}")
        if self.racc > self.sacc + tol:
            raise AssertionError("RAcc exceeds SAcc")


def summarize(records) -> MetricsSummary:
    """Aggregate attack records.

    Every record counts toward ``n_total``; skipped records are the initially
    misclassified ones. ``avgq_all`` averages over attacked records,
    ``avgq_success`` over successful ones.
    """
    records = list(records)
    n_total = len(records)
    attacked = [r for r in records if not r.skipped]
    fooled = [r for r in attacked if r.success]
    n_correct = len(attacked)
    n_fooled = len(fooled)
    return MetricsSummary(
        sacc=n_correct / n_total if n_total else 0.0,
        racc=(n_correct - n_fooled) / n_total if n_total else 0.0,
        asr=n_fooled / n_correct if n_correct else 0.0,
        avgq_all=float(np.mean([r.queries for r in attacked])) if attacked else 0.0,
        avgq_success=float(np.mean([r.queries for r in fooled])) if fooled else 0.0,
        n_total=n_total, n_correct=n_correct, n_attacked=n_correct,
        n_fooled=n_fooled, n_skipped=n_total - n_correct,
    )


def reconcile_queries(record) -> bool:
    return record.queries == sum(record.phase_queries.values())


@dataclass
class LayerDivergence:
    layers: list[str]
    l2: list[float]
    cosine: list[float]

    def rows(self):
        return [{"layer": n, "l2": a, "cosine": c} for n, a, c in zip(self.layers, self.l2, self.cosine)]


def compare_vectors(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    l2 = float(np.linalg.norm(a - b))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        cos = 1.0 if na == nb else 0.0
    else:
        cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return l2, cos


def latent_divergence(params, cfg: ModelConfig, clean: Sequence[int], adversarial: Sequence[int],
                      seed: int | None = 0) -> LayerDivergence:
    """Per-layer L2 distance and cosine similarity of mean-pooled representations.

    Both passes use the same noise stream (``seed=None`` turns noise off),
    so the divergence reflects the input change only.
    """
    clean, adversarial = list(clean), list(adversarial)
    if len(clean) != len(adversarial):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(adversarial)}")
    rngs = None if seed is None else [RngStream(seed, 0), RngStream(seed, 0)]
    tr = forward(params, cfg, [clean, adversarial], rngs)
    names = list(tr.pooled_layers)
    l2s, coss = [], []
    for n in names:
        l2, cos = compare_vectors(tr.pooled_layers[n][0], tr.pooled_layers[n][1])
        l2s.append(l2)
        coss.append(cos)
    return LayerDivergence(names, l2s, coss)


@dataclass
class StabilityReport:
    accuracies: list[float]
    mean: float
    std: float
    min: float
    max: float
    median: float

    def to_dict(self) -> dict:
        return asdict(self)


def stability_eval(predict: Callable[[list, RngStream], np.ndarray], X, y, runs: int,
                   seed: int = 0) -> StabilityReport:
    """Accuracy over ``runs`` repetitions of stochastic inference.

    ``predict(X, stream)`` returns labels; run ``r`` gets ``RngStream(seed, r)``.
    """
    if runs < 2:
        raise ValueError("runs must be >= 2")
    y = np.asarray(y)
    accs = []
    for r in range(runs):
        pred = np.asarray(predict(X, RngStream(seed, r)))
        accs.append(float((pred == y).mean()))
    a = np.array(accs)
    return StabilityReport(accs, float(a.mean()), float(a.std()), float(a.min()),
                           float(a.max()), float(np.median(a)))


RM_K_DEFAULT = (1, 5, 10, 50)


@dataclass
class AblationTable:
    m_values: list[int]
    k_values: list[int]
    rm: dict[int, dict[int, float]]
    gm: dict[int, float]

    def rows(self) -> list[dict]:
        out = []
        for m in self.m_values:
            row = {"M": m}
            for k in self.k_values:
                row[f"RM_k{k}"] = self.rm[m][k]
            row["GM"] = self.gm[m]
            out.append(row)
        return out


def ablate_rm_vs_gm(make_victim: Callable[[str, int, int], Callable], run_attack: Callable,
                    m_values: Iterable[int], k_values: Iterable[int] = RM_K_DEFAULT) -> AblationTable:
    """ASR table for random vs gradient-guided masking.

    ``make_victim(kind, M, k)`` returns a victim factory for ``kind`` in
    ``{"rm", "gm"}``; ``run_attack(factory)`` returns a campaign summary.
    GM is evaluated once per ``M`` and shared across the ``k`` columns.
    """
    m_values, k_values = list(m_values), list(k_values)
    rm, gm = {}, {}
    for m in m_values:
        gm[m] = run_attack(make_victim("gm", m, 1)).asr
        rm[m] = {}
        for k in k_values:
            rm[m][k] = run_attack(make_victim("rm", m, k)).asr
            logger.info("ablation M=%d k=%d: RM ASR %.4f (GM %.4f)", m, k, rm[m][k], gm[m])
    return AblationTable(m_values, k_values, rm, gm)


SWEEP_COLUMNS = ("sigma", "M", "N_l", "ASR", "SAcc")


def sweep_hyperparams(grid: Iterable[tuple[float, int, int]],
                      evaluate: Callable[[float, int, int], MetricsSummary]) -> list[dict]:
    """One train+attack evaluation per ``(sigma, M, n_noise_layers)`` grid point."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    rows = []
    for sigma, m, nl in grid:
        s = evaluate(sigma, m, nl)
        rows.append({"sigma": sigma, "M": m, "N_l": nl, "ASR": s.asr, "SAcc": s.sacc})
        logger.info("sweep sigma=%s M=%s N_l=%s: ASR %.4f SAcc %.4f", sigma, m, nl, s.asr, s.sacc)
    return rows


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in columns})
    return buf.getvalue()


def write_csv(path, rows, columns=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv(rows, columns))


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
