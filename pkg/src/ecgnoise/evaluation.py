"""Detection metrics, balanced evaluation, PCA export and report formatting.

Detector scores are "higher = cleaner". The only place they are turned into
noisiness (higher = noisier, noisy = positive class) is ``to_noisiness``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .signal_io import Dataset


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    noisiness: float
    is_noisy: bool


def to_noisiness(scores: np.ndarray) -> np.ndarray:
    return -np.asarray(scores, dtype=np.float64)


def _unpack(samples, labels):
    if labels is None:
        samples = list(samples)
        noisiness = np.array([s.noisiness for s in samples], dtype=np.float64)
        labels = np.array([bool(s.is_noisy) for s in samples])
    else:
        noisiness = np.asarray(samples, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
    if noisiness.shape != labels.shape or noisiness.ndim != 1:
        raise ValueError("noisiness and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(noisiness)):
        raise ValueError("noisiness values must be finite")
    return noisiness, labels


def auroc(samples, labels=None) -> float:
    """Area under the ROC curve (Mann-Whitney U with mid-ranks for ties).

    Accepts a sequence of ScoredSample, or parallel arrays of noisiness and
    is-noisy labels.
    """
    noisiness, labels = _unpack(samples, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("undefined metric: need at least one positive and one negative")
    ranks = rankdata(noisiness, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(samples, labels=None) -> float:
    """Average precision with noisy samples as positives; tied scores form one threshold."""
    noisiness, labels = _unpack(samples, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("undefined metric: no positive samples")
    order = np.argsort(-noisiness, kind="stable")
    s = noisiness[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every tie group
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# -- PCA ----------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (2, d), orthonormal rows
    explained_variance: np.ndarray


def pca_fit(features: np.ndarray, n_components: int = 2) -> PcaModel:
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if n_components > d:
        raise ValueError(f"cannot take {n_components} components of {d}-dim data")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:n_components].copy()
    var = np.zeros(n_components)
    m = min(n_components, sv.size)
    var[:m] = sv[:m] ** 2 / (n - 1)
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaModel(mean, comps, var)


def pca_project(model: PcaModel, features: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - model.mean) @ model.components.T


# -- balanced evaluation ------------------------------------------------------


@dataclass
class Cell:
    method: str
    level: str
    metric: str
    values: list[float]
    seeds: list[int]
    n_pos: int = 0
    n_neg: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


@dataclass
class EvalReport:
    cells: list[Cell] = field(default_factory=list)
    header: list[str] = field(default_factory=list)

    def get(self, method: str, level: str, metric: str) -> Cell:
        for c in self.cells:
            if (c.method, c.level, c.metric) == (method, level, metric):
                return c
        raise KeyError((method, level, metric))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def levels(self) -> list[str]:
        return list(dict.fromkeys(c.level for c in self.cells))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("method,level,metric,mean,std,seeds\n")
        for c in self.cells:
            seeds = ";".join(str(s) for s in c.seeds)
            buf.write(f"{c.method},{c.level},{c.metric},{c.mean:.6f},{c.std:.6f},{seeds}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        """Methods as rows, (level, metric) pairs as columns, mean +- std."""
        levels = self.levels()
        metrics = list(dict.fromkeys(c.metric for c in self.cells))
        cols = [(lv, m) for lv in levels for m in metrics]
        lines = [f"# {h}" for h in self.header]
        width = max([len("method")] + [len(m) for m in self.methods()])
        lines.append("method".ljust(width) + "".join(f" | {lv} {m}".ljust(22) for lv, m in cols))
        lines.append("-" * len(lines[-1]))
        for method in self.methods():
            row = method.ljust(width)
            for lv, m in cols:
                try:
                    c = self.get(method, lv, m)
                    row += f" | {c.mean:.4f} +- {c.std:.4f}".ljust(22)
                except KeyError:
                    row += " | -".ljust(22)
            lines.append(row)
        return "\n".join(lines) + "\n"


def balanced_indices(n_clean: int, n_noisy: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Downsample the larger side (seeded, without replacement) to the smaller size."""
    rng = np.random.default_rng(seed)
    m = min(n_clean, n_noisy)
    clean = np.arange(n_clean) if n_clean == m else np.sort(rng.choice(n_clean, m, replace=False))
    noisy = np.arange(n_noisy) if n_noisy == m else np.sort(rng.choice(n_noisy, m, replace=False))
    return clean, noisy


def evaluate_scores(
    clean_scores: np.ndarray,
    noisy_scores: np.ndarray,
    seeds: Sequence[int],
    method: str = "detector",
    level: str = "noisy",
) -> list[Cell]:
    """AUROC and AUPRC cells over balanced resamples, one per seed."""
    clean_scores = np.asarray(clean_scores, dtype=np.float64)
    noisy_scores = np.asarray(noisy_scores, dtype=np.float64)
    if clean_scores.size == 0 or noisy_scores.size == 0:
        raise ValueError("clean and noisy sets must be nonempty")
    if not seeds:
        raise ValueError("at least one seed is required")
    roc, prc = [], []
    m = min(clean_scores.size, noisy_scores.size)
    for seed in seeds:
        ci, ni = balanced_indices(clean_scores.size, noisy_scores.size, seed)
        noisiness = to_noisiness(np.r_[clean_scores[ci], noisy_scores[ni]])
        labels = np.r_[np.zeros(ci.size, bool), np.ones(ni.size, bool)]
        roc.append(auroc(noisiness, labels))
        prc.append(auprc(noisiness, labels))
    seeds = list(seeds)
    return [
        Cell(method, level, "AUROC", roc, seeds, m, m),
        Cell(method, level, "AUPRC", prc, seeds, m, m),
    ]


def evaluate(
    scorer: Callable[[Dataset], np.ndarray],
    clean_test: Dataset,
    noisy: Dataset,
    seeds: Sequence[int],
    method: str = "detector",
    level: str = "noisy",
) -> EvalReport:
    """Score both sets with ``scorer`` (higher = cleaner) and report balanced metrics."""
    cells = evaluate_scores(scorer(clean_test), scorer(noisy), seeds, method, level)
    return EvalReport(cells)


def level_name(label: int) -> str:
    return f"Level {int(label)}"


def pca_csv(points: np.ndarray, levels: Iterable[int]) -> str:
    buf = io.StringIO()
    buf.write("pc1,pc2,level\n")
    for (a, b), lv in zip(points, levels):
        buf.write(f"{a:.6f},{b:.6f},{int(lv)}\n")
    return buf.getvalue()
