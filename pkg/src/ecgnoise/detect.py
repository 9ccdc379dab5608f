"""Cluster-conditioned Mahalanobis scoring of latent features.

Training features are partitioned with a full-covariance Gaussian mixture;
each cluster gets an empirical mean and a regularized covariance, and a test
feature is scored by the negated smallest squared Mahalanobis distance to any
cluster. Scores are <= 0 and higher means closer to the clean training data.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .signal_io import FormatError

log = logging.getLogger(__name__)

DET_MAGIC = b"DET1"
DET_VERSION = 1
DEFAULT_KS = tuple(range(1, 11))


class EmptyClusterWarning(UserWarning):
    pass


# -- Gaussian mixture ---------------------------------------------------------


@dataclass
class GmmModel:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)
    log_likelihood_trace: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """log w_j + log N(x | mu_j, Sigma_j), shape (n, k)."""
        return _log_gaussians(x, self.means, self.covariances) + np.log(self.weights)[None, :]


def _log_gaussians(x, means, covs):
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for j in range(means.shape[0]):
        chol = linalg.cholesky(covs[j], lower=True)
        sol = linalg.solve_triangular(chol, (x - means[j]).T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, j] = -0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(sol * sol, axis=0))
    return out


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    reg_covar: float = 1e-6,
) -> GmmModel:
    """EM for a full-covariance mixture.

    Initialization: k-means++ seeds for the means, uniform weights and the
    pooled sample covariance for every component. ``reg_covar`` is added to
    every covariance diagonal. The trace records the mean per-sample
    log-likelihood after initialization and after every M-step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (n, d), got shape {x.shape}")
    n, d = x.shape
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    eye = np.eye(d)

    means = _kmeans_pp(x, k, rng)
    centered = x - x.mean(axis=0)
    pooled = centered.T @ centered / n + reg_covar * eye
    gmm = GmmModel(np.full(k, 1.0 / k), means, np.repeat(pooled[None], k, axis=0))

    log_joint = gmm.log_joint(x)
    ll = float(np.mean(_logsumexp(log_joint)))
    gmm.log_likelihood_trace.append(ll)
    for _ in range(max_iter):
        # E-step
        resp = np.exp(log_joint - _logsumexp(log_joint)[:, None])
        # M-step
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((k, d, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg_covar * eye
            covs[j] = 0.5 * (covs[j] + covs[j].T)
        gmm = GmmModel(nk / nk.sum(), means, covs, gmm.log_likelihood_trace)
        log_joint = gmm.log_joint(x)
        new_ll = float(np.mean(_logsumexp(log_joint)))
        gmm.log_likelihood_trace.append(new_ll)
        if new_ll - ll < tol:
            gmm.converged = True
            break
        ll = new_ll
    return gmm


def hard_assign(gmm: GmmModel, features: np.ndarray) -> np.ndarray:
    """Index of the component with the largest posterior responsibility."""
    # argmax of the joint equals argmax of the posterior; ties go to the lowest index
    return np.argmax(gmm.log_joint(np.asarray(features, dtype=np.float64)), axis=1)


# -- per-cluster Mahalanobis detector ----------------------------------------


@dataclass
class ClusterDetector:
    k: int
    mus: np.ndarray  # (c, d), c <= k after empty clusters are dropped
    precisions: np.ndarray  # (c, d, d)

    @property
    def dim(self) -> int:
        return self.mus.shape[1]


def regularize(cov: np.ndarray, reg_eps: float) -> np.ndarray:
    d = cov.shape[0]
    tr = float(np.trace(cov))
    scale = reg_eps * tr / d if tr > 0 else reg_eps
    return cov + scale * np.eye(d)


def spd_inverse(cov: np.ndarray) -> np.ndarray:
    c = linalg.cho_factor(cov, lower=True)
    inv = linalg.cho_solve(c, np.eye(cov.shape[0]))
    return 0.5 * (inv + inv.T)


def build_detector(
    features: np.ndarray,
    labels: np.ndarray,
    k: int,
    reg_eps: float = 1e-6,
) -> ClusterDetector:
    """Empirical mean and regularized covariance (denominator n_c) per cluster."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    mus, precs = [], []
    for c in range(k):
        pts = x[labels == c]
        if pts.shape[0] == 0:
            warnings.warn(f"cluster {c} of {k} is empty and was dropped", EmptyClusterWarning, stacklevel=2)
            continue
        mu = pts.mean(axis=0)
        diff = pts - mu
        cov = diff.T @ diff / pts.shape[0]
        mus.append(mu)
        precs.append(spd_inverse(regularize(cov, reg_eps)))
    if not mus:
        raise ValueError(f"all {k} clusters are empty")
    return ClusterDetector(k, np.array(mus), np.array(precs))


def detector_from_gmm(gmm: GmmModel, reg_eps: float = 1e-6) -> ClusterDetector:
    """Detector that uses the mixture's own component means and covariances."""
    precs = np.array([spd_inverse(regularize(c, reg_eps)) for c in gmm.covariances])
    return ClusterDetector(gmm.k, gmm.means.copy(), precs)


def mahalanobis_sq(detector: ClusterDetector, features: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance to every cluster, shape (n, c)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[1] != detector.dim:
        raise ValueError(f"feature dimension {f.shape[1]} != detector dimension {detector.dim}")
    out = np.empty((f.shape[0], detector.mus.shape[0]))
    for j, (mu, prec) in enumerate(zip(detector.mus, detector.precisions)):
        diff = f - mu
        out[:, j] = np.einsum("nd,de,ne->n", diff, prec, diff)
    return np.maximum(out, 0.0)


def noise_scores(detector: ClusterDetector, features: np.ndarray) -> np.ndarray:
    return -mahalanobis_sq(detector, features).min(axis=1)


def noise_score(detector: ClusterDetector, feature: np.ndarray) -> float:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ValueError("noise_score expects a single feature vector")
    return float(noise_scores(detector, feature[None, :])[0])


# -- ensemble -----------------------------------------------------------------


@dataclass
class EnsembleDetector:
    members: list[ClusterDetector]

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty ensemble")
        ks = [m.k for m in self.members]
        if len(set(ks)) != len(ks):
            raise ValueError(f"duplicate cluster counts in ensemble: {ks}")

    @property
    def ks(self) -> list[int]:
        return [m.k for m in self.members]

    def member_scores(self, features: np.ndarray) -> np.ndarray:
        """Scores of every member, shape (n_members, n)."""
        return np.stack([noise_scores(m, features) for m in self.members])


def ensemble_scores(ensemble: EnsembleDetector, features: np.ndarray) -> np.ndarray:
    return ensemble.member_scores(features).mean(axis=0)


def ensemble_score(ensemble: EnsembleDetector, feature: np.ndarray) -> float:
    return float(ensemble_scores(ensemble, np.asarray(feature)[None, :])[0])


def fit_ensemble(
    features: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
    seed: int = 0,
    reg_eps: float = 1e-6,
    stats: str = "hard",
    standardize: bool = False,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> EnsembleDetector:
    """One detector per cluster count in ``ks``.

    ``stats="hard"`` uses empirical statistics of the hard GMM partition,
    ``stats="gmm"`` the mixture components directly. With ``standardize``
    each member's precisions are divided by its mean squared distance on the
    training features, so members contribute on a common scale.
    """
    if stats not in ("hard", "gmm"):
        raise ValueError(f"unknown stats mode {stats!r}")
    if not ks:
        raise ValueError("empty ensemble")
    x = np.asarray(features, dtype=np.float64)
    members = []
    for k in ks:
        gmm = fit_gmm(x, k, seed=seed, max_iter=max_iter, tol=tol)
        if stats == "hard":
            det = build_detector(x, hard_assign(gmm, x), k, reg_eps)
        else:
            det = detector_from_gmm(gmm, reg_eps)
        if standardize:
            scale = float(np.mean(-noise_scores(det, x)))
            if scale > 0:
                det = ClusterDetector(det.k, det.mus, det.precisions / scale)
        log.debug("k=%d: %d clusters kept", k, det.mus.shape[0])
        members.append(det)
    return EnsembleDetector(members)


# -- DET1 file format ---------------------------------------------------------


def _put_array(parts: list[bytes], arr: np.ndarray) -> None:
    flat = np.asarray(arr, dtype="<f4").ravel()
    parts.append(struct.pack("<I", flat.size))
    parts.append(flat.tobytes())


def detector_bytes(ensemble: EnsembleDetector) -> bytes:
    parts = [DET_MAGIC, struct.pack("<HI", DET_VERSION, len(ensemble.members))]
    for m in ensemble.members:
        parts.append(struct.pack("<II", m.k, m.dim))
        _put_array(parts, m.mus)
        _put_array(parts, m.precisions)
    return b"".join(parts)


def save_detector(ensemble: EnsembleDetector, path: str | Path) -> None:
    Path(path).write_bytes(detector_bytes(ensemble))


def load_detector(path: str | Path) -> EnsembleDetector:
    raw = Path(path).read_bytes()
    name = str(path)
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(raw):
            raise FormatError(
                f"{name}: truncated detector reading {what}: "
                f"expected at least {pos + count} bytes, got {len(raw)}"
            )
        chunk = raw[pos : pos + count]
        pos += count
        return chunk

    if take(4, "magic") != DET_MAGIC:
        raise FormatError(f"{name}: bad magic, expected {DET_MAGIC!r}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != DET_VERSION:
        raise FormatError(f"{name}: unsupported detector version {version}")
    members = []
    for i in range(count):
        k, d = struct.unpack("<II", take(8, f"member {i} header"))
        (n_mu,) = struct.unpack("<I", take(4, f"member {i} means length"))
        mus = np.frombuffer(take(4 * n_mu, f"member {i} means"), dtype="<f4").astype(np.float64)
        (n_p,) = struct.unpack("<I", take(4, f"member {i} precisions length"))
        precs = np.frombuffer(take(4 * n_p, f"member {i} precisions"), dtype="<f4").astype(np.float64)
        if d == 0 or n_mu % d or n_p != (n_mu // d) * d * d:
            raise FormatError(f"{name}: member {i} array lengths {n_mu}, {n_p} inconsistent with d={d}")
        c = n_mu // d
        members.append(ClusterDetector(k, mus.reshape(c, d), precs.reshape(c, d, d)))
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} trailing bytes")
    return EnsembleDetector(members)
