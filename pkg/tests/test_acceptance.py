"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share one default-config reproduction run (with the
transfer sweep) plus a second run used for the determinism comparison.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from ecgnoise import cae, detect, evaluation, nn
from ecgnoise.cae import CaeConfig
from ecgnoise.cli import main
from ecgnoise.pipeline import RunConfig
from ecgnoise.repro import MIN_AUROC_LEVEL2, MIN_AUROC_LEVEL3, RECON_MARGIN, TRANSFER_MARGIN, repro_synthetic

from oracles import brute_force_score, pairwise_auroc, regularized, threshold_auprc

ROOT = Path(__file__).resolve().parents[1]
KINK_MARGIN = 1e-3


# -- 1: reproduction caveat -----------------------------------------------------


def test_criterion_1_caveat_documented(record):
    text = (ROOT / "README.md").read_text().lower()
    ok = "reproduction caveat" in text and "not reproducible" in text
    record(1, ok, "README states that published absolute numbers are not reproducible here")
    assert ok


# -- 2: gradients -----------------------------------------------------------------


def random_small_cae(rng):
    while True:
        w = int(rng.integers(12, 33))
        cfg = CaeConfig(
            window_len=w,
            enc_channels=tuple(int(c) for c in rng.integers(1, 5, size=2)),
            kernel_sizes=tuple(int(k) for k in rng.integers(2, 6, size=2)),
            strides=tuple(int(s) for s in rng.integers(1, 4, size=2)),
            seed=int(rng.integers(2**31)),
        )
        if min(cae.shape_chain(cfg)) >= 1:
            return cfg


def min_relu_margin(model, x):
    _, caches = cae._forward(model, x)
    return min(float(np.abs(z).min()) for _, z in caches[:-1])


def test_criterion_2_gradients(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors, skipped = [], 0
    while len(errors) < 20:
        cfg = random_small_cae(rng)
        model = cae.build_model(cfg)
        x = rng.normal(size=(2, 1, cfg.window_len))
        # a ReLU input within the stencil width makes the central difference straddle the kink
        if min_relu_margin(model, x) < KINK_MARGIN:
            skipped += 1
            continue
        errors.append(nn.grad_check(lambda p, x: cae.loss_and_grads(model, x), model.params(), x, 1e-4))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    ok = worst < 1e-5 and elapsed < 30
    record(2, ok, f"max rel err {worst:.2e} over 20 CAEs (W<=32, {skipped} kink-adjacent draws skipped), {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 30


# -- 3: adjointness ---------------------------------------------------------------


def test_criterion_3_adjointness(record):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        b, ci, co = (int(v) for v in rng.integers(1, 4, size=3))
        k, s, p = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
        t = int(rng.integers(k, 24))
        w = rng.normal(size=(co, ci, k))
        conv = nn.ConvLayer(w, np.zeros(co), stride=s, padding=p)
        x = rng.normal(size=(b, ci, t))
        y = rng.normal(size=nn.conv1d_forward(x, conv).shape)
        op = t - nn.tconv_output_length(y.shape[2], k, s, p)
        tconv = nn.ConvLayer(w, np.zeros(ci), stride=s, padding=p, transposed=True, output_padding=op)
        lhs = float(np.sum(nn.conv1d_forward(x, conv) * y))
        rhs = float(np.sum(x * nn.tconv1d_forward(y, tconv)))
        worst = max(worst, abs(lhs - rhs))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 5
    record(3, ok, f"max |<conv x, y> - <x, tconv y>| = {worst:.1e} on 100 tensors, {elapsed:.2f}s")
    assert worst < 1e-10
    assert elapsed < 5


# -- 4: EM ----------------------------------------------------------------------


def test_criterion_4_em(record):
    rng = np.random.default_rng(4)
    worst_drop = 0.0
    worst_k1 = 0.0
    for i in range(50):
        k = int(rng.integers(1, 6))
        n, d = int(rng.integers(3 * k + 5, 80)), int(rng.integers(1, 5))
        centers = rng.normal(size=(k, d)) * 4
        x = centers[rng.integers(k, size=n)] + rng.normal(size=(n, d)) * rng.uniform(0.2, 2, size=d)
        gmm = detect.fit_gmm(x, k, seed=i)
        worst_drop = max(worst_drop, float(-np.min(np.diff(gmm.log_likelihood_trace), initial=0.0)))
        one = detect.fit_gmm(x, 1, seed=i)
        diff = x - x.mean(axis=0)
        cov = diff.T @ diff / n + 1e-6 * np.eye(d)
        worst_k1 = max(worst_k1, float(np.abs(one.means[0] - x.mean(axis=0)).max()),
                       float(np.abs(one.covariances[0] - cov).max()))
    ok = worst_drop <= 1e-8 and worst_k1 <= 1e-8
    record(4, ok, f"largest log-likelihood decrease {worst_drop:.1e} over 50 fits; k=1 closed-form gap {worst_k1:.1e}")
    assert worst_drop <= 1e-8
    assert worst_k1 <= 1e-8


# -- 5: oracle equivalence ----------------------------------------------------------


def oracle_detector_pair(rng, min_per_cluster):
    c, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
    sizes = rng.integers(min_per_cluster(d), min_per_cluster(d) + 20, size=c)
    labels = rng.permutation(np.repeat(np.arange(c), sizes))
    x = rng.normal(size=(labels.size, d)) * rng.uniform(0.5, 3, size=d) + rng.normal(size=(c, d))[labels] * 4
    det = detect.build_detector(x, labels, c, reg_eps=1e-6)
    mus, covs = [], []
    for j in range(c):
        pts = x[labels == j]
        mu = pts.mean(axis=0)
        diff = pts - mu
        covs.append(regularized(diff.T @ diff / pts.shape[0], 1e-6))
        mus.append(mu)
    return det, mus, covs, rng.normal(size=d) * 3


def test_criterion_5_oracles(record):
    rng = np.random.default_rng(5)
    score_gap = 0.0
    for _ in range(100):
        # every cluster has enough points for an invertible sample covariance
        det, mus, covs, f = oracle_detector_pair(rng, lambda d: 2 * d + 2)
        score_gap = max(score_gap, abs(detect.noise_score(det, f) - brute_force_score(f, mus, covs)))
    # tiny clusters: only the regularizer keeps the covariance invertible, scores reach ~1e7
    degenerate_rel = 0.0
    for _ in range(100):
        det, mus, covs, f = oracle_detector_pair(rng, lambda d: 1)
        ref = brute_force_score(f, mus, covs)
        degenerate_rel = max(degenerate_rel, abs(detect.noise_score(det, f) - ref) / abs(ref))

    auroc_exact, auprc_gap = True, 0.0
    for _ in range(50):
        n = int(rng.integers(2, 201))
        s = rng.integers(0, 15, size=n) / 3.0  # coarse grid forces ties
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[-1] = True, False
        auroc_exact &= evaluation.auroc(s, y) == pairwise_auroc(s, y)
        auprc_gap = max(auprc_gap, abs(evaluation.auprc(s, y) - threshold_auprc(s, y)))
    ok = score_gap <= 1e-8 and degenerate_rel <= 1e-8 and auroc_exact and auprc_gap <= 1e-12
    record(5, ok, f"score vs solve oracle {score_gap:.1e} abs (100 pairs; degenerate clusters {degenerate_rel:.1e} rel); "
                  f"AUROC exact={auroc_exact}; "
                  f"AUPRC gap {auprc_gap:.1e} (50 sets)")
    assert score_gap <= 1e-8
    assert degenerate_rel <= 1e-8
    assert auroc_exact
    assert auprc_gap <= 1e-12


# -- 6 to 9: end-to-end reproduction ------------------------------------------------


@pytest.fixture(scope="module")
def repro(tmp_path_factory):
    out = tmp_path_factory.mktemp("repro_a")
    start = time.perf_counter()
    result = repro_synthetic(RunConfig(), out, transfer=True)
    return result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_pipeline_ordering(repro, record):
    result, elapsed = repro
    ens2, ens3 = result.auroc("ensemble", 2), result.auroc("ensemble", 3)
    rec2 = result.auroc("recon", 2)
    checks = {
        "L3>=L2": ens3 >= ens2,
        "L3>=0.90": ens3 >= MIN_AUROC_LEVEL3,
        "L2>=0.70": ens2 >= MIN_AUROC_LEVEL2,
        "ens>=recon-0.02": ens2 >= rec2 - RECON_MARGIN,
        "runtime<10min": elapsed < 600,
    }
    ok = all(checks.values())
    record(6, ok, f"ensemble AUROC L2 {ens2:.4f}, L3 {ens3:.4f}; recon L2 {rec2:.4f}; "
                  f"run incl. transfer {elapsed:.0f}s; failed: {[k for k, v in checks.items() if not v]}")
    assert ok, checks


@pytest.mark.slow
def test_criterion_7_transfer_sweep(repro, record):
    result, _ = repro
    sweep = result.sweep
    fracs = np.array(sweep.fractions)
    n_cells = sum(1 for rep in sweep.reports for c in rep.cells if c.method == "ensemble")
    gaps = {}
    for level in ("Level 2", "Level 3"):
        auc = np.array(sweep.metric("ensemble", level, "AUROC"))
        gaps[level] = float(auc[fracs >= 0.4].mean() - auc[fracs == 0.2][0])
    ok = n_cells == 20 and all(g >= -TRANSFER_MARGIN for g in gaps.values())
    detail = ", ".join(f"{lv} gap {g:+.4f}" for lv, g in gaps.items())
    record(7, ok, f"{n_cells} ensemble cells (fractions x levels x metrics); {detail}")
    assert n_cells == 5 * 2 * 2
    assert all(g >= -TRANSFER_MARGIN for g in gaps.values()), gaps


@pytest.mark.slow
def test_criterion_8_pca_shift(repro, record):
    result, _ = repro
    s = result.shifts
    ok = s[3] > s[2]
    record(8, ok, f"mean distance from Level 1 centroid: L2 {s[2]:.4f}, L3 {s[3]:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(repro, tmp_path, record):
    result, _ = repro
    first = result.out_dir
    code = main(["repro-synthetic", "--out", str(tmp_path)])
    assert code == 0
    names = ["run/cae.ckpt", "run/detector.det", "report/report.csv", "report/report.txt",
             "pca/pca.csv", "data/level1.ecgw", "data/level2.ecgw", "data/level3.ecgw"]
    same = {n: (first / n).read_bytes() == (tmp_path / n).read_bytes() for n in names}
    ok = all(same.values())
    record(9, ok, f"{sum(same.values())}/{len(names)} artifacts byte-identical across two runs")
    assert ok, same
