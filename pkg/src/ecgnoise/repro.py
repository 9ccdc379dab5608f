"""One-command synthetic reproduction: gen -> train -> fit -> eval -> pca (-> transfer)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cae, detect, evaluation, pipeline
from .pipeline import RunConfig

# frozen after the first end-to-end run on the default synthetic corpus
MIN_AUROC_LEVEL3 = 0.90
MIN_AUROC_LEVEL2 = 0.70
RECON_MARGIN = 0.02
TRANSFER_MARGIN = 0.02


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value:.4f} ({self.target})"


@dataclass
class ReproResult:
    out_dir: Path
    report: evaluation.EvalReport
    shifts: dict[int, float]
    sweep: pipeline.SweepResult | None = None
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def auroc(self, method: str, level: int) -> float:
        return self.report.get(method, f"Level {level}", "AUROC").mean

    def summary(self) -> str:
        return "".join(c.line() + "\n" for c in self.checks)


def repro_synthetic(cfg: RunConfig, out_dir: str | Path, transfer: bool = False) -> ReproResult:
    out = Path(out_dir)
    data_dir, run_dir, report_dir = out / "data", out / "run", out / "report"
    l1_path, l2_path, l3_path = pipeline.generate(cfg, data_dir)

    pipeline.train_stage(cfg, l1_path, run_dir)
    model = cae.load_checkpoint(run_dir / "cae.ckpt")
    train_set = pipeline.load_normalized(run_dir / "split_train.ecgw")
    detect.save_detector(pipeline.fit_stage(cfg, model, train_set), run_dir / "detector.det")
    ensemble = detect.load_detector(run_dir / "detector.det")

    clean = pipeline.load_normalized(run_dir / "split_test.ecgw")
    level2, level3 = pipeline.load_normalized(l2_path), pipeline.load_normalized(l3_path)
    report = pipeline.eval_stage(cfg, model, ensemble, clean, [level2, level3])
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "report.txt").write_text(report.to_text())
    (report_dir / "report.csv").write_text(report.to_csv())

    points, labels, shifts = pipeline.pca_stage(model, [pipeline.load_normalized(l1_path), level2, level3])
    (out / "pca").mkdir(parents=True, exist_ok=True)
    (out / "pca" / "pca.csv").write_text(evaluation.pca_csv(points, labels))

    result = ReproResult(out, report, shifts)
    ens2, ens3 = result.auroc("ensemble", 2), result.auroc("ensemble", 3)
    rec2 = result.auroc("recon", 2)
    result.checks += [
        Check("ensemble AUROC Level 3 >= Level 2", ens3 - ens2, ">= 0", ens3 >= ens2),
        Check("ensemble AUROC Level 3", ens3, f">= {MIN_AUROC_LEVEL3}", ens3 >= MIN_AUROC_LEVEL3),
        Check("ensemble AUROC Level 2", ens2, f">= {MIN_AUROC_LEVEL2}", ens2 >= MIN_AUROC_LEVEL2),
        Check("ensemble - recon AUROC Level 2", ens2 - rec2, f">= -{RECON_MARGIN}", ens2 >= rec2 - RECON_MARGIN),
        Check("PCA shift Level 3 - Level 2", shifts[3] - shifts[2], "> 0", shifts[3] > shifts[2]),
    ]

    if transfer:
        t_dir = out / "transfer"
        sizes = (cfg.n_transfer_level1, cfg.n_transfer_level2, cfg.n_transfer_level3)
        b1, b2, b3 = pipeline.generate(cfg, t_dir / "data", profile=cfg.transfer_profile,
                                       seed=cfg.transfer_seed, sizes=sizes)
        sweep = pipeline.finetune_sweep(
            cfg, model, pipeline.load_dataset(b1), [pipeline.load_dataset(b2), pipeline.load_dataset(b3)], t_dir
        )
        (t_dir / "sweep.txt").write_text(sweep.to_text())
        (t_dir / "sweep.csv").write_text(sweep.to_csv())
        result.sweep = sweep
        result.checks += transfer_checks(sweep)

    (out / "acceptance.txt").write_text(result.summary())
    return result


def transfer_checks(sweep: pipeline.SweepResult) -> list[Check]:
    checks = []
    fracs = np.array(sweep.fractions)
    n_cells = sum(
        1
        for rep in sweep.reports
        for c in rep.cells
        if c.method == "ensemble"
    )
    expected = len(sweep.fractions) * 2 * 2
    checks.append(Check("transfer sweep ensemble cells", n_cells, f"== {expected}", n_cells == expected))
    if 0.2 in sweep.fractions:
        for level in sweep.reports[0].levels():
            auc = np.array(sweep.metric("ensemble", level, "AUROC"))
            base = auc[fracs == 0.2][0]
            later = auc[fracs >= 0.4]
            gap = float(later.mean() - base) if later.size else 0.0
            checks.append(Check(f"transfer {level}: mean AUROC(>=40%) - AUROC(20%)", gap,
                                f">= -{TRANSFER_MARGIN}", gap >= -TRANSFER_MARGIN))
    return checks
