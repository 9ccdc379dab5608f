"""End-to-end stages shared by the CLI: train, fit, score, evaluate, finetune, PCA."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cae, detect, evaluation, synth
from .signal_io import Dataset, Level, SplitSpec, load_dataset, normalize_dataset, save_dataset, split_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    # corpus
    window_len: int = 512
    sample_rate: float = 256.0
    n_level1: int = 2000
    n_level2: int = 400
    n_level3: int = 400
    # autoencoder
    enc_channels: tuple[int, ...] = (32, 64)
    kernel_sizes: tuple[int, ...] = (7, 7)
    strides: tuple[int, ...] = (4, 4)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    # split
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    # detector
    ks: tuple[int, ...] = tuple(range(1, 11))
    reg_eps: float = 1e-6
    stats: str = "hard"
    standardize: bool = False
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-6
    # evaluation
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    # transfer
    fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    finetune_epochs: int = 20
    transfer_seed: int = 2
    transfer_profile: str = "shifted"
    n_transfer_level1: int = 1000
    n_transfer_level2: int = 200
    n_transfer_level3: int = 200

    def cae_config(self, epochs: int | None = None) -> cae.CaeConfig:
        return cae.CaeConfig(
            window_len=self.window_len,
            enc_channels=self.enc_channels,
            kernel_sizes=self.kernel_sizes,
            strides=self.strides,
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac, self.seed)

    def to_lines(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name}={v}")
        return out

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: str(f.type) for f in dataclasses.fields(self)}
        kwargs = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(types[key], raw.strip())
        return dataclasses.replace(self, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls().with_overrides(parse_kv_text(Path(path).read_text()))


def parse_kv_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _parse_value(type_name: str, raw: str):
    if type_name.startswith("tuple"):
        inner = float if "float" in type_name else int
        return tuple(inner(v) for v in raw.split(",") if v.strip())
    if type_name == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "float":
        return float(raw)
    if type_name == "int":
        return int(raw)
    return raw


# -- stages -----------------------------------------------------------------


def load_normalized(path: str | Path) -> Dataset:
    return normalize_dataset(load_dataset(path))


def generate(cfg: RunConfig, out_dir: str | Path, profile: str = "default", seed: int | None = None,
             sizes: tuple[int, int, int] | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = sizes or (cfg.n_level1, cfg.n_level2, cfg.n_level3)
    corpora = synth.make_benchmark(cfg.seed if seed is None else seed, sizes, cfg.window_len, cfg.sample_rate, profile)
    paths = []
    for i, ds in enumerate(corpora, start=1):
        path = out_dir / f"level{i}.ecgw"
        save_dataset(ds, path)
        paths.append(path)
    return paths


def train_stage(cfg: RunConfig, level1_path: str | Path, out_dir: str | Path) -> tuple[cae.CaeModel, cae.TrainHistory]:
    """Split Level 1, train the autoencoder, write checkpoint, history and split files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = load_dataset(level1_path)
    parts = split_dataset(raw, cfg.split_spec())
    for name, part in zip(("train", "val", "test"), parts):
        if part is not None:
            save_dataset(part, out_dir / f"split_{name}.ecgw")
    train_set, val_set, _ = parts
    if train_set is None:
        raise ValueError("training split is empty")
    model = cae.build_model(cfg.cae_config())
    model, history = cae.train(
        model,
        normalize_dataset(train_set),
        normalize_dataset(val_set) if val_set is not None else None,
    )
    cae.save_checkpoint(model, out_dir / "cae.ckpt")
    (out_dir / "history.csv").write_text(history.to_csv())
    return model, history


def fit_stage(cfg: RunConfig, model: cae.CaeModel, train_set: Dataset) -> detect.EnsembleDetector:
    feats = cae.encode_batch(model, train_set)
    return detect.fit_ensemble(
        feats,
        cfg.ks,
        seed=cfg.seed,
        reg_eps=cfg.reg_eps,
        stats=cfg.stats,
        standardize=cfg.standardize,
        max_iter=cfg.gmm_max_iter,
        tol=cfg.gmm_tol,
    )


def method_scores(model: cae.CaeModel, ensemble: detect.EnsembleDetector | None, data: Dataset) -> dict[str, np.ndarray]:
    """Scores (higher = cleaner) of every method: recon baseline, each member, ensemble."""
    out = {"recon": cae.recon_scores(model, data)}
    if ensemble is not None:
        feats = cae.encode_batch(model, data)
        member = ensemble.member_scores(feats)
        for det, s in zip(ensemble.members, member):
            out[f"mahalanobis_k{det.k}"] = s
        out["ensemble"] = member.mean(axis=0)
    return out


def dominant_level(data: Dataset) -> int:
    labels = data.labels()
    return int(np.bincount(labels, minlength=4).argmax())


def eval_stage(
    cfg: RunConfig,
    model: cae.CaeModel,
    ensemble: detect.EnsembleDetector | None,
    clean: Dataset,
    noisy_sets: Sequence[Dataset],
) -> evaluation.EvalReport:
    clean_scores = method_scores(model, ensemble, clean)
    report = evaluation.EvalReport(header=cfg.to_lines())
    per_level = [(evaluation.level_name(dominant_level(d)), method_scores(model, ensemble, d)) for d in noisy_sets]
    for method in clean_scores:
        for level, scores in per_level:
            report.cells.extend(
                evaluation.evaluate_scores(clean_scores[method], scores[method], cfg.seeds, method, level)
            )
    return report


def eval_scored_csv(cfg: RunConfig, paths: Sequence[str | Path], method: str = "scored") -> evaluation.EvalReport:
    """Evaluate score CSVs (index,label,score,noisiness) pooled across files.

    Label 1 rows form the clean side; every other nonzero label is a noisy level.
    """
    labels, scores = [], []
    for path in paths:
        rows = np.atleast_1d(np.genfromtxt(Path(path), delimiter=",", names=True, dtype=None, encoding="utf-8"))
        labels.append(rows["label"].astype(int))
        scores.append(rows["score"].astype(float))
    labels, scores = np.concatenate(labels), np.concatenate(scores)
    clean = scores[labels == Level.LEVEL1]
    report = evaluation.EvalReport(header=cfg.to_lines())
    for lv in sorted(set(labels.tolist()) - {0, 1}):
        report.cells.extend(
            evaluation.evaluate_scores(clean, scores[labels == lv], cfg.seeds, method, evaluation.level_name(lv))
        )
    return report


def scores_csv(data: Dataset, scores: np.ndarray) -> str:
    lines = ["index,label,score,noisiness"]
    noisiness = evaluation.to_noisiness(scores)
    for i, (w, s, z) in enumerate(zip(data.windows, scores, noisiness)):
        lines.append(f"{i},{int(w.label)},{float(s)!r},{float(z)!r}")
    return "\n".join(lines) + "\n"


# -- transfer sweep ------------------------------------------------------------


@dataclass
class SweepResult:
    fractions: list[float]
    reports: list[evaluation.EvalReport]
    header: list[str]

    def to_csv(self) -> str:
        lines = ["fraction,method,level,metric,mean,std,seeds"]
        for frac, rep in zip(self.fractions, self.reports):
            for c in rep.cells:
                seeds = ";".join(str(s) for s in c.seeds)
                lines.append(f"{frac:g},{c.method},{c.level},{c.metric},{c.mean:.6f},{c.std:.6f},{seeds}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Dataset amount (percent) across, methods down, one block per metric and level."""
        lines = [f"# {h}" for h in self.header]
        first = self.reports[0]
        methods = first.methods()
        width = max(len(m) for m in methods + ["method"])
        for metric in ("AUROC", "AUPRC"):
            for level in first.levels():
                lines.append(f"{metric} {level}, by dataset amount")
                lines.append("method".ljust(width) + "".join(f" | {round(f * 100):>6d}%" for f in self.fractions))
                for method in methods:
                    row = method.ljust(width)
                    for rep in self.reports:
                        row += f" | {rep.get(method, level, metric).mean:7.4f}"
                    lines.append(row)
                lines.append("")
        return "\n".join(lines)

    def metric(self, method: str, level: str, metric: str) -> list[float]:
        return [rep.get(method, level, metric).mean for rep in self.reports]


def finetune_sweep(
    cfg: RunConfig,
    model: cae.CaeModel,
    new_level1: Dataset,
    noisy_sets: Sequence[Dataset],
    out_dir: str | Path | None = None,
) -> SweepResult:
    """Finetune on each fraction of the new clean training split, refit, evaluate."""
    train_set, val_set, test_set = split_dataset(new_level1, cfg.split_spec())
    if train_set is None or test_set is None:
        raise ValueError("new Level 1 set too small for a train/test split")
    train_set, test_set = normalize_dataset(train_set), normalize_dataset(test_set)
    val_set = normalize_dataset(val_set) if val_set is not None else None
    noisy_sets = [normalize_dataset(d) for d in noisy_sets]
    ft_cfg = dataclasses.replace(model.config, epochs=cfg.finetune_epochs, lr=cfg.lr,
                                 weight_decay=cfg.weight_decay, batch_size=cfg.batch_size, seed=cfg.seed)
    reports = []
    for frac in cfg.fractions:
        tuned, history = cae.finetune(model, train_set, frac, ft_cfg, val_set=val_set)
        subset = cae.finetune_subset(train_set, frac, ft_cfg.seed)
        ensemble = fit_stage(cfg, tuned, subset)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            tag = f"{round(frac * 100):03d}"
            cae.save_checkpoint(tuned, out / f"finetune_{tag}.ckpt")
            detect.save_detector(ensemble, out / f"detector_{tag}.det")
            (out / f"history_{tag}.csv").write_text(history.to_csv())
        reports.append(eval_stage(cfg, tuned, ensemble, test_set, noisy_sets))
        log.info("fraction %.2f done (%d windows)", frac, len(subset))
    return SweepResult(list(cfg.fractions), reports, cfg.to_lines())


# -- PCA ------------------------------------------------------------------------


def pca_stage(model: cae.CaeModel, datasets: Sequence[Dataset]):
    """Fit PCA on Level 1 windows, project every window.

    Returns (points, levels, mean distance from the Level 1 centroid per level).
    """
    feats = [cae.encode_batch(model, d) for d in datasets]
    labels = [d.labels() for d in datasets]
    all_feats = np.concatenate(feats)
    all_labels = np.concatenate(labels)
    clean = all_feats[all_labels == Level.LEVEL1]
    if clean.shape[0] < 2:
        raise ValueError("PCA needs at least two Level 1 windows")
    pca = evaluation.pca_fit(clean)
    points = evaluation.pca_project(pca, all_feats)
    centroid = points[all_labels == Level.LEVEL1].mean(axis=0)
    dist = np.linalg.norm(points - centroid, axis=1)
    shifts = {int(lv): float(dist[all_labels == lv].mean()) for lv in np.unique(all_labels)}
    return points, all_labels, shifts
