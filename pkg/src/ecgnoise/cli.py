"""Command-line entry point: ``ecgnoise <command> [options]``.

Every command accepts ``--config FILE`` (flat key=value text) and flag
overrides; flags win over the file. Failures exit nonzero with one line on
stderr of the form ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import cae, detect, pipeline
from .pipeline import RunConfig

log = logging.getLogger("ecgnoise")

# flag dest -> config key
_OVERRIDES = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "window_len": "window_len",
    "ks": "ks",
    "reg_eps": "reg_eps",
    "stats": "stats",
    "seeds": "seeds",
    "fractions": "fractions",
    "finetune_epochs": "finetune_epochs",
}


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("configuration")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--seed", help="master seed (init, split, GMM)")
    g.add_argument("--epochs")
    g.add_argument("--batch-size")
    g.add_argument("--lr")
    g.add_argument("--weight-decay")
    g.add_argument("--window-len")
    g.add_argument("--ks", help="comma-separated cluster counts, e.g. 1,2,3")
    g.add_argument("--reg-eps")
    g.add_argument("--stats", choices=["hard", "gmm"])
    g.add_argument("--standardize", action="store_true", help="scale-normalize ensemble members")
    g.add_argument("--seeds", help="comma-separated evaluation seeds")
    g.add_argument("--fractions", help="comma-separated finetuning fractions")
    g.add_argument("--finetune-epochs")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgnoise", description="Label-free noisy ECG detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic level1/2/3 corpora")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--profile", default="default", choices=["default", "shifted"])
    _common(p)

    p = sub.add_parser("train", help="train the autoencoder on Level 1 data")
    p.add_argument("--data", required=True, help="Level 1 ECGW file")
    p.add_argument("--out", required=True, help="run directory")
    _common(p)

    p = sub.add_parser("fit", help="fit the cluster-conditioned detector ensemble")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, help="clean training windows (ECGW)")
    p.add_argument("--out", required=True, help="detector file to write")
    _common(p)

    p = sub.add_parser("score", help="score every window of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--detector")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["mahalanobis", "recon"], default="mahalanobis")
    p.add_argument("--member", type=int, help="score with the member fitted for this k instead of the ensemble")
    p.add_argument("--out", required=True, help="CSV file to write")
    _common(p)

    p = sub.add_parser("eval", help="AUROC/AUPRC report on balanced clean-vs-noisy sets")
    p.add_argument("--checkpoint")
    p.add_argument("--detector")
    p.add_argument("--clean", help="clean test windows (ECGW)")
    p.add_argument("--noisy", action="append", default=[], help="noisy ECGW file (repeatable)")
    p.add_argument("--scored", action="append", default=[], help="score CSV from `score` (repeatable)")
    p.add_argument("--out", required=True, help="output directory for report.txt and report.csv")
    _common(p)

    p = sub.add_parser("finetune", help="finetuning sweep over fractions of new clean data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="new Level 1 ECGW file")
    p.add_argument("--noisy", action="append", required=True, help="new noisy ECGW file (repeatable)")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("pca", help="2-D PCA export of latent features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True, help="ECGW file (repeatable)")
    p.add_argument("--out", required=True, help="CSV file to write")
    _common(p)

    p = sub.add_parser("repro-synthetic", help="gen -> train -> fit -> eval -> pca, then check thresholds")
    p.add_argument("--out", required=True)
    p.add_argument("--transfer", action="store_true", help="also run the finetuning sweep on a shifted corpus")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    pairs = {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            pairs[key] = str(value)
    if getattr(args, "standardize", False):
        pairs["standardize"] = "true"
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key] = value
    return cfg.with_overrides(pairs)


def _require(path: str | None, flag: str) -> Path:
    if path is None:
        raise ValueError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: {p} does not exist")
    return p


def _write_report(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.csv").write_text(report.to_csv())


def cmd_gen(args, cfg: RunConfig) -> int:
    paths = pipeline.generate(cfg, args.out, profile=args.profile)
    for p in paths:
        print(p)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    _require(args.data, "--data")
    _, history = pipeline.train_stage(cfg, args.data, args.out)
    best = f"best epoch {history.best_epoch}" if history.val_loss else "no epochs run"
    print(f"wrote {Path(args.out) / 'cae.ckpt'} ({best})")
    return 0


def cmd_fit(args, cfg: RunConfig) -> int:
    model = cae.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    train_set = pipeline.load_normalized(_require(args.train, "--train"))
    ensemble = pipeline.fit_stage(cfg, model, train_set)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    detect.save_detector(ensemble, args.out)
    print(f"wrote {args.out} (k = {','.join(map(str, ensemble.ks))})")
    return 0


def cmd_score(args, cfg: RunConfig) -> int:
    model = cae.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = pipeline.load_normalized(_require(args.data, "--data"))
    if args.method == "recon":
        scores = cae.recon_scores(model, data)
    else:
        ensemble = detect.load_detector(_require(args.detector, "--detector"))
        if ensemble.members[0].dim != model.config.latent_channels:
            raise ValueError(
                f"detector dimension {ensemble.members[0].dim} does not match "
                f"model latent size {model.config.latent_channels}"
            )
        feats = cae.encode_batch(model, data)
        if args.member is not None:
            (member,) = [m for m in ensemble.members if m.k == args.member] or [None]
            if member is None:
                raise ValueError(f"detector has no member with k={args.member}")
            scores = detect.noise_scores(member, feats)
        else:
            scores = detect.ensemble_scores(ensemble, feats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(pipeline.scores_csv(data, scores))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.scored:
        report = pipeline.eval_scored_csv(cfg, [_require(p, "--scored") for p in args.scored])
    else:
        model = cae.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
        ensemble = detect.load_detector(_require(args.detector, "--detector")) if args.detector else None
        clean = pipeline.load_normalized(_require(args.clean, "--clean"))
        if not args.noisy:
            raise ValueError("--noisy is required (or pass --scored)")
        noisy = [pipeline.load_normalized(_require(p, "--noisy")) for p in args.noisy]
        report = pipeline.eval_stage(cfg, model, ensemble, clean, noisy)
    _write_report(report, Path(args.out))
    print(report.to_text(), end="")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    model = cae.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    new_l1 = pipeline.load_dataset(_require(args.data, "--data"))
    noisy = [pipeline.load_dataset(_require(p, "--noisy")) for p in args.noisy]
    out = Path(args.out)
    sweep = pipeline.finetune_sweep(cfg, model, new_l1, noisy, out)
    (out / "sweep.txt").write_text(sweep.to_text())
    (out / "sweep.csv").write_text(sweep.to_csv())
    print(sweep.to_text())
    return 0


def cmd_pca(args, cfg: RunConfig) -> int:
    model = cae.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    datasets = [pipeline.load_normalized(_require(p, "--data")) for p in args.data]
    points, labels, shifts = pipeline.pca_stage(model, datasets)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(pipeline.evaluation.pca_csv(points, labels))
    for lv, d in sorted(shifts.items()):
        print(f"Level {lv}: mean distance from Level 1 centroid {d:.4f}")
    return 0


def cmd_repro(args, cfg: RunConfig) -> int:
    from .repro import repro_synthetic

    result = repro_synthetic(cfg, args.out, transfer=args.transfer)
    print(result.summary(), end="")
    return 0 if result.passed else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "fit": cmd_fit,
    "score": cmd_score,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "pca": cmd_pca,
    "repro-synthetic": cmd_repro,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except cae.TrainingError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # one-line diagnostics for every failure
        kind = type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
