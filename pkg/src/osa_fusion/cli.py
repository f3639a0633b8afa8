"""Command-line entry point: synth, train, eval, ablate, predict, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import LOSS_MODES, MODALITIES, OVERSAMPLE_MODES, RunConfig
from .errors import PipelineError
from .gates import write_feature_report
from .fusion import write_attention_csv
from .metrics import write_key_values
from .model import DualEncoder
from .synth import COHORT_COUNTS, SynthConfig, write_dataset
from .text import import_embeddings

def _axis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["ce", *LOSS_MODES])
    p.add_argument("--fusion", choices=["xattn", "ae", "cross_attention", "autoencoder"])
    p.add_argument("--modality", choices=MODALITIES)
    p.add_argument("--oversample", choices=OVERSAMPLE_MODES)


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="output directory")
    _axis_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osa-fusion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort and a matching config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=800)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--proportions", type=float, nargs=4, default=COHORT_COUNTS,
                   metavar=("NORMAL", "MILD", "MODERATE", "SEVERE"))

    p = sub.add_parser("train", help="train over the configured seeds; write checkpoints and metrics")
    _run_flags(p)
    p.add_argument("--attention", type=int, default=0, metavar="N",
                   help="dump cross-attention weights for the first N test subjects")

    p = sub.add_parser("eval", help="score a checkpoint on a labelled patient/mesh set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config whose data paths to score (defaults to the checkpoint's)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="one-axis-at-a-time ablation grid")
    _run_flags(p)

    p = sub.add_parser("predict", help="severity for every listed patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--meshes", required=True)
    p.add_argument("--thetas")
    p.add_argument("--embeddings")
    p.add_argument("--harden", type=int, metavar="K", help="keep only the top-K gated image features")
    p.add_argument("--out", required=True, help="prediction CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference check of the composed model")
    p.add_argument("--config", help="optional JSON config; model sizes are shrunk regardless")
    _axis_flags(p)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: getattr(args, k, None) for k in ("loss", "fusion", "modality", "oversample", "epochs")}
    cfg = cfg.with_overrides(**over)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seeds=(args.seed,))
    return cfg


def cmd_synth(args) -> int:
    scfg = SynthConfig(n_subjects=args.n, proportions=tuple(args.proportions), signal=args.signal,
                       noise=args.noise, seed=args.seed)
    patients, meshes = write_dataset(scfg, args.out)
    cfg = RunConfig(patients=patients.name, meshes=meshes.name)
    cfg.save(Path(args.out) / "config.json")
    print(f"wrote {args.n} subjects to {patients} and {meshes}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    results, agg = pipeline.run_seeds(cfg, out_dir=out)
    cfg.save(out / "config.json")
    first = results[0]
    if first.model.uses_image:
        labels = [f"landmark{lm}.{axis}" for lm in cfg.keypoints for axis in "xyz"]
        ranked = first.model.selected_features(first.model.n_image)
        write_feature_report(out / "selected_features.txt", first.model.gates, ranked, labels)
    if args.attention and cfg.modality == "multimodal" and cfg.fusion == "cross_attention":
        test = first.splits.test
        n = min(args.attention, len(test))
        weights = first.model.attention(pipeline.as_batch(test, np.arange(n)))
        for i in range(n):
            write_attention_csv(out / f"attention_{test.ids[i]}.csv", weights[i])
    print(f"accuracy {agg.accuracy:.4f}  auc {agg.auc:.4f}  over seeds {list(cfg.seeds)}")
    return 0


def cmd_eval(args) -> int:
    model, meta = DualEncoder.load(args.checkpoint)
    cfg = RunConfig.load(args.config) if args.config else model.cfg
    embeddings = import_embeddings(cfg.embeddings) if cfg.embeddings else None
    if embeddings is not None:
        model, meta = DualEncoder.load(args.checkpoint, embeddings)
    data = pipeline.load_dataset(cfg.with_overrides(keypoints=model.cfg.keypoints))
    report = pipeline.evaluate_model(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_key_values(out / "metrics.txt", report)
    print(f"accuracy {report.accuracy:.4f}  auc {report.auc:.4f}  on {len(data)} subjects")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = pipeline.ablate(cfg, out_dir=args.out)
    print(pipeline.format_ablation(rows))
    return 0


def cmd_predict(args) -> int:
    rows = pipeline.predict(args.checkpoint, args.patients, args.meshes, args.thetas, args.embeddings,
                            args.harden, args.out)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    base = _config(args)
    cfg = base.with_overrides(**pipeline.TINY).with_overrides(dropout=args.dropout)
    hook = None
    if args.corrupt:
        hook = lambda name, g: g * 1.01 + 1e-3 if name == args.corrupt else g  # noqa: E731
    report = pipeline.gradient_check(cfg, seed=args.seed, hook=hook)
    worst = 0.0
    for name, err in report.items():
        flag = "FAIL" if err > pipeline.GRADCHECK_TOLERANCE else "ok"
        print(f"{name:24s} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {pipeline.GRADCHECK_TOLERANCE:g})")
    return 1 if worst > pipeline.GRADCHECK_TOLERANCE else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser"]
