"""Command-line front end.

Subcommands: gen, train, eval, ablate, probe, stats, sdf.  Every
subcommand accepts --config JSON_FILE; explicit flags override config
file values.  Outputs embed the resolved configuration and the package
version.  Exit codes: 0 success, 1 I/O or data-integrity failure
(one machine-parsable line on stderr), 2 usage error.

GRASP_THREADS caps the worker count; every stage currently runs on a
single worker, so any positive cap is honored as written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, evalkit, probe as probe_mod
from .errors import GraspError
from .geometry import read_mask, sdf, sdf_to_csv, sdf_to_pgm
from .model import GraspConfig, GraspModel, load_checkpoint
from .pgm import write_pgm
from .synthdata import SceneConfig, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, train


def max_workers() -> int:
    """Worker cap from GRASP_THREADS (default 1; generation and eval are serial)."""
    raw = os.environ.get("GRASP_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise GraspError(f"GRASP_THREADS={raw!r} is not an integer") from None
    if cap < 1:
        raise GraspError(f"GRASP_THREADS={cap} must be at least 1")
    return cap


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraspError(f"{path}: malformed config JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise GraspError(f"{path}: config must be a JSON object")
    return data


def _merge(section: dict, overrides: dict) -> dict:
    """Config-file section, with explicitly set flags winning."""
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _run_config(args, sections: dict) -> dict:
    return {
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        **sections,
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    scene_cfg = SceneConfig.from_dict(
        _merge(file_cfg.get("scene", {}), {"size": args.size})
    )
    max_workers()  # validate the cap even though generation is serial
    instances = generate_dataset(args.n, args.seed, scene_cfg)
    write_dataset(args.out, instances, args.seed, scene_cfg, split=args.split)
    print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = GraspConfig.from_dict(file_cfg.get("model", {}))
    train_cfg = TrainConfig(
        **_merge(
            file_cfg.get("train", {}),
            {"steps": args.steps, "batch": args.batch, "lr": args.lr, "seed": args.seed},
        )
    )
    _, instances = read_dataset(args.data)
    model = GraspModel(model_cfg, seed=train_cfg.seed)
    loss_csv = args.loss_csv or (args.out + ".loss.csv")
    result = train(model, instances, train_cfg, ckpt_path=args.out, loss_csv_path=loss_csv)
    print(f"trained {result.steps} steps; final loss {result.final_loss:.6f}; "
          f"checkpoint {args.out}")
    return 0


def _load_model(args) -> GraspModel:
    model, _ = load_checkpoint(args.ckpt)
    return model


def cmd_eval(args) -> int:
    model = _load_model(args)
    _, instances = read_dataset(args.data)
    override = "config" if args.gate_override is None else args.gate_override
    report = evalkit.evaluate(
        model,
        instances,
        protocol=args.protocol,
        gate_override=override,
        use_postprocess=args.pp,
        use_two_pass=args.two_pass,
        threshold=args.threshold,
        eval_seed=args.seed,
        occ_metric=args.occ_metric,
        config_echo=_run_config(args, {"model": model.config.to_dict()}),
        version=__version__,
    )
    os.makedirs(args.out, exist_ok=True)
    report.to_json(os.path.join(args.out, "report.json"))
    report.to_csv(os.path.join(args.out, "report.csv"))
    occ = "n/a" if report.occ_miou is None else f"{report.occ_miou:.4f}"
    print(f"{report.protocol}: full mIoU {report.full_miou:.4f}, occ mIoU {occ} "
          f"({report.n_instances} instances, {report.n_occluded} occluded)")
    return 0


def cmd_ablate(args) -> int:
    model = _load_model(args)
    _, instances = read_dataset(args.data)
    rows = []
    for override, report in evalkit.ablate(
        model, instances, protocol=args.protocol, eval_seed=args.seed,
        use_postprocess=args.pp, threshold=args.threshold,
    ):
        label = "none" if override is None else repr(override)
        occ = "" if report.occ_miou is None else repr(report.occ_miou)
        rows.append((label, repr(report.full_miou), occ))
        print(f"gate={label}: full mIoU {report.full_miou:.4f}, "
              f"occ mIoU {report.occ_miou if report.occ_miou is None else round(report.occ_miou, 4)}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write("gate_override,full_miou,occ_miou\n")
        for label, full, occ in rows:
            fh.write(f"{label},{full},{occ}\n")
    return 0


def cmd_probe(args) -> int:
    model = _load_model(args)
    _, instances = read_dataset(args.data)
    report = probe_mod.probe_report(
        model, instances, lam=args.ridge_lambda, seed=args.seed, test_frac=args.test_frac
    )
    os.makedirs(args.out, exist_ok=True)
    probe_mod.write_probe_outputs(
        report,
        os.path.join(args.out, "probe.json"),
        os.path.join(args.out, "probe_pairs.csv"),
        config_echo=_run_config(args, {"model": model.config.to_dict()}),
        version=__version__,
    )
    for name, res in report["results"].items():
        r2 = "undefined" if res["r2"] is None else f"{res['r2']:.4f}"
        print(f"{name}: R^2 {r2}, sign accuracy {res['sign_accuracy']:.4f}")
    return 0


def cmd_stats(args) -> int:
    model = _load_model(args)
    _, instances = read_dataset(args.data)
    payload = {
        "gate": evalkit.gate_stats(model, instances),
        "attention": evalkit.attention_stats(model, instances),
        "config": _run_config(args, {"model": model.config.to_dict()}),
        "version": __version__,
    }
    _write_json(args.out, payload)
    print(f"wrote mechanism stats to {args.out}")
    return 0


def cmd_sdf(args) -> int:
    mask = read_mask(args.mask)
    field = sdf(mask)
    os.makedirs(args.out, exist_ok=True)
    sdf_to_csv(field, os.path.join(args.out, "sdf.csv"))
    sdf_to_pgm(field, os.path.join(args.out, "sdf.pgm"))
    gate = 1.0 / (1.0 + np.exp(-(args.alpha * field.normalized + args.beta)))
    write_pgm(os.path.join(args.out, "gate.pgm"),
              np.clip(np.rint(gate * 255.0), 0, 255).astype(np.uint8))
    _write_json(
        os.path.join(args.out, "sdf_meta.json"),
        {
            "mask": os.path.abspath(args.mask),
            "alpha": args.alpha,
            "beta": args.beta,
            "diagonal": field.diagonal,
            "normalized_range": [float(field.normalized.min()), float(field.normalized.max())],
            "version": __version__,
        },
    )
    print(f"wrote SDF exports to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grasp",
        description="Desk-scale amodal segmentation with gated shape-prototype injection.",
    )
    parser.add_argument("--version", action="version", version=f"grasp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic occlusion dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="square image size")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train)

    def eval_like(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--protocol", choices=("oracle", "standard"), default="oracle")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--pp", action="store_true", help="union amodal prediction with the input mask")
        p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_like(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--gate-override", type=float, default=None)
    p.add_argument("--two-pass", action="store_true")
    p.add_argument("--occ-metric", choices=("head", "amodal_minus_visible"), default="head")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="gate-intervention sweep (none, 0, 0.5, 1)")
    eval_like(p)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("probe", help="linear probes for occlusion geometry")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("stats", help="gate and prototype-attention statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sdf", help="export the SDF and gate heatmap of a mask")
    p.add_argument("--mask", required=True, help="input mask PGM")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=2.68, help="gate slope for the heatmap")
    p.add_argument("--beta", type=float, default=0.26, help="gate bias for the heatmap")
    p.set_defaults(fn=cmd_sdf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (GraspError, OSError) as exc:
        kind = type(exc).__name__
        print(f"error:{kind}:{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
