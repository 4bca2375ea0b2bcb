"""Command-line surface: train, estimate, prune, experiment-classes, report.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 infeasible
profile. All randomness flows from --seed; outputs land under --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import modelfile, report, toydata
from .energy import (
    HardwareProfile,
    LayerStats,
    default_profile,
    load_profile,
)
from .errors import (
    ConfigError,
    EnerpruneError,
    InfeasibleProfileError,
    NumericError,
    ShapeError,
)
from .nets import evaluate
from .pruning import (
    PruneConfig,
    measure_stats,
    prune_network,
    uniform_schedule,
)
from .tensorio import atomic_write_text, load_dataset, save_dataset


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--profile", type=Path, default=None, help="hardware profile (TOML/JSON)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--bits", type=str, default=None, help="bitwidths W[,A], e.g. 8 or 8,16")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="enerprune", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy CNN into a model manifest")
    _common_flags(p)
    p.add_argument("--dataset", type=Path, default=None, help="dataset dir (default: generate toy)")
    p.add_argument("--toy-per-class", type=int, default=200)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--energy-batch", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="per-layer energy report for a model")
    _common_flags(p)
    p.add_argument("--model", type=Path, default=None, help="model manifest")
    p.add_argument("--arch", choices=sorted(modelfile.BUILTIN_ARCHS), default=None)
    p.add_argument("--dataset", type=Path, default=None, help="calibration dataset dir")
    p.add_argument("--batch", type=int, default=None, help="override accounting batch")
    p.add_argument("--calib-images", type=int, default=256)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("prune", help="energy-aware pruning of a trained model")
    _common_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--budget", type=float, default=0.01, help="allowed top-1 drop")
    p.add_argument("--margin", type=float, default=0.05, help="over-prune margin")
    p.add_argument("--g", type=int, default=2, help="weights restored per round")
    p.add_argument("--p", type=int, default=1, choices=(1, 2), help="residual norm")
    p.add_argument("--sample-images", type=int, default=1024)
    p.add_argument("--subsample", type=int, default=16, help="CONV rows kept per image")
    p.add_argument("--ft-epochs", type=int, default=3)
    p.add_argument("--ft-lr", type=float, default=0.02)
    p.add_argument("--ratio-step", type=float, default=0.25)
    p.add_argument("--ratio-caps", type=str, default=None, help="comma list, one per layer")
    p.add_argument("--iterations", type=int, default=4)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("experiment-classes", help="prune for reduced class subsets")
    _common_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--subsets", type=str, default="10,4,2", help="class counts, comma list")
    # pruning knobs shared with `prune`
    p.add_argument("--budget", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--g", type=int, default=2)
    p.add_argument("--p", type=int, default=1, choices=(1, 2))
    p.add_argument("--sample-images", type=int, default=1024)
    p.add_argument("--subsample", type=int, default=16)
    p.add_argument("--ft-epochs", type=int, default=3)
    p.add_argument("--ft-lr", type=float, default=0.02)
    p.add_argument("--ratio-step", type=float, default=0.25)
    p.add_argument("--ratio-caps", type=str, default=None)
    p.add_argument("--iterations", type=int, default=4)
    p.set_defaults(func=cmd_experiment_classes)

    p = sub.add_parser("report", help="dense energy-breakdown analysis of a geometry")
    _common_flags(p)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--arch", choices=sorted(modelfile.BUILTIN_ARCHS), default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(func=cmd_report)
    return ap


def _parse_bits(spec: str | None) -> tuple[int, int] | None:
    if spec is None:
        return None
    try:
        parts = [int(x) for x in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--bits {spec!r}: expected W or W,A integers") from exc
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ConfigError(f"--bits {spec!r}: expected one or two values")


def _load_hw(args) -> HardwareProfile:
    hw = load_profile(args.profile) if args.profile else default_profile()
    bits = _parse_bits(args.bits)
    if bits:
        hw = hw.with_bits(*bits)
    return hw


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not path.exists():
        raise ConfigError(f"{what} {path}: no such path")
    return path


def _shape_layers(args, batch_override=None):
    """Geometry from --model or --arch (exactly one)."""
    if (args.model is None) == (args.arch is None):
        raise ConfigError("give exactly one of --model or --arch")
    if args.arch is not None:
        layers = modelfile.BUILTIN_ARCHS[args.arch](batch=batch_override or 44)
    else:
        layers = modelfile.load_shapes(_require(args.model, "model"), batch=batch_override)
    return layers


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    rng = np.random.default_rng(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.dataset is not None:
        ds = load_dataset(_require(args.dataset, "dataset"))
    else:
        ds = toydata.generate_dataset(args.toy_per_class, seed=args.seed)
        save_dataset(args.out / "dataset", ds)
    net = toydata.build_toy_cnn(rng, n_classes=ds.n_classes, energy_batch=args.energy_batch)
    toydata.train_toy_cnn(net, ds, rng, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    top1, top5 = evaluate(net, ds.images[ds.val_idx], ds.labels[ds.val_idx])
    modelfile.save_model(args.out / "model.json", net)
    payload = {"model": str(args.out / "model.json"), "top1": top1, "topk": top5}
    print(json.dumps(payload) if args.json else f"wrote {payload['model']}  top1={top1:.3f} top5={top5:.3f}")
    return 0


def _stats_for_shapes(layers, args, hw) -> list[LayerStats]:
    """Dense stats, or measured activation densities when a dataset is given."""
    if getattr(args, "dataset", None) is None:
        return [LayerStats() for _ in layers]
    if args.model is None:
        raise ConfigError("calibration --dataset needs a --model with weights")
    ds = load_dataset(_require(args.dataset, "dataset"))
    net = modelfile.load_model(_require(args.model, "model"))
    rng = np.random.default_rng(args.seed)
    xtr = ds.images[ds.train_idx]
    calib = xtr[rng.choice(xtr.shape[0], size=min(args.calib_images, xtr.shape[0]), replace=False)]
    return measure_stats(net, calib)


def cmd_estimate(args) -> int:
    hw = _load_hw(args)
    layers = _shape_layers(args, batch_override=args.batch)
    stats = _stats_for_shapes(layers, args, hw)
    triples = [(name, shape, st) for (name, shape, _), st in zip(layers, stats)]
    rows, totals = report.energy_rows(triples, hw)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_energy_csv(args.out / "energy.csv", rows, totals)
    report.write_json(args.out / "energy.json", {"layers": rows, "total": totals})
    if args.json:
        print(json.dumps({"layers": rows, "total": totals}))
    else:
        print(report.format_energy_table(rows, totals))
    return 0


def _prune_config(args, net) -> PruneConfig:
    if args.ratio_caps is not None:
        caps = [float(x) for x in args.ratio_caps.split(",")]
        if len(caps) != len(net.layers):
            raise ConfigError(
                f"--ratio-caps names {len(caps)} layers, model has {len(net.layers)}"
            )
    else:
        caps = default_caps(net)
    schedule = uniform_schedule(caps, args.ratio_step, args.iterations)
    return PruneConfig(
        target_ratio_schedule=schedule,
        overprune_margin=args.margin,
        restore_batch_g=args.g,
        residual_norm_p=args.p,
        accuracy_drop_budget=args.budget,
        sample_images=args.sample_images,
        conv_position_subsample=args.subsample,
        finetune_epochs=args.ft_epochs,
        finetune_lr=args.ft_lr,
    )


def default_caps(net) -> list[float]:
    """Kind-based per-layer compression caps: gentle ends, aggressive middle."""
    caps = []
    for i, layer in enumerate(net.layers):
        if i == 0:
            caps.append(0.6)
        elif i == len(net.layers) - 1:
            caps.append(0.8)
        elif layer.bank.shape.kind == "FC":
            caps.append(0.95)
        else:
            caps.append(0.8)
    return caps


def _run_prune(
    net, ds, cfg, hw, rng, out: Path, json_out: bool, tag: str = "", quiet: bool = False
) -> dict:
    xva, yva = ds.images[ds.val_idx], ds.labels[ds.val_idx]
    xtr = ds.images[ds.train_idx]
    calib = xtr[rng.choice(xtr.shape[0], size=min(cfg.calib_images, xtr.shape[0]), replace=False)]
    before = report.model_summary(net, measure_stats(net, calib), hw)
    before["top1"], before["topk"] = evaluate(net, xva, yva, topk=cfg.topk)

    pruned, log = prune_network(net, cfg, ds, hw, rng)

    after = report.model_summary(pruned, measure_stats(pruned, calib), hw)
    after["top1"], after["topk"] = evaluate(pruned, xva, yva, topk=cfg.topk)

    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{tag}-" if tag else ""
    modelfile.save_model(out / f"{prefix}pruned.json", pruned)
    report.write_jsonl(out / f"{prefix}log.jsonl", log)
    summary = {"before": before, "after": after, "iterations_run": len(log)}
    report.write_json(out / f"{prefix}summary.json", summary)
    if json_out:
        print(json.dumps(summary))
    elif not quiet:
        print(report.format_summary_table(before, after))
    return summary


def cmd_prune(args) -> int:
    hw = _load_hw(args)
    ds = load_dataset(_require(args.dataset, "dataset"))
    net = modelfile.load_model(_require(args.model, "model"))
    cfg = _prune_config(args, net)
    rng = np.random.default_rng(args.seed)
    _run_prune(net, ds, cfg, hw, rng, args.out, args.json)
    return 0


def cmd_experiment_classes(args) -> int:
    hw = _load_hw(args)
    ds = load_dataset(_require(args.dataset, "dataset"))
    net = modelfile.load_model(_require(args.model, "model"))
    counts = [int(x) for x in args.subsets.split(",")]
    n_classes = net.n_classes
    for c in counts:
        if c < 2:
            raise ConfigError(f"class subset of size {c}: need at least 2 classes")
        if c > n_classes:
            raise ConfigError(f"class subset of size {c} exceeds {n_classes} classes")
    rng = np.random.default_rng(args.seed)
    xtr = ds.images[ds.train_idx]
    calib = xtr[rng.choice(xtr.shape[0], size=min(256, xtr.shape[0]), replace=False)]
    baseline = report.model_summary(net, measure_stats(net, calib), hw)

    results = []
    for count in counts:
        if count == n_classes:
            classes = list(range(n_classes))
        else:
            pick_rng = np.random.default_rng([args.seed, count])
            classes = sorted(int(c) for c in pick_rng.choice(n_classes, size=count, replace=False))
        sub_ds = ds.subset_classes(classes)
        sub_net = toydata.rebuild_head(net, classes)
        cfg = _prune_config(args, sub_net)
        tag = f"classes{count}"
        # fresh generator per run, so the full-class subset reproduces `prune`
        summary = _run_prune(
            sub_net, sub_ds, cfg, hw, np.random.default_rng(args.seed),
            args.out, False, tag=tag, quiet=args.json,
        )
        results.append(
            {
                "classes": count,
                "class_ids": classes,
                "weights_ratio": summary["after"]["nonzero_weights"] / baseline["nonzero_weights"],
                "macs_ratio": summary["after"]["nonskipped_macs"] / baseline["nonskipped_macs"],
                "energy_ratio": summary["after"]["energy"] / baseline["energy"],
                "top1": summary["after"]["top1"],
            }
        )
    payload = {"baseline": baseline, "subsets": results}
    report.write_json(args.out / "classes.json", payload)
    lines = ["classes,weights_ratio,macs_ratio,energy_ratio,top1"]
    for r in results:
        lines.append(
            f"{r['classes']},{r['weights_ratio']:.6g},{r['macs_ratio']:.6g},"
            f"{r['energy_ratio']:.6g},{r['top1']:.4f}"
        )
    atomic_write_text(args.out / "classes.csv", "\n".join(lines) + "\n")
    print(json.dumps(payload) if args.json else "\n".join(lines))
    return 0


def cmd_report(args) -> int:
    hw = _load_hw(args)
    layers = _shape_layers(args, batch_override=args.batch)
    triples = [(name, shape, LayerStats()) for name, shape, _ in layers]
    rows, totals = report.energy_rows(triples, hw)
    shares = report.group_shares(triples, hw)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_energy_csv(args.out / "report.csv", rows, totals)
    report.write_json(args.out / "report.json", {"layers": rows, "total": totals, "shares": shares})
    if args.json:
        print(json.dumps({"layers": rows, "total": totals, "shares": shares}))
    else:
        print(report.format_energy_table(rows, totals))
        print(
            f"\nCONV holds {100 * shares['conv_weight_share']:.1f}% of weights, "
            f"{100 * shares['conv_energy_share']:.1f}% of energy"
        )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleProfileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EnerpruneError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
