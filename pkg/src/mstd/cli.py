"""Command-line interface.

Subcommands: gen-data, train, eval, compare, route-stats. Every failure
maps to a stable exit code so scripts can branch on it: 0 ok, 2 config,
3 I/O or format, 4 missing stage artifact, 5 numerical divergence.

All randomness descends from a single seed per run; compare pairs methods
by running each one under the same seeds, so they see identical data in
identical order.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, pipeline
from .config import RunConfig, load_config
from .data import load_external
from .data import split as split_bundle
from .errors import CheckpointError, ConfigError, MstdError
from .models import ModalityModel

METHODS = ("no_kd", "kd_mm", "kd_cm", "mst")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MstdError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mstd",
        description="Multi-stage cross-modal distillation at desk scale.",
    )
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("gen-data", help="write the configured synthetic dataset to a file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training pipeline (or one stage of it)")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=("all", "s1", "s2", "s3"), default="all")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (default: first of report.seeds)")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file the model was trained on")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="multi-seed comparison of methods per target modality")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds (default: report.seeds)")
    p.add_argument("--methods", default=",".join(METHODS),
                   help=f"comma-separated subset of {','.join(METHODS)}")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("route-stats", help="per-epoch mean routing table of a finished run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_route_stats)

    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.data.source != "synthetic":
        raise ConfigError("gen-data needs data.source 'synthetic'")
    seed = cfg.report.seeds[0]
    bundle = pipeline.load_bundle(cfg, seed)
    from .data import save_data

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_data(out, bundle)
    print(f"wrote {bundle.samples} samples x {bundle.n_modalities} modalities to {out} (seed {seed})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.report.seeds[0]
    stages = ("s1", "s2", "s3") if args.stage == "all" else (args.stage,)
    artifacts = pipeline.run_all(cfg, seed, args.out, stages)
    for name in sorted(artifacts.checkpoints):
        print(f"checkpoint {artifacts.checkpoints[name]}")
    if artifacts.metrics_path is not None:
        print(f"metrics {artifacts.metrics_path}")
    if "test" in artifacts.final:
        print(f"test oa {artifacts.final['test'].overall_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    state = checkpoint.load(args.checkpoint)
    weights, meta = checkpoint.split_meta(state)
    prefixes = {k.split("/")[0] for k in weights}
    if len(prefixes) != 1:
        raise CheckpointError(
            f"checkpoint holds parameters of several modules: {sorted(prefixes)}"
        )
    prefix = prefixes.pop()
    if not (prefix.startswith("m") and prefix[1:].isdigit()):
        raise CheckpointError(f"checkpoint {args.checkpoint} is not a model checkpoint")
    model = ModalityModel.from_state(weights, int(prefix[1:]))

    for key in ("seed_hi", "seed_lo", "split_val_ppm", "split_test_ppm"):
        if key not in meta:
            raise CheckpointError(f"checkpoint lacks split metadata {key!r}")
    seed = int(meta["seed_hi"]) * 65536 + int(meta["seed_lo"])
    val = meta["split_val_ppm"] / 1e6
    test = meta["split_test_ppm"] / 1e6
    bundle = split_bundle(load_external(args.data), (1.0 - val - test, val, test), seed)

    metrics = pipeline.evaluate(model, bundle, args.split)
    print(json.dumps({
        "overall_accuracy": metrics.overall_accuracy,
        "per_class_accuracy": metrics.per_class_accuracy,
        "loss": metrics.loss,
    }))
    return 0


def _run_method(method: str, cfg: RunConfig, seed: int, out_dir: Path) -> pipeline.RunArtifacts:
    if method == "mst":
        return pipeline.run_all(cfg, seed, out_dir)
    if method == "no_kd":
        return pipeline.run_baseline("no_kd", cfg, seed, out_dir)
    if method == "kd_mm":
        return pipeline.run_baseline("vanilla_kd", cfg, seed, out_dir, teacher_cfg="mm")
    if method == "kd_cm":
        return pipeline.run_baseline("vanilla_kd", cfg, seed, out_dir, teacher_cfg="cm")
    raise ConfigError(f"unknown method {method!r} (choose from {', '.join(METHODS)})")


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    seeds = (
        tuple(int(s) for s in args.seeds.split(",") if s.strip())
        if args.seeds
        else cfg.report.seeds
    )
    if len(seeds) < 2:
        raise ConfigError(f"compare needs >= 2 seeds, got {list(seeds)}")
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} (choose from {', '.join(METHODS)})")

    modalities = len(cfg.data.dims) if cfg.data.source == "synthetic" else len(
        cfg.models.unimodal_hidden
    )
    base = Path(cfg.report.out_dir) / "compare"
    rows = []
    for target in range(1, modalities + 1):
        cfg_t = dataclasses.replace(
            cfg, plan=dataclasses.replace(cfg.plan, target=target)
        )
        oas: dict[str, list[float]] = {}
        for method in methods:
            per_seed = []
            for seed in seeds:
                cell = base / f"t{target}" / method / f"seed{seed}"
                art = _run_method(method, cfg_t, seed, cell)
                per_seed.append(art.final["test"].overall_accuracy)
            oas[method] = per_seed
        for method in methods:
            per_seed = oas[method]
            mean = float(np.mean(per_seed))
            std = float(np.std(per_seed))  # population std
            gain = mean - float(np.mean(oas["no_kd"])) if "no_kd" in oas else None
            rows.append({
                "target": target,
                "method": method,
                "mean_oa": mean,
                "std_oa": std,
                "gain_vs_no_kd": gain,
                "per_seed": per_seed,
            })

    report = {
        "seeds": list(seeds),
        "std": "population",
        "rows": rows,
    }
    base.mkdir(parents=True, exist_ok=True)
    (base / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")

    print(f"# mean +- std over seeds {list(seeds)} (population std); OA on the test split")
    print(f"{'target':>6}  {'method':<8} {'mean':>8} {'std':>8} {'vs no_kd':>9}")
    for row in rows:
        gain = f"{row['gain_vs_no_kd']:+.4f}" if row["gain_vs_no_kd"] is not None else "-"
        print(
            f"{row['target']:>6}  {row['method']:<8} {row['mean_oa']:>8.4f} "
            f"{row['std_oa']:>8.4f} {gain:>9}"
        )
    print(f"report {base / 'report.json'}")
    return 0


def cmd_route_stats(args) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "run.json"
    metrics_path = run_dir / "metrics.jsonl"
    from .errors import MissingArtifactError

    if not manifest_path.exists():
        raise MissingArtifactError(f"route-stats needs {manifest_path}")
    if not metrics_path.exists():
        raise MissingArtifactError(f"route-stats needs {metrics_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    sources = manifest.get("teacher_sources", [])
    labels = [
        f"t{j}({'MM' if src == 0 else f'CM:m{src}'})"
        for j, src in enumerate(sources, start=1)
    ]

    rows = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("stage") == "s3" and row.get("split") == "train" and "routing_mean" in row:
                rows.append((row["epoch"], row["routing_mean"]))

    print("\t".join(["epoch"] + labels))
    for epoch, means in rows:
        print("\t".join([str(epoch)] + [f"{v:.6f}" for v in means]))
    if not rows:
        print("# no routed stage-3 training epochs in this run", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
