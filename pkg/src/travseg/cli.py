"""Command-line entry points for dataset generation, pretraining, episodic
runs, ablation matrices, gradient verification, and report regeneration.

Exit codes: 0 success, 2 validation/configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_params, save_params
from .errors import (ConfigError, ContractError, EmptyRegionError, NumericError,
                     SamplingError, ShapeError, ValidationError)
from .harness import (RunConfig, ablation_configs, config_from_items,
                      gradcheck_suite, load_raw_results, parse_config_text,
                      pretrain_backbone, report, run_matrix, save_raw_results)
from .scenes import EpisodePool, gen_dataset, load_split

USAGE_ERRORS = (ValidationError, ConfigError, ShapeError, SamplingError,
                EmptyRegionError, ContractError)


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = config_from_items(parse_config_text(Path(args.config).read_text()), cfg)
    overrides: dict[str, str] = {}
    for field in ("k", "episodes", "height", "width", "epochs", "workers"):
        v = getattr(args, field.replace("-", "_"), None)
        if v is not None:
            overrides[field] = str(v)
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    if getattr(args, "flags", None):
        for tok in args.flags.split(","):
            tok = tok.strip()
            if not tok:
                continue
            if "=" in tok:
                key, val = tok.split("=", 1)
            elif tok.startswith("-"):
                key, val = tok[1:], "false"
            else:
                key, val = tok, "true"
            key = {"pooling": "pooling_mode"}.get(key, key)
            overrides[key] = val
    return config_from_items(overrides, cfg)


def cmd_gen_data(args) -> int:
    if args.split:
        plan = [(args.split, args.count)]
    else:
        plan = [("train", args.count), ("support", args.support_count),
                ("query", args.query_count)]
    for split, count in plan:
        if count < 1:
            continue
        dirs = gen_dataset(args.out, count, split, args.seed,
                           height=args.height, width=args.width)
        print(f"wrote {len(dirs)} {split} scenes under {args.out}/scenes/{split}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    samples = load_split(args.scenes, "train")
    blobs, info = pretrain_backbone(samples, config, args.epochs, args.seed)
    save_params(args.out, blobs)
    tail = f", final loss {info['losses'][-1]:.4f}" if info["losses"] else ""
    print(f"saved backbone ({len(blobs)} arrays) to {args.out} "
          f"after {info['epochs']} epochs{tail}")
    return 0


def cmd_run_episodes(args) -> int:
    config = _load_config(args)
    pool = EpisodePool.from_root(args.scenes)
    frozen = load_params(args.ckpt)
    configs = {"run": config}
    results = run_matrix(pool, frozen, configs)
    save_raw_results(configs, results, args.out)
    paths = report(configs, results, args.out)
    done = sum(not r.skipped for r in results["run"])
    print(f"{done}/{len(results['run'])} episodes completed; report in {paths['csv'].parent}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    pool = EpisodePool.from_root(args.scenes)
    frozen = load_params(args.ckpt)
    configs, baseline = ablation_configs(base, args.matrix)
    results = run_matrix(pool, frozen, configs)
    save_raw_results(configs, results, args.out, baseline)
    paths = report(configs, results, args.out, baseline)
    print(f"ablation matrix {args.matrix!r} finished; report in {paths['csv'].parent}")
    return 0


def cmd_grad_check(args) -> int:
    errs = gradcheck_suite()
    for name, err in errs.items():
        print(f"{name}: max rel err {err:.2e}")
    print("gradient check passed")
    return 0


def cmd_report(args) -> int:
    configs, results, baseline = load_raw_results(args.in_dir)
    paths = report(configs, results, args.out, baseline)
    print(f"regenerated report in {paths['csv'].parent}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="travseg",
                                description="few-shot traversability benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic scene splits")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=40, help="train scenes")
    g.add_argument("--split", choices=("train", "support", "query"),
                   help="generate a single split of --count scenes")
    g.add_argument("--support-count", type=int, default=24)
    g.add_argument("--query-count", type=int, default=24)
    g.add_argument("--seed", type=int, default=100)
    g.add_argument("--height", type=int, default=60)
    g.add_argument("--width", type=int, default=80)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train the RGB + fusion backbone")
    t.add_argument("--scenes", required=True)
    t.add_argument("--epochs", type=int, default=12)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--height", type=int)
    t.add_argument("--width", type=int)
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run-episodes", help="episodic adaptation for one config")
    r.add_argument("--scenes", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--k", type=int)
    r.add_argument("--episodes", type=int)
    r.add_argument("--seeds", help="comma-separated run seeds")
    r.add_argument("--flags", help="e.g. use_H=false,use_n2p=true,pooling=gap")
    r.add_argument("--config", help="key=value file; CLI values win")
    r.add_argument("--workers", type=int)
    r.add_argument("--height", type=int)
    r.add_argument("--width", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run_episodes)

    a = sub.add_parser("ablate", help="paired ablation matrix")
    a.add_argument("--matrix", choices=("depth", "ncl"), required=True)
    a.add_argument("--scenes", required=True)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--k", type=int)
    a.add_argument("--episodes", type=int)
    a.add_argument("--seeds")
    a.add_argument("--config")
    a.add_argument("--workers", type=int)
    a.add_argument("--height", type=int)
    a.add_argument("--width", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference gradient audit")
    c.set_defaults(func=cmd_grad_check)

    e = sub.add_parser("report", help="regenerate reports from raw results")
    e.add_argument("--in", dest="in_dir", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
