"""Command-line entry point: ``train``, ``simulate``, ``evaluate`` and ``sweep``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments,
3 checkpoint that does not match the dataset.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import model as mdl
from .metrics import rows_to_csv
from .sim import SimConfig, run_gap_sweep, write_sweep_csv
from .trainer import (PRESETS, ConfigError, RunConfig, RunExistsError, _coerce, evaluate_model,
                      load_config, load_dataset, parse_config_text, prepare_run_dir, train,
                      write_run)

log = logging.getLogger("fairdual")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3
OUT_ENV = "FAIRDUAL_OUT"

# flag dest -> RunConfig field
OVERRIDES = {"strategy": "strategy", "eta": "eta", "lam": "lam", "alpha": "alpha",
             "beta": "beta", "batch_size": "batch_size", "q": "q", "k": "k",
             "epochs": "epochs", "seed": "seed"}


def _int_list(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _default_jobs() -> int:
    return os.cpu_count() or 1


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named defaults under --config")
    p.add_argument("--strategy")
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any other config key; repeatable")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdual",
                                     description="Max-min fair reweighting for recommender "
                                                 "training, with gap simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_run_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="batch-size / group-count gap sweep to CSV")
    p.add_argument("--config", help="flat key = value simulation config file")
    p.add_argument("--batch-sizes", type=_int_list)
    p.add_argument("--group-sizes", type=_int_list)
    p.add_argument("--strategies", type=_str_list)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, dest="num_seeds", help="number of seeds")
    p.add_argument("--k", type=int)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="metrics for a saved checkpoint")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("--checkpoint", help="model checkpoint (default RUN/checkpoints/model.bin)")
    p.add_argument("--config", help="config describing the dataset (default: the run's)")
    p.add_argument("--k", type=_int_list, default=(5, 10, 20), help="cutoffs, e.g. 5,10,20")
    p.add_argument("--part", choices=("test", "validation"), default="test")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train over a grid of strategies, lambdas and seeds")
    _add_run_flags(p)
    p.add_argument("--strategies", type=_str_list)
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--seeds", type=_int_list)
    _common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def resolve_config(args) -> RunConfig:
    mapping = dict(PRESETS[args.preset]) if getattr(args, "preset", None) else {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        mapping.update(parse_config_text(path.read_text()))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            mapping[key] = value
    if "lam" in mapping:
        mapping["lambda"] = mapping.pop("lam")
    return RunConfig.from_mapping(mapping)


def cmd_train(args) -> int:
    config = resolve_config(args)
    split, catalog, inputs_hash = load_dataset(config)
    run_dir = prepare_run_dir(_out_root(args), args.force)
    result = train(config, split, catalog)
    write_run(run_dir, config, result, inputs_hash, argv=args.argv)
    print(run_dir / "metrics.csv")
    return EXIT_OK


def _sim_value(key: str, value: str):
    default = getattr(SimConfig(), key)
    text = str(value).strip()
    if key == "strategies":
        return _str_list(text.strip("[]"))
    if key == "points":
        nums = _int_list(text.replace("(", "").replace(")", "").strip("[]"))
        if len(nums) % 2:
            raise ValueError(text)
        return tuple(zip(nums[::2], nums[1::2]))
    if key == "b_vec":
        return _float_list(text.strip("[]"))
    if isinstance(default, tuple):
        return _int_list(text.strip("[]"))
    return _coerce(text, type(default))


def _sim_config(args) -> SimConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        names = {f.name for f in fields(SimConfig)} - {"synthetic"}
        for raw_key, value in parse_config_text(path.read_text()).items():
            key = raw_key.replace("-", "_")
            if key not in names:
                raise ConfigError(raw_key, "unknown key")
            try:
                values[key] = _sim_value(key, value)
            except (ValueError, argparse.ArgumentTypeError):
                raise ConfigError(raw_key, f"cannot parse value {value!r}") from None
    flags = {"batch_sizes": args.batch_sizes, "group_sizes": args.group_sizes,
             "strategies": args.strategies, "epochs": args.epochs, "seed": args.seed,
             "num_seeds": args.num_seeds, "K": args.k}
    values.update({k: v for k, v in flags.items() if v is not None})
    config = SimConfig(**values)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError("simulate", str(exc)) from None
    return config


def cmd_simulate(args) -> int:
    config = _sim_config(args)
    out = _out_root(args)
    target = out if out.suffix == ".csv" else out / "sweep.csv"
    if target.exists() and not args.force:
        raise RunExistsError(f"{target} exists; pass --force to overwrite")
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = run_gap_sweep(config, jobs=args.jobs or _default_jobs())
    write_sweep_csv(rows, target)
    print(target)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / "model.bin"
    if args.config:
        config = load_config(args.config)
    else:
        manifest = run / "manifest.json"
        if not manifest.is_file():
            raise ConfigError("config", f"no manifest in {run}; pass --config")
        config = RunConfig.from_mapping(json.loads(manifest.read_text())["config"])
    split, catalog, _ = load_dataset(config)
    try:
        model = mdl.load_checkpoint(ckpt)
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {ckpt}: {exc}") from None
    if model.num_users != split.num_users or model.num_items != split.num_items:
        raise CheckpointMismatch(
            f"checkpoint has {model.num_users} users x {model.num_items} items, dataset has "
            f"{split.num_users} x {split.num_items}")
    report = evaluate_model(model, split, catalog, ks=tuple(sorted(set(args.k))),
                            part=args.part)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(args.out)
    else:
        print(text)
    return EXIT_OK


class CheckpointMismatch(ValueError):
    pass


def _sweep_one(job):
    config, run_dir, force, argv = job
    split, catalog, inputs_hash = load_dataset(config)
    prepare_run_dir(run_dir, force)
    result = train(config, split, catalog)
    write_run(run_dir, config, result, inputs_hash, argv=argv)
    return [dict(strategy=config.strategy, **{"lambda": config.lam}, seed=config.seed, **row)
            for row in result.history[-1][1].rows()] if result.history else []


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    strategies = args.strategies or (base.strategy,)
    lambdas = args.lambdas or (base.lam,)
    seeds = args.seeds or (base.seed,)
    out = _out_root(args)
    summary = out / "sweep.csv"
    if summary.exists() and not args.force:
        raise RunExistsError(f"{summary} exists; pass --force to overwrite")
    jobs = []
    for strategy, lam, seed in itertools.product(strategies, lambdas, seeds):
        config = base.replace(strategy=strategy, lam=lam, seed=seed)
        jobs.append((config, out / f"{strategy}_lambda{lam:g}_seed{seed}", args.force,
                     args.argv))
    workers = max(1, min(args.jobs or _default_jobs(), len(jobs)))
    if workers == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    summary.parent.mkdir(parents=True, exist_ok=True)
    summary.write_text(rows_to_csv([row for rows in results for row in rows]))
    print(summary)
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except RunExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
