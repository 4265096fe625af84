"""Command-line front end: ``metacure {train,eval,heatmap,oracle,gradcheck,ablate}``.

Exit codes: 0 success, 1 a check failed, 2 usage or config error,
3 numerical failure during a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gradcheck, metaloop, oracle
from . import numkit as nk
from .config import load_config
from .metaloop import ConfigError, TrainConfig
from .svg import write_heatmap_svg

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

ORACLE_TOL = 1e-9
CORRUPT_CONST_OFFSET = 1e-6

CONFIG_NAME = "config.ini"
METRICS_NAME = "metrics.csv"
EVAL_NAME = "eval.csv"
REPORT_NAME = "report.json"
CKPT_DIR = "checkpoints"
HEAT_DIR = "heatmaps"

log = logging.getLogger("metacure")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / CKPT_DIR / f"{iteration:06d}.ckpt"


def list_checkpoints(run_dir: Path) -> list[int]:
    d = run_dir / CKPT_DIR
    if not d.is_dir():
        return []
    return sorted(int(p.stem) for p in d.glob("*.ckpt") if p.stem.isdigit())


def prepare_run_dir(out: Path, overwrite: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {out} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def early_iteration(cfg: TrainConfig) -> int:
    return max(1, math.ceil(0.2 * cfg.iterations))


def train_run(cfg: TrainConfig, config_bytes: bytes | None, out: Path, workers: int = 1,
              overwrite: bool = False) -> dict:
    """Meta-train into ``out``; returns the report dict."""
    cfg.validate()
    prepare_run_dir(out, overwrite)
    # the snapshot is written before anything else
    if config_bytes is not None:
        (out / CONFIG_NAME).write_bytes(config_bytes)
    (out / CKPT_DIR).mkdir()
    (out / HEAT_DIR).mkdir()
    early = early_iteration(cfg)
    metrics_file = open(out / METRICS_NAME, "w", newline="")
    writer = csv.writer(metrics_file, lineterminator="\n")
    writer.writerow(metaloop.METRIC_COLUMNS)

    def on_iteration(row, system, it):
        writer.writerow([_fmt(row[c]) for c in metaloop.METRIC_COLUMNS])
        metrics_file.flush()
        if it % cfg.checkpoint_interval == 0 or it in (early, cfg.iterations):
            nk.save_checkpoint(checkpoint_path(out, it), system.state_arrays())

    started = time.perf_counter()
    try:
        result = metaloop.meta_train(cfg, on_iteration=on_iteration, workers=workers)
    finally:
        metrics_file.close()
    metrics = result.metrics
    last = metrics[-1]
    report = {
        "config": asdict(cfg),
        "iterations": cfg.iterations,
        "env_steps": result.env_steps,
        "train_seconds": round(time.perf_counter() - started, 3),
        "early_checkpoint": early,
        "final_checkpoint": cfg.iterations,
        "final_eval_mean_return": last["eval_mean_return"],
        "final_success_rate": last["success_rate"],
        "first_step_l_pred_below_0.1": _json_num(metaloop.first_step_below(metrics, "l_pred", 0.1)),
        "first_step_l_pred_task_below_0.1": _json_num(metaloop.first_step_below(metrics, "l_pred_task", 0.1)),
    }
    if result.system.has_predictors and cfg.family == "point-robot-sparse-noise":
        report["noise_region"] = metaloop.noise_region_stats(result.system)
    (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _json_num(v: float):
    return v if math.isfinite(v) else None


def load_run(run_dir: Path) -> TrainConfig:
    cfg_path = run_dir / CONFIG_NAME
    if not cfg_path.is_file():
        raise UsageError(f"{run_dir} is not a run directory (missing {CONFIG_NAME})")
    cfg = load_config(cfg_path)
    report = run_dir / REPORT_NAME
    if report.is_file():
        # honour --seed and ablation overrides given at training time
        stored = json.loads(report.read_text()).get("config", {})
        cfg = replace(cfg, seed=int(stored.get("seed", cfg.seed)), variant=stored.get("variant", cfg.variant))
    return cfg


def resolve_checkpoint(run_dir: Path, cfg: TrainConfig, ident: str | None) -> int:
    available = list_checkpoints(run_dir)
    if not available:
        raise UsageError(f"no checkpoints in {run_dir / CKPT_DIR}")
    if ident in (None, "final", "latest"):
        return available[-1]
    if ident == "early":
        it = early_iteration(cfg)
    else:
        try:
            it = int(ident)
        except ValueError:
            raise UsageError(f"checkpoint id must be an iteration number, 'early' or 'final', got {ident!r}") from None
    if it not in available:
        raise UsageError(f"checkpoint {it} not found in {run_dir / CKPT_DIR} (have {available})")
    return it


def restore_system(run_dir: Path, cfg: TrainConfig, iteration: int) -> tuple[metaloop.MetaCure, list]:
    train_tasks, test_tasks = metaloop.make_tasks(cfg)
    system = metaloop.MetaCure(cfg, train_tasks, np.random.default_rng(0))
    system.load_arrays(nk.load_checkpoint(checkpoint_path(run_dir, iteration)))
    return system, test_tasks


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _read_config(args) -> tuple[TrainConfig, bytes]:
    if not args.config:
        raise UsageError("--config PATH is required")
    path = Path(args.config)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    cfg = load_config(path)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, raw


def cmd_train(args, variant: str | None = None) -> int:
    cfg, raw = _read_config(args)
    if variant is not None:
        if variant not in metaloop.ABLATIONS:
            raise UsageError(f"unknown ablation {variant!r}; choose from {', '.join(metaloop.ABLATIONS)}")
        cfg = replace(cfg, variant=variant)
    cfg.validate()
    if not args.out:
        raise UsageError("--out DIR is required")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    report = train_run(cfg, raw, Path(args.out), args.workers, args.overwrite)
    print(f"trained {report['iterations']} iterations, {report['env_steps']} env steps -> {args.out}")
    print(f"final eval: mean final return {report['final_eval_mean_return']}, "
          f"success rate {report['final_success_rate']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.variant:
        raise UsageError(f"--variant is required ({', '.join(metaloop.ABLATIONS)})")
    return cmd_train(args, variant=args.variant)


def cmd_eval(args) -> int:
    run_dir = Path(args.out or args.run_dir or "")
    cfg = load_run(run_dir)
    it = resolve_checkpoint(run_dir, cfg, args.checkpoint)
    if args.n_test_tasks is not None:
        if args.n_test_tasks < 1:
            raise UsageError("--n-test-tasks must be >= 1")
        cfg = replace(cfg, n_test_tasks=args.n_test_tasks)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    system, test_tasks = restore_system(run_dir, cfg, it)
    seeds = list(range(args.seeds))
    rep = metaloop.evaluate(system, test_tasks, cfg.adapt_episodes, cfg.episode_length, seeds)
    print(f"checkpoint {it}: {len(test_tasks)} test tasks x {len(seeds)} seeds")
    print(f"{'task':>4} {'seed':>4} {'final_return':>14} {'success':>7}")
    k = 0
    for seed in seeds:
        for task in test_tasks:
            print(f"{task.index:>4} {seed:>4} {rep.task_final_returns[k]:>14.6f} {int(rep.task_success[k]):>7}")
            k += 1
    print(f"mean_final_return {rep.mean_final_return:.6f}  success_rate {rep.success_rate:.4f}")
    path = run_dir / EVAL_NAME
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["checkpoint", "n_test_tasks", "seeds", "mean_final_return", "success_rate"])
        w.writerow([it, len(test_tasks), len(seeds), repr(rep.mean_final_return), repr(rep.success_rate)])
    return EXIT_OK


def write_grid_csv(path: Path, xs, ys, values) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["y\\x"] + [repr(float(x)) for x in xs])
        for y, row in zip(ys, values):
            w.writerow([repr(float(y))] + [repr(float(v)) for v in row])


def read_grid_csv(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path) as f:
        rows = list(csv.reader(f))
    xs = np.array([float(v) for v in rows[0][1:]])
    ys = np.array([float(r[0]) for r in rows[1:]])
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return xs, ys, vals


def cmd_heatmap(args) -> int:
    run_dir = Path(args.out or args.run_dir or "")
    cfg = load_run(run_dir)
    if cfg.family not in metaloop.envkit.POINT_FAMILIES:
        raise UsageError("heatmaps are defined for point-robot families only")
    it = resolve_checkpoint(run_dir, cfg, args.checkpoint)
    if args.grid_n < 2:
        raise UsageError("--grid-n must be >= 2")
    system, test_tasks = restore_system(run_dir, cfg, it)
    if not system.has_predictors:
        raise UsageError(f"variant {cfg.variant!r} has no predictors to draw a heatmap from")
    hm = metaloop.heatmap_intrinsic(system, system.train_tasks, args.grid_n, seed=cfg.seed)
    out = run_dir / HEAT_DIR
    out.mkdir(exist_ok=True)
    stem = f"{it:06d}"
    write_grid_csv(out / f"r_int_{stem}.csv", hm.xs, hm.ys, hm.r_int)
    write_grid_csv(out / f"l_pred_{stem}.csv", hm.xs, hm.ys, hm.l_pred)
    write_grid_csv(out / f"l_pred_task_{stem}.csv", hm.xs, hm.ys, hm.l_task)
    write_heatmap_svg(out / f"r_int_{stem}.svg", hm.xs, hm.ys, hm.r_int, f"intrinsic reward, checkpoint {it}")
    write_heatmap_svg(out / f"l_pred_{stem}.svg", hm.xs, hm.ys, hm.l_pred, f"L_pred, checkpoint {it}")
    regions = metaloop.region_means(hm)
    corr = float(np.corrcoef(hm.r_int.ravel(), hm.l_pred.ravel())[0, 1])
    summary = {"checkpoint": it, "grid_n": args.grid_n, "corr_r_int_l_pred": _json_num(corr),
               **{k: _json_num(v) for k, v in regions.items()}}
    (out / f"summary_{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"heatmap checkpoint {it}: goal_band {regions['goal_band']:.6f} origin {regions['origin']:.6f} "
          f"corr(r_int, L_pred) {corr:.4f} -> {out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    seed = 0 if args.seed is None else args.seed
    offset = CORRUPT_CONST_OFFSET if args.corrupt_const else 0.0
    worst, bad = 0.0, []
    print(f"{'inst':>4} {'tasks':>5} {'H':>2} {'lhs':>22} {'rhs':>22} {'diff':>10}")
    for inst in oracle.random_instances(args.instances, seed):
        d = oracle.verify_decomposition(inst.prior, inst.policy, inst.H, const_offset=offset)
        print(f"{inst.index:>4} {len(inst.prior.tasks):>5} {inst.H:>2} {d.lhs:>22.15e} {d.rhs:>22.15e} {d.diff:>10.3e}")
        worst = max(worst, d.diff)
        if not d.diff < ORACLE_TOL:
            bad.append((inst, d))
    print(f"worst |lhs - rhs| = {worst:.3e} over {args.instances} instances (tolerance {ORACLE_TOL:g})")
    if bad:
        for inst, d in bad:
            print(f"VIOLATION diff={d.diff:.3e} const={d.const:.6e}\n{inst.describe()}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.draws < 1:
        raise UsageError("--draws must be >= 1")
    if args.flip_sign:
        with nk.flipped_rule("tanh"):
            results = gradcheck.run_all(seed, args.draws)
    else:
        results = gradcheck.run_all(seed, args.draws)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metacure", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        if out:
            p.add_argument("--out", metavar="DIR")
        p.add_argument("--workers", type=int, default=1, metavar="N")
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--checkpoint", metavar="ID")

    p = sub.add_parser("train", help="meta-train into a run directory")
    common(p)
    p = sub.add_parser("ablate", help="meta-train an ablation variant")
    common(p)
    p.add_argument("--variant", choices=metaloop.ABLATIONS)
    for name, helptext in (("eval", "evaluate a checkpoint on held-out tasks"),
                           ("heatmap", "write intrinsic-reward grids for a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("run_dir", nargs="?", help="run directory (same as --out)")
        if name == "eval":
            p.add_argument("--n-test-tasks", type=int)
            p.add_argument("--seeds", type=int, default=5)
        else:
            p.add_argument("--grid-n", type=int, default=31)
    p = sub.add_parser("oracle", help="check the exact information decomposition on random tabular instances")
    common(p, config=False, out=False)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--corrupt-const", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("gradcheck", help="finite-difference check of every loss family")
    common(p, config=False, out=False)
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--flip-sign", action="store_true", help=argparse.SUPPRESS)
    return parser


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "oracle": cmd_oracle, "gradcheck": cmd_gradcheck}


def _setup_logging() -> None:
    level = os.environ.get("METACURE_LOG", "quiet").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"METACURE_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("metacure").setLevel(LOG_LEVELS[level])


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (nk.NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
