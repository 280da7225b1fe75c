"""Command-line front end: ``abmapper {train,eval,render,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from .artifacts import CONFIG_FILE, MAP_FILE, grid_for, load_run_checkpoint, render_trace, save_run_checkpoint
from .config import parse_config
from .scenarios import BUNDLES
from .training import EVAL_FIELDS, evaluate, train

log = logging.getLogger("abmapper")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--scenario", choices=sorted(BUNDLES), help="packaged scenario (sets defaults and map)")
    p.add_argument("--mode", help="ABMapper, AttentionOnly, BicNetOnly or MapperBaseline")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abmapper", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write a run directory")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="run directory")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=None, help="default: eval_episodes of the run")
    p.add_argument("--seed", type=int, help="evaluation seed (default: the run's seed)")
    p.add_argument("--out", type=Path, help="CSV file (default: stdout)")

    p = sub.add_parser("render", help="text trace of one greedy episode")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0, help="world seed")
    p.add_argument("--out", type=Path, help="trace file (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference audit of every layer and network")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


def _config_from(args):
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("mode", "seed", "episodes"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    return parse_config(text, overrides, scenario=args.scenario)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train(args) -> int:
    cfg = _config_from(args)
    grid = grid_for(cfg)
    out: Path = args.out
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    (out / MAP_FILE).write_text(grid.render(), encoding="utf-8")
    t0 = time.perf_counter()

    def on_eval(episode, learner, res):
        save_run_checkpoint(ckpt_dir / f"ep{episode:06d}.ckpt", cfg, grid, learner.sets, episode)
        log.info("episode %d  eval success %.3f  (%.0fs)", episode, res.success_mean or 0.0,
                 time.perf_counter() - t0)

    result = train(cfg, grid, on_eval=on_eval)
    (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    (out / "eval.csv").write_text(result.eval_csv(), encoding="utf-8")
    _write_csv(out / "timing.csv", ["episode", "wall_clock_s"],
               [[r["episode"], f"{r['wall_clock_s']:.3f}"] for r in result.timing])
    final = save_run_checkpoint(ckpt_dir / "final.ckpt", cfg, grid, result.learner.sets, cfg.episodes)
    (out / "trace.txt").write_text(render_trace(cfg, grid, result.learner.sets, cfg.seed), encoding="utf-8")
    last = result.evals[-1] if result.evals else {}
    print(f"trained {cfg.mode} on {cfg.scenario} for {cfg.episodes} episodes; "
          f"final eval success {last.get('success_mean')}; checkpoint {final}")
    return 0


def cmd_eval(args) -> int:
    cfg, grid, sets, _ = load_run_checkpoint(args.checkpoint)
    n = cfg.eval_episodes if args.episodes is None else args.episodes
    res = evaluate(sets, cfg, grid, n, seed=args.seed)
    header = ["episodes"] + EVAL_FIELDS[1:]
    rows = [] if res.episodes == 0 else [[res.episodes] + [f"{getattr(res, k):.6g}" for k in EVAL_FIELDS[1:]]]
    if args.out:
        _write_csv(args.out, header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return 0


def cmd_render(args) -> int:
    cfg, grid, sets, _ = load_run_checkpoint(args.checkpoint)
    text = render_trace(cfg, grid, sets, args.seed)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(trials=args.trials, seed=args.seed, tol=args.tol,
                        report=lambda r: print(r.line(), flush=True))
    ok = all(r.passed for r in results)
    print(f"{'ALL PASS' if ok else 'FAILURES'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
