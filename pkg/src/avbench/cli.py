"""Command line entry points: run / suite / ablate / plot.

Exit codes: 0 success, 1 run error, 2 configuration error. The output
directory can be overridden with the AVBENCH_OUT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .baselines import AGENT_KINDS
from .harness import (ConfigError, RunConfig, bundled_ablation_grid, emit_plots,
                      load_ablation_grid, output_dir, run_episode, run_suite,
                      run_ablation)
from .world import ScenarioError


def parse_seeds(spec: str) -> tuple[int, ...]:
    """Seed list syntax: '5', '0..99', or '1,2,7'."""
    if ".." in spec:
        a, b = spec.split("..", 1)
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(x) for x in spec.split(","))


def _load_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = RunConfig.from_dict(base)
    overrides = {}
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    if getattr(args, "agent", None):
        overrides["agent"] = args.agent
    if getattr(args, "seeds", None):
        overrides["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="avbench",
                                     description="active-vision tracking test bench")
    parser.add_argument("--version", action="version", version=f"avbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single seeded episode")
    p_run.add_argument("--config", help="JSON RunConfig file")
    p_run.add_argument("--scenario", help="bundled scenario name or path")
    p_run.add_argument("--agent", choices=AGENT_KINDS)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--dump-frames", action="store_true")

    p_suite = sub.add_parser("suite", help="run many seeds and aggregate")
    p_suite.add_argument("--config", help="JSON RunConfig file")
    p_suite.add_argument("--scenario")
    p_suite.add_argument("--agent", choices=AGENT_KINDS)
    p_suite.add_argument("--seeds", help="e.g. 0..99 or 1,2,7")
    p_suite.add_argument("--out")
    p_suite.add_argument("--logs", action="store_true", help="also write episode logs")

    p_abl = sub.add_parser("ablate", help="paired-seed comparison over config variants")
    p_abl.add_argument("--config", help="JSON RunConfig file")
    p_abl.add_argument("--grid", help="JSON variants file (default: bundled grid)")
    p_abl.add_argument("--scenario")
    p_abl.add_argument("--seeds")
    p_abl.add_argument("--out")

    p_plot = sub.add_parser("plot", help="render SVGs from a CSV or episode log")
    p_plot.add_argument("--in", dest="in_path", required=True)
    p_plot.add_argument("--out")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args)
            if args.dump_frames:
                cfg = RunConfig.from_dict({**cfg.to_dict(), "dump_frames": True})
            seed = cfg.seeds[0]
            res = run_episode(cfg, seed)
            out = output_dir(cfg)
            os.makedirs(out, exist_ok=True)
            log_path = os.path.join(out, f"episode_{cfg.agent}_{seed}.jsonl")
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(res.lines) + "\n")
            m = res.metrics
            print(f"episode seed={seed} steps={m.steps_survived} recall={m.recall:.3f} "
                  f"precision={m.precision:.3f} aae={m.aae_mean:.2f}deg "
                  f"auc={m.auc_judd:.3f}")
            print(f"log: {log_path}")
        elif args.command == "suite":
            cfg = _load_config(args)
            out = run_suite(cfg, write_logs=args.logs)
            print(f"csv: {out['csv']}")
            for k, v in out["summary"].items():
                if isinstance(v, dict):
                    print(f"  {k}: mean={v['mean']:.4f} std={v['std']:.4f}")
        elif args.command == "ablate":
            cfg = _load_config(args)
            grid = load_ablation_grid(args.grid) if args.grid else bundled_ablation_grid()
            out = run_ablation(cfg, grid)
            print(f"csv: {out['csv']}")
            for variant, eps in out["results"].items():
                rec = sum(m.recall for m in eps) / len(eps)
                pre = sum(m.precision for m in eps) / len(eps)
                print(f"  {variant}: recall={rec:.3f} precision={pre:.3f}")
        elif args.command == "plot":
            written = emit_plots(args.in_path, args.out)
            for p in written:
                print(p)
    except (ConfigError, ScenarioError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # run failure
        print(f"run error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
