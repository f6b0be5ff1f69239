"""Command-line interface.

Usage::

    pfsnap simulate --seed 7 --out bundle
    pfsnap run --config bundle/config.ini --out results
    pfsnap ingest|spi|pfs|estimate|quantile|report --config run.ini

Failures print one JSON object on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import PfsnapError, StageError
from .pipeline import STAGES, PipelineConfig, load_config, run_pipeline, run_stage, write_config
from .synth import SynthConfig, generate_panel, write_bundle


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--weights", choices=("survey", "none"))
    common.add_argument("--spi", choices=("weighted", "unweighted"))
    common.add_argument("--fe", choices=("absorb", "mundlak"))
    for name in ("panel", "policy", "prevalence", "cpi", "unemployment"):
        common.add_argument(f"--{name}", help=f"{name} CSV (overrides the config)")

    p = argparse.ArgumentParser(prog="pfsnap", description="PFS construction and SNAP policy-index IV pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic input bundle")
    sim.add_argument("--individuals", type=int)
    sim.add_argument("--waves", type=int)
    return p


def _config(args) -> PipelineConfig:
    overrides = {
        "out": str(Path(args.out).resolve()) if args.out else None,
        "seed": args.seed,
        "weights": args.weights,
        "spi": args.spi,
        "fe": args.fe,
        **{k: str(Path(getattr(args, k)).resolve()) if getattr(args, k) else None
           for k in ("panel", "policy", "prevalence", "cpi", "unemployment")},
    }
    if args.config:
        return load_config(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def _simulate(args) -> dict:
    cfg = SynthConfig()
    changes = {"seed": args.seed, "n_individuals": args.individuals, "n_waves": args.waves}
    cfg = replace(cfg, **{k: v for k, v in changes.items() if v is not None})
    out = Path(args.out or "bundle")
    paths = write_bundle(generate_panel(cfg), out)
    run_cfg = PipelineConfig(
        panel=paths["panel"],
        policy=paths["policy"],
        prevalence=paths["prevalence"],
        cpi=paths["cpi"],
        unemployment=paths["unemployment"],
        out=str(out / "results"),
        seed=cfg.seed,
    )
    write_config(run_cfg, out / "config.ini")
    return {"written": sorted(Path(p).name for p in paths.values()) + ["config.ini"]}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "simulate":
            result = _simulate(args)
        else:
            cfg = _config(args)
            if args.command == "run":
                result = run_pipeline(cfg).diagnostics
            else:
                result = run_stage(cfg, args.command)
    except StageError as exc:
        _fail(exc.stage, type(exc.__cause__ or exc).__name__, exc.detail)
        return 1
    except (PfsnapError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        _fail(args.command, type(exc).__name__, str(exc))
        return 1
    print(json.dumps({"command": args.command, "status": "ok", "result": result}, default=str, sort_keys=True))
    return 0


def _fail(stage, kind, message):
    print(json.dumps({"status": "error", "stage": stage, "error": kind, "message": message}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
