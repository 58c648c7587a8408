"""``conceptope`` command line: gen, eval, learn, intervene, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from conceptope.errors import ConfigError, DataError, DivergenceError, EnumerationBudgetError
from conceptope.harness import config as config_mod
from conceptope.harness import pipelines

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conceptope", description="Concept-based off-policy evaluation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, data=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override [experiment] seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, help="worker processes")
        if data:
            sp.add_argument("--data", required=True, help="directory written by `conceptope gen`")
        return sp

    add("gen", "train the policy pair and write trajectory splits", data=False)
    add("eval", "estimator sweep over sample sizes and seeds")
    learn = add("learn", "train the concept model")
    learn.add_argument("--stages", help="comma separated epoch budgets, overrides [learn] stages")
    inter = add("intervene", "evaluate intervention strategies on learned concepts")
    inter.add_argument("--checkpoint", help="overrides [intervene] checkpoint")
    add("ablate", "K-means abstraction sweep and IPS histograms")
    rep = sub.add_parser("report", help="verify result bundles and merge their tables")
    rep.add_argument("bundles", nargs="+", help="result directories with a manifest")
    rep.add_argument("--out", required=True)
    return p


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, jobs=args.jobs))
    if getattr(args, "stages", None):
        try:
            stages = tuple(int(x) for x in args.stages.split(","))
        except ValueError as exc:
            raise ConfigError(f"--stages: cannot parse {args.stages!r}") from exc
        cfg = replace(cfg, learn=replace(cfg.learn, stages=stages))
    if getattr(args, "checkpoint", None):
        cfg = replace(cfg, intervene=replace(cfg.intervene, checkpoint=args.checkpoint))
    config_mod.validate(cfg)
    return cfg


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        path = pipelines.run_report(args.bundles, args.out)
        print(path)
        return EXIT_OK
    cfg = _load_config(args)
    if args.command == "gen":
        path = pipelines.run_gen(cfg, args.out)
    else:
        fn = {"eval": pipelines.run_eval, "learn": pipelines.run_learn, "intervene": pipelines.run_intervene,
              "ablate": pipelines.run_ablate}[args.command]
        path = fn(cfg, Path(args.data), args.out)
    print(path)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        code = run(argv)
    except (ConfigError, EnumerationBudgetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    return code


if __name__ == "__main__":
    sys.exit(main())
