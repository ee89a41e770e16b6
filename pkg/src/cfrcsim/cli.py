"""Command-line interface.

Typical flow::

    cfrcsim gen-micro     --config run.ini --out runs/micro
    cfrcsim simulate      --config run.ini --out runs/cases --jobs 4
    cfrcsim build-dataset --config run.ini --cases runs/cases --out runs/data
    cfrcsim train         --config run.ini --dataset runs/data \
                          --stage damage1 --out runs/models
    ...same for damage2, uts, necking (in that order)...
    cfrcsim export-bundle --config run.ini --models runs/models \
                          --out runs/bundle
    cfrcsim rollout       --config run.ini --dataset runs/data \
                          --bundle runs/bundle --out runs/pred
    cfrcsim evaluate      --config run.ini --dataset runs/data \
                          --pred runs/pred --out runs/eval
    cfrcsim report        --config run.ini --eval runs/eval --out runs/report

Exit codes: 0 success, 2 configuration/usage errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, pipeline, rollout, stages
from .pipeline import ConfigError, load_pipeline_config, write_provenance


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="INI configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfrcsim",
        description="composite deformation surrogate pipeline")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-micro", help="generate fiber layouts and masks")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None,
                   help="number of layouts (default: [simulate] n_cases)")
    p.add_argument("--seed", type=int, default=None,
                   help="first seed (default: [simulate] base_seed)")
    p.set_defaults(func=cmd_gen_micro)

    p = sub.add_parser("simulate",
                       help="run the constitutive driver over all seeds")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-dataset",
                       help="split cases, reduce/augment, fit normalization")
    _add_config(p)
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train one surrogate stage")
    _add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage", required=True,
                   choices=list(stages.STAGE_ORDER))
    p.add_argument("--out", required=True, help="models directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-bundle",
                       help="collect the four stage checkpoints")
    _add_config(p)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_bundle)

    p = sub.add_parser("rollout", help="integrate predicted curves")
    _add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--bundle", default=None,
                   help="trained bundle (omit with --echo-oracle)")
    p.add_argument("--out", required=True)
    p.add_argument("--echo-oracle", action="store_true",
                   help="replay recorded increments through the rollout "
                        "loop instead of the networks (wiring check)")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="score rollouts against references")
    _add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="plots and cohort summary")
    _add_config(p)
    p.add_argument("--eval", dest="eval_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def cmd_gen_micro(args) -> int:
    cfg = load_pipeline_config(args.config)
    written = pipeline.generate_layouts(cfg, args.out, count=args.count,
                                        seed=args.seed)
    write_provenance(args.out, "gen-micro", args.config,
                     {"n_layouts": len(written)})
    print(f"wrote {len(written)} layouts to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_pipeline_config(args.config)
    names = pipeline.simulate_cases(cfg, args.out, jobs=max(args.jobs, 1),
                                    config_dir=Path(args.config).parent)
    write_provenance(args.out, "simulate", args.config,
                     {"n_cases": len(names)})
    print(f"simulated {len(names)} cases into {args.out}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = load_pipeline_config(args.config)
    split = pipeline.build_dataset(cfg, args.cases, args.out)
    write_provenance(args.out, "build-dataset", args.config,
                     {"n_train": len(split["train"]),
                      "n_test": len(split["test"])})
    print(f"dataset at {args.out}: {len(split['train'])} train / "
          f"{len(split['test'])} test cases")
    return 0


def cmd_train(args) -> int:
    cfg = load_pipeline_config(args.config)
    info = pipeline.train_stage_command(cfg, args.dataset, args.stage,
                                        args.out)
    write_provenance(args.out, f"train-{args.stage}", args.config, info,
                     name=f"provenance_{args.stage}.json")
    print(f"trained {args.stage}: {info['epochs_run']} epochs, "
          f"final loss {info['final_loss']:.6f} "
          f"({info['samples']} samples)")
    return 0


def cmd_export_bundle(args) -> int:
    cfg = load_pipeline_config(args.config)
    path = pipeline.export_bundle(cfg, args.models, args.out)
    write_provenance(args.out, "export-bundle", args.config)
    print(f"bundle written to {path}")
    return 0


def cmd_rollout(args) -> int:
    cfg = load_pipeline_config(args.config)
    train_seqs, test_seqs, stats = pipeline.load_dataset(args.dataset)
    cases = train_seqs if args.split == "train" else test_seqs
    if not cases:
        raise ConfigError(f"dataset split {args.split!r} is empty")
    if args.echo_oracle:
        names = pipeline.rollout_cases(cfg, cases, args.out, echo=True)
        mode = "echo"
    else:
        if args.bundle is None:
            raise ConfigError("--bundle is required unless --echo-oracle")
        models, bundle_stats, bundle_cfg = rollout.load_bundle(args.bundle)
        if not bundle_stats.matches(stats):
            raise ConfigError("bundle normalization stats disagree with "
                              "the dataset stats")
        # the trained artifact carries its own integration settings
        cfg.rollout_cfg = bundle_cfg
        names = pipeline.rollout_cases(cfg, cases, args.out, models=models,
                                       stats=stats)
        mode = "network"
    write_provenance(args.out, "rollout", args.config,
                     {"mode": mode, "split": args.split,
                      "n_cases": len(names)})
    print(f"rolled out {len(names)} {args.split} cases ({mode}) "
          f"into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_pipeline_config(args.config)
    del cfg  # validated for provenance/config errors only
    train_seqs, test_seqs, _stats = pipeline.load_dataset(args.dataset)
    cases = train_seqs if args.split == "train" else test_seqs
    if not cases:
        raise ConfigError(f"dataset split {args.split!r} is empty")
    summary = pipeline.evaluate_cases(cases, args.pred, args.out)
    write_provenance(args.out, "evaluate", args.config, summary)
    print(f"evaluated {summary['n_cases']} cases: mean curve error "
          f"{summary['mean_curve_rmse_pct']:.2f}% of peak, "
          f"{summary['fraction_below_20pct'] * 100:.0f}% below 20%")
    return 0


def cmd_report(args) -> int:
    cfg = load_pipeline_config(args.config)
    del cfg
    summary = pipeline.report_cases(args.eval_dir, args.out)
    write_provenance(args.out, "report", args.config, summary)
    print(f"report written to {args.out} "
          f"({summary['n_cases']} cases, median "
          f"{summary['median_curve_rmse_pct']:.2f}%)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
