"""Command-line entry point: ``gnnood run|compare|ablate|ib-verify|gen-data``."""

import argparse
import json
import sys

from . import experiment, ib
from .errors import ConfigError, DataError, GnnOodError, NumericalError
from .graph import GeneratorConfig, gen_concept_shift, gen_covariate_shift, save_graph


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def cmd_run(args):
    cfg = experiment.ExperimentConfig.load(args.config, paper_grid=True if args.paper_grid else None)
    report = experiment.run_experiment(cfg, threads=args.threads)
    _write_json(report, args.out or cfg.output)
    print(experiment.format_table(report), file=sys.stderr)
    return 0


def cmd_compare(args):
    sig = experiment.compare_models(_read_json(args.a), _read_json(args.b))
    _write_json(sig, args.out)
    return 0


def cmd_ablate(args):
    cfg = experiment.ExperimentConfig.load(args.config)
    report = experiment.ablation_suite(cfg, threads=args.threads)
    _write_json(report, args.out or cfg.output)
    print(experiment.format_table(report), file=sys.stderr)
    return 0


def cmd_ib_verify(args):
    _write_json(ib.verify(args.fixture, args.seed), args.out)
    return 0


def cmd_gen_data(args):
    overrides = json.loads(args.config) if args.config else {}
    try:
        cfg = GeneratorConfig.from_dict(overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if args.kind == "covariate":
        g = gen_covariate_shift(cfg, args.seed)
    else:
        g = gen_concept_shift(cfg, args.corr_train, args.corr_ood, args.seed)
    save_graph(g, args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gnnood", description="OOD node-classification experiments with GNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="grid search + multi-seed runs from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--threads", type=int, default=None, help="worker processes (GNNOOD_THREADS overrides)")
    r.add_argument("--paper-grid", action="store_true", help="restrict grid values to the published search space")
    r.add_argument("--out", help="report path (default: config 'output', else stdout)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="paired t-test of two reports' selected models")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("ablate", help="DGat ablation table")
    a.add_argument("--config", required=True)
    a.add_argument("--threads", type=int, default=None)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("ib-verify", help="information-bottleneck / attention correspondence check")
    v.add_argument("--fixture", default="two-blob", choices=["two-blob", "random"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_ib_verify)

    g = sub.add_parser("gen-data", help="write a synthetic distribution-shift graph")
    g.add_argument("--kind", required=True, choices=["covariate", "concept"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corr-train", type=float, default=0.9)
    g.add_argument("--corr-ood", type=float, default=0.1)
    g.add_argument("--config", help="JSON object of generator overrides")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return exc.exit_code
    except GnnOodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
