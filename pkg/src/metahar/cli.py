"""Command-line entry point: ``metahar {train,sweep,report,synth-data,validate-data}``.

Exit codes: 0 success, 1 configuration error, 2 data error (including an
empty report directory), 3 training failure (including runs where some seeds
failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
import torch

from . import experiment as ex
from .errors import ConfigError, DataError, MetaHarError, ShapeError, TrainingError
from .ingest import STANDARD_FRACTIONS, load_dataset, synth_domains, synth_manifest, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

log = logging.getLogger("metahar")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON document or flat key=value file with run settings")
    p.add_argument("--preset", choices=("auto", "full", "synth"), default="auto",
                   help="starting point before the config file and flags are applied; 'auto' picks 'synth' "
                        "when no dataset is given and 'full' otherwise")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set meta.alpha=0.001 (repeatable)")
    p.add_argument("--output", help=f"output root (beats ${ex.OUTPUT_ROOT_ENV} and the config file)")
    keys = p.add_argument_group("config keys", "every RunConfig field is also available as a flag")
    for key in ex.known_keys():
        if key == "output_dir":
            continue
        keys.add_argument(f"--{key}", dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metahar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one LODO experiment over all configured seeds")
    _add_run_options(p)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("sweep", help="run fractions x targets x methods and tabulate accuracy")
    _add_run_options(p)
    p.add_argument("--fractions", default=",".join(f"{f:g}" for f in STANDARD_FRACTIONS))
    p.add_argument("--targets", default=None, help="comma-separated target group indices (default: all)")
    p.add_argument("--methods", default=",".join(ex.METHODS))
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("report", help="aggregate record.json files below a directory")
    p.add_argument("records_dir")
    p.add_argument("--out", help="where to write results.csv / results.json / plot (default: records_dir)")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("synth-data", help="write a synthetic dataset in the canonical layout")
    p.add_argument("out_dir")
    p.add_argument("--data_seed", type=int, default=0)
    for f in ex.dataclasses.fields(ex.SynthSpec):
        p.add_argument(f"--synth.{f.name}", dest=f"cfg:synth.{f.name}", default=argparse.SUPPRESS, metavar="V")

    p = sub.add_parser("validate-data", help="load and validate a dataset directory")
    p.add_argument("data_dir")
    return parser


def _cfg_flags(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}


def _parse_set(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> ex.RunConfig:
    overrides = {}
    if args.config:
        overrides.update(ex.load_config_file(args.config))
    overrides.update(_cfg_flags(args))
    overrides.update(_parse_set(args.set))
    preset = args.preset
    if preset == "auto":
        preset = "full" if overrides.get("dataset") not in (None, "", "none", "None") else "synth"
    base = ex.synthetic_preset() if preset == "synth" else ex.RunConfig()
    cfg = ex.apply_overrides(base, overrides)
    return ex.resolve_output_dir(cfg, args.output)


def _csv(text, tp):
    try:
        return [tp(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, default=str))
        return EXIT_OK
    rec = ex.run_experiment(cfg)
    accs = ", ".join("failed" if a is None else f"{100 * a:.2f}" for a in rec.accuracies)
    summary = "n/a" if rec.mean is None else f"{100 * rec.mean:.2f} +/- {100 * rec.std:.2f}"
    print(f"{rec.method} target={rec.target} fraction={rec.fraction:g}: {summary}  [{accs}]")
    print(f"record: {rec.path}")
    if rec.partial:
        for seed, err in rec.failures.items():
            print(f"seed {seed} failed: {err}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    fractions = _csv(args.fractions, float)
    targets = None if args.targets is None else _csv(args.targets, int)
    methods = _csv(args.methods, str)
    unknown = [m for m in methods if m not in ex.METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}")
    result = ex.sweep(cfg, fractions, targets, methods, plot=not args.no_plot)
    print(open(result["csv"], encoding="utf-8").read().rstrip())
    return EXIT_TRAINING if any(c["partial"] for c in result["cells"]) else EXIT_OK


def cmd_report(args) -> int:
    result = ex.report(args.records_dir, args.out, plot=not args.no_plot)
    print(ex.format_report(result))
    return EXIT_OK if result["n_records"] else EXIT_DATA


def cmd_synth_data(args) -> int:
    spec = ex.apply_overrides(ex.RunConfig(), _cfg_flags(args)).synth
    doms = synth_domains(spec, np.random.default_rng(args.data_seed))
    manifest = write_dataset(args.out_dir, synth_manifest(spec), {d.domain: d for d in doms})
    print(f"wrote {sum(len(s['files']) for s in manifest.subjects)} windows for "
          f"{len(manifest.subjects)} subjects to {args.out_dir}")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    manifest, datasets = load_dataset(args.data_dir)
    total = sum(len(d) for d in datasets.values())
    print(f"{manifest.name}: {len(datasets)} subjects, {total} windows, L={manifest.L} M={manifest.M} "
          f"C={manifest.C}, {len(manifest.triad_channel_groups)} triads: OK")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "synth-data": cmd_synth_data,
    "validate-data": cmd_validate_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a usage error
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except MetaHarError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
