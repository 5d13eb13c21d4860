"""Command-line entry point: ``embp <subcommand> [options]``.

Settings come from an optional INI file (section ``[experiment]``, or
``[train]`` for training, plus an optional section named after the
subcommand), then ``--set key=value`` pairs, then the dedicated flags.
Lists are comma separated; ``start:stop:step`` expands to an inclusive grid.

Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiments
from .errors import InvalidParameter, NumericalFailure, TrainingDiverged
from .experiments import CSV_SCHEMA_VERSION, ExperimentConfig
from .learn import TrainConfig, TrainedWeights

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

RUNNERS = {
    "mse-snr": experiments.run_mse_vs_snr,
    "ber-snr": experiments.run_ber_vs_snr,
    "init-sens": experiments.run_init_sensitivity,
    "alpha-scan": experiments.run_alpha_scan,
    "iter-trace": experiments.run_iteration_trace,
}
COMPLEX_LISTS = {"channel"}
STRING_LISTS = {"schedules"}
OPTIONAL_KINDS = {"T": int, "K_em_target": int, "weights": str, "channel": list}


def parse_grid(text: str, item=float) -> list:
    """Comma-separated values; numeric ``a:b:step`` entries expand inclusively."""
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if item is float and ":" in part:
            start, stop, step = (float(v) for v in part.split(":"))
            if step <= 0:
                raise InvalidParameter(f"grid step must be positive in {part!r}")
            out += [float(v) for v in np.round(np.arange(start, stop + step / 2, step), 10)]
        else:
            out.append(item(part.replace(" ", "")))
    return out


def _convert(cls, name: str, text: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise InvalidParameter(f"unknown setting {name!r} for {cls.__name__}")
    f = fields[name]
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    kind = OPTIONAL_KINDS[name] if name in OPTIONAL_KINDS else type(default)
    if text.strip().lower() == "none" and name in OPTIONAL_KINDS:
        return None
    try:
        if kind is list or kind is tuple:
            item = complex if name in COMPLEX_LISTS else str if name in STRING_LISTS else float
            values = parse_grid(text, item)
            return tuple(values) if kind is tuple else values
        if kind is bool:
            return text.strip().lower() in ("1", "true", "yes", "on")
        return kind(text.strip())
    except ValueError as exc:
        raise InvalidParameter(f"bad value for {name!r}: {text!r} ({exc})") from None


def build_config(cls, sections, settings: dict):
    values = {}
    for section in sections:
        for key, text in section.items():
            values[key] = _convert(cls, key, text)
    for key, text in settings.items():
        values[key] = _convert(cls, key, text)
    return cls(**values)


def _read_ini(path):
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case sensitive (N, L, T)
    if path is not None:
        if not Path(path).is_file():
            raise InvalidParameter(f"config file {path} not found")
        parser.read(path)
    return parser


def _sections(parser, *names):
    return [dict(parser[n]) for n in names if parser.has_section(n)]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_sidecar(path, command: str, config: dict) -> Path:
    try:
        version = metadata.version("embp")
    except metadata.PackageNotFoundError:
        version = "unknown"
    sidecar = Path(str(path) + ".config.json")
    payload = {"command": command, "csv_schema_version": CSV_SCHEMA_VERSION,
               "package_version": version, "config": config}
    sidecar.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n")
    return sidecar


def _settings(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidParameter(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value
    return out


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embp", description="Blind joint channel estimation and detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(RUNNERS) + ["train"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [experiment]/[train] sections")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--seed", type=int)
        p.add_argument("--blocks", type=int, help="blocks per grid point (batch size for train)")
        p.add_argument("--out", help="CSV output path")
        if name == "train":
            p.add_argument("--weights-out", default="weights.json", help="trained weights file")
        else:
            p.add_argument("--weights", help="trained weights file")
    p = sub.add_parser("schedule-report")
    p.add_argument("weights", help="trained weights file")
    p.add_argument("--out", help="CSV output path")
    return parser


def _run(args) -> None:
    if args.command == "schedule-report":
        weights = TrainedWeights.load(args.weights)
        header, rows = experiments.schedule_report(weights)
        print(" ".join(f"{h:>8}" for h in header))
        for row in rows:
            print(" ".join(f"{_cell(v) if isinstance(v, int) else format(v, '.4f'):>8}" for v in row))
        if args.out:
            write_csv(args.out, header, rows)
            write_sidecar(args.out, args.command, {"weights": args.weights, **weights.to_dict()})
        return
    ini = _read_ini(args.config)
    settings = _settings(args.set)
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.command == "train":
        if args.blocks is not None:
            settings["batch_size"] = str(args.blocks)
        cfg = build_config(TrainConfig, _sections(ini, "train"), settings)
        out = args.out or "training.csv"
        header, rows = experiments.run_training(cfg, args.weights_out)
        resolved = dataclasses.asdict(cfg) | {"weights_out": args.weights_out}
    else:
        if args.blocks is not None:
            settings["blocks"] = str(args.blocks)
        if args.out is not None:
            settings["out"] = args.out
        if args.weights is not None:
            settings["weights"] = args.weights
        cfg = build_config(ExperimentConfig, _sections(ini, "experiment", args.command), settings)
        out = cfg.out
        header, rows = RUNNERS[args.command](cfg)
        resolved = cfg.resolved()
    write_csv(out, header, rows)
    sidecar = write_sidecar(out, args.command, resolved)
    print(f"wrote {len(rows)} rows to {out} (config: {sidecar})")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        _run(args)
    except (InvalidParameter, configparser.Error, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
