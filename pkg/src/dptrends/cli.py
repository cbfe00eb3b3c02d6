"""Command-line interface: run, certify, generate, check-example."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
from pathlib import Path

from . import accountant, bounding, demo, pipeline, synthetic
from .bounding import DEFAULT_POLICY
from .noise import SigmaTable, load_sigma_table
from .pipeline import NumericalError, PipelineConfig, StageError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _add_run_parser(subparsers) -> None:
    p = subparsers.add_parser("run", help="run the full aggregation pipeline")
    p.add_argument("--config", type=Path, help="key = value file overriding defaults")
    p.add_argument("--registry", type=Path, help="region registry CSV")
    p.add_argument("--events", type=Path, help="events CSV")
    p.add_argument("--output", type=Path, help="release CSV to write")
    p.add_argument("--scaling-state", type=Path, help="scaling state JSON (created on first release)")
    p.add_argument("--sigma-table", type=Path, help="sigma table CSV (default: built-in)")
    p.add_argument("--seed", type=int, help="master seed for noise")
    p.add_argument("--delta", type=float, help="delta for the certified guarantee")
    p.add_argument("--confidence", type=float, help="reliability filter confidence")
    p.add_argument("--relative-tolerance", type=float, help="reliability filter tolerance")
    p.add_argument("--sparsity-window-start", type=dt.date.fromisoformat)
    p.add_argument("--sparsity-window-end", type=dt.date.fromisoformat)
    p.add_argument("--sparsity-threshold", type=int)
    p.add_argument("--sigma-scale", type=float, help="test hook: multiply all sigmas (0 = no noise)")
    p.add_argument("--absent-as-zero", action="store_true", default=None)
    p.add_argument("--noise-empty-cells", action="store_true", default=None)
    p.add_argument("--secure-rng", action="store_true", default=None)
    p.add_argument("--strict", action="store_true", default=None)
    p.add_argument("--release-id", help="identifier stored when the scaling factor is fixed")
    p.add_argument("--figures", action="store_true", help="render report figures next to the output")


_CONFIG_DEFAULTS = {
    "registry": None,
    "events": None,
    "output": Path("release.csv"),
    "scaling_state": Path("scaling_state.json"),
    "sigma_table": None,
    "seed": None,
    "delta": 1e-5,
    "confidence": 0.80,
    "relative_tolerance": 0.15,
    "sparsity_window_start": dt.date(2021, 1, 4),
    "sparsity_window_end": dt.date(2021, 5, 31),
    "sparsity_threshold": 3,
    "sigma_scale": 1.0,
    "absent_as_zero": False,
    "noise_empty_cells": False,
    "secure_rng": False,
    "strict": False,
    "release_id": None,
}

_PATH_KEYS = {"registry", "events", "output", "scaling_state", "sigma_table"}
_BOOL_KEYS = {"absent_as_zero", "noise_empty_cells", "secure_rng", "strict"}


def _parse_config_file(path: Path) -> dict:
    """Parse a `key = value` file; keys mirror the run flags (snake_case)."""
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_DEFAULTS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value: str):
    if key in _PATH_KEYS:
        return Path(value)
    if key in _BOOL_KEYS:
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ValidationError(f"bad boolean for {key}: {value!r}")
    if key == "seed" or key == "sparsity_threshold":
        return int(value)
    if key in ("delta", "confidence", "relative_tolerance", "sigma_scale"):
        return float(value)
    if key.startswith("sparsity_window"):
        return dt.date.fromisoformat(value)
    return value


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    settings = dict(_CONFIG_DEFAULTS)
    if args.config:
        if not args.config.is_file():
            raise ValidationError(f"config file not found: {args.config}")
        for key, value in _parse_config_file(args.config).items():
            settings[key] = _coerce(key, value)
    for key in _CONFIG_DEFAULTS:
        arg = getattr(args, key, None)
        if arg is not None:
            settings[key] = arg
    if settings["registry"] is None or settings["events"] is None:
        raise ValidationError("--registry and --events are required (flag or config file)")
    return PipelineConfig(
        registry_path=settings["registry"],
        events_path=settings["events"],
        output_path=settings["output"],
        scaling_state_path=settings["scaling_state"],
        sigma_table_path=settings["sigma_table"],
        delta=settings["delta"],
        confidence=settings["confidence"],
        relative_tolerance=settings["relative_tolerance"],
        sparsity_window_start=settings["sparsity_window_start"],
        sparsity_window_end=settings["sparsity_window_end"],
        sparsity_threshold=settings["sparsity_threshold"],
        seed=settings["seed"],
        secure_rng=settings["secure_rng"],
        absent_as_zero=settings["absent_as_zero"],
        noise_empty_cells=settings["noise_empty_cells"],
        sigma_scale=settings["sigma_scale"],
        strict=settings["strict"],
        release_id=settings["release_id"],
    )


def _cmd_run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    report = pipeline.run(config)
    report_path = Path(config.output_path).with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.figures:
        from . import plots  # matplotlib import deferred to the report path

        written = plots.render_run_figures(config.output_path, report, Path(config.output_path).parent)
        for path in written:
            print(f"figure: {path}")
    print(f"release: {config.output_path} ({report.rows_released} rows)")
    print(f"report:  {report_path}")
    print(f"guarantee: epsilon={report.epsilon:.6g} delta={report.delta:g}")
    return EXIT_OK


def _cmd_certify(args: argparse.Namespace) -> int:
    sigmas = load_sigma_table(args.sigma_table) if args.sigma_table else SigmaTable.default()
    cert = accountant.certify(sigmas, args.delta)
    print(json.dumps(cert.to_dict(), indent=2))
    return EXIT_OK


def _cmd_generate(args: argparse.Namespace) -> int:
    from .geo import load_registry

    spec = synthetic.load_spec(args.spec)
    registry = load_registry(args.registry)
    events = synthetic.generate_events(spec, registry)
    synthetic.write_events_csv(events, args.output)
    print(f"wrote {len(events)} events to {args.output}")
    return EXIT_OK


def _cmd_check_example(_: argparse.Namespace) -> int:
    """Replay the built-in three-search demo and print both count tables."""
    registry = demo.demo_registry()
    events = demo.demo_events()
    search_no = {id(event): i for i, event in enumerate(events, start=1)}

    by_day: dict = {}
    rows: dict = {}
    for event in events:
        for cand in bounding.expand(event, registry):
            by_day.setdefault(event.date, []).append(cand)
            rows.setdefault(cand.key, (cand.region_type, []))[1].append(search_no[id(event)])

    print("counts before bounding (searches mapping to each):")
    for key in sorted(rows, key=lambda k: k.sort_key()):
        rtype, searches = rows[key]
        print(
            f"  <{key.week.iso_week}, {key.category.value}, {key.region_id}> "
            f"<- searches {sorted(searches)}  level={key.level.value} type={rtype.value}"
        )

    contributions = []
    for date in sorted(by_day):
        contributions.extend(bounding.bound_user_day(by_day[date], DEFAULT_POLICY))
    table = bounding.aggregate(contributions)

    print("bounded counts:")
    for key, count in table.sorted_items():
        print(f"  <{key.week.iso_week}, {key.category.value}, {key.region_id}> = {count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dptrends",
        description="Differentially private aggregation of search-event logs "
        "into weekly regional trend releases.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    _add_run_parser(subparsers)

    p = subparsers.add_parser("certify", help="print the (epsilon, delta) guarantee as JSON")
    p.add_argument("--sigma-table", type=Path, help="sigma table CSV (default: built-in)")
    p.add_argument("--delta", type=float, default=1e-5)

    p = subparsers.add_parser("generate", help="generate a synthetic events corpus")
    p.add_argument("--spec", type=Path, required=True, help="synthetic spec JSON")
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    subparsers.add_parser(
        "check-example", help="replay the built-in bounding demo and print its tables"
    )
    return parser


_COMMANDS = {
    "run": _cmd_run,
    "certify": _cmd_certify,
    "generate": _cmd_generate,
    "check-example": _cmd_check_example,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (NumericalError, accountant.ConvergenceError)):
            return EXIT_NUMERICAL
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
