"""End-to-end orchestration: ingest -> bound -> noise -> account -> release."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import accountant, bounding, noise, postprocess
from .bounding import ALL_CONSTRAINTS, DEFAULT_POLICY, SMALL_POSTAL, DropPolicy, RawCountTable
from .geo import RegionType, Registry, admissible, load_registry
from .model import Category, CountKey, GeoLevel, SearchEvent, parse_label
from .noise import NoiseSource, NoisyCell, SigmaTable, load_sigma_table
from .postprocess import (
    NormalizedPoint,
    ReliabilityParams,
    ScalingState,
    SparsityWindow,
    read_scaling_state,
    write_scaling_state,
)
from .synthetic import EVENTS_HEADER

logger = logging.getLogger(__name__)

#: Events fully discarded because none of their regions was large enough to report.
NO_ADMISSIBLE_REGION = "no_admissible_region"


class ValidationError(ValueError):
    """Bad inputs or configuration; maps to exit code 2."""


class NumericalError(ArithmeticError):
    """Numerical failure (non-convergence, unscalable series); maps to exit code 3."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    registry_path: Path
    events_path: Path
    output_path: Path
    scaling_state_path: Path
    sigma_table_path: Path | None = None
    delta: float = 1e-5
    confidence: float = 0.80
    relative_tolerance: float = 0.15
    sparsity_window_start: dt.date = dt.date(2021, 1, 4)
    sparsity_window_end: dt.date = dt.date(2021, 5, 31)
    sparsity_threshold: int = 3
    seed: int | None = None
    secure_rng: bool = False
    absent_as_zero: bool = False
    noise_empty_cells: bool = False
    sigma_scale: float = 1.0
    strict: bool = False
    release_id: str | None = None

    def validate(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must be in (0, 1), got {self.delta}")
        if self.seed is None and not self.secure_rng:
            raise ValidationError("a seed is required unless secure_rng is enabled")
        if self.sigma_scale < 0:
            raise ValidationError(f"sigma_scale must be non-negative, got {self.sigma_scale}")
        for path, what in ((self.registry_path, "registry"), (self.events_path, "events")):
            if not Path(path).is_file():
                raise ValidationError(f"{what} file not found: {path}")
        try:
            ReliabilityParams(self.confidence, self.relative_tolerance)
            SparsityWindow(self.sparsity_window_start, self.sparsity_window_end, self.sparsity_threshold)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None


@dataclass
class RunReport:
    """Observability for one run: what went in, what each stage removed."""

    events_in: int = 0
    malformed: int = 0
    events_used: int = 0
    events_dropped: dict[str, int] = field(
        default_factory=lambda: {c: 0 for c in (*ALL_CONSTRAINTS, NO_ADMISSIBLE_REGION)}
    )
    contributions_in: int = 0
    contributions_dropped: dict[str, int] = field(
        default_factory=lambda: {c: 0 for c in ALL_CONSTRAINTS}
    )
    cells_per_stratum: dict[str, int] = field(default_factory=dict)
    points_normalized: int = 0
    reliability_dropped: int = 0
    sparsity_regions_dropped: int = 0
    sparsity_points_dropped: int = 0
    rows_released: int = 0
    scaling_factor: float | None = None
    scaling_reused: bool = False
    epsilon: float | None = None
    delta: float | None = None
    case_epsilons: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "events": {
                "in": self.events_in,
                "malformed": self.malformed,
                "used": self.events_used,
                "dropped": dict(self.events_dropped),
            },
            "contributions": {
                "in": self.contributions_in,
                "dropped": dict(self.contributions_dropped),
            },
            "cells_per_stratum": dict(self.cells_per_stratum),
            "postprocess": {
                "points_normalized": self.points_normalized,
                "reliability_dropped": self.reliability_dropped,
                "sparsity_regions_dropped": self.sparsity_regions_dropped,
                "sparsity_points_dropped": self.sparsity_points_dropped,
                "rows_released": self.rows_released,
            },
            "scaling": {"factor": self.scaling_factor, "reused": self.scaling_reused},
            "guarantee": {
                "epsilon": self.epsilon,
                "delta": self.delta,
                "cases": [
                    {"name": name, "epsilon": eps} for name, eps in self.case_epsilons.items()
                ],
            },
        }


def ingest_events(path: str | Path, *, strict: bool = False) -> tuple[list[SearchEvent], int]:
    """Read an events CSV; malformed lines are counted and skipped.

    Returns (events, malformed_count). In strict mode more than 1% malformed
    lines is an error.
    """
    events: list[SearchEvent] = []
    malformed = 0
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], 0
        if header != EVENTS_HEADER:
            raise ValidationError(f"bad events header: {header}")
        for row in reader:
            if not row:
                continue
            try:
                if len(row) != 4:
                    raise ValueError("wrong field count")
                user_id, date_s, postal, label_s = (f.strip() for f in row)
                events.append(
                    SearchEvent(
                        user_id=user_id,
                        date=dt.date.fromisoformat(date_s),
                        postal_code=postal,
                        label=parse_label(label_s),
                    )
                )
            except ValueError:
                malformed += 1
    total = len(events) + malformed
    if strict and total > 0 and malformed / total > 0.01:
        raise ValidationError(f"{malformed}/{total} malformed lines exceeds 1% in strict mode")
    return events, malformed


def bound_all(
    events: list[SearchEvent],
    registry: Registry,
    policy: DropPolicy,
    report: RunReport,
) -> RawCountTable:
    """Expand, bound each user-day, and aggregate; fills the report's tallies."""
    by_user_day: dict[tuple[str, dt.date], list[SearchEvent]] = {}
    for event in events:
        by_user_day.setdefault((event.user_id, event.date), []).append(event)

    contributions = []
    for user_day in sorted(by_user_day):
        day_events = by_user_day[user_day]
        candidates = []
        for event in day_events:
            expanded = bounding.expand(event, registry)
            if not expanded:
                report.events_dropped[NO_ADMISSIBLE_REGION] += 1
                continue
            report.contributions_in += len(expanded)
            # Small postal keys are deleted up front (and enforced again inside
            # resolve_user_day); tally them so the report reflects the drops.
            kept = [
                c
                for c in expanded
                if not (
                    c.key.level is GeoLevel.POSTAL_CODE
                    and c.region_type is RegionType.SMALL
                )
            ]
            report.contributions_dropped[SMALL_POSTAL] += len(expanded) - len(kept)
            if not kept:
                report.events_dropped[SMALL_POSTAL] += 1
                continue
            candidates.extend(kept)
        outcome = bounding.resolve_user_day(candidates, policy)
        contributions.extend(outcome.kept)
        for constraint, dropped in outcome.dropped.items():
            report.contributions_dropped[constraint] += len(dropped)
        _attribute_events(day_events, candidates, outcome, policy, report)

    return bounding.aggregate(contributions)


def _zero_fill_universe(table: RawCountTable, registry: Registry) -> RawCountTable:
    """Extend the table with explicit zeros for every noiseable cell of the
    observed weeks, so structurally-empty counts get noised too.

    Privacy is unaffected: the per-user-day case analysis does not depend on
    how many cells exist, only on how many one user-day can touch.
    """
    weeks = {key.week for key in table.counts}
    filled = RawCountTable(table.counts)
    for week in weeks:
        for rec in registry.records():
            rtype = registry.region_type(rec.region_id, rec.level)
            if not admissible(rec):
                continue
            if rec.level is GeoLevel.POSTAL_CODE and rtype is RegionType.SMALL:
                continue
            for category in Category:
                key = CountKey(week=week, region_id=rec.region_id, level=rec.level, category=category)
                filled.counts.setdefault(key, 0)
    return filled


def _attribute_events(day_events, candidates, outcome, policy, report) -> None:
    # An event is "used" if any of its candidates survived; otherwise it is
    # charged to the constraint that removed its last one (constraints ran in
    # policy order, so the latest hit is the one that zeroed it).
    dropped_ids = {id(c) for lst in outcome.dropped.values() for c in lst}
    survived_searches = {id(c.search) for c in candidates if id(c) not in dropped_ids}
    last_drop: dict[int, str] = {}
    for constraint in policy.constraint_order:
        for cand in outcome.dropped[constraint]:
            last_drop[id(cand.search)] = constraint
    for event in day_events:
        if not any(c.search is event for c in candidates):
            continue  # no admissible region; tallied at expansion
        if id(event) in survived_searches:
            report.events_used += 1
        else:
            report.events_dropped[last_drop[id(event)]] += 1


def run(config: PipelineConfig, *, policy: DropPolicy = DEFAULT_POLICY) -> RunReport:
    """Execute the full pipeline; writes the release CSV and returns the report."""
    config.validate()
    report = RunReport()

    try:
        registry = load_registry(config.registry_path)
    except Exception as exc:
        raise StageError("registry", exc) from exc

    try:
        sigmas = (
            load_sigma_table(config.sigma_table_path)
            if config.sigma_table_path
            else SigmaTable.default()
        )
    except Exception as exc:
        raise StageError("sigma_table", exc) from exc

    try:
        events, malformed = ingest_events(config.events_path, strict=config.strict)
        report.events_in = len(events) + malformed
        report.malformed = malformed
    except ValidationError:
        raise
    except Exception as exc:
        raise StageError("ingest", exc) from exc

    try:
        table = bound_all(events, registry, policy, report)
    except Exception as exc:
        raise StageError("bounding", exc) from exc

    try:
        if config.noise_empty_cells:
            table = _zero_fill_universe(table, registry)
        source = NoiseSource(config.seed, secure=config.secure_rng)
        cells = noise.noise_all(
            table,
            sigmas,
            source,
            lambda key: registry.region_type(key.region_id, key.level),
            sigma_scale=config.sigma_scale,
        )
        for cell in cells:
            rtype = registry.region_type(cell.key.region_id, cell.key.level)
            stratum = f"{rtype.value}/{cell.key.level.value}/{noise.category_group(cell.key.category)}"
            report.cells_per_stratum[stratum] = report.cells_per_stratum.get(stratum, 0) + 1
    except Exception as exc:
        raise StageError("noise", exc) from exc

    try:
        if config.sigma_scale > 0:
            cert = accountant.certify(sigmas.scaled(config.sigma_scale), config.delta)
            report.epsilon = cert.guarantee.epsilon
            report.case_epsilons = dict(cert.case_epsilons)
        else:
            # Noise disabled by the test hook: the release is not private at all.
            report.epsilon = float("inf")
        report.delta = config.delta
    except accountant.ConvergenceError as exc:
        raise NumericalError(str(exc)) from exc
    except Exception as exc:
        raise StageError("accounting", exc) from exc

    try:
        rows, _ = _postprocess(cells, registry, sigmas, config, report)
        postprocess.write_release_csv(rows, config.output_path)
        report.rows_released = len(rows)
    except NumericalError:
        raise
    except Exception as exc:
        raise StageError("postprocess", exc) from exc

    logger.info(
        "run complete: %d events in, %d rows released, epsilon=%.4f",
        report.events_in,
        report.rows_released,
        report.epsilon,
    )
    return report


def _postprocess(
    cells: list[NoisyCell],
    registry: Registry,
    sigmas: SigmaTable,
    config: PipelineConfig,
    report: RunReport,
) -> tuple[list[postprocess.ReleaseRow], list[tuple[NormalizedPoint, float]]]:
    # Group noised cells per <week, region>.
    groups: dict[tuple, dict[Category, NoisyCell]] = {}
    for cell in cells:
        key = (cell.key.week, cell.key.level, cell.key.region_id)
        groups.setdefault(key, {})[cell.key.category] = cell

    if config.absent_as_zero:
        # Structurally-empty labeled cells become noiseless zeros carrying the
        # stratum's sigma, making the overall category derivable. A missing
        # ANY cell still suppresses the region-week (nothing to normalize by).
        for (week, level, region_id), cats in groups.items():
            rtype = registry.region_type(region_id, level)
            for category in Category:
                if category is Category.ANY or category in cats:
                    continue
                sigma = config.sigma_scale * sigmas.sigma_for(rtype, level, category)
                cats[category] = NoisyCell(
                    key=CountKey(week=week, region_id=region_id, level=level, category=category),
                    noisy_value=0.0,
                    sigma=sigma,
                )

    # Country cells are aggregated from anonymized state cells.
    country_groups: dict[tuple, list[NoisyCell]] = {}
    for (week, level, region_id), cats in list(groups.items()):
        if level is not GeoLevel.STATE:
            continue
        for category, cell in cats.items():
            country_groups.setdefault((week, registry.country_of(region_id), category), []).append(cell)
    for (week, country_id, category), state_cells in country_groups.items():
        rolled = postprocess.country_rollup(state_cells, country_id)
        groups.setdefault((week, GeoLevel.COUNTRY, country_id), {})[category] = rolled

    points: list[NormalizedPoint] = []
    for (week, level, region_id), cats in groups.items():
        labeled = [c for cat, c in cats.items() if cat is not Category.ANY]
        derived = postprocess.derive_c_categories(labeled)
        denominator = cats.get(Category.ANY)
        if denominator is None:
            continue
        for value in derived:
            points.append(postprocess.normalize(value, denominator))
    report.points_normalized = len(points)

    params = ReliabilityParams(config.confidence, config.relative_tolerance)
    retained = [p for p in points if postprocess.reliability_filter(p, params)]
    report.reliability_dropped = len(points) - len(retained)

    window = SparsityWindow(
        config.sparsity_window_start, config.sparsity_window_end, config.sparsity_threshold
    )
    dense, dropped_regions = postprocess.sparsity_filter(retained, window)
    report.sparsity_regions_dropped = len(dropped_regions)
    report.sparsity_points_dropped = len(retained) - len(dense)

    state = _scaling_state(dense, config, report)
    report.scaling_factor = state.factor
    scaled = postprocess.apply_scaling(dense, state)
    rows = postprocess.assemble_rows(scaled, registry)
    return rows, scaled


def _scaling_state(
    dense: list[NormalizedPoint], config: PipelineConfig, report: RunReport
) -> ScalingState:
    path = Path(config.scaling_state_path)
    if path.is_file():
        report.scaling_reused = True
        return read_scaling_state(path)
    release_id = config.release_id or dt.date.today().isoformat()
    try:
        state = postprocess.compute_scaling_factor(dense, release_id)
    except ValueError as exc:
        raise NumericalError(f"scaling: {exc}") from exc
    write_scaling_state(state, path)
    return state
