"""Post-noise release chain: category derivation, country rollup, normalization,
reliability and sparsity filtering, and scaling.

Every decision in this module is a function of noisy values and their public
sigmas only; raw counts are never consulted, so no privacy budget is spent.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from scipy.special import ndtri

from .geo import Registry
from .model import Category, CountKey, GeoLevel, ReleasedCategory, WeekId
from .noise import NoisyCell


@dataclass(frozen=True)
class ReliabilityParams:
    """Keep a point only if it is likely (>= confidence) within the relative
    tolerance of its pre-noise value."""

    confidence: float = 0.80
    relative_tolerance: float = 0.15

    def __post_init__(self) -> None:
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must be in (0, 1), got {self.confidence}")
        if not self.relative_tolerance > 0:
            raise ValueError(
                f"relative_tolerance must be positive, got {self.relative_tolerance}"
            )


@dataclass(frozen=True)
class CategoryValue:
    """A released-category noisy value for one <week, region>."""

    week: WeekId
    region_id: str
    level: GeoLevel
    category: ReleasedCategory
    value: float
    sigma: float


@dataclass(frozen=True)
class NormalizedPoint:
    """A released-category value divided by the same region-week's ANY count."""

    week: WeekId
    region_id: str
    level: GeoLevel
    category: ReleasedCategory
    numerator: float
    denominator: float
    numerator_sigma: float
    denominator_sigma: float

    @property
    def ratio(self) -> float:
        if self.denominator == 0.0:
            return math.nan
        return self.numerator / self.denominator


@dataclass(frozen=True)
class ScalingState:
    """The release-wide scaling factor, fixed forever by the initial release."""

    factor: float
    fixed_at: str

    def __post_init__(self) -> None:
        if not self.factor > 0:
            raise ValueError(f"scaling factor must be positive, got {self.factor}")


_DERIVATION = {
    ReleasedCategory.VACCINATION_INTENT: (Category.VACCINATION_INTENT,),
    ReleasedCategory.SAFETY_SIDE_EFFECTS: (Category.SAFETY_SIDE_EFFECTS,),
    ReleasedCategory.COVID19_VACCINATION: (
        Category.VACCINATION_INTENT,
        Category.SAFETY_SIDE_EFFECTS,
        Category.OTHER_VACCINE,
    ),
}


def derive_c_categories(
    a_cells: Sequence[NoisyCell],
    absent_sigmas: Mapping[Category, float] | None = None,
) -> list[CategoryValue]:
    """Derive released categories from one <week, region>'s labeled noisy cells.

    The intent and safety categories pass through unchanged; the overall
    category is their sum plus the remaining vaccine-related traffic, with the
    variances of the independent noise draws adding up.

    A category is only derivable when all its inputs exist. ``absent_sigmas``
    (the absent-as-zero mode) substitutes a noiseless 0.0 with the stratum's
    sigma for any missing input.
    """
    if not a_cells:
        return []
    keys = {(c.key.week, c.key.region_id, c.key.level) for c in a_cells}
    if len(keys) != 1:
        raise ValueError(f"cells span multiple region-weeks: {sorted(map(str, keys))}")
    (week, region_id, level), = keys

    by_cat: dict[Category, NoisyCell] = {}
    for cell in a_cells:
        if cell.key.category is Category.ANY:
            raise ValueError("derive_c_categories takes labeled cells only")
        if cell.key.category in by_cat:
            raise ValueError(f"duplicate cell for {cell.key.category}")
        by_cat[cell.key.category] = cell

    def value_sigma(cat: Category) -> tuple[float, float] | None:
        cell = by_cat.get(cat)
        if cell is not None:
            return cell.noisy_value, cell.sigma
        if absent_sigmas is not None and cat in absent_sigmas:
            return 0.0, absent_sigmas[cat]
        return None

    derived = []
    for released, sources in _DERIVATION.items():
        parts = [value_sigma(cat) for cat in sources]
        if any(p is None for p in parts):
            continue
        total = sum(v for v, _ in parts)
        sigma = math.sqrt(sum(s * s for _, s in parts))
        derived.append(
            CategoryValue(
                week=week,
                region_id=region_id,
                level=level,
                category=released,
                value=total,
                sigma=sigma,
            )
        )
    return derived


def country_rollup(state_cells: Sequence[NoisyCell], country_id: str) -> NoisyCell:
    """Sum one <week, category>'s anonymized state cells into a country cell.

    Country values are derived entirely from already-noised state data; the
    summed cell's sigma is the root-sum-square of the state sigmas.
    """
    if not state_cells:
        raise ValueError("state cell set must be non-empty")
    first = state_cells[0].key
    for cell in state_cells:
        if cell.key.level is not GeoLevel.STATE:
            raise ValueError(f"non-state cell in rollup: {cell.key}")
        if cell.key.week != first.week or cell.key.category != first.category:
            raise ValueError("rollup cells must share week and category")
    return NoisyCell(
        key=CountKey(
            week=first.week,
            region_id=country_id,
            level=GeoLevel.COUNTRY,
            category=first.category,
        ),
        noisy_value=sum(c.noisy_value for c in state_cells),
        sigma=math.sqrt(sum(c.sigma**2 for c in state_cells)),
    )


def normalize(numerator: CategoryValue, denominator: NoisyCell) -> NormalizedPoint:
    """Pair a released-category value with its region-week's total-traffic count."""
    if denominator.key.category is not Category.ANY:
        raise ValueError("denominator must be the ANY-category cell")
    if (denominator.key.week, denominator.key.region_id) != (numerator.week, numerator.region_id):
        raise ValueError("numerator and denominator must share week and region")
    return NormalizedPoint(
        week=numerator.week,
        region_id=numerator.region_id,
        level=numerator.level,
        category=numerator.category,
        numerator=numerator.value,
        denominator=denominator.noisy_value,
        numerator_sigma=numerator.sigma,
        denominator_sigma=denominator.sigma,
    )


def interval_z(confidence: float) -> float:
    """Per-coordinate z so that two independent two-sided intervals jointly
    cover with probability >= confidence."""
    return float(ndtri((1.0 + math.sqrt(confidence)) / 2.0))


def ratio_confidence_interval(
    x: float,
    y: float,
    sigma_x: float,
    sigma_y: float,
    confidence: float,
) -> tuple[float, float] | None:
    """Confidence interval for the true ratio behind two noisy counts.

    Each coordinate gets a two-sided Gaussian interval at level
    sqrt(confidence); by independence both hold jointly with probability
    >= confidence, and the ratio bounds follow by monotonicity. Returns None
    ("unbounded") when the denominator interval reaches 0, since no finite
    bound on the ratio exists then.
    """
    if sigma_x < 0 or sigma_y < 0:
        raise ValueError("sigmas must be non-negative")
    z = interval_z(confidence)
    y_lo = y - z * sigma_y
    if y_lo <= 0.0:
        return None
    y_hi = y + z * sigma_y
    return (x - z * sigma_x) / y_hi, (x + z * sigma_x) / y_lo


def reliability_filter(point: NormalizedPoint, params: ReliabilityParams) -> bool:
    """True iff the point's ratio is positive and its confidence interval is
    within the relative tolerance on both sides."""
    ratio = point.ratio
    if not ratio > 0.0:
        return False
    interval = ratio_confidence_interval(
        point.numerator,
        point.denominator,
        point.numerator_sigma,
        point.denominator_sigma,
        params.confidence,
    )
    if interval is None:
        return False
    lo, hi = interval
    slack = params.relative_tolerance * ratio
    return (ratio - lo) <= slack and (hi - ratio) <= slack


@dataclass(frozen=True)
class SparsityWindow:
    """Reference period for extreme-sparsity removal (dates of week Mondays);
    regions with ``drop_at_or_below`` retained points or fewer are removed."""

    start: dt.date = dt.date(2021, 1, 4)
    end: dt.date = dt.date(2021, 5, 31)
    drop_at_or_below: int = 3

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError("window start must not be after end")
        if self.drop_at_or_below < 0:
            raise ValueError("threshold must be non-negative")

    def contains(self, week: WeekId) -> bool:
        return self.start <= week.monday <= self.end


def sparse_regions(
    retained: Iterable[NormalizedPoint],
    window: SparsityWindow,
) -> set[tuple[GeoLevel, str]]:
    """Regions whose retained overall-category series has too few points in the
    reference window; such regions are removed across all categories."""
    counts: dict[tuple[GeoLevel, str], int] = {}
    for point in retained:
        if point.category is ReleasedCategory.COVID19_VACCINATION and window.contains(point.week):
            counts[(point.level, point.region_id)] = counts.get((point.level, point.region_id), 0) + 1
    all_regions = {(p.level, p.region_id) for p in retained}
    return {region for region in all_regions if counts.get(region, 0) <= window.drop_at_or_below}


def sparsity_filter(
    retained: Sequence[NormalizedPoint],
    window: SparsityWindow,
) -> tuple[list[NormalizedPoint], set[tuple[GeoLevel, str]]]:
    """Drop every point of regions flagged by ``sparse_regions``."""
    dropped = sparse_regions(retained, window)
    return [p for p in retained if (p.level, p.region_id) not in dropped], dropped


def compute_scaling_factor(
    national_series: Sequence[NormalizedPoint],
    fixed_at: str,
) -> ScalingState:
    """Fix the factor that maps the initial national overall-category maximum to 100."""
    ratios = [
        p.ratio
        for p in national_series
        if p.level is GeoLevel.COUNTRY and p.category is ReleasedCategory.COVID19_VACCINATION
    ]
    if not ratios:
        raise ValueError("national series is empty; cannot fix a scaling factor")
    peak = max(ratios)
    if not peak > 0:
        raise ValueError(f"national series maximum must be positive, got {peak}")
    return ScalingState(factor=100.0 / peak, fixed_at=fixed_at)


def apply_scaling(
    points: Sequence[NormalizedPoint],
    state: ScalingState,
) -> list[tuple[NormalizedPoint, float]]:
    """Linearly scale every retained ratio by the fixed factor (no clamping)."""
    return [(p, p.ratio * state.factor) for p in points]


def read_scaling_state(path: str | Path) -> ScalingState:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ScalingState(factor=float(data["factor"]), fixed_at=str(data["fixed_at"]))


def write_scaling_state(state: ScalingState, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"factor": state.factor, "fixed_at": state.fixed_at}, fh, indent=2)
        fh.write("\n")


RELEASE_HEADER = [
    "week_start",
    "country",
    "state",
    "county",
    "postal_code",
    "sni_covid19_vaccination",
    "sni_vaccination_intent",
    "sni_safety_side_effects",
]

#: Column order of the category values in the release file.
RELEASE_CATEGORY_ORDER = (
    ReleasedCategory.COVID19_VACCINATION,
    ReleasedCategory.VACCINATION_INTENT,
    ReleasedCategory.SAFETY_SIDE_EFFECTS,
)


@dataclass(frozen=True)
class ReleaseRow:
    """One output record; category values are None when filtered out."""

    week_start: dt.date
    country: str
    state: str
    county: str
    postal_code: str
    values: dict[ReleasedCategory, float]

    def sort_key(self) -> tuple:
        return (
            self.week_start,
            0 if not self.state else 1 if not self.county else 2 if not self.postal_code else 3,
            self.country,
            self.state,
            self.county,
            self.postal_code,
        )


def _region_columns(level: GeoLevel, region_id: str, registry: Registry) -> tuple[str, str, str, str]:
    if level is GeoLevel.COUNTRY:
        return region_id, "", "", ""
    if level is GeoLevel.STATE:
        return registry.country_of(region_id), region_id, "", ""
    if level is GeoLevel.COUNTY:
        state = registry.record(region_id).parent_id
        return registry.country_of(state), state, region_id, ""
    path = registry.resolve(region_id)
    return registry.country_of(path.state), path.state, path.county, region_id


def assemble_rows(
    scaled: Sequence[tuple[NormalizedPoint, float]],
    registry: Registry,
) -> list[ReleaseRow]:
    """Group scaled points into one row per <week, region>, deterministically ordered."""
    grouped: dict[tuple, dict[ReleasedCategory, float]] = {}
    for point, value in scaled:
        grouped.setdefault((point.week.monday, point.level, point.region_id), {})[
            point.category
        ] = value
    rows = []
    for (monday, level, region_id), values in grouped.items():
        country, state, county, postal = _region_columns(level, region_id, registry)
        rows.append(
            ReleaseRow(
                week_start=monday,
                country=country,
                state=state,
                county=county,
                postal_code=postal,
                values=values,
            )
        )
    rows.sort(key=ReleaseRow.sort_key)
    return rows


def write_release_csv(rows: Sequence[ReleaseRow], path: str | Path) -> None:
    """Emit the delimited release; values are fixed to six decimal places so
    output bytes are stable across platforms."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(RELEASE_HEADER) + "\n")
        for row in rows:
            fields = [
                row.week_start.isoformat(),
                row.country,
                row.state,
                row.county,
                row.postal_code,
            ]
            for category in RELEASE_CATEGORY_ORDER:
                value = row.values.get(category)
                fields.append("" if value is None else f"{value:.6f}")
            fh.write(",".join(fields) + "\n")
