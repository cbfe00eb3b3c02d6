"""Per-user-per-day contribution bounding and exact aggregation.

Four constraints cap how much one user-day can influence the released counts:

* ``cross_count``  -- at most one count per (day, geographic level, category);
* ``per_count``    -- each count incremented at most once per day;
* ``small_postal`` -- no contributions to Small-type postal-code counts;
* ``type_sync``    -- all county and postal contributions of a user-day share
  one region type.

None of the constraints spans more than a single day, so each user-day is
bounded independently. Conflicting contributions are discarded under a
deterministic, configurable DropPolicy.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .geo import Registry, RegionType, admissible
from .model import Category, CountKey, GeoLevel, SearchEvent, week_of

CROSS_COUNT = "cross_count"
PER_COUNT = "per_count"
SMALL_POSTAL = "small_postal"
TYPE_SYNC = "type_sync"

ALL_CONSTRAINTS = (CROSS_COUNT, PER_COUNT, SMALL_POSTAL, TYPE_SYNC)


@dataclass(frozen=True)
class CandidateKey:
    """A count a single search would increment, before bounding."""

    key: CountKey
    region_type: RegionType
    search: SearchEvent


@dataclass(frozen=True)
class BoundedContribution:
    """A surviving +1 increment; at most one per (user, date, key)."""

    user_id: str
    date: dt.date
    key: CountKey


@dataclass(frozen=True)
class DropPolicy:
    """Deterministic rules for discarding conflicting contributions.

    ``keep`` selects the surviving search in cross_count/per_count conflicts
    ("earliest" or "latest" by position in the input stream; events carry no
    intra-day timestamp, so stream order stands in for time order).
    ``type_preference`` orders region types for type_sync resolution; the
    first type present among a user-day's county/postal contributions wins.
    """

    constraint_order: tuple[str, ...] = ALL_CONSTRAINTS
    keep: str = "earliest"
    type_preference: tuple[RegionType, ...] = (
        RegionType.SMALL,
        RegionType.MEDIUM,
        RegionType.LARGE,
    )

    def __post_init__(self) -> None:
        if sorted(self.constraint_order) != sorted(ALL_CONSTRAINTS):
            raise ValueError(f"constraint_order must be a permutation of {ALL_CONSTRAINTS}")
        if self.keep not in ("earliest", "latest"):
            raise ValueError(f"keep must be 'earliest' or 'latest', got {self.keep!r}")
        expected = {RegionType.SMALL, RegionType.MEDIUM, RegionType.LARGE}
        if set(self.type_preference) != expected or len(self.type_preference) != 3:
            raise ValueError("type_preference must rank exactly Small, Medium, and Large")


DEFAULT_POLICY = DropPolicy()


@dataclass
class UserDayOutcome:
    """Bounded contributions of one user-day plus what each constraint discarded."""

    kept: list[BoundedContribution]
    dropped: dict[str, list[CandidateKey]] = field(
        default_factory=lambda: {c: [] for c in ALL_CONSTRAINTS}
    )


def expand(
    event: SearchEvent,
    registry: Registry,
    *,
    drop_small_postal: bool = False,
) -> list[CandidateKey]:
    """Map one event to the counts it would increment, before bounding.

    Produces ANY at postal/county/state plus, for labeled events, the labeled
    category at the same levels. Keys for regions below the reportable-area
    threshold are omitted (their traffic still reaches coarser levels).
    ``drop_small_postal`` additionally removes Small postal keys here; the
    same rule is always enforced again during bounding.
    """
    path = registry.resolve(event.postal_code)
    week = week_of(event.date)
    postal_t = registry.postal_type(path.postal)
    county_t = registry.region_type(path.county, GeoLevel.COUNTY)

    targets = [
        (path.postal, GeoLevel.POSTAL_CODE, postal_t),
        (path.county, GeoLevel.COUNTY, county_t),
        (path.state, GeoLevel.STATE, RegionType.NOT_APPLICABLE),
    ]
    categories = [Category.ANY] if event.label is None else [Category.ANY, event.label]

    candidates = []
    for region_id, level, rtype in targets:
        if not admissible(registry.record(region_id)):
            continue
        if drop_small_postal and level is GeoLevel.POSTAL_CODE and rtype is RegionType.SMALL:
            continue
        for category in categories:
            candidates.append(
                CandidateKey(
                    key=CountKey(week=week, region_id=region_id, level=level, category=category),
                    region_type=rtype,
                    search=event,
                )
            )
    return candidates


def resolve_user_day(
    candidates: Sequence[CandidateKey],
    policy: DropPolicy = DEFAULT_POLICY,
) -> UserDayOutcome:
    """Enforce all four constraints on one user-day's candidates.

    Constraints are applied in ``policy.constraint_order``; each pass only
    removes candidates, and every constraint is preserved by removals, so a
    single pass leaves all four satisfied regardless of order.
    """
    if not candidates:
        return UserDayOutcome(kept=[])
    user_date = {(c.search.user_id, c.search.date) for c in candidates}
    if len(user_date) != 1:
        raise ValueError(f"candidates span multiple user-days: {sorted(user_date)}")
    (user_id, date), = user_date

    # Stream position of each search, for earliest/latest tie-breaking.
    order: dict[int, int] = {}
    for cand in candidates:
        order.setdefault(id(cand.search), len(order))

    def preferred(searches: Iterable[int]) -> int:
        pick = min if policy.keep == "earliest" else max
        return pick(searches, key=order.__getitem__)

    outcome = UserDayOutcome(kept=[])
    alive = list(candidates)
    for constraint in policy.constraint_order:
        if constraint == CROSS_COUNT:
            alive = _enforce_cross_count(alive, preferred, outcome)
        elif constraint == PER_COUNT:
            alive = _enforce_per_count(alive, preferred, outcome)
        elif constraint == SMALL_POSTAL:
            alive = _enforce_small_postal(alive, outcome)
        else:
            alive = _enforce_type_sync(alive, policy, outcome)

    outcome.kept = [BoundedContribution(user_id=user_id, date=date, key=c.key) for c in alive]
    return outcome


def bound_user_day(
    candidates: Sequence[CandidateKey],
    policy: DropPolicy = DEFAULT_POLICY,
) -> list[BoundedContribution]:
    """Bounded contributions of one user-day (see resolve_user_day for drop detail)."""
    return resolve_user_day(candidates, policy).kept


def _enforce_cross_count(alive, preferred, outcome):
    # Per (level, category): all survivors must target one single count.
    groups: dict[tuple, list[CandidateKey]] = {}
    for cand in alive:
        groups.setdefault((cand.key.level, cand.key.category), []).append(cand)
    kept = []
    for group in groups.values():
        keys = {c.key for c in group}
        if len(keys) <= 1:
            kept.extend(group)
            continue
        winner = preferred(id(c.search) for c in group)
        winner_key = next(c.key for c in group if id(c.search) == winner)
        for cand in group:
            if cand.key == winner_key:
                kept.append(cand)
            else:
                outcome.dropped[CROSS_COUNT].append(cand)
    return _in_input_order(alive, kept)


def _enforce_per_count(alive, preferred, outcome):
    # Per count key: at most one +1 increment.
    groups: dict[CountKey, list[CandidateKey]] = {}
    for cand in alive:
        groups.setdefault(cand.key, []).append(cand)
    kept = []
    for group in groups.values():
        if len(group) == 1:
            kept.extend(group)
            continue
        winner = preferred(id(c.search) for c in group)
        for cand in group:
            if id(cand.search) == winner:
                kept.append(cand)
            else:
                outcome.dropped[PER_COUNT].append(cand)
    return _in_input_order(alive, kept)


def _enforce_small_postal(alive, outcome):
    kept = []
    for cand in alive:
        if cand.key.level is GeoLevel.POSTAL_CODE and cand.region_type is RegionType.SMALL:
            outcome.dropped[SMALL_POSTAL].append(cand)
        else:
            kept.append(cand)
    return kept


def _enforce_type_sync(alive, policy, outcome):
    sub_state_levels = (GeoLevel.COUNTY, GeoLevel.POSTAL_CODE)
    types_present = {c.region_type for c in alive if c.key.level in sub_state_levels}
    if len(types_present) <= 1:
        return alive
    winner = next(t for t in policy.type_preference if t in types_present)
    kept = []
    for cand in alive:
        if cand.key.level in sub_state_levels and cand.region_type is not winner:
            outcome.dropped[TYPE_SYNC].append(cand)
        else:
            kept.append(cand)
    return kept


def _in_input_order(original, kept):
    kept_ids = {id(c) for c in kept}
    return [c for c in original if id(c) in kept_ids]


class RawCountTable:
    """Exact integer counts per CountKey, built from bounded contributions."""

    def __init__(self, counts: dict[CountKey, int] | None = None):
        self.counts: dict[CountKey, int] = dict(counts) if counts else {}

    def add(self, key: CountKey, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + n

    def merge(self, other: "RawCountTable") -> "RawCountTable":
        merged = RawCountTable(self.counts)
        for key, n in other.counts.items():
            merged.add(key, n)
        return merged

    def __getitem__(self, key: CountKey) -> int:
        return self.counts.get(key, 0)

    def __len__(self) -> int:
        return len(self.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, RawCountTable) and self.counts == other.counts

    def sorted_items(self) -> list[tuple[CountKey, int]]:
        return sorted(self.counts.items(), key=lambda kv: kv[0].sort_key())


def aggregate(contributions: Iterable[BoundedContribution]) -> RawCountTable:
    """Sum bounded contributions into a count table; order-independent."""
    table = RawCountTable()
    for contrib in contributions:
        table.add(contrib.key)
    return table
