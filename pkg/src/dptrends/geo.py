"""Region registry: postal/county/state hierarchy, population typing, admissibility."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .model import GeoLevel

#: Regions smaller than this are never reported on their own.
MIN_REPORTABLE_AREA_KM2 = 3.0

#: County population boundaries. Boundary values (exactly 100k / 500k) are Medium.
SMALL_POPULATION_LIMIT = 100_000
LARGE_POPULATION_LIMIT = 500_000


class RegionType(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"
    NOT_APPLICABLE = "na"


class RegistryError(ValueError):
    """Raised for malformed registries or failed lookups."""


@dataclass(frozen=True)
class RegionRecord:
    region_id: str
    level: GeoLevel
    parent_id: str | None
    population: int | None
    area_km2: float
    address_share_county: str | None = None


@dataclass(frozen=True)
class RegionPath:
    """Full postal -> county -> state chain for one postal code."""

    postal: str
    county: str
    state: str


def county_type(population: int) -> RegionType:
    """Classify a county by population size."""
    if population < 0:
        raise ValueError(f"population must be non-negative, got {population}")
    if population < SMALL_POPULATION_LIMIT:
        return RegionType.SMALL
    if population <= LARGE_POPULATION_LIMIT:
        return RegionType.MEDIUM
    return RegionType.LARGE


def admissible(region: RegionRecord) -> bool:
    """True iff the region is large enough in area to be reported."""
    return region.area_km2 >= MIN_REPORTABLE_AREA_KM2


class Registry:
    """Read-only lookup over a validated region hierarchy.

    Built once, then safe for concurrent lookups.
    """

    def __init__(self, records: Iterable[RegionRecord]):
        self._records: dict[str, RegionRecord] = {}
        for rec in records:
            if rec.region_id in self._records:
                raise RegistryError(f"duplicate region id {rec.region_id!r}")
            self._records[rec.region_id] = rec
        self._validate()

    def _validate(self) -> None:
        for rec in self._records.values():
            if rec.area_km2 < 0:
                raise RegistryError(f"{rec.region_id}: negative area")
            if rec.level is GeoLevel.POSTAL_CODE:
                self._require_parent(rec, GeoLevel.COUNTY)
                if rec.address_share_county is not None:
                    share = self._records.get(rec.address_share_county)
                    if share is None or share.level is not GeoLevel.COUNTY:
                        raise RegistryError(
                            f"{rec.region_id}: address_share_county "
                            f"{rec.address_share_county!r} is not a known county"
                        )
            elif rec.level is GeoLevel.COUNTY:
                self._require_parent(rec, GeoLevel.STATE)
                if rec.population is None:
                    raise RegistryError(f"{rec.region_id}: county missing population")
            elif rec.level is GeoLevel.STATE:
                pass  # parent is a country identifier, kept verbatim
            else:
                raise RegistryError(f"{rec.region_id}: level {rec.level} not allowed in registry")

    def _require_parent(self, rec: RegionRecord, level: GeoLevel) -> None:
        if rec.parent_id is None:
            raise RegistryError(f"{rec.region_id}: missing parent")
        parent = self._records.get(rec.parent_id)
        if parent is None or parent.level is not level:
            raise RegistryError(
                f"{rec.region_id}: parent {rec.parent_id!r} is not a known {level.value}"
            )

    def record(self, region_id: str) -> RegionRecord:
        try:
            return self._records[region_id]
        except KeyError:
            raise RegistryError(f"unknown region {region_id!r}") from None

    def records(self) -> Iterable[RegionRecord]:
        return self._records.values()

    def resolve(self, postal_code: str) -> RegionPath:
        """Resolve a postal code to its full postal -> county -> state path."""
        postal = self.record(postal_code)
        if postal.level is not GeoLevel.POSTAL_CODE:
            raise RegistryError(f"{postal_code!r} is not a postal code")
        county = self.record(postal.parent_id)
        state = self.record(county.parent_id)
        return RegionPath(postal=postal.region_id, county=county.region_id, state=state.region_id)

    def postal_type(self, postal_code: str) -> RegionType:
        """Type of a postal code: the type of the county holding most of its addresses."""
        postal = self.record(postal_code)
        if postal.level is not GeoLevel.POSTAL_CODE:
            raise RegistryError(f"{postal_code!r} is not a postal code")
        county_id = postal.address_share_county or postal.parent_id
        return county_type(self.record(county_id).population)

    def region_type(self, region_id: str, level: GeoLevel) -> RegionType:
        """Population type of a region; states and the country have none."""
        if level in (GeoLevel.STATE, GeoLevel.COUNTRY):
            return RegionType.NOT_APPLICABLE
        if level is GeoLevel.COUNTY:
            return county_type(self.record(region_id).population)
        return self.postal_type(region_id)

    def country_of(self, state_id: str) -> str:
        state = self.record(state_id)
        return state.parent_id or "US"


_REGISTRY_HEADER = ["region_id", "level", "parent_id", "population", "area_km2", "address_share_county"]
_LEVELS = {lvl.value: lvl for lvl in (GeoLevel.POSTAL_CODE, GeoLevel.COUNTY, GeoLevel.STATE)}


def load_registry(path: str | Path) -> Registry:
    """Load a registry from CSV (header per `_REGISTRY_HEADER`, empty string = absent)."""
    records = []
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _REGISTRY_HEADER:
            raise RegistryError(f"bad registry header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(_REGISTRY_HEADER):
                raise RegistryError(f"line {lineno}: expected {len(_REGISTRY_HEADER)} fields")
            region_id, level_s, parent_s, pop_s, area_s, share_s = (f.strip() for f in row)
            if level_s not in _LEVELS:
                raise RegistryError(f"line {lineno}: unknown level {level_s!r}")
            try:
                records.append(
                    RegionRecord(
                        region_id=region_id,
                        level=_LEVELS[level_s],
                        parent_id=parent_s or None,
                        population=int(pop_s) if pop_s else None,
                        area_km2=float(area_s),
                        address_share_county=share_s or None,
                    )
                )
            except ValueError as exc:
                raise RegistryError(f"line {lineno}: {exc}") from None
    return Registry(records)


def write_registry(records: Iterable[RegionRecord], path: str | Path) -> None:
    """Write registry records to CSV in the load format (used by synthetic setups)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REGISTRY_HEADER)
        for rec in records:
            writer.writerow(
                [
                    rec.region_id,
                    rec.level.value,
                    rec.parent_id or "",
                    "" if rec.population is None else rec.population,
                    rec.area_km2,
                    rec.address_share_county or "",
                ]
            )
