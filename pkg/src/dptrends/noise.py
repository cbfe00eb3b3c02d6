"""Gaussian noise calibration per (region type, level, category group) stratum."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .bounding import RawCountTable
from .geo import RegionType
from .model import Category, CountKey, GeoLevel

A0_GROUP = "a0"
A123_GROUP = "a123"

Stratum = tuple[RegionType, GeoLevel, str]

#: Noise standard deviations per stratum, in query-count units.
TABLE_SIGMAS: dict[Stratum, float] = {
    (RegionType.LARGE, GeoLevel.POSTAL_CODE, A0_GROUP): 35.0,
    (RegionType.LARGE, GeoLevel.POSTAL_CODE, A123_GROUP): 3.25,
    (RegionType.LARGE, GeoLevel.COUNTY, A0_GROUP): 180.0,
    (RegionType.LARGE, GeoLevel.COUNTY, A123_GROUP): 20.0,
    (RegionType.MEDIUM, GeoLevel.POSTAL_CODE, A0_GROUP): 40.0,
    (RegionType.MEDIUM, GeoLevel.POSTAL_CODE, A123_GROUP): 3.5,
    (RegionType.MEDIUM, GeoLevel.COUNTY, A0_GROUP): 100.0,
    (RegionType.MEDIUM, GeoLevel.COUNTY, A123_GROUP): 8.0,
    (RegionType.SMALL, GeoLevel.COUNTY, A0_GROUP): 28.0,
    (RegionType.SMALL, GeoLevel.COUNTY, A123_GROUP): 3.21,
    (RegionType.NOT_APPLICABLE, GeoLevel.STATE, A0_GROUP): 450.0,
    (RegionType.NOT_APPLICABLE, GeoLevel.STATE, A123_GROUP): 35.0,
}


class StratumError(ValueError):
    """Raised for strata the pipeline must never noise (e.g. Small postal codes)."""


def category_group(category: Category) -> str:
    return A0_GROUP if category is Category.ANY else A123_GROUP


class SigmaTable:
    """Noise scale lookup covering all twelve reachable strata."""

    def __init__(self, sigmas: Mapping[Stratum, float]):
        missing = set(TABLE_SIGMAS) - set(sigmas)
        if missing:
            raise ValueError(f"sigma table missing strata: {sorted(str(m) for m in missing)}")
        extra = set(sigmas) - set(TABLE_SIGMAS)
        if extra:
            raise ValueError(f"sigma table has invalid strata: {sorted(str(e) for e in extra)}")
        for stratum, sigma in sigmas.items():
            if not sigma > 0:
                raise ValueError(f"sigma for {stratum} must be positive, got {sigma}")
        self._sigmas = dict(sigmas)

    @classmethod
    def default(cls) -> "SigmaTable":
        return cls(TABLE_SIGMAS)

    def sigma_for(self, region_type: RegionType, level: GeoLevel, category: Category) -> float:
        """Exact noise standard deviation for one count's stratum."""
        if level is GeoLevel.COUNTRY:
            raise StratumError("country counts are aggregated, never noised")
        if level is GeoLevel.STATE and region_type is not RegionType.NOT_APPLICABLE:
            raise StratumError(f"state counts carry no region type, got {region_type}")
        if level is GeoLevel.POSTAL_CODE and region_type is RegionType.SMALL:
            raise StratumError("Small postal-code counts are never produced")
        stratum = (region_type, level, category_group(category))
        if stratum not in self._sigmas:
            raise StratumError(f"no stratum for {stratum}")
        return self._sigmas[stratum]

    def scaled(self, factor: float) -> "SigmaTable":
        """A copy with every sigma multiplied by ``factor`` (must stay positive)."""
        if not factor > 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        return SigmaTable({s: v * factor for s, v in self._sigmas.items()})

    def items(self) -> Iterable[tuple[Stratum, float]]:
        return self._sigmas.items()


@dataclass(frozen=True)
class NoisyCell:
    """One noisy count plus the sigma that produced it.

    ``raw_hidden`` exists for tests only; no post-noise stage may read it.
    """

    key: CountKey
    noisy_value: float
    sigma: float
    raw_hidden: int | None = None


def add_noise(raw: float, sigma: float, rng: np.random.Generator) -> float:
    """raw + Normal(0, sigma^2); never rounded or clamped."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return float(raw)
    return float(raw) + float(rng.normal(0.0, sigma))


class NoiseSource:
    """Per-cell Gaussian noise streams.

    Seeded mode derives an independent stream from (master seed, cell key), so
    draws do not depend on iteration order or scheduling. Secure mode pulls
    entropy from the OS instead and is not reproducible.
    """

    def __init__(self, master_seed: int | None, secure: bool = False):
        if not secure and master_seed is None:
            raise ValueError("master_seed required unless secure mode is on")
        self.master_seed = master_seed
        self.secure = secure

    def generator_for(self, key: CountKey) -> np.random.Generator:
        if self.secure:
            return np.random.default_rng(np.random.SeedSequence())
        digest = hashlib.sha256(
            "|".join(
                [
                    str(self.master_seed),
                    str(key.week.iso_year),
                    str(key.week.iso_week),
                    key.region_id,
                    key.level.value,
                    key.category.value,
                ]
            ).encode()
        ).digest()
        return np.random.default_rng(int.from_bytes(digest[:16], "big"))


def noise_all(
    table: RawCountTable,
    sigmas: SigmaTable,
    noise_source: NoiseSource,
    region_type_of: Callable[[CountKey], RegionType],
    *,
    sigma_scale: float = 1.0,
    keep_raw: bool = False,
) -> list[NoisyCell]:
    """Noise every observed count; keys absent from the table get no cell.

    ``sigma_scale`` is a test hook that multiplies every sigma (0 disables
    noise entirely); the recorded per-cell sigma reflects the scale so that
    downstream interval math matches the noise actually injected.
    """
    if sigma_scale < 0:
        raise ValueError(f"sigma_scale must be non-negative, got {sigma_scale}")
    cells = []
    for key, raw in table.sorted_items():
        sigma = sigma_scale * sigmas.sigma_for(region_type_of(key), key.level, key.category)
        value = add_noise(raw, sigma, noise_source.generator_for(key))
        cells.append(
            NoisyCell(key=key, noisy_value=value, sigma=sigma, raw_hidden=raw if keep_raw else None)
        )
    return cells


_SIGMA_HEADER = ["population", "level", "category_group", "sigma"]
_POPULATIONS = {t.value: t for t in RegionType}
_SIGMA_LEVELS = {lvl.value: lvl for lvl in (GeoLevel.POSTAL_CODE, GeoLevel.COUNTY, GeoLevel.STATE)}


def load_sigma_table(path: str | Path) -> SigmaTable:
    """Load a sigma table from CSV mirroring the default table's strata."""
    sigmas: dict[Stratum, float] = {}
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _SIGMA_HEADER:
            raise ValueError(f"bad sigma table header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"line {lineno}: expected 4 fields")
            pop_s, level_s, group_s, sigma_s = (f.strip().lower() for f in row)
            if pop_s not in _POPULATIONS:
                raise ValueError(f"line {lineno}: unknown population {pop_s!r}")
            if level_s not in _SIGMA_LEVELS:
                raise ValueError(f"line {lineno}: unknown level {level_s!r}")
            if group_s not in (A0_GROUP, A123_GROUP):
                raise ValueError(f"line {lineno}: unknown category group {group_s!r}")
            stratum = (_POPULATIONS[pop_s], _SIGMA_LEVELS[level_s], group_s)
            if stratum in sigmas:
                raise ValueError(f"line {lineno}: duplicate stratum")
            sigmas[stratum] = float(sigma_s)
    return SigmaTable(sigmas)


def write_sigma_table(table: SigmaTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SIGMA_HEADER)
        for (rtype, level, group), sigma in sorted(
            table.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value, kv[0][2])
        ):
            writer.writerow([rtype.value, level.value, group, sigma])
