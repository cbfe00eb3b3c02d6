"""Reproducible synthetic event corpora for exercising the pipeline."""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .geo import GeoLevel, Registry
from .model import LABELED_CATEGORIES, SearchEvent

#: Rate keys accepted by a synthetic spec; "none" is unlabeled background traffic.
RATE_KEYS = ("A1", "A2", "A3", "none")


@dataclass(frozen=True)
class SyntheticSpec:
    """Population and behavior of a synthetic corpus.

    ``users_per_postal`` maps postal region ids to user counts; ``daily_rates``
    gives each category's per-user daily probability of issuing one query.
    Behavior is independent across users, days, and categories, matching the
    one-user-day unit of protection.
    """

    users_per_postal: Mapping[str, int]
    daily_rates: Mapping[str, float]
    weeks: int
    start_monday: dt.date
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.users_per_postal:
            raise ValueError("users_per_postal must be non-empty")
        for postal, n in self.users_per_postal.items():
            if n < 0:
                raise ValueError(f"negative user count for {postal}")
        for key, rate in self.daily_rates.items():
            if key not in RATE_KEYS:
                raise ValueError(f"unknown rate key {key!r} (expected one of {RATE_KEYS})")
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate for {key} must be in [0, 1], got {rate}")
        if self.weeks <= 0:
            raise ValueError("weeks must be positive")
        if self.start_monday.weekday() != 0:
            raise ValueError(f"start_monday {self.start_monday} is not a Monday")


def load_spec(path: str | Path) -> SyntheticSpec:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return SyntheticSpec(
        users_per_postal=dict(data["users_per_postal"]),
        daily_rates=dict(data.get("daily_rates", {})),
        weeks=int(data["weeks"]),
        start_monday=dt.date.fromisoformat(data["start_monday"]),
        seed=int(data.get("seed", 0)),
    )


_LABEL_FOR = {cat.value: cat for cat in LABELED_CATEGORIES}


def generate_events(spec: SyntheticSpec, registry: Registry) -> list[SearchEvent]:
    """Draw a reproducible corpus; identical spec and seed give identical events."""
    for postal in spec.users_per_postal:
        if registry.record(postal).level is not GeoLevel.POSTAL_CODE:
            raise ValueError(f"{postal!r} is not a postal code in the registry")
    rng = np.random.default_rng(spec.seed)
    days = [spec.start_monday + dt.timedelta(days=i) for i in range(7 * spec.weeks)]
    rates = [(key, spec.daily_rates.get(key, 0.0)) for key in RATE_KEYS]
    events = []
    for postal in sorted(spec.users_per_postal):
        for user_index in range(spec.users_per_postal[postal]):
            user_id = f"u-{postal}-{user_index}"
            for day in days:
                for key, rate in rates:
                    if rate > 0.0 and rng.random() < rate:
                        events.append(
                            SearchEvent(
                                user_id=user_id,
                                date=day,
                                postal_code=postal,
                                label=_LABEL_FOR.get(key),
                            )
                        )
    return events


EVENTS_HEADER = ["user_id", "date", "postal_code", "label"]


def write_events_csv(events: Iterable[SearchEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for event in events:
            writer.writerow(
                [
                    event.user_id,
                    event.date.isoformat(),
                    event.postal_code,
                    "none" if event.label is None else event.label.value,
                ]
            )
