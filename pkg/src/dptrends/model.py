"""Core vocabulary shared by every pipeline stage: events, categories, weeks, count keys."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from enum import Enum


class Category(Enum):
    """Mutually exclusive counting categories; every query also counts toward ANY."""

    ANY = "A0"
    VACCINATION_INTENT = "A1"
    SAFETY_SIDE_EFFECTS = "A2"
    OTHER_VACCINE = "A3"


#: Labeled (vaccine-related) categories; an event carries at most one of these.
LABELED_CATEGORIES = (
    Category.VACCINATION_INTENT,
    Category.SAFETY_SIDE_EFFECTS,
    Category.OTHER_VACCINE,
)


class ReleasedCategory(Enum):
    """Categories of the published dataset, derived after noising."""

    VACCINATION_INTENT = "C1"
    SAFETY_SIDE_EFFECTS = "C2"
    COVID19_VACCINATION = "C3"


class GeoLevel(Enum):
    POSTAL_CODE = "postal_code"
    COUNTY = "county"
    STATE = "state"
    # Country values are aggregated from anonymized state data in post-processing;
    # no count is noised directly at this level.
    COUNTRY = "country"


#: Order used whenever keys are sorted for deterministic emission.
_LEVEL_ORDER = {
    GeoLevel.COUNTRY: 0,
    GeoLevel.STATE: 1,
    GeoLevel.COUNTY: 2,
    GeoLevel.POSTAL_CODE: 3,
}


@dataclass(frozen=True)
class WeekId:
    """An ISO-8601 week plus the date of its Monday start."""

    iso_year: int
    iso_week: int
    monday: dt.date

    def __post_init__(self) -> None:
        if not 1 <= self.iso_week <= 53:
            raise ValueError(f"iso_week out of range: {self.iso_week}")
        expected = dt.date.fromisocalendar(self.iso_year, self.iso_week, 1)
        if self.monday != expected:
            raise ValueError(
                f"monday {self.monday} does not start ISO week "
                f"{self.iso_year}-W{self.iso_week:02d} (expected {expected})"
            )


def week_of(date: dt.date) -> WeekId:
    """Return the ISO week containing ``date``."""
    iso_year, iso_week, _ = date.isocalendar()
    return WeekId(iso_year, iso_week, dt.date.fromisocalendar(iso_year, iso_week, 1))


@dataclass(frozen=True)
class SearchEvent:
    """One search query: who issued it, when, from where, and its category label.

    ``label`` is None for queries unrelated to the tracked topic; such events
    still contribute to the ANY category.
    """

    user_id: str
    date: dt.date
    postal_code: str
    label: Category | None = None

    def __post_init__(self) -> None:
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        if not self.postal_code:
            raise ValueError("postal_code must be non-empty")
        if self.label is Category.ANY:
            raise ValueError("events carry a labeled category or None, never ANY")


def parse_label(text: str) -> Category | None:
    """Parse an event-file label field (``A1``/``A2``/``A3``/``none``)."""
    if text == "none":
        return None
    for cat in LABELED_CATEGORIES:
        if text == cat.value:
            return cat
    raise ValueError(f"unknown label {text!r}")


@dataclass(frozen=True)
class CountKey:
    """The <week, region, category> cell a bounded contribution increments."""

    week: WeekId
    region_id: str
    level: GeoLevel
    category: Category

    def sort_key(self) -> tuple:
        return (
            self.week.monday,
            _LEVEL_ORDER[self.level],
            self.region_id,
            self.category.value,
        )
