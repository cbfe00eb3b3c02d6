"""Built-in three-search demo: one user, two days, every constraint triggered.

Used by the ``check-example`` CLI subcommand and the regression tests. The
scenario exercises all four bounding constraints in one user-week: a pair of
same-day searches from differently-typed counties plus a later single search
from a Small county.
"""

from __future__ import annotations

import datetime as dt

from .geo import GeoLevel, RegionRecord, Registry
from .model import Category, SearchEvent

#: 2018-census populations: San Benito is a Small county, San Francisco Large.
DEMO_REGIONS = [
    RegionRecord("California", GeoLevel.STATE, "US", None, 423_967.0),
    RegionRecord("San Francisco", GeoLevel.COUNTY, "California", 883_305, 121.0),
    RegionRecord("San Benito", GeoLevel.COUNTY, "California", 62_808, 3_597.0),
    RegionRecord("94103", GeoLevel.POSTAL_CODE, "San Francisco", None, 4.0),
    RegionRecord("95023", GeoLevel.POSTAL_CODE, "San Benito", None, 1_098.0),
]


def demo_registry() -> Registry:
    return Registry(DEMO_REGIONS)


def demo_events() -> list[SearchEvent]:
    """Three searches by one user during the tenth ISO week of 2021."""
    return [
        SearchEvent("demo-user", dt.date(2021, 3, 9), "94103", None),
        SearchEvent("demo-user", dt.date(2021, 3, 9), "95023", Category.SAFETY_SIDE_EFFECTS),
        SearchEvent("demo-user", dt.date(2021, 3, 11), "95023", Category.VACCINATION_INTENT),
    ]
