import pytest

from dptrends.demo import demo_events, demo_registry
from dptrends.geo import GeoLevel, RegionRecord, Registry


@pytest.fixture
def registry():
    """The built-in two-county demo registry."""
    return demo_registry()


@pytest.fixture
def events():
    return demo_events()


def build_registry(counties, postals_per_county=2, area_km2=50.0):
    """A synthetic registry: one state per distinct prefix in ``counties``.

    ``counties`` maps county id -> population; county ids must look like
    "<state>-c<i>"; postal ids become "<county>-p<j>".
    """
    records = []
    states = sorted({cid.split("-")[0] for cid in counties})
    for state in states:
        records.append(RegionRecord(state, GeoLevel.STATE, "US", None, 10_000.0))
    for county, population in sorted(counties.items()):
        state = county.split("-")[0]
        records.append(RegionRecord(county, GeoLevel.COUNTY, state, population, 500.0))
        for j in range(postals_per_county):
            records.append(
                RegionRecord(f"{county}-p{j}", GeoLevel.POSTAL_CODE, county, None, area_km2)
            )
    return Registry(records)


@pytest.fixture
def tri_registry():
    """One state with a Small, a Medium, and a Large county (two postals each)."""
    return build_registry(
        {
            "st1-c-small": 40_000,
            "st1-c-medium": 250_000,
            "st1-c-large": 900_000,
        }
    )
