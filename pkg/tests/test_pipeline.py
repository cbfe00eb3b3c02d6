import datetime as dt
import json

import pytest

from dptrends import bounding, noise
from dptrends.bounding import DEFAULT_POLICY
from dptrends.demo import demo_events, demo_registry
from dptrends.geo import write_registry
from dptrends.model import Category
from dptrends.noise import SigmaTable, write_sigma_table
from dptrends.pipeline import (
    NO_ADMISSIBLE_REGION,
    NumericalError,
    PipelineConfig,
    RunReport,
    StageError,
    ValidationError,
    bound_all,
    ingest_events,
    run,
)
from dptrends.synthetic import SyntheticSpec, generate_events, write_events_csv

MONDAY = dt.date(2021, 1, 4)

DEMO_EVENTS_CSV = """user_id,date,postal_code,label
demo-user,2021-03-09,94103,none
demo-user,2021-03-09,95023,A2
demo-user,2021-03-11,95023,A1
"""


@pytest.fixture
def demo_paths(tmp_path):
    registry_path = tmp_path / "registry.csv"
    write_registry(demo_registry().records(), registry_path)
    events_path = tmp_path / "events.csv"
    events_path.write_text(DEMO_EVENTS_CSV)
    return registry_path, events_path


def make_config(tmp_path, registry_path, events_path, **overrides):
    base = dict(
        registry_path=registry_path,
        events_path=events_path,
        output_path=tmp_path / "release.csv",
        scaling_state_path=tmp_path / "scaling_state.json",
        seed=1234,
        sparsity_window_start=dt.date(2021, 1, 4),
        sparsity_window_end=dt.date(2021, 12, 27),
        release_id="test-release",
        # Test corpora are tiny compared to real traffic; scale the noise down
        # so the reliability filter keeps some points. Tests about the real
        # calibration override this.
        sigma_scale=0.02,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def corpus(tmp_path, tri_registry, *, weeks=8, seed=77, users=30):
    """A dense synthetic corpus over the three-county registry."""
    registry_path = tmp_path / "registry.csv"
    write_registry(tri_registry.records(), registry_path)
    spec = SyntheticSpec(
        users_per_postal={
            "st1-c-small-p0": users,
            "st1-c-medium-p0": users,
            "st1-c-large-p0": users,
            "st1-c-large-p1": users,
        },
        daily_rates={"A1": 0.15, "A2": 0.1, "A3": 0.1, "none": 0.9},
        weeks=weeks,
        start_monday=MONDAY,
        seed=seed,
    )
    events = generate_events(spec, tri_registry)
    events_path = tmp_path / "events.csv"
    write_events_csv(events, events_path)
    return registry_path, events_path


class TestIngest:
    def test_demo_file(self, demo_paths):
        _, events_path = demo_paths
        events, malformed = ingest_events(events_path)
        assert malformed == 0
        assert events == demo_events()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("user_id,date,postal_code,label\n")
        assert ingest_events(path) == ([], 0)

    def test_unknown_label_skipped_and_counted(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text(
            "user_id,date,postal_code,label\n"
            "u,2021-03-09,95023,A9\n"
            "u,2021-03-09,95023,A1\n"
        )
        events, malformed = ingest_events(path)
        assert len(events) == 1
        assert malformed == 1

    def test_bad_date_and_missing_fields(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text(
            "user_id,date,postal_code,label\n"
            "u,not-a-date,95023,A1\n"
            "u,2021-03-09,95023\n"
            ",2021-03-09,95023,A1\n"
        )
        events, malformed = ingest_events(path)
        assert events == []
        assert malformed == 3

    def test_strict_mode_rejects_over_one_percent(self, tmp_path):
        path = tmp_path / "events.csv"
        lines = ["user_id,date,postal_code,label"]
        lines += ["u,2021-03-09,95023,A1"] * 50
        lines += ["u,bad,95023,A1"]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError):
            ingest_events(path, strict=True)
        events, malformed = ingest_events(path, strict=False)
        assert (len(events), malformed) == (50, 1)

    def test_strict_mode_tolerates_under_one_percent(self, tmp_path):
        path = tmp_path / "events.csv"
        lines = ["user_id,date,postal_code,label"]
        lines += ["u,2021-03-09,95023,A1"] * 200
        lines += ["u,bad,95023,A1"]
        path.write_text("\n".join(lines) + "\n")
        events, malformed = ingest_events(path, strict=True)
        assert (len(events), malformed) == (200, 1)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("who,when,where,what\n")
        with pytest.raises(ValidationError):
            ingest_events(path)


class TestBoundAll:
    def test_demo_counts_with_noise_off(self, demo_paths):
        """The demo corpus's bounded counts survive noising untouched when the
        sigma-scale hook disables noise."""
        registry = demo_registry()
        events, _ = ingest_events(demo_paths[1])
        report = RunReport()
        table = bound_all(events, registry, DEFAULT_POLICY, report)
        cells = noise.noise_all(
            table,
            SigmaTable.default(),
            noise.NoiseSource(0),
            lambda k: registry.region_type(k.region_id, k.level),
            sigma_scale=0.0,
        )
        observed = {(c.key.category.value, c.key.region_id): c.noisy_value for c in cells}
        assert observed == {
            ("A0", "California"): 2.0,
            ("A0", "San Benito"): 1.0,
            ("A2", "California"): 1.0,
            ("A2", "San Benito"): 1.0,
            ("A1", "California"): 1.0,
            ("A1", "San Benito"): 1.0,
        }
        assert report.events_used == 3
        assert report.contributions_in == 15
        # The four Small-postal candidates fall to the expansion-time filter.
        assert report.contributions_dropped["small_postal"] == 4

    def test_event_conservation(self, tri_registry):
        import numpy as np

        from dptrends.model import SearchEvent

        rng = np.random.default_rng(21)
        postals = ["st1-c-small-p0", "st1-c-medium-p0", "st1-c-large-p0"]
        labels = [None, Category.VACCINATION_INTENT, Category.SAFETY_SIDE_EFFECTS]
        events = [
            SearchEvent(
                f"u{rng.integers(8)}",
                MONDAY + dt.timedelta(days=int(rng.integers(14))),
                postals[rng.integers(len(postals))],
                labels[rng.integers(len(labels))],
            )
            for _ in range(400)
        ]
        report = RunReport()
        report.events_in = len(events)
        bound_all(events, tri_registry, DEFAULT_POLICY, report)
        assert report.events_used + sum(report.events_dropped.values()) == report.events_in


class TestRunValidation:
    def test_bad_delta(self, demo_paths, tmp_path):
        config = make_config(tmp_path, *demo_paths, delta=1.5)
        with pytest.raises(ValidationError):
            run(config)

    def test_seed_required(self, demo_paths, tmp_path):
        config = make_config(tmp_path, *demo_paths, seed=None)
        with pytest.raises(ValidationError):
            run(config)

    def test_missing_registry(self, demo_paths, tmp_path):
        config = make_config(tmp_path, tmp_path / "nope.csv", demo_paths[1])
        with pytest.raises(ValidationError):
            run(config)

    def test_unknown_postal_aborts_with_stage(self, demo_paths, tmp_path):
        events_path = tmp_path / "bad_events.csv"
        events_path.write_text("user_id,date,postal_code,label\nu,2021-03-09,00000,A1\n")
        config = make_config(tmp_path, demo_paths[0], events_path)
        with pytest.raises(StageError) as excinfo:
            run(config)
        assert excinfo.value.stage == "bounding"


class TestRunEndToEnd:
    def test_deterministic_output(self, tri_registry, tmp_path):
        registry_path, events_path = corpus(tmp_path, tri_registry)
        config_a = make_config(tmp_path, registry_path, events_path, output_path=tmp_path / "a.csv")
        run(config_a)
        config_b = make_config(tmp_path, registry_path, events_path, output_path=tmp_path / "b.csv")
        # Reuse of the persisted scaling factor keeps releases comparable.
        run(config_b)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_report_structure_and_conservation(self, tri_registry, tmp_path):
        registry_path, events_path = corpus(tmp_path, tri_registry)
        config = make_config(tmp_path, registry_path, events_path)
        report = run(config)
        assert report.delta == 1e-5
        assert set(report.case_epsilons) == {"large", "medium", "small"}
        assert report.rows_released > 0
        assert report.events_used + sum(report.events_dropped.values()) + report.malformed == (
            report.events_in
        )
        data = report.to_dict()
        assert json.dumps(data)  # JSON-serializable

    def test_guarantee_recomputed_from_actual_table(self, tri_registry, tmp_path):
        from dptrends.accountant import certify

        registry_path, events_path = corpus(tmp_path, tri_registry)
        sigma_path = tmp_path / "sigmas.csv"
        write_sigma_table(SigmaTable.default().scaled(2.0), sigma_path)
        config = make_config(
            tmp_path, registry_path, events_path, sigma_table_path=sigma_path
        )
        report = run(config)
        # The report certifies the table actually used: the custom doubled
        # table combined with the sigma-scale hook, never a hard-coded value.
        expected = certify(
            SigmaTable.default().scaled(2.0).scaled(config.sigma_scale), config.delta
        )
        assert report.epsilon == pytest.approx(expected.guarantee.epsilon, abs=1e-9)
        assert report.epsilon > certify(SigmaTable.default().scaled(2.0), 1e-5).guarantee.epsilon

    def test_sigma_scale_zero_reports_infinite_epsilon(self, tri_registry, tmp_path):
        registry_path, events_path = corpus(tmp_path, tri_registry)
        config = make_config(tmp_path, registry_path, events_path, sigma_scale=0.0)
        report = run(config)
        assert report.epsilon == float("inf")

    def test_secure_rng_runs_differ(self, tri_registry, tmp_path):
        registry_path, events_path = corpus(tmp_path, tri_registry)
        out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (out_a, out_b):
            config = make_config(
                tmp_path, registry_path, events_path, output_path=out,
                seed=None, secure_rng=True,
            )
            run(config)
        assert out_a.read_bytes() != out_b.read_bytes()

    def test_empty_national_series_is_numerical_error(self, tri_registry, tmp_path):
        # Unlabeled traffic only: no released categories exist anywhere.
        registry_path = tmp_path / "registry.csv"
        write_registry(tri_registry.records(), registry_path)
        spec = SyntheticSpec(
            users_per_postal={"st1-c-large-p0": 20},
            daily_rates={"none": 1.0},
            weeks=2,
            start_monday=MONDAY,
            seed=3,
        )
        events_path = tmp_path / "events.csv"
        write_events_csv(generate_events(spec, tri_registry), events_path)
        config = make_config(tmp_path, registry_path, events_path)
        with pytest.raises(NumericalError):
            run(config)

    def test_scaling_state_persisted_and_reused(self, tri_registry, tmp_path):
        registry_path, events_path = corpus(tmp_path, tri_registry)
        config = make_config(tmp_path, registry_path, events_path)
        first = run(config)
        assert not first.scaling_reused
        state_path = tmp_path / "scaling_state.json"
        assert state_path.is_file()
        saved = json.loads(state_path.read_text())
        assert saved["factor"] == pytest.approx(first.scaling_factor)

        registry_path2, events_path2 = corpus(tmp_path, tri_registry, seed=78)
        config2 = make_config(
            tmp_path, registry_path2, events_path2, output_path=tmp_path / "second.csv"
        )
        second = run(config2)
        assert second.scaling_reused
        assert second.scaling_factor == first.scaling_factor

    def test_absent_as_zero_changes_c3_derivability(self, tri_registry, tmp_path):
        """With only intent-labeled traffic, the overall category exists only
        in absent-as-zero mode (safety/other cells are structurally missing)."""
        registry_path = tmp_path / "registry.csv"
        write_registry(tri_registry.records(), registry_path)
        spec = SyntheticSpec(
            users_per_postal={"st1-c-large-p0": 40, "st1-c-large-p1": 40},
            daily_rates={"A1": 0.5, "none": 1.0},
            weeks=6,
            start_monday=MONDAY,
            seed=9,
        )
        events_path = tmp_path / "events.csv"
        write_events_csv(generate_events(spec, tri_registry), events_path)

        config_off = make_config(
            tmp_path, registry_path, events_path,
            output_path=tmp_path / "off.csv", sigma_scale=0.0,
        )
        with pytest.raises(NumericalError):
            run(config_off)  # no overall category anywhere -> empty national series

        config_on = make_config(
            tmp_path, registry_path, events_path,
            output_path=tmp_path / "on.csv", sigma_scale=0.0, absent_as_zero=True,
        )
        report = run(config_on)
        assert report.rows_released > 0
        header, *rows = (tmp_path / "on.csv").read_text().splitlines()
        assert any(row.split(",")[5] for row in rows)  # overall column populated

    def test_noise_empty_cells_covers_the_universe(self, tri_registry, tmp_path):
        """With the completion switch on, every noiseable cell of each observed
        week gets a noisy value, traffic or not."""
        registry_path = tmp_path / "registry.csv"
        write_registry(tri_registry.records(), registry_path)
        # One lone search: observed-keys-only would noise 3 cells.
        events_path = tmp_path / "events.csv"
        events_path.write_text(
            "user_id,date,postal_code,label\nu,2021-01-04,st1-c-large-p0,none\n"
        )
        config = make_config(
            tmp_path, registry_path, events_path, noise_empty_cells=True, sigma_scale=1.0
        )
        with pytest.raises(NumericalError):
            run(config)  # everything is reliability-dropped, but cells were noised
        # 1 state + 3 counties + 4 non-Small postals, 4 categories, 1 week.
        report = RunReport()
        from dptrends.pipeline import _zero_fill_universe

        events, _ = ingest_events(events_path)
        table = bound_all(events, tri_registry, DEFAULT_POLICY, report)
        assert len(table.counts) == 3
        filled = _zero_fill_universe(table, tri_registry)
        assert len(filled.counts) == (1 + 3 + 4) * 4
        assert all(filled[k] in (0, 1) for k in filled.counts)

    def test_inadmissible_postal_counted(self, tmp_path):
        from dptrends.geo import GeoLevel, RegionRecord, Registry

        records = [
            RegionRecord("S", GeoLevel.STATE, "US", None, 1000.0),
            RegionRecord("c1", GeoLevel.COUNTY, "S", 900_000, 100.0),
            RegionRecord("p-tiny", GeoLevel.POSTAL_CODE, "c1", None, 1.0),
        ]
        registry = Registry(records)
        report = RunReport()
        from dptrends.model import SearchEvent

        events = [SearchEvent("u", dt.date(2021, 3, 9), "p-tiny", None)]
        table = bound_all(events, registry, DEFAULT_POLICY, report)
        # Postal key omitted, county and state still counted.
        assert len(table.counts) == 2
        assert report.events_dropped[NO_ADMISSIBLE_REGION] == 0
        assert report.events_used == 1
