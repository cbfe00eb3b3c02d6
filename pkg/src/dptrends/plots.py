"""Run-report figures rendered next to the release file."""

from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .pipeline import RunReport
from .postprocess import RELEASE_HEADER

_SERIES_LABELS = {
    "sni_covid19_vaccination": "overall",
    "sni_vaccination_intent": "intent",
    "sni_safety_side_effects": "safety",
}


def _read_release(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RELEASE_HEADER:
            raise ValueError(f"unexpected release header: {reader.fieldnames}")
        return list(reader)


def national_series_figure(release_csv: Path, out_path: Path) -> Path | None:
    """Country-level weekly series for the three released categories."""
    rows = [r for r in _read_release(release_csv) if not r["state"]]
    if not rows:
        return None
    rows.sort(key=lambda r: r["week_start"])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for column, label in _SERIES_LABELS.items():
        weeks = [dt.date.fromisoformat(r["week_start"]) for r in rows if r[column]]
        values = [float(r[column]) for r in rows if r[column]]
        if weeks:
            ax.plot(weeks, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("week")
    ax.set_ylabel("scaled normalized popularity")
    ax.set_title("National weekly series")
    ax.legend()
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def drop_summary_figure(report: RunReport, out_path: Path) -> Path:
    """What each stage removed: bounding constraints, reliability, sparsity."""
    labels = list(report.contributions_dropped) + ["reliability", "sparsity"]
    values = list(report.contributions_dropped.values()) + [
        report.reliability_dropped,
        report.sparsity_points_dropped,
    ]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(labels)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("items dropped")
    ax.set_title("Drops per stage (contributions / points)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def strata_figure(report: RunReport, out_path: Path) -> Path | None:
    """Noised cell counts per noise stratum."""
    if not report.cells_per_stratum:
        return None
    items = sorted(report.cells_per_stratum.items())
    labels = [k for k, _ in items]
    values = [v for _, v in items]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.barh(range(len(labels)), values, color="#54a868")
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("cells noised")
    ax.set_title("Cells per stratum")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_run_figures(release_csv: str | Path, report: RunReport, out_dir: str | Path) -> list[Path]:
    """Render all run figures into ``out_dir``; returns the files written."""
    release_csv = Path(release_csv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = release_csv.stem
    written = []
    for result in (
        national_series_figure(release_csv, out_dir / f"{stem}_national_series.png"),
        drop_summary_figure(report, out_dir / f"{stem}_drop_summary.png"),
        strata_figure(report, out_dir / f"{stem}_strata.png"),
    ):
        if result is not None:
            written.append(result)
    return written
