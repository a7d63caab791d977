"""Report emission: JSON summary, one CSV per table, static PNG plots.

CSV bytes are a pure function of the config (floats are written with
round-trip repr and no timestamps appear in tables), which is what the
replay-determinism guarantee is checked against.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .experiments import ExperimentReport  # noqa: E402

__all__ = ["write_report", "csv_hashes"]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_report(report: ExperimentReport, outdir, make_plots: bool = True) -> dict:
    """Write all artifacts under outdir; returns {artifact name: path}."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, table in report.tables.items():
        path = outdir / f"{name}.csv"
        lines = [",".join(table["header"])]
        lines += [",".join(_fmt(v) for v in row) for row in table["rows"]]
        path.write_text("\n".join(lines) + "\n")
        written[name] = str(path)

    summary = {
        "experiment": report.experiment,
        "config_hash": report.config_hash,
        "config": report.config,
        "verdicts": report.verdicts,
        "passed": report.passed,
        "failure": report.failure,
        "wallclock_s": report.wallclock_s,
        "workers": report.workers,
        "tables": sorted(report.tables),
    }
    report_path = outdir / "report.json"
    report_path.write_text(json.dumps(summary, indent=2, sort_keys=True,
                                      default=str))
    written["report"] = str(report_path)

    if make_plots:
        for fname, painter in report.plots:
            fig = plt.figure(figsize=(6, 4.2), dpi=120)
            try:
                painter(fig)
                fig.tight_layout()
                fig.savefig(outdir / fname)
            finally:
                plt.close(fig)
            written[fname] = str(outdir / fname)
    return written


def csv_hashes(outdir) -> dict:
    """sha256 of every CSV in outdir, keyed by filename (replay checks)."""
    out = {}
    for path in sorted(Path(outdir).glob("*.csv")):
        out[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out
