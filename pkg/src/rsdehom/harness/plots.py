"""CSV series for plotting, one file per figure family.

eps_discrepancy.csv   experiment, eps, value, stderr
decay_i<k>.csv        lambda, lam_u2, sqrtlam_Du, dist_to_zeta  (one per direction)
clt.csv               eps, n, dt, var_discrepancy, var_z, K_z, ks_stat, ks_pvalue
marginal.csv          eps, y, empirical_cdf, analytic_cdf

A family with no data in the report is written with its header only.
"""

from __future__ import annotations

import csv
from pathlib import Path

from ..corrector import DecayReport
from ..errors import IoFailure

EPS_COLUMNS = ("experiment", "eps", "value", "stderr")
CLT_COLUMNS = ("eps", "n", "dt", "var_discrepancy", "var_z", "K_z", "ks_stat", "ks_pvalue")
MARGINAL_COLUMNS = ("eps", "y", "empirical_cdf", "analytic_cdf")


def _write(path: Path, columns, rows) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in columns])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def emit_plot_data(report, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    sec = report.sections
    files = [
        _write(outdir / "eps_discrepancy.csv", EPS_COLUMNS, sec.get("eps_trend", [])),
        _write(outdir / "clt.csv", CLT_COLUMNS, sec.get("clt", [])),
        _write(outdir / "marginal.csv", MARGINAL_COLUMNS, sec.get("marginal", [])),
    ]
    decay = sec.get("decay", {})
    if not decay:
        files.append(_write(outdir / "decay.csv", DecayReport.COLUMNS, []))
    for i, d in sorted(decay.items()):
        rows = [dict(zip(DecayReport.COLUMNS, vals))
                for vals in zip(d["lambda"], d["lam_u2"], d["sqrtlam_Du"], d["dist_to_zeta"])]
        files.append(_write(outdir / f"decay_i{i}.csv", DecayReport.COLUMNS, rows))
    return files
