"""Experiment reports: check rows, JSON round trip and the anchor linter."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from ..errors import IoFailure
from ..ergodics import EnsembleStat, z_status

REPORT_SCHEMA = 1
STATUS_RANK = {"pass": 0, "flag": 1, "fail": 2}
EXIT_CODES = STATUS_RANK


@dataclass
class ReportRow:
    name: str
    anchor: str
    target: float | None
    estimate: float | None
    stderr: float | None = None
    z: float | None = None
    tol: float | None = None
    status: str = "pass"
    detail: dict = dc_field(default_factory=dict)


def _num(v):
    return None if v is None else float(v)


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def stat_row(stat: EnsembleStat, status: str | None = None, **detail) -> ReportRow:
    d = dict(stat.extra)
    d.update({"n": stat.n, "eps": stat.eps, "dt": stat.dt, "target_source": stat.target_source})
    d.update(detail)
    return ReportRow(stat.name, stat.anchor, _num(stat.target), _num(stat.estimate), _num(stat.stderr),
                     _num(stat.z), None, status or stat.status, d)


def tolerance_row(name: str, anchor: str, estimate: float, target: float, tol: float, **detail) -> ReportRow:
    ok = abs(float(estimate) - float(target)) <= tol
    return ReportRow(name, anchor, float(target), float(estimate), None, None, tol,
                     "pass" if ok else "fail", detail)


def bound_row(name: str, anchor: str, value: float, floor: float, flag_only: bool = False,
              **detail) -> ReportRow:
    """Passes when value >= floor; otherwise fails (or flags)."""
    bad = "flag" if flag_only else "fail"
    return ReportRow(name, anchor, float(floor), float(value), None, None, None,
                     "pass" if float(value) >= float(floor) else bad, dict(detail, relation=">="))


def ceiling_row(name: str, anchor: str, value: float, ceiling: float, flag_only: bool = False,
                **detail) -> ReportRow:
    """Passes when value <= ceiling; otherwise fails (or flags)."""
    bad = "flag" if flag_only else "fail"
    return ReportRow(name, anchor, float(ceiling), float(value), None, None, None,
                     "pass" if float(value) <= float(ceiling) else bad, dict(detail, relation="<="))


def check_row(name: str, anchor: str, ok: bool, **detail) -> ReportRow:
    return ReportRow(name, anchor, None, None, None, None, None, "pass" if ok else "fail", detail)


def z_row(name: str, anchor: str, estimate: float, target: float, z: float, stderr: float | None = None,
          z_limit: float | None = None, **detail) -> ReportRow:
    if z_limit is None:
        status = z_status(z)
    else:
        status = "pass" if abs(z) <= z_limit else "fail"
    return ReportRow(name, anchor, float(target), float(estimate), stderr, float(z), z_limit, status, detail)


@dataclass
class ExperimentReport:
    config: dict
    kind: str
    rows: list = dc_field(default_factory=list)
    sections: dict = dc_field(default_factory=dict)
    timing: dict = dc_field(default_factory=dict)
    artifacts: list = dc_field(default_factory=list)
    schema: int = REPORT_SCHEMA

    @property
    def status(self) -> str:
        worst = max((STATUS_RANK[r.status] for r in self.rows), default=0)
        return {v: k for k, v in STATUS_RANK.items()}[worst]

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def add(self, *rows: ReportRow) -> None:
        self.rows.extend(rows)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "schema": self.schema,
            "kind": self.kind,
            "status": self.status,
            "config": jsonable(self.config),
            "rows": [jsonable(asdict(r)) for r in self.rows],
            "sections": jsonable(self.sections),
            "artifacts": list(self.artifacts),
        }
        if timing:
            out["timing"] = dict(self.timing)
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        rows = [ReportRow(**r) for r in data.get("rows", [])]
        return cls(config=data["config"], kind=data["kind"], rows=rows, sections=data.get("sections", {}),
                   timing=data.get("timing", {}), artifacts=list(data.get("artifacts", [])),
                   schema=data.get("schema", REPORT_SCHEMA))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path, timing: bool = True) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_json(timing))
        except OSError as exc:
            raise IoFailure(f"cannot write report {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentReport":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read report {path}: {exc}") from exc


class LintError(ValueError):
    pass


def lint_report(report: ExperimentReport) -> None:
    """Every row must name the claim it checks and carry a known status."""
    problems = []
    for i, r in enumerate(report.rows):
        if not isinstance(r.anchor, str) or not r.anchor.strip():
            problems.append(f"row {i} ({r.name!r}) has no anchor")
        if r.status not in STATUS_RANK:
            problems.append(f"row {i} ({r.name!r}) has status {r.status!r}")
        for key in ("z", "estimate", "target"):
            v = getattr(r, key)
            if isinstance(v, float) and math.isnan(v):
                problems.append(f"row {i} ({r.name!r}) has NaN {key}")
    if problems:
        raise LintError("; ".join(problems))
