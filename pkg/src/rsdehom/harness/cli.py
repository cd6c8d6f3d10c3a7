"""Command line interface.

    rsdehom field check SPEC
    rsdehom corrector solve  [CONFIG] [overrides]
    rsdehom effective compute [CONFIG] [overrides]
    rsdehom verify {ipm,ergodic,clt} [CONFIG] [overrides]
    rsdehom report plot REPORT [--output DIR]

Without CONFIG, ``--field`` is required and the remaining keys take their
defaults.  Exit status: 0 pass, 1 flag, 2 fail (including errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigInvalid, HomogError
from ..medium import build_field, load_spec
from .config import ExperimentConfig, load_config
from .plots import emit_plot_data
from .report import ExperimentReport
from .runner import run

ACTIONS = {
    ("corrector", "solve"): "corrector",
    ("effective", "compute"): "effective",
    ("verify", "ipm"): "ipm",
    ("verify", "ergodic"): "ergodic",
    ("verify", "clt"): "clt",
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="experiment config (YAML)")
    p.add_argument("--field", help="field spec path or bundled:<name>")
    p.add_argument("--name")
    p.add_argument("--cutoff", type=int)
    p.add_argument("--eps", type=_floats, help="comma separated ladder")
    p.add_argument("--T", type=float)
    p.add_argument("--c", type=float, help="dt = c eps^2")
    p.add_argument("--dt", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--limit-paths", dest="limit_paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="output directory (default $RSDEHOM_OUTPUT/<name>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsdehom", description=__doc__.split("\n\n")[0])
    top = parser.add_subparsers(dest="group", required=True)

    field = top.add_parser("field", help="field specs").add_subparsers(dest="action", required=True)
    fc = field.add_parser("check", help="validate a spec and print its ellipticity certificate")
    fc.add_argument("spec")
    fc.add_argument("--cert-grid", type=int, default=64)

    for group, actions in (("corrector", ["solve"]), ("effective", ["compute"]),
                           ("verify", ["ipm", "ergodic", "clt"])):
        sub = top.add_parser(group).add_subparsers(dest="action", required=True)
        for a in actions:
            _add_experiment_args(sub.add_parser(a))

    rp = top.add_parser("report").add_subparsers(dest="action", required=True)
    plot = rp.add_parser("plot", help="write CSV series for a saved report")
    plot.add_argument("report")
    plot.add_argument("--output")
    return parser


def _config_from_args(args, kind: str) -> ExperimentConfig:
    keys = ("field", "name", "cutoff", "eps", "T", "c", "dt", "paths", "limit_paths", "seed", "tol", "workers",
            "output")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    if args.config:
        cfg = load_config(args.config, **overrides)
        if cfg.kind != kind:
            raise HomogError(f"config kind {cfg.kind!r} does not match the command ({kind!r})")
        return cfg
    if "field" not in overrides:
        raise ConfigInvalid("either a config file or --field is required")
    overrides.setdefault("name", f"{kind}-{Path(overrides['field']).stem.replace('bundled:', '')}")
    return ExperimentConfig.from_dict(dict(overrides, kind=kind), source=str(Path.cwd() / "cli"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.group == "field":
            field = build_field(load_spec(args.spec), args.cert_grid)
            print(json.dumps({"name": field.spec.name, "digest": field.spec.digest(), "Lambda": field.Lambda,
                              "eig_min": field.eig_min, "eig_max": field.eig_max}, indent=2))
            return 0
        if args.group == "report":
            rep = ExperimentReport.load(args.report)
            out = Path(args.output) if args.output else Path(args.report).parent
            for p in emit_plot_data(rep, out):
                print(p)
            return rep.exit_code
        cfg = _config_from_args(args, ACTIONS[(args.group, args.action)])
        rep = run(cfg)
        for r in rep.rows:
            print(f"{r.status:5s} {r.name}")
        print(f"status: {rep.status}  report: {cfg.output_dir() / (cfg.name + '.report.json')}")
        return rep.exit_code
    except (HomogError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
