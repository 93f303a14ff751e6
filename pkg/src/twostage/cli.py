"""Command-line entry point: ``twostage assign | analyze | simulate``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ExperimentPanel, TupleStructure, read_panel_csv, validate_panel, write_panel_csv
from .estimate import point_estimates
from .randomize import FirstStageDesign, SecondStageDesign, assign_first_stage, assign_second_stage_units
from .regress import OLS_METHODS, RegressionSpec, ols_inference
from .simulate import SimConfig
from .variance import ESTIMANDS, adjusted_t_test, routed_variance

log = logging.getLogger("twostage")

EXIT_CODES = {"io": 3, "validation": 4, "numeric": 5, "config": 6}
METHODS = ("adjusted",) + tuple(OLS_METHODS)
SMALL_TUPLE_LIMIT = 8


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@contextlib.contextmanager
def phase(category: str):
    """Translate library exceptions raised inside the block into ``CliError``."""
    try:
        yield
    except CliError:
        raise
    except OSError as e:
        raise CliError("io", str(e)) from e
    except np.linalg.LinAlgError as e:
        raise CliError("numeric", str(e)) from e
    except FloatingPointError as e:
        raise CliError("numeric", str(e)) from e
    except (ValueError, KeyError, TypeError) as e:
        raise CliError(category, str(e)) from e


def _read_json(path) -> dict:
    with phase("io"):
        text = Path(path).read_text(encoding="utf-8")
    with phase("config"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError("config", f"{path}: invalid JSON ({e})") from e


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    with phase("io"):
        out.mkdir(parents=True, exist_ok=True)
    return out


# --- assign --------------------------------------------------------------------------


def _design_from_config(d: dict):
    known = {"first_stage", "second_stage", "seed"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown design keys {sorted(extra)}")
    if "first_stage" not in d:
        raise ValueError("design config needs a 'first_stage' block")
    first = FirstStageDesign.from_dict(d["first_stage"])
    second = SecondStageDesign.from_dict(d.get("second_stage", {}))
    return first, second


def _resolve_seed(cli_seed, config_seed) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    if config_seed is None:
        raise CliError("config", "no seed given: pass --seed or set 'seed' in the config")
    return int(config_seed)


def cmd_assign(args) -> int:
    cfg = _read_json(args.design)
    with phase("config"):
        first, second = _design_from_config(cfg)
        seed = _resolve_seed(args.seed, cfg.get("seed"))
    log.info("reading %s", args.clusters)
    with phase("io"):
        panel = read_panel_csv(args.clusters, args.units, pi2=second.pi2)
    with phase("validation"):
        fa = assign_first_stage(first, panel.c, panel.n, seed, panel.cluster_id, panel.s)
        ts = fa.tuple_structure
        if ts.mode == "small_strata":
            s = np.empty(panel.G, dtype=object)
            pos = panel.cluster_position()
            for j, t in enumerate(ts.tuples):
                for cid in t:
                    s[pos[cid]] = f"t{j + 1}"
        else:
            s = np.array([ts.large_strata[c] for c in panel.cluster_id], dtype=object)
        z = panel.z
        if args.units is not None:
            z = assign_second_stage_units(
                second, panel.unit_cluster, fa.treated, seed, x=panel.x, b=panel.b
            )
        assigned = panel.replace(h=fa.h(second.pi2), s=s, z=z, pi1=first.treated_share, tuple_structure=ts)
    out = _out_dir(args.out)
    manifest = {
        "seed": seed,
        "pi1": first.treated_share,
        "pi2": second.pi2,
        "k": ts.k if ts.mode == "small_strata" else None,
        "l": ts.l if ts.mode == "small_strata" else None,
        "first_stage": first.to_dict(),
        "second_stage": second.to_dict(),
        "tuple_structure": ts.to_dict(),
    }
    with phase("io"):
        units_out = out / "units.csv" if args.units is not None else None
        write_panel_csv(assigned, out / "clusters.csv", units_out)
        _write_json(out / "design_manifest.json", manifest)
    n_tr = int(fa.treated.sum())
    detail = f", {ts.n_tuples} tuples of k={ts.k}" if ts.mode == "small_strata" else ""
    print(f"assigned {n_tr} of {panel.G} clusters{detail}; wrote {out}")
    return 0


# --- analyze -------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateReport:
    g: int
    pi1: float
    pi1_source: str
    design_mode: str
    alpha: float
    estimates: dict
    ols: dict
    warnings: list

    def to_json(self) -> dict:
        return {
            "g": self.g,
            "pi1": self.pi1,
            "pi1_source": self.pi1_source,
            "design_mode": self.design_mode,
            "alpha": self.alpha,
            "estimates": self.estimates,
            "ols": self.ols,
            "warnings": self.warnings,
        }

    def format_text(self) -> str:
        level = int(round(100 * (1 - self.alpha)))
        head = ["method", "estimand", "estimate", "se", f"{level}% ci", "p-value"]
        rows = []
        for name, r in self.estimates.items():
            rows.append([f"adjusted ({r['variance_estimator']})", name, r["estimate"], r["se"], r["ci"], r["pvalue"]])
        for method, effects in self.ols.items():
            for effect, r in effects.items():
                rows.append([method, effect, r["estimate"], r["se"], r["ci"], r["pvalue"]])
        cells = [
            [m, e, f"{est:.4f}", f"{se:.4f}", f"[{ci[0]:.4f}, {ci[1]:.4f}]", f"{p:.4f}"]
            for m, e, est, se, ci, p in rows
        ]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *cells)]
        fmt = lambda row: "  ".join(  # noqa: E731
            str(v).ljust(w) if i < 2 else str(v).rjust(w) for i, (v, w) in enumerate(zip(row, widths))
        )
        lines = [
            f"G = {self.g} clusters, pi1 = {self.pi1:.4f} ({self.pi1_source}), design: {self.design_mode}",
            fmt(head),
            fmt(["-" * w for w in widths]),
        ]
        lines += [fmt(c) for c in cells]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def _tuples_from_labels(panel: ExperimentPanel) -> TupleStructure:
    """Structure implied by the ``s_g`` column when no manifest is supplied.

    Equal-sized label groups of at most ``SMALL_TUPLE_LIMIT`` clusters with
    a common treated count are read as matched tuples, in order of first
    appearance; anything else as large strata (one stratum if unlabeled).
    """
    labels = panel.s
    if any(v is None for v in labels):
        if all(v is None for v in labels):
            return TupleStructure(mode="complete", large_strata={c: "all" for c in panel.cluster_id})
        raise ValueError("some clusters lack an s_g label")
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    sizes = {len(v) for v in groups.values()}
    treated = {int(panel.treated[v].sum()) for v in groups.values()}
    if len(groups) >= 2 and len(sizes) == 1 and len(treated) == 1:
        k, l = sizes.pop(), treated.pop()
        if 2 <= k <= SMALL_TUPLE_LIMIT and 0 < l < k:
            tuples = tuple(tuple(panel.cluster_id[i] for i in v) for v in groups.values())
            return TupleStructure(tuples=tuples, k=k, l=l, mode="small_strata")
    return TupleStructure(mode="large_strata", large_strata=dict(zip(panel.cluster_id, labels)))


def _parse_tau(text):
    if text is None:
        return None
    try:
        return float(text)
    except ValueError:
        pass
    if text.startswith("@"):
        return _read_json(text[1:])
    with phase("config"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError("config", f"--tau must be a number, a JSON object or @file ({e})") from e


def _ci(test) -> list:
    return [test.ci_lo, test.ci_hi]


def cmd_analyze(args) -> int:
    methods = args.method or ["adjusted"]
    tau = _parse_tau(args.tau)
    manifest = _read_json(args.manifest) if args.manifest else None
    if manifest is None and not args.empirical_pi1:
        raise CliError("config", "analysis needs --manifest or --empirical-pi1")
    with phase("io"):
        panel = read_panel_csv(args.clusters, args.units)
    with phase("config"):
        if manifest is not None:
            ts = TupleStructure.from_dict(manifest["tuple_structure"])
            pi1, source = float(manifest["pi1"]), "design manifest"
        else:
            ts = _tuples_from_labels(panel)
            pi1, source = None, "empirical"
        if args.empirical_pi1:
            # a one-armed panel keeps pi1 unset so validation reports the missing arm
            pi1 = panel.empirical_pi1 if 0 < panel.empirical_pi1 < 1 else None
            source = "empirical"
        panel = panel.replace(tuple_structure=ts, pi1=pi1)
    report_warnings: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        check = validate_panel(panel)
        if not check.ok:
            raise CliError("validation", "; ".join(check.violations))
        with phase("validation"):
            est = point_estimates(panel).as_dict()
            estimates = {}
            if "adjusted" in methods:
                for name in ESTIMANDS:
                    v = routed_variance(panel, name, tau=tau)
                    test = adjusted_t_test(est[name], v, alpha=args.alpha)
                    estimates[name] = {
                        "estimate": est[name],
                        "variance_estimator": v.kind,
                        "v": v.v,
                        "se": v.se,
                        "ci": _ci(test),
                        "tstat": test.tstat,
                        "pvalue": test.pvalue,
                        "reject": test.reject,
                        "floored": v.floored,
                        "tau_spec": tau if ts.mode != "small_strata" else None,
                    }
            ols = {}
            for method in methods:
                if method == "adjusted":
                    continue
                fit = ols_inference(panel, RegressionSpec.for_method(method))
                ols[method] = {}
                for effect, coef in (("primary", "beta1"), ("spillover", "beta2")):
                    t, p, rej, lo, hi = fit.t_test(coef, 0.0, args.alpha)
                    ols[method][effect] = {
                        "estimate": fit.value(coef),
                        "se": fit.se(coef),
                        "ci": [lo, hi],
                        "tstat": t,
                        "pvalue": p,
                        "reject": rej,
                    }
    report_warnings += list(check.warnings)
    report_warnings += [str(w.message) for w in caught if str(w.message) not in report_warnings]
    for w in report_warnings:
        print(f"warning: {w}", file=sys.stderr)
    report = EstimateReport(
        g=panel.G,
        pi1=panel.pi1_for_analysis,
        pi1_source=source,
        design_mode=ts.mode,
        alpha=args.alpha,
        estimates=estimates,
        ols=ols,
        warnings=report_warnings,
    )
    out = _out_dir(args.out)
    text = report.format_text()
    with phase("io"):
        _write_json(out / "estimate_report.json", report.to_json())
        (out / "estimate_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --- simulate ------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    raw = _read_json(args.config)
    with phase("config"):
        if args.seed is not None:
            raw = dict(raw, dgp=dict(raw.get("dgp", {}), seed=int(args.seed)))
        if args.replications is not None:
            raw = dict(raw, replications=args.replications)
        cfg = SimConfig.from_dict(raw)
    with phase("numeric"):
        table = cfg.run(args.workers)
    out = _out_dir(args.out)
    with phase("io"):
        table.to_csv(out / "mc_table.csv")
        _write_json(out / "mc_table.json", table.to_json())
        (out / "mc_table.txt").write_text(table.format_text(), encoding="utf-8")
    for line in table.summary_lines():
        print(line)
    return 0


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("assign", help="randomize clusters and units")
    a.add_argument("--clusters", required=True)
    a.add_argument("--units")
    a.add_argument("--design", required=True, help="design config (JSON)")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_assign)

    z = sub.add_parser("analyze", help="estimate effects and test them")
    z.add_argument("--clusters", required=True)
    z.add_argument("--units", required=True)
    z.add_argument("--manifest")
    z.add_argument("--method", action="append", choices=METHODS)
    z.add_argument("--alpha", type=float, default=0.05)
    z.add_argument("--tau", help="number, JSON object of stratum -> tau, or @file.json")
    z.add_argument("--empirical-pi1", action="store_true", help="use G1/G as the treated share")
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte Carlo design comparison")
    s.add_argument("--config", "--design", dest="config", required=True, help="simulation config (JSON)")
    s.add_argument("--seed", type=int, help="override dgp.seed")
    s.add_argument("--replications", type=int)
    s.add_argument("--workers", type=int, help="worker processes (default: TWOSTAGE_THREADS or 1)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    if not 0 < getattr(args, "alpha", 0.05) < 1:
        print("error[config]: --alpha must lie in (0, 1)", file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        return args.func(args)
    except CliError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES[e.category]


if __name__ == "__main__":
    sys.exit(main())
