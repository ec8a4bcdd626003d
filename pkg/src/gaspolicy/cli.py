"""Batch front-end: ``solve``, ``price`` and ``validate`` subcommands.

Exit codes: 0 optimal, 1 audit failure, 2 infeasible, 3 unbounded,
4 non-convergent, 5 configuration error. Every output file carries the config
hash and seed; identical configurations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import policy as pol
from . import pricing, uncertainty, validation
from .linearization import LinearizationError, linearize
from .network import GasNetwork, NetworkError, load_network
from .steady_state import ConvergenceError, InfeasibleError, StationaryPoint, SteadyStateError, solve_deterministic

EXIT_OK, EXIT_AUDIT, EXIT_INFEASIBLE, EXIT_UNBOUNDED, EXIT_NONCONVERGENT, EXIT_CONFIG = 0, 1, 2, 3, 4, 5
OUT_ENV = "GASPOLICY_OUT"
STATUS_EXIT = {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE, "unbounded": EXIT_UNBOUNDED}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: str
    mode: str = "cc"
    eps: float = 0.05
    psi_pi: float = 0.0
    psi_phi: float = 0.0
    mask: str = pol.ALL_ASSETS
    dist: str = uncertainty.GAUSSIAN
    samples: int = 1000
    seed: int = 0
    p: float = 0.1
    v: float = 0.1
    sweep_psi_pi: list = field(default_factory=list)
    sweep_psi_phi: list = field(default_factory=list)
    out: str = ""

    def check(self) -> None:
        if not Path(self.network).is_file():
            raise ConfigError(f"network file not found: {self.network}")
        if self.mode not in ("det", "cc"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError("eps must lie in (0, 1)")
        if self.psi_pi < 0 or self.psi_phi < 0 or any(x < 0 for x in self.sweep_psi_pi + self.sweep_psi_phi):
            raise ConfigError("variance penalties must be non-negative")
        if self.mask not in pol.MASKS:
            raise ConfigError(f"unknown policy mask '{self.mask}'")
        if self.dist not in uncertainty.TAGS:
            raise ConfigError(f"unknown distribution tag '{self.dist}'")
        if self.samples < 1:
            raise ConfigError("need at least one sample")
        if not (0 < self.p < 1 and 0 < self.v < 1):
            raise ConfigError("p and v must lie in (0, 1)")

    def digest(self) -> str:
        data = asdict(self)
        data.pop("out")
        data["network"] = hashlib.sha256(Path(self.network).read_bytes()).hexdigest()
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()] if text else []


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gaspolicy", description="Chance-constrained control policies for gas networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("network", help="network JSON file")
        p.add_argument("--mode", choices=["det", "cc"], default="cc", help="det sets the safety parameter to zero")
        p.add_argument("--eps", type=float, default=0.05, help="joint violation budget")
        p.add_argument("--psi-pi", type=float, default=0.0, help="penalty on pressure standard deviations")
        p.add_argument("--psi-phi", type=float, default=0.0, help="penalty on flow standard deviations")
        p.add_argument("--mask", choices=pol.MASKS, default=pol.ALL_ASSETS)
        p.add_argument("--dist", choices=uncertainty.TAGS, default=uncertainty.GAUSSIAN)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./gaspolicy-out)")

    solve = sub.add_parser("solve", help="stationary point and policy optimization")
    common(solve)
    price = sub.add_parser("price", help="revenue decomposition and market audits")
    common(price)
    price.add_argument("--solution", default=None, help="policy.json from solve (default: <out>/policy.json)")
    val = sub.add_parser("validate", help="out-of-sample evaluation")
    common(val)
    val.add_argument("--solution", default=None)
    val.add_argument("--samples", type=int, default=1000)
    val.add_argument("--p", type=float, default=0.1)
    val.add_argument("--v", type=float, default=0.1)
    val.add_argument("--bound-nodes", default="", help="comma-separated node ids for the error bound")
    val.add_argument("--no-project", action="store_true", help="skip the non-convex projections")
    val.add_argument("--sweep-psi-pi", default="", help="comma-separated values")
    val.add_argument("--sweep-psi-phi", default="", help="comma-separated values")
    val.add_argument("--workers", type=int, default=1)
    return parser


def config_from_args(args) -> RunConfig:
    out = args.out or os.environ.get(OUT_ENV) or "gaspolicy-out"
    cfg = RunConfig(network=args.network, mode=args.mode, eps=args.eps, psi_pi=args.psi_pi, psi_phi=args.psi_phi,
                    mask=args.mask, dist=args.dist, seed=args.seed, out=out)
    if args.command == "validate":
        cfg.samples, cfg.p, cfg.v = args.samples, args.p, args.v
        cfg.sweep_psi_pi = _floats(args.sweep_psi_pi)
        cfg.sweep_psi_phi = _floats(args.sweep_psi_phi)
    cfg.check()
    return cfg


# -- file helpers --------------------------------------------------------------

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(round(float(x), 10))
    return x


# -- pipeline pieces -------------------------------------------------------------

def _uncertainty(cfg: RunConfig, net: GasNetwork) -> uncertainty.UncertaintyModel:
    return uncertainty.from_network(net, eps=cfg.eps, tag=cfg.dist, seed=cfg.seed)


def _optimize(cfg: RunConfig, net, lin, unc, psi_pi=None, psi_phi=None) -> pol.PolicySolution:
    z = 0.0 if cfg.mode == "det" else None
    return pol.optimize(net, lin, unc, cfg.psi_pi if psi_pi is None else psi_pi,
                        cfg.psi_phi if psi_phi is None else psi_phi, cfg.mask, z=z)


def table_row(sol: pol.PolicySolution, lin, net: GasNetwork) -> dict:
    """Summary metrics in the layout of the usual comparison table."""
    unc = sol.extra["uncertainty"]
    s_pi, s_phi = pol.state_stddev(sol, lin, unc)
    pi = np.maximum(sol.pi, 1e-300)
    comp, valve = net.compressors, net.valves
    return {
        "expected_cost": pol.expected_cost(sol, unc, net.cost_linear, net.cost_quadratic),
        "sum_var_pressure": float(np.sum(s_pi**2 / (4.0 * pi))),
        "sum_var_pressure_sq": float(np.sum(s_pi**2)),
        "sum_var_flow": float(np.sum(s_phi**2)),
        "sum_sqrt_kappa_compressors": float(np.sum(np.sqrt(np.abs(sol.kappa[comp])))),
        "sum_sqrt_kappa_valves": float(np.sum(np.sqrt(np.abs(sol.kappa[valve])))),
    }


def _status_exit(status: str) -> int:
    return STATUS_EXIT.get(status, EXIT_NONCONVERGENT)


def cmd_solve(cfg: RunConfig) -> int:
    net = load_network(cfg.network)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    point = solve_deterministic(net)
    lin = linearize(point, net)
    unc = _uncertainty(cfg, net)
    sol = _optimize(cfg, net, lin, unc)
    _write_json(out / "stationary_point.json", {"config_hash": digest, "seed": cfg.seed, "point": point.to_dict(net)})
    saved = {k: v for k, v in asdict(cfg).items() if k != "out"}
    _write_json(out / "policy.json", {"config_hash": digest, "seed": cfg.seed, "config": saved,
                                      "point": point.to_dict(net), "solution": sol.to_dict()})
    row = {"config_hash": digest, "seed": cfg.seed, "mode": cfg.mode, "status": sol.status,
           "deterministic_cost": point.objective, "objective": sol.objective}
    if sol.status in ("optimal", "inaccurate"):
        row.update(table_row(sol, lin, net))
        s_pi, s_phi = pol.state_stddev(sol, lin, sol.extra["uncertainty"])
        _write_csv(out / "node_state.csv", ["config_hash", "seed", "node", "theta", "pi", "s_pi"],
                   [[digest, cfg.seed, n, sol.theta[k], sol.pi[k], s_pi[k]] for k, n in enumerate(net.nodes)])
        _write_csv(out / "edge_state.csv", ["config_hash", "seed", "edge", "kind", "phi", "kappa", "s_phi"],
                   [[digest, cfg.seed, "->".join(e), net.kinds[l], sol.phi[l], sol.kappa[l], s_phi[l]]
                    for l, e in enumerate(net.edges)])
    _write_csv(out / "summary.csv", list(row), [list(row.values())])
    print(f"solve: status={sol.status} objective={sol.objective:.6f} hash={digest}")
    return _status_exit(sol.status)


def load_run(cfg: RunConfig, solution: str | None):
    """Network, stationary point, linearization, uncertainty and policy from a saved run."""
    path = Path(solution) if solution else Path(cfg.out) / "policy.json"
    if not path.is_file():
        raise ConfigError(f"solution file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    net = load_network(cfg.network)
    point = StationaryPoint.from_dict(data["point"])
    lin = linearize(point, net)
    saved = data["config"]
    unc = uncertainty.from_network(net, eps=saved["eps"], tag=saved["dist"], seed=cfg.seed)
    st = pol.structure(net, unc, saved["mask"])
    unc = unc.split(pol.count_chance_constraints(st))
    sol = pol.PolicySolution.from_dict(data["solution"], st, unc)
    return net, point, lin, unc, sol, saved


def cmd_price(cfg: RunConfig, solution: str | None = None) -> int:
    net, point, lin, unc, sol, _ = load_run(cfg, solution)
    if sol.duals is None:
        print(f"price: solution has no duals (status {sol.status})", file=sys.stderr)
        return _status_exit(sol.status) or EXIT_NONCONVERGENT
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    report = pricing.revenues(sol, lin, net, unc)
    adequacy = pricing.check_revenue_adequacy(report, net, lin)
    profits = pricing.check_cost_recovery(report, sol, net)
    residuals = pricing.check_stationarity(sol, lin, net, unc)
    scale = pricing.dual_scale(sol, net)
    worst = max(residuals.values())
    stationary = worst <= 1e-6 * scale
    _write_csv(out / "revenues.csv", ["config_hash", "seed", "agent_kind", "agent", "stream", "value"],
               [[digest, cfg.seed, *r] for r in pricing.revenue_rows(report, net)])
    _write_json(out / "price_audit.json", {
        "config_hash": digest, "seed": cfg.seed,
        "adequacy": {"holds": bool(adequacy.holds), "gap": round(adequacy.gap, 6),
                     "conditions_met": bool(adequacy.conditions_met),
                     "identity_residual": adequacy.identity_residual},
        "cost_recovery": [{"kind": p.kind, "agent": p.name, "profit": round(p.profit, 6),
                           "nonnegative": bool(p.nonnegative), "conditions_met": bool(p.conditions_met), "failed_condition": p.failed_condition} for p in profits],
        "stationarity": {"max_residual": worst, "scale": scale, "passed": bool(stationary), "blocks": residuals},
        "linearization_surplus": round(report.linearization_surplus, 6),
    })
    print(f"price: adequacy_gap={adequacy.gap:.6f} stationarity={'ok' if stationary else 'FAILED'} hash={digest}")
    if not stationary:
        print(f"price: stationarity audit failed, worst residual {worst:.3e} (scale {scale:.3e})", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_validate(cfg: RunConfig, solution: str | None = None, bound_nodes: str = "", project: bool = True,
                 workers: int = 1) -> int:
    net, point, lin, unc, sol, saved = load_run(cfg, solution)
    if sol.status not in ("optimal", "inaccurate"):
        print(f"validate: solution status {sol.status}", file=sys.stderr)
        return _status_exit(sol.status)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    nodes = [net.node_index(n) for n in bound_nodes.split(",") if n.strip()] if bound_nodes else []
    report = validation.validate(sol, lin, net, unc, S=cfg.samples, seed=cfg.seed, point=point, project=project,
                                 bound_nodes=nodes, p=cfg.p, v=cfg.v, workers=workers)
    vio = report.violations
    summary = {"config_hash": digest, "seed": cfg.seed, "samples": cfg.samples,
               "constraint_infeasibility": vio.joint_frequency, "ci_low": vio.joint_ci[0], "ci_high": vio.joint_ci[1]}
    if report.projection is not None:
        summary.update(p_inj=report.projection.p_inj, p_act=report.projection.p_act,
                       projection_failures=report.projection.failures)
    _write_csv(out / "validation_summary.csv", list(summary), [list(summary.values())])
    _write_csv(out / "violations.csv", ["config_hash", "seed", "constraint", "frequency"],
               [[digest, cfg.seed, k, v] for k, v in vio.frequencies.items()])
    s_pi, s_phi = pol.state_stddev(sol, lin, unc)
    _write_csv(out / "node_variance.csv", ["config_hash", "seed", "node", "s_pi", "empirical_stddev_pi", "var_pressure"],
               [[digest, cfg.seed, n, s_pi[k], vio.stddev_pi[k], vio.var_pressure[k]] for k, n in enumerate(net.nodes)])
    _write_csv(out / "edge_reversal.csv", ["config_hash", "seed", "edge", "s_phi", "empirical_stddev_phi", "reversal_probability"],
               [[digest, cfg.seed, "->".join(e), s_phi[l], vio.stddev_phi[l], vio.flow_reversal[l]]
                for l, e in enumerate(net.edges)])
    if report.error_bounds:
        _write_csv(out / "error_bounds.csv", ["config_hash", "seed", "node", "t_star", "t_star_relative", "s_used", "p", "v"],
                   [[digest, cfg.seed, net.nodes[b.node], b.t_star, b.t_star / point.pi[b.node], b.s_used, b.p, b.v]
                    for b in report.error_bounds])
    sweeps = [("psi_pi", x) for x in cfg.sweep_psi_pi] + [("psi_phi", x) for x in cfg.sweep_psi_phi]
    if sweeps:
        xi = uncertainty.sample(unc, cfg.samples, seed=cfg.seed)
        rows = []
        for which, value in sweeps:
            kw = {which: value}
            swept = _optimize(RunConfig(**{**asdict(cfg), "mode": saved["mode"], "mask": saved["mask"]}), net, lin, unc, **kw)
            row = [digest, cfg.seed, which, value, swept.status]
            if swept.status == "optimal":
                metrics = table_row(swept, lin, net)
                vr = validation.evaluate_policies(swept, lin, net, xi)
                row += [metrics["expected_cost"], metrics["sum_var_pressure"], metrics["sum_var_flow"],
                        vr.joint_frequency, float(vr.flow_reversal.max(initial=0.0))]
            else:
                row += [""] * 5
            rows.append(row)
        _write_csv(out / "sweep.csv", ["config_hash", "seed", "parameter", "value", "status", "expected_cost",
                                       "sum_var_pressure", "sum_var_flow", "constraint_infeasibility",
                                       "max_reversal_probability"], rows)
    print(f"validate: infeasibility={vio.joint_frequency:.4f} hash={digest}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "price":
            return cmd_price(cfg, args.solution)
        return cmd_validate(cfg, args.solution, args.bound_nodes, not args.no_project, args.workers)
    except (ConfigError, NetworkError, uncertainty.UncertaintyError, pol.PolicyError) as exc:
        print(f"gaspolicy: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"gaspolicy: steady-state: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, SteadyStateError, LinearizationError, validation.ValidationError) as exc:
        print(f"gaspolicy: {type(exc).__module__.split('.')[-1]}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENT


if __name__ == "__main__":
    sys.exit(main())
