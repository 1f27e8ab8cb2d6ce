"""Command line entry point: ``delaybsde --scenario run.yaml --out results/``.

Each run writes its CSV and JSON outputs plus ``manifest.json``, which lists
every output with its SHA-256 digest. Outputs carry no timestamps, so a
re-run with the same scenario and seed reproduces them byte for byte.

Exit codes: 0 ok, 2 invalid input, 3 numeric failure, 4 Picard non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .backward import PolynomialBasis, effective_L, picard_solve
from .delay import certify
from .errors import ConfigurationError, DelayBsdeError
from .feynman_kac import AnalyticU, MonteCarloU, SolverConfig, mild_residual, pide_report
from .forward import simulate_ensemble
from .large_investor import HedgeConfig, MarketModel, constant_market, delayed_drift_market, hedge_pnl, replicate
from .paths import CadlagPath
from .scenario import Scenario, load_scenario

log = logging.getLogger("delaybsde")


class RunWriter:
    """Collects outputs and their digests for the manifest."""

    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def write_json(self, name: str, obj) -> None:
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


def solver_config(sc: Scenario, threads: int) -> SolverConfig:
    n = sc.numerics
    return SolverConfig(sc.coefficients(), sc.levy_model(), sc.generator_spec(), sc.terminal_spec(), n.T, n.dt,
                        n.n_paths, n.seed, sc.basis(), n.tol, n.max_iter, threads)


def certificate(sc: Scenario) -> dict:
    gen = sc.generator_spec()
    L = effective_L(gen.L)
    out = certify(gen.K, L, gen.delta, sc.numerics.T)
    out.update({"K": gen.K, "L": L, "delta": gen.delta, "T": sc.numerics.T})
    return {k: _finite(v) if isinstance(v, float) else v for k, v in out.items()}


# ---------------------------------------------------------------- modes


def run_simulate(sc: Scenario, w: RunWriter, threads: int) -> dict:
    n = sc.numerics
    ens = simulate_ensemble(sc.coefficients(), sc.levy_model(), sc.forward.t, sc.initial_path(), n.T, n.dt,
                            n.n_paths, n.seed, threads)
    w.write("paths.csv", ens.to_csv(sc.output.export_paths))
    xt = ens.paths[:, -1]
    return {"ensemble": ens.manifest(), "mean_XT": xt.mean(axis=0), "std_err_XT": xt.std(axis=0) / math.sqrt(xt.shape[0]),
            "gamma_moment_max": ens.gamma_moment_max}


def run_solve(sc: Scenario, w: RunWriter, threads: int) -> dict:
    cfg = solver_config(sc, threads)
    ens = simulate_ensemble(cfg.coeffs, cfg.model, sc.forward.t, sc.initial_path(), cfg.T, cfg.dt, cfg.n_paths,
                            cfg.seed, threads)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sol = picard_solve(ens, cfg.gen, cfg.term, cfg.basis, cfg.tol, cfg.max_iter)
    i = ens.start_index
    samples = sol.y[:, -1] + sol.dt * np.sum(sol.driver[:, i:-1], axis=1)
    w.write("solution.csv", sol.to_csv(sc.output.export_paths))
    w.write("picard.csv", sol.history_csv())
    return {"u": sol.value, "std_err": float(samples.std() / math.sqrt(samples.size)),
            "z": sol.z[:, i].mean(axis=0), "u_tilde": float(sol.u_tilde[:, i].mean()),
            "picard_history": sol.picard_history, "max_condition_number": float(np.max(sol.conditions)),
            "certificate": certificate(sc), "warnings": sorted({str(c.message) for c in caught})}


def _analytic(sc: Scenario):
    kind, T = sc.verify.analytic, sc.numerics.T
    if kind == "heat":
        return AnalyticU(lambda t, x: x[:, 0] ** 2 + (T - t))
    if kind == "discount":
        rho = sc.generator.params.get("rho", 0.0)
        return AnalyticU(lambda t, x: np.full(x.shape[0], math.exp(-rho * (T - t))))
    return AnalyticU(lambda t, x: x[:, 0].copy())


def run_verify(sc: Scenario, w: RunWriter, threads: int) -> dict:
    cfg = solver_config(sc, threads)
    v = sc.verify
    rows = ["case,t,x,residual,std_err,tolerance,pass"]
    n_fail = 0
    u_mc = MonteCarloU(cfg)
    u_an = _analytic(sc) if v.analytic else None

    def add(case, t, x, res, se, tol):
        nonlocal n_fail
        ok = abs(res) <= tol
        n_fail += not ok
        rows.append(f"{case},{t:.17g},{x:.17g},{res:.17g},{se:.17g},{tol:.17g},{str(ok).lower()}")

    for t, x in v.probes:
        phi = CadlagPath.constant(np.full(cfg.coeffs.dim, x), 0.0, t, cfg.dt)
        bump = v.bump if v.bump is not None else 0.05 * (1.0 + abs(x))
        dtt = v.dt_time if v.dt_time is not None else cfg.dt
        if t < cfg.T:
            r = pide_report(u_mc, t, phi, cfg.coeffs, cfg.model, cfg.gen, dtt, bump)
            add("pide-mc", t, x, r.residual, r.std_err, v.tolerance)
            if u_an is not None:
                ra = pide_report(u_an, t, phi, cfg.coeffs, cfg.model, cfg.gen, dtt, bump)
                add("pide-analytic", t, x, ra.residual, 0.0, v.tolerance)
        if v.mild:
            res, se = mild_residual(u_mc, t, phi, cfg, return_se=True)
            add("mild-mc", t, x, res, se, max(3.0 * se, 1e-12))
    w.write("residuals.csv", "\n".join(rows) + "\n")
    return {"rows": len(rows) - 1, "failed": n_fail, "passed": n_fail == 0}


def run_certify(sc: Scenario, w: RunWriter, threads: int) -> dict:
    cert = certificate(sc)
    w.write_json("certificate.json", cert)
    print(json.dumps(cert, sort_keys=True, default=_jsonable))
    return {"certificate": cert}


def market_from(sc: Scenario) -> MarketModel:
    m, g = sc.market, sc.generator
    model = sc.levy_model()
    if m.kappa:
        return delayed_drift_market(m.r, m.kappa, g.delta, m.sigma, m.s0, model, m.jump_factor, m.stock_drift)
    return constant_market(m.r, m.mu, m.sigma, m.s0, model, m.jump_factor, m.stock_drift)


def run_hedge(sc: Scenario, w: RunWriter, threads: int) -> dict:
    n = sc.numerics
    market = market_from(sc)
    cfg = HedgeConfig(n.T, n.dt, n.n_paths, n.seed, PolynomialBasis(n.degree, False), n.tol, n.max_iter,
                      threads)
    res = replicate(market, sc.terminal_spec(), cfg)
    pnl = hedge_pnl(res, market, n.seed + 1, n_paths=sc.market.pnl_paths)
    w.write("strategy.csv", res.strategy_csv())
    w.write("pnl_histogram.csv", pnl.histogram_csv(sc.output.histogram_bins))
    return {"price": res.price_t0, "std_err": res.std_err, "pi_t0": float(res.strategy[:, 0].mean()),
            "pnl_mean": pnl.mean, "pnl_std": pnl.std, "pnl_std_err": pnl.std_err,
            "max_terminal_error": float(np.max(np.abs(res.terminal_error))),
            "picard_history": res.solution.picard_history, "warnings": sorted(set(res.warnings))}


MODES = {"simulate": run_simulate, "solve": run_solve, "verify": run_verify, "certify": run_certify,
         "hedge": run_hedge}


def run(sc: Scenario, out: Path, threads: int = 1, scenario_text: str | None = None) -> dict:
    w = RunWriter(out)
    summary = MODES[sc.mode](sc, w, threads)
    summary = {"mode": sc.mode, "seed": sc.numerics.seed, **summary}
    w.write_json("summary.json", summary)
    manifest = {
        "scenario_digest": sc.digest(),
        "scenario_text_digest": hashlib.sha256(scenario_text.encode()).hexdigest() if scenario_text else None,
        "seed": sc.numerics.seed,
        "mode": sc.mode,
        "versions": {"delaybsde": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "outputs": dict(sorted(w.files.items())),
    }
    w.write("scenario.yaml", sc.serialize())
    manifest["outputs"]["scenario.yaml"] = w.files["scenario.yaml"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delaybsde", description="Delayed BSDEs with jumps: simulate, solve, "
                                "verify, certify and hedge from a scenario file.")
    p.add_argument("--scenario", required=True, type=Path, help="YAML scenario file")
    p.add_argument("--seed", type=int, default=None, help="override numerics.seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for noise generation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        try:
            text = args.scenario.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            print(f"error: cannot read scenario: {exc}", file=sys.stderr)
            return 2
        sc = load_scenario(text)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
                return 2
            sc = sc.with_seed(args.seed)
        t0 = time.perf_counter()
        summary = run(sc, args.out, args.threads, text)
        log.info("%s finished in %.2f s", sc.mode, time.perf_counter() - t0)
    except DelayBsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if sc.mode == "verify" and not summary["passed"]:
        print(f"verify: {summary['failed']} residual check(s) failed", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
