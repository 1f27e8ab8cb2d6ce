"""Pricing and hedging when the hedger's own wealth moves the market.

The stock follows dS = S(μ dt + σ dW + ∫γ dÑ) and a self-financing
portfolio holding π in the stock has wealth

    dX = [r (X - π) + π μ] dt + π σ dW + ∫ π γ(z) Ñ(dt, dz),

where the rate r and drift μ may depend on the current wealth and on its
recent past through the α-average of the segment X_s. Read backwards, X is
the Y of a delayed BSDE with Z = π σ and driver

    f = -r(t, y, ȳ) (y - π) - π μ(t, y, ȳ),    π = z / σ(t).

Because μ can depend on X, the stock is simulated under a reference drift
``stock_drift`` instead. Moving the Brownian motion to that reference adds
π (μ - stock_drift) to the driver, which cancels the μ term. The price
therefore never depends on μ, and :func:`replicate` solves with
:func:`pricing_driver`. The stock is simulated in log coordinates, so every
path stays positive.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .backward import (BsdeSolution, GeneratorSpec, PolynomialBasis, TerminalSpec, ensemble_features,
                       picard_solve)
from .errors import ConfigurationError
from .forward import ForwardCoefficients, ForwardEnsemble, simulate_ensemble
from .levy import LevyModel, nu_integral
from .paths import CadlagPath, segment_length

RateFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MarketModel:
    """Rate, drift, volatility and jumps of a single-stock market.

    ``r`` and ``mu`` take ``(t, x, xbar)`` where ``x`` is the wealth and
    ``xbar`` its delayed average ∫ X(t+θ) α(dθ), both of shape ``(n,)``.
    ``gamma_market(t, z)`` is the relative jump size of the stock.
    ``lipschitz_L`` and ``delay_K`` are declared constants for the contraction
    certificate.
    """

    r: RateFn
    mu: RateFn
    sigma: Callable[[float], float]
    gamma_market: Callable[[float, float], float]
    model: LevyModel
    s0: float
    stock_drift: float = 0.0
    delta: float = 0.0
    alpha_theta: tuple[float, ...] = ()
    alpha_weights: tuple[float, ...] = ()
    lipschitz_L: float = 0.0
    delay_K: float = 0.0
    name: str = "market"

    def __post_init__(self):
        if not self.s0 > 0:
            raise ConfigurationError("s0 must be positive")
        for k, z in enumerate(self.model.z):
            g = float(self.gamma_market(0.0, float(z)))
            if not g > -1.0:
                raise ConfigurationError(f"jump factor {g} at atom {k} (z={z}) would make the stock non-positive")

    def check_sigma(self, times: np.ndarray) -> np.ndarray:
        s = np.array([float(self.sigma(float(t))) for t in times])
        if np.any(~np.isfinite(s)) or np.any(np.abs(s) < 1e-12):
            raise ConfigurationError("volatility must stay away from zero to recover π from Z")
        return s


def constant_market(rho: float, mu: float, sigma: float, s0: float = 1.0, model: LevyModel | None = None,
                    jump_factor: float = 0.0, stock_drift: float | None = None) -> MarketModel:
    """Constant r, μ and σ; the stock jumps by ``jump_factor * z`` at a mark z."""
    model = model or LevyModel.no_jumps()
    L = max(abs(rho), abs(rho - mu) / abs(sigma))
    return MarketModel(lambda t, x, xb: np.full_like(x, rho), lambda t, x, xb: np.full_like(x, mu),
                       lambda t: sigma, lambda t, z: jump_factor * z, model, s0,
                       rho if stock_drift is None else stock_drift, lipschitz_L=L, name="constant")


def delayed_drift_market(rho: float, kappa: float, delta: float, sigma: float, s0: float = 1.0,
                         model: LevyModel | None = None, jump_factor: float = 0.0,
                         stock_drift: float | None = None) -> MarketModel:
    """r = ρ and μ = ρ + κ ∫ X_s dα: the excess return is fed by the wealth's past."""
    model = model or LevyModel.no_jumps()
    return MarketModel(lambda t, x, xb: np.full_like(x, rho), lambda t, x, xb: rho + kappa * xb,
                       lambda t: sigma, lambda t, z: jump_factor * z, model, s0,
                       rho if stock_drift is None else stock_drift, delta=delta, lipschitz_L=abs(rho),
                       delay_K=abs(kappa), name="delayed-drift")


# ---------------------------------------------------------------- drivers


def _make_generator(market: MarketModel, body, name: str) -> GeneratorSpec:
    holder: list[GeneratorSpec] = []

    def f(t, hist, y, z, u, yhat):
        pi = z[:, 0] / float(market.sigma(t))
        xbar = holder[0].delay_integral(yhat) if market.delta > 0 else y
        return body(t, y, xbar, pi)

    g = GeneratorSpec(f, market.lipschitz_L, market.delay_K, market.delta, tuple(market.alpha_theta),
                      tuple(market.alpha_weights), name=name)
    holder.append(g)
    return g


def build_driver(market: MarketModel) -> GeneratorSpec:
    """f = -r (y - π) - π μ with π = z/σ; the delayed argument is the wealth segment."""
    def body(t, y, xbar, pi):
        return -market.r(t, y, xbar) * (y - pi) - pi * market.mu(t, y, xbar)
    return _make_generator(market, body, "large-investor")


def pricing_driver(market: MarketModel) -> GeneratorSpec:
    """Driver under the simulation drift: build_driver's f plus π (μ - stock_drift)."""
    def body(t, y, xbar, pi):
        mu = market.mu(t, y, xbar)
        return -market.r(t, y, xbar) * (y - pi) - pi * mu + pi * (mu - market.stock_drift)
    return _make_generator(market, body, "large-investor-pricing")


def stock_coefficients(market: MarketModel) -> ForwardCoefficients:
    """Log-price dynamics whose exponential has the stock's Euler increments in law."""
    model = market.model

    def jump_log(t, z):
        return math.log1p(float(market.gamma_market(t, z)))

    def drift(t, hist):
        s = float(market.sigma(t))
        if model.n_atoms:
            comp = nu_integral(model, lambda z: np.array([jump_log(t, v) - float(market.gamma_market(t, v))
                                                          for v in np.atleast_1d(z)]))
        else:
            comp = 0.0
        return np.full((hist.shape[0], 1), market.stock_drift - 0.5 * s * s + comp)

    def vol(t, hist):
        return np.full((hist.shape[0], 1, 1), float(market.sigma(t)))

    def jump(t, hist, z):
        return np.full((hist.shape[0], 1), jump_log(t, z))

    return ForwardCoefficients(drift, vol, jump, 1, 1, name=f"log-stock[{market.name}]")


def stock_claim(claim: TerminalSpec) -> TerminalSpec:
    """Lift a claim on S to the log-price paths the solver simulates."""
    return TerminalSpec(lambda p: claim.h(np.exp(p)), claim.M, claim.p, claim.name)


# ---------------------------------------------------------------- replication


@dataclass(frozen=True)
class HedgeConfig:
    T: float
    dt: float
    n_paths: int = 20_000
    seed: int = 0
    basis: PolynomialBasis = field(default_factory=lambda: PolynomialBasis(3, False))
    tol: float = 1e-4
    max_iter: int = 50
    threads: int = 1


@dataclass(frozen=True, eq=False)
class HedgeResult:
    """Price and hedge. ``z`` is stored as ``strategy * sigma`` so the identity is exact."""

    price_t0: float
    std_err: float
    portfolio: np.ndarray
    strategy: np.ndarray
    z: np.ndarray
    sigma: np.ndarray
    u_tilde: np.ndarray
    u_tilde_implied: np.ndarray
    terminal_error: np.ndarray
    stock: np.ndarray
    solution: BsdeSolution
    ensemble: ForwardEnsemble
    claim: TerminalSpec
    config: HedgeConfig
    warnings: list

    def portfolio_path(self, p: int) -> CadlagPath:
        return CadlagPath(0.0, self.config.dt, self.portfolio[p])

    def strategy_csv(self) -> str:
        """Per-node summary of π across paths."""
        times = self.config.dt * np.arange(self.strategy.shape[1])
        q = np.quantile(self.strategy, [0.05, 0.5, 0.95], axis=0)
        rows = ["t,pi_mean,pi_std,pi_q05,pi_q50,pi_q95"]
        for i, t in enumerate(times):
            rows.append(",".join(f"{v:.17g}" for v in (t, self.strategy[:, i].mean(), self.strategy[:, i].std(),
                                                       q[0, i], q[1, i], q[2, i])))
        return "\n".join(rows) + "\n"


def simulate_stock(market: MarketModel, config: HedgeConfig, seed: int | None = None) -> ForwardEnsemble:
    dt = config.dt
    phi = CadlagPath(0.0, dt, [[math.log(market.s0)]])
    return simulate_ensemble(stock_coefficients(market), market.model, 0.0, phi, config.T, dt, config.n_paths,
                             config.seed if seed is None else seed, config.threads)


def replicate(market: MarketModel, claim: TerminalSpec, config: HedgeConfig) -> HedgeResult:
    """Solve for the replicating wealth and strategy of ``claim`` (a functional of S)."""
    ens = simulate_stock(market, config)
    sigma = market.check_sigma(ens.times)
    gen = pricing_driver(market)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sol = picard_solve(ens, gen, stock_claim(claim), config.basis, config.tol, config.max_iter)
    notes = [str(w.message) for w in caught]
    for w in caught:
        warnings.warn(w.message, w.category)
    pi = sol.z[:, :, 0] / sigma
    z = pi * sigma
    model = market.model
    if model.n_atoms:
        gl = np.array([[float(market.gamma_market(t, zk)) for zk in model.z] for t in ens.times])
        implied = pi * ((gl * model.lam) @ model.w)[None, :]
    else:
        implied = np.zeros_like(pi)
    S = np.exp(ens.paths[:, :, 0])
    h = stock_claim(claim)(ens.paths)
    samples = sol.y[:, -1] + sol.dt * np.sum(sol.driver[:, :-1], axis=1)
    se = float(np.std(samples) / math.sqrt(samples.size))
    return HedgeResult(sol.value, se, sol.y, pi, z, sigma, sol.u_tilde, implied, sol.y[:, -1] - h, S, sol, ens,
                       claim, config, notes)


@dataclass(frozen=True)
class PnlSummary:
    """Terminal hedging error. ``std_err`` also carries the price's own Monte Carlo error,
    since the hedge starts from the estimated price."""

    mean: float
    std: float
    std_err: float
    sample_std_err: float
    errors: np.ndarray

    def histogram_csv(self, bins: int = 50) -> str:
        counts, edges = np.histogram(self.errors, bins=bins)
        rows = ["bin_left,bin_right,count"]
        rows += [f"{edges[k]:.17g},{edges[k + 1]:.17g},{counts[k]}" for k in range(bins)]
        return "\n".join(rows) + "\n"


def hedge_pnl(result: HedgeResult, market: MarketModel, fresh_seed: int, pi_scale: float = 1.0,
              n_paths: int | None = None) -> PnlSummary:
    """Run the fitted strategy on fresh stock paths and report terminal X - h.

    Wealth starts at the price and follows
    X_{i+1} = X_i + r (X_i - π_i) dt + π_i (S_{i+1}/S_i - 1), with π_i read
    from the node regressions at the fresh path's state.
    """
    cfg = result.config
    if n_paths is not None:
        cfg = replace(cfg, n_paths=n_paths)
    ens = simulate_stock(market, cfg, seed=fresh_seed)
    sol = result.solution
    feats = ensemble_features(ens, sol.basis)
    S = np.exp(ens.paths[:, :, 0])
    n, N1 = S.shape
    dt = cfg.dt
    X = np.empty((n, N1))
    X[:, 0] = result.price_t0
    m = segment_length(market.delta, dt) - 1 if market.delta > 0 else 0
    gen = build_driver(market)
    for i in range(N1 - 1):
        t = i * dt
        reg = sol.regressions[i]
        pi = pi_scale * reg.predict_z(feats(i))[:, 0] / result.sigma[i]
        if m:
            idx = np.maximum(np.arange(i - m, i + 1), 0)
            xbar = gen.delay_integral(X[:, idx])
        else:
            xbar = X[:, i]
        r = market.r(t, X[:, i], xbar)
        X[:, i + 1] = X[:, i] + r * (X[:, i] - pi) * dt + pi * (S[:, i + 1] / S[:, i] - 1.0)
    err = X[:, -1] - stock_claim(result.claim)(ens.paths)
    sample_se = float(err.std() / math.sqrt(n))
    return PnlSummary(float(err.mean()), float(err.std()), math.hypot(sample_se, result.std_err), sample_se, err)


def delay_invariance_probe(rho: float, kappa: float, delta: float, sigma: float, claim: TerminalSpec,
                           config: HedgeConfig, s0: float = 1.0, alt_drift: float | None = None) -> dict:
    """Price with r = μ = ρ against r = ρ, μ = ρ + κ ∫X dα.

    The delayed term lives only in the excess return μ - r, which the price
    does not see. The second run may also simulate the stock under a
    different reference drift, which makes the comparison a genuine Monte
    Carlo test rather than an algebraic cancellation.
    """
    base = replicate(constant_market(rho, rho, sigma, s0), claim, config)
    drift = rho if alt_drift is None else alt_drift
    delayed = delayed_drift_market(rho, kappa, delta, sigma, s0, stock_drift=drift)
    other = replicate(delayed, claim, config)
    gap = abs(base.price_t0 - other.price_t0)
    se = math.hypot(base.std_err, other.std_err)
    return {"base": base.price_t0, "delayed": other.price_t0, "gap": gap, "std_err": se,
            "passed": bool(gap <= 2 * se + 1e-12)}
