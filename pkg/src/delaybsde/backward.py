"""Time-delayed BSDE with jumps: Picard iteration over the delayed argument,
explicit backward induction with least-squares Monte Carlo inside.

For a fixed previous iterate the delayed segment ŷ is frozen, and one sweep
from T back to the start time computes, at each node i,

    E_i  = Ê[Y_{i+1} | F_i]
    Z_i  = Ê[(Y_{i+1} - E_i) ΔW_i | F_i] / dt
    Ũ_i  = Ê[(Y_{i+1} - E_i) ΔM_i | F_i] / dt
    Y_i  = E_i + dt f(t_i, X, E_i, Z_i, Ũ_i, ŷ_i)

where ΔM_i = Σ_jumps λ(z) - dt ∫λ dν. For a jump integrand U the covariance
of the two compensated sums over a window is dt ∫ U λ dν, so Ũ_i estimates the
aggregate ∫ U(t_i, z) λ(z) ν(dz) itself, whatever the profile of U. Dividing
by c_ν = ∫λ² dν instead would give the coefficient of U along λ. Centring Y_{i+1}
before multiplying by the increments does not change the conditional
expectation but removes most of its variance, and makes Z and Ũ exactly zero
when Y_{i+1} is deterministic.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .delay import DelayParams, best_chi
from .errors import ConfigurationError, NonConvergenceError, NumericError
from .forward import ForwardEnsemble
from .levy import LevyModel, _check_finite
from .paths import grid_steps, segment_length

RIDGE = 1e-10


class RegressionWarning(UserWarning):
    pass


class UncertifiedDelayWarning(UserWarning):
    pass


# ---------------------------------------------------------------- generators

Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Driver ``f(t, hist, y, z, u, yhat) -> (n,)``, vectorised over paths.

    ``hist`` is ``(n, i+1, d)``, ``y`` and ``u`` are ``(n,)``, ``z`` is
    ``(n, l)`` and ``yhat`` is ``(n, m+1)``: the delayed segment of Y on the
    nodes ``t - delta, ..., t``. The delay measure α is a list of atoms at grid
    offsets ``alpha_theta`` (in [-delta, 0]) with weights summing to one.
    """

    f: Driver
    L: float = 0.0
    K: float = 0.0
    delta: float = 0.0
    alpha_theta: tuple[float, ...] = ()
    alpha_weights: tuple[float, ...] = ()
    M: float = 0.0
    p: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigurationError("delta must be non-negative")
        if self.delta > 0 and not self.alpha_theta:
            object.__setattr__(self, "alpha_theta", (-self.delta,))
            object.__setattr__(self, "alpha_weights", (1.0,))
        w = np.asarray(self.alpha_weights, dtype=float)
        th = np.asarray(self.alpha_theta, dtype=float)
        if w.shape != th.shape:
            raise ConfigurationError("alpha_theta and alpha_weights differ in length")
        if w.size:
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigurationError("delay measure weights must be >= 0 and sum to 1")
            if np.any(th < -self.delta - 1e-12) or np.any(th > 1e-12):
                raise ConfigurationError("delay atoms must lie in [-delta, 0]")

    def segment_positions(self, dt: float) -> np.ndarray:
        """Index of each α atom inside a segment array of length ⌈δ/dt⌉ + 1."""
        return np.array([grid_steps(th + self.delta, dt, "delay atom") for th in self.alpha_theta], dtype=int)

    def delay_integral(self, yhat: np.ndarray) -> np.ndarray:
        """∫ ŷ(θ) α(dθ) for a batch of segments of shape ``(n, m+1)``."""
        if not self.alpha_theta:
            return np.zeros(yhat.shape[0])
        m = yhat.shape[1] - 1
        pos = self.segment_positions(self.delta / m) if m > 0 else np.zeros(len(self.alpha_theta), dtype=int)
        return yhat[:, pos] @ np.asarray(self.alpha_weights)


def linear_generator(rho: float = 0.0, theta: float | Sequence[float] = 0.0, eta: float = 0.0, kappa: float = 0.0,
                     const: float = 0.0, delta: float = 0.0, alpha_theta=(), alpha_weights=(),
                     name: str = "linear") -> GeneratorSpec:
    """f = const - ρ y + θ·z + η ũ + κ ∫ŷ dα."""
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    holder: list[GeneratorSpec] = []

    def f(t, hist, y, z, u, yhat):
        out = const - rho * y
        if np.any(th):
            out = out + z @ np.broadcast_to(th, (z.shape[1],))
        if eta:
            out = out + eta * u
        if kappa:
            out = out + kappa * holder[0].delay_integral(yhat)
        return out

    L = float(max(abs(rho), np.max(np.abs(th)), abs(eta)))
    g = GeneratorSpec(f, L, abs(kappa), delta, tuple(alpha_theta), tuple(alpha_weights), abs(const), 1.0, name)
    holder.append(g)
    return g


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec(lambda t, hist, y, z, u, yhat: np.zeros_like(y), name="zero")


def discount_generator(rho: float) -> GeneratorSpec:
    return linear_generator(rho=rho, name="discount")


def delay_generator(kappa: float, delta: float, alpha_theta=(), alpha_weights=()) -> GeneratorSpec:
    return linear_generator(kappa=kappa, delta=delta, alpha_theta=alpha_theta, alpha_weights=alpha_weights,
                            name="delay")


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    """Terminal functional ``h(paths) -> (n,)`` acting on ``(n, N+1, d)`` paths."""

    h: Callable[[np.ndarray], np.ndarray]
    M: float = 0.0
    p: float = 1.0
    name: str = "custom"

    def __call__(self, paths: np.ndarray) -> np.ndarray:
        return np.asarray(self.h(paths), dtype=float)

    def growth_violations(self, paths: np.ndarray) -> int:
        """Paths breaking |h(φ)| <= M (1 + ‖φ‖^p); a sampled check only."""
        sup = np.max(np.abs(paths), axis=(1, 2))
        return int(np.sum(np.abs(self(paths)) > self.M * (1.0 + sup**self.p) + 1e-12))


def constant_terminal(c: float) -> TerminalSpec:
    return TerminalSpec(lambda x: np.full(x.shape[0], float(c)), abs(c), 0.0, "constant")


def identity_terminal(component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda x: x[:, -1, component].copy(), 1.0, 1.0, "identity")


def square_terminal(component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda x: x[:, -1, component] ** 2, 1.0, 2.0, "square")


def call_terminal(strike: float, component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda x: np.maximum(x[:, -1, component] - strike, 0.0), 1.0, 1.0, "call")


def put_terminal(strike: float, component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda x: np.maximum(strike - x[:, -1, component], 0.0), abs(strike), 1.0, "put")


# ---------------------------------------------------------------- regression


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials up to ``degree`` in the present state and, optionally, the
    running minimum and maximum of each coordinate."""

    degree: int = 3
    path_stats: bool = True

    def raw(self, x_now: np.ndarray, run_min: np.ndarray | None = None, run_max: np.ndarray | None = None) -> np.ndarray:
        cols = [x_now]
        if self.path_stats:
            cols += [run_min, run_max]
        return np.concatenate(cols, axis=1)

    def size(self, dim: int) -> int:
        q = dim * (3 if self.path_stats else 1)
        return math.comb(q + self.degree, self.degree)


def _monomials(Z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree 1..degree in the columns of ``Z``."""
    n, q = Z.shape
    combos = [c for deg in range(1, degree + 1) for c in itertools.combinations_with_replacement(range(q), deg)]
    C = np.empty((n, len(combos)), order="F")
    where: dict[tuple[int, ...], int] = {}
    for k, combo in enumerate(combos):
        if len(combo) == 1:
            C[:, k] = Z[:, combo[0]]
        else:
            np.multiply(C[:, where[combo[:-1]]], Z[:, combo[-1]], out=C[:, k])
        where[combo] = k
    return C


@dataclass(eq=False)
class Design:
    """Polynomial regression design with an implicit intercept.

    Raw features are standardised, expanded into monomials ``C``, and the
    normal equations are formed on the centred and scaled columns through
    the Gram matrix of ``C``, so the centred matrix is never built. The
    ridge acts on the scaled slope coefficients only.
    """

    degree: int
    ridge: float = RIDGE
    raw_mean: np.ndarray = None
    raw_scale: np.ndarray = None
    raw_keep: np.ndarray = None
    col_mean: np.ndarray = None
    col_scale: np.ndarray = None
    col_keep: np.ndarray = None
    cond: float = 1.0
    C: np.ndarray = field(default=None, repr=False)
    _cho: tuple = field(default=None, repr=False)
    _gram: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, raw: np.ndarray, degree: int, ridge: float = RIDGE) -> "Design":
        d = cls(degree, ridge)
        n = raw.shape[0]
        mu = raw.mean(axis=0)
        sd = raw.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        d.raw_mean, d.raw_scale, d.raw_keep = mu, np.where(keep, sd, 1.0), keep
        C = _monomials((raw[:, keep] - mu[keep]) / d.raw_scale[keep], degree)
        m = C.sum(axis=0) / n
        G = C.T @ C / n - np.outer(m, m)
        var = np.diag(G).copy()
        ck = var > 1e-24
        if not np.all(ck):
            C = np.asfortranarray(C[:, ck])
            G = G[np.ix_(ck, ck)]
        scale = np.sqrt(var[ck])
        d.col_mean, d.col_scale, d.col_keep = m[ck], scale, ck
        d.C = C
        if C.shape[1]:
            Gs = G / np.outer(scale, scale) + ridge * np.eye(C.shape[1])
            try:
                d.cond = float(np.linalg.cond(Gs))
                d._cho = cho_factor(Gs)
                d._gram = Gs
            except LinAlgError:
                warnings.warn("normal equations not positive definite; using the ensemble mean", RegressionWarning)
                d.C = np.zeros((n, 0))
        return d

    @property
    def n_terms(self) -> int:
        return self.C.shape[1] + 1

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Monomial columns for new raw features (uncentred)."""
        keep = self.raw_keep
        C = _monomials((raw[:, keep] - self.raw_mean[keep]) / self.raw_scale[keep], self.degree)
        return C[:, self.col_keep]

    def solve(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Intercepts ``(k,)`` and slopes ``(p, k)`` in monomial coordinates."""
        n = targets.shape[0]
        ybar = targets.mean(axis=0)
        if self.C.shape[1] == 0:
            return ybar, np.zeros((0, targets.shape[1]))
        rhs = (self.C.T @ targets / n - np.outer(self.col_mean, ybar)) / self.col_scale[:, None]
        beta = cho_solve(self._cho, rhs) / self.col_scale[:, None]
        if not np.all(np.isfinite(beta)):
            warnings.warn("regression produced non-finite weights; using the ensemble mean", RegressionWarning)
            beta = np.zeros_like(beta)
        return ybar - self.col_mean @ beta, beta

    def fit(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fitted values plus the ``(intercept, slopes)`` that produced them.

        Columns that are constant across paths come back unchanged, bit for bit.
        """
        targets = np.asarray(targets, dtype=float)
        squeeze = targets.ndim == 1
        T2 = targets[:, None] if squeeze else targets
        c0, beta = self.solve(T2)
        fitted = c0 + self.C @ beta if beta.shape[0] else np.repeat(c0[None, :], T2.shape[0], axis=0)
        const = np.all(T2 == T2[:1], axis=0)
        if np.any(const):
            fitted[:, const] = T2[:, const]
            beta[:, const] = 0.0
            c0 = np.where(const, T2[0], c0)
        return (fitted[:, 0] if squeeze else fitted), c0, beta

    def predict(self, raw: np.ndarray, c0: np.ndarray, beta: np.ndarray) -> np.ndarray:
        if beta.shape[0] == 0:
            return np.repeat(np.atleast_1d(c0)[None, :], raw.shape[0], axis=0)
        return c0 + self.transform(raw) @ beta

    def prediction_se(self, residual_std: float) -> np.ndarray:
        """Standard error of each fitted value, σ sqrt((1 + leverage)/n)."""
        n = self.C.shape[0]
        if self.C.shape[1] == 0:
            return np.full(n, residual_std / math.sqrt(n))
        Lc = np.linalg.cholesky(self._gram)
        A = (self.C - self.col_mean) / self.col_scale
        B = np.linalg.solve(Lc, A.T)
        lev = np.sum(B * B, axis=0)
        return residual_std * np.sqrt((1.0 + lev) / n)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    fitted: np.ndarray
    mean: np.ndarray
    beta: np.ndarray
    cond: float
    design: Design


def regress_conditional(targets: np.ndarray, features: np.ndarray, degree: int = 1, ridge: float = RIDGE) -> RegressionFit:
    """Least-squares estimate of E[target | features] on every path.

    ``features`` are raw state variables; a polynomial basis of total degree
    ``degree`` with an intercept is built from them.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    design = Design.build(features, degree, ridge)
    if features.shape[0] < 10 * design.n_terms:
        warnings.warn(f"{features.shape[0]} paths for {design.n_terms} basis terms; "
                      "results will be noisy", RegressionWarning)
    fitted, mean, beta = design.fit(targets)
    return RegressionFit(fitted, mean, beta, design.cond, design)


@dataclass(frozen=True, eq=False)
class NodeRegression:
    """What is needed to re-evaluate the node's conditional expectations out of sample."""

    design: Design
    y_coef: tuple
    zu_coef: tuple

    def predict_continuation(self, raw: np.ndarray) -> np.ndarray:
        return self.design.predict(raw, *self.y_coef)[:, 0]

    def predict_z(self, raw: np.ndarray) -> np.ndarray:
        return self.design.predict(raw, *self.zu_coef)[:, :-1]

    def predict_u_tilde(self, raw: np.ndarray) -> np.ndarray:
        return self.design.predict(raw, *self.zu_coef)[:, -1]


# ---------------------------------------------------------------- solution


@dataclass(eq=False)
class BsdeSolution:
    y: np.ndarray
    z: np.ndarray
    u_tilde: np.ndarray
    driver: np.ndarray
    regressions: list
    basis: PolynomialBasis
    dt: float
    start_index: int
    picard_history: list = field(default_factory=list)
    conditions: np.ndarray | None = None
    y_se: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return self.y.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.y.shape[1])

    @property
    def value(self) -> float:
        """Y at the start node (shared by every path)."""
        return float(np.mean(self.y[:, self.start_index]))

    def to_csv(self, max_paths: int | None = None) -> str:
        l = self.z.shape[2]
        lines = ["path_id,t,y," + ",".join(f"z{j + 1}" for j in range(l)) + ",u_tilde"]
        times = self.times
        for p in range(self.n_paths if max_paths is None else min(max_paths, self.n_paths)):
            for i in range(self.y.shape[1]):
                zs = ",".join(f"{v:.17g}" for v in self.z[p, i])
                lines.append(f"{p},{times[i]:.17g},{self.y[p, i]:.17g},{zs},{self.u_tilde[p, i]:.17g}")
        return "\n".join(lines) + "\n"

    def history_csv(self) -> str:
        rows = ["iter,sup_gap"] + [f"{k + 1},{g:.17g}" for k, g in enumerate(self.picard_history)]
        return "\n".join(rows) + "\n"


def ensemble_features(ens: ForwardEnsemble, basis: PolynomialBasis):
    """Callable ``i -> raw features`` with running extremes computed once."""
    X = ens.paths
    if basis.path_stats:
        rmin = np.minimum.accumulate(X, axis=1)
        rmax = np.maximum.accumulate(X, axis=1)
        return lambda i: basis.raw(X[:, i], rmin[:, i], rmax[:, i])
    return lambda i: basis.raw(X[:, i])


def backward_induction(ens: ForwardEnsemble, gen: GeneratorSpec, term: TerminalSpec, frozen_y: np.ndarray | None,
                       basis: PolynomialBasis | None = None, prehistory: np.ndarray | None = None,
                       with_se: bool = False) -> BsdeSolution:
    """One explicit backward sweep with the delayed argument read from ``frozen_y``.

    ``frozen_y`` has shape ``(n, N+1)``; ``None`` means the zero process.
    Nodes before the start time take ``prehistory`` (one value per node) when
    given, otherwise the start value.
    """
    basis = basis or PolynomialBasis()
    X = ens.paths
    n, N1, _ = X.shape
    N = N1 - 1
    dt = ens.dt
    l = ens.dW.shape[2]
    start = ens.start_index
    m = segment_length(gen.delta, dt) - 1 if gen.delta > 0 else 0
    if frozen_y is None:
        frozen_y = np.zeros((n, N1))
    if frozen_y.shape != (n, N1):
        raise ConfigurationError("delayed source and ensemble grids differ")

    model: LevyModel = ens.model
    c_nu = model.lam_norm_sq() if model.n_atoms else 0.0
    dM = ens.compensated_jumps(model.lam) if c_nu > 0 else None

    y = np.zeros((n, N1))
    z = np.zeros((n, N1, l))
    ut = np.zeros((n, N1))
    drv = np.zeros((n, N1))
    se = np.zeros((n, N1)) if with_se else None
    conds = np.ones(N1)
    regs: list = [None] * N1
    y[:, N] = term(X)
    if not np.all(np.isfinite(y[:, N])):
        raise NumericError("terminal condition is not finite", node=N)
    feats = ensemble_features(ens, basis)
    offsets = np.arange(-m, 1)

    for i in range(N - 1, start - 1, -1):
        t_i = i * dt
        design = Design.build(feats(i), basis.degree)
        conds[i] = design.cond
        nxt = y[:, i + 1]
        cont, y_mean, y_beta = design.fit(nxt)
        resid = nxt - cont
        cols = [resid[:, None] * ens.dW[:, i] / dt]
        cols.append((resid * dM[:, i] / dt)[:, None] if dM is not None else np.zeros((n, 1)))
        zu, zu_mean, zu_beta = design.fit(np.concatenate(cols, axis=1))
        z[:, i] = zu[:, :l]
        ut[:, i] = zu[:, l]
        regs[i] = NodeRegression(design, (np.atleast_1d(y_mean), y_beta), (zu_mean, zu_beta))
        idx = np.maximum(i + offsets, 0)
        yhat = frozen_y[:, idx]
        hist = X[:, : i + 1]
        fv = np.asarray(gen.f(t_i, hist, cont, z[:, i], ut[:, i], yhat), dtype=float)
        y[:, i] = cont + dt * fv
        drv[:, i] = fv
        if with_se:
            se[:, i] = design.prediction_se(float(np.std(resid)))
        design.C = None  # large; only the transform is kept
        if not np.all(np.isfinite(y[:, i])):
            bad = np.flatnonzero(~np.isfinite(y[:, i]))
            raise NumericError(f"non-finite Y at node {i} (t={t_i}), paths {bad[:5].tolist()}",
                               node=i, paths=bad.tolist())

    if start > 0:
        if prehistory is not None:
            pre = np.asarray(prehistory, dtype=float)
            if pre.shape != (start,):
                raise ConfigurationError(f"prehistory must hold {start} values")
            y[:, :start] = pre
        else:
            y[:, :start] = y[:, start:start + 1]
    return BsdeSolution(y, z, ut, drv, regs, basis, dt, start, conditions=conds, y_se=se)


def picard_solve(ens: ForwardEnsemble, gen: GeneratorSpec, term: TerminalSpec, basis: PolynomialBasis | None = None,
                 tol: float = 1e-4, max_iter: int = 50, prehistory: np.ndarray | None = None,
                 with_se: bool = False, check_certificate: bool = True) -> BsdeSolution:
    """Fixed-point iteration on the delayed argument, starting from Y ≡ 0.

    Stops when the sup over paths and nodes of |Y^n - Y^{n-1}| drops below
    ``tol``. A driver that ignores ŷ therefore stops after exactly two sweeps.
    """
    if gen.delta > 0:
        grid_steps(gen.delta, ens.dt, "delta")
    notes = []
    if check_certificate and gen.K > 0:
        _, value, ok = best_chi(gen.K, effective_L(gen.L), gen.delta, ens.T)
        if not ok:
            msg = f"delay condition not certified (best value {value:.4g} >= 1/578)"
            warnings.warn(msg, UncertifiedDelayWarning)
            notes.append(msg)
    start = ens.start_index
    prev = np.zeros_like(ens.paths[:, :, 0])
    history = []
    for _ in range(max_iter):
        sol = backward_induction(ens, gen, term, prev, basis, prehistory, with_se)
        gap = float(np.max(np.abs(sol.y[:, start:] - prev[:, start:])))
        history.append(gap)
        prev = sol.y
        if gap < tol:
            sol.picard_history = history
            sol.warnings.extend(notes)
            return sol
    raise NonConvergenceError(f"Picard iteration did not reach tol={tol} in {max_iter} sweeps", history)


def u_tilde_from_measure(U_profile: Callable[[np.ndarray], np.ndarray], model: LevyModel) -> float:
    """∫ U(z) λ(z) ν(dz) on the atoms."""
    if model.n_atoms == 0:
        return 0.0
    vals = np.asarray(U_profile(model.z), dtype=float) * np.ones(model.n_atoms) * model.lam
    _check_finite(vals, model)
    return float(np.dot(model.w, vals))


def restart_prolong(solutions: Mapping[float, BsdeSolution], t: float) -> BsdeSolution:
    """Fill [0, t) with the diagonal s -> Y^{s}(s) and zero Z, Ũ there."""
    if t not in solutions:
        raise ConfigurationError(f"no solution for start time {t}")
    base = solutions[t]
    start = base.start_index
    if start == 0:
        return base
    diag = np.empty(start)
    by_index = {grid_steps(s, base.dt, "start time"): sol for s, sol in solutions.items()}
    for j in range(start):
        if j not in by_index:
            raise ConfigurationError(f"missing diagonal entry at t={j * base.dt}")
        sol = by_index[j]
        diag[j] = float(np.mean(sol.y[:, j]))
    y = base.y.copy()
    y[:, :start] = diag
    z = base.z.copy()
    z[:, :start] = 0.0
    ut = base.u_tilde.copy()
    ut[:, :start] = 0.0
    return replace(base, y=y, z=z, u_tilde=ut)


def effective_L(L: float) -> float:
    """A Lipschitz constant usable by the certificate: any bound above L is valid, and 0 is not accepted."""
    return L if L > 0 else 1.0


def certificate_for(gen: GeneratorSpec, T: float) -> DelayParams | None:
    if gen.K == 0:
        return None
    L = effective_L(gen.L)
    chi, _, _ = best_chi(gen.K, L, gen.delta, T)
    return DelayParams(gen.K, L, gen.delta, T, chi)
