"""The functional u(t, φ) = Y^{t,φ}(t) and checks of the equation it solves.

``MonteCarloU`` evaluates u by simulating from ``(t, φ)`` and running the
Picard solver. It always uses the same seed, so evaluations at nearby
arguments share their noise window by window and finite differences
of u stay well conditioned. ``AnalyticU`` wraps a closed form in the present
state and serves as an independent reference.

Shifted paths: a jump or bump of size v at time t adds v to the path at t
and at every later node. A time shift keeps φ on ``[0, min(s, t))`` and puts
the present value φ(t) on the remaining nodes up to s.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .backward import (BsdeSolution, GeneratorSpec, PolynomialBasis, TerminalSpec, picard_solve)
from .errors import UnsupportedInputError
from .forward import ForwardCoefficients, ForwardEnsemble, simulate_ensemble
from .levy import LevyModel
from .paths import CadlagPath, M2Point, grid_steps, lift_eta, m2_norm, segment_length
from . import rng as rngmod


@dataclass(frozen=True, eq=False)
class SolverConfig:
    coeffs: ForwardCoefficients
    model: LevyModel
    gen: GeneratorSpec
    term: TerminalSpec
    T: float
    dt: float
    n_paths: int = 20_000
    seed: int = 0
    basis: PolynomialBasis = field(default_factory=PolynomialBasis)
    tol: float = 1e-4
    max_iter: int = 50
    threads: int = 1


@dataclass(frozen=True, eq=False)
class UEstimate:
    value: float
    std_err: float
    z: np.ndarray
    u_tilde: float
    samples: np.ndarray
    solution: BsdeSolution | None = None
    ensemble: ForwardEnsemble | None = None


def pathwise_values(sol: BsdeSolution, start: int) -> np.ndarray:
    """h(X) + dt Σ f along each path; their mean is Y at the start node."""
    return sol.y[:, -1] + sol.dt * np.sum(sol.driver[:, start:-1], axis=1)


def evaluate_u(t: float, phi: CadlagPath, config: SolverConfig, prehistory: np.ndarray | None = None,
               with_se: bool = False) -> UEstimate:
    ens = simulate_ensemble(config.coeffs, config.model, t, phi, config.T, config.dt, config.n_paths,
                            config.seed, config.threads)
    sol = picard_solve(ens, config.gen, config.term, config.basis, config.tol, config.max_iter,
                       prehistory=prehistory, with_se=with_se)
    i = ens.start_index
    samples = pathwise_values(sol, i)
    se = float(np.std(samples) / math.sqrt(samples.size))
    return UEstimate(float(np.mean(sol.y[:, i])), se, sol.z[:, i].mean(axis=0), float(sol.u_tilde[:, i].mean()),
                     samples, sol, ens)


def _digest(t: float, phi: CadlagPath) -> tuple:
    h = hashlib.sha1(np.ascontiguousarray(phi.values).tobytes()).hexdigest()
    return (round(t / phi.dt), phi.n_nodes, h)


class MonteCarloU:
    """u(t, φ) by simulation; results are cached per (t, path).

    The cache keeps the value, its standard error and the pathwise samples
    but drops the full solution and ensemble, which are large.
    """

    def __init__(self, config: SolverConfig):
        self.config = config
        self._cache: dict = {}

    def _prefix(self, t: float, phi: CadlagPath) -> CadlagPath:
        i = grid_steps(t, self.config.dt, "t")
        return CadlagPath(0.0, phi.dt, phi.values[: i + 1])

    def estimate(self, t: float, phi: CadlagPath) -> UEstimate:
        phi = self._prefix(t, phi)
        key = _digest(t, phi)
        if key not in self._cache:
            self._cache[key] = replace(evaluate_u(t, phi, self.config), solution=None, ensemble=None)
        return self._cache[key]

    def full_estimate(self, t: float, phi: CadlagPath) -> UEstimate:
        """Uncached evaluation that keeps the solution and the ensemble."""
        return evaluate_u(t, self._prefix(t, phi), self.config)

    def __call__(self, t: float, phi: CadlagPath) -> float:
        return self.estimate(t, phi).value

    def z(self, t: float, phi: CadlagPath) -> np.ndarray:
        return self.estimate(t, phi).z


class AnalyticU:
    """Closed form ``fn(t, x) -> (n,)`` in the present state ``x`` of shape ``(n, d)``."""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, t: float, phi: CadlagPath) -> float:
        return float(np.asarray(self.fn(t, phi.eval(t)[None, :]))[0])


# ---------------------------------------------------------------- path surgery


def bump_path(phi: CadlagPath, t: float, shift: np.ndarray) -> CadlagPath:
    """Add ``shift`` to the value at t and at every later node."""
    i = phi.index(t)
    v = phi.values.copy()
    v[i:] += np.asarray(shift, dtype=float)
    return CadlagPath(phi.t_start, phi.dt, v)


def time_shift(phi: CadlagPath, t: float, s: float) -> CadlagPath:
    """Path on ``[0, s]`` equal to φ before ``min(s, t)`` and to φ(t) afterwards."""
    it = phi.index(t)
    js = grid_steps(s, phi.dt, "s")
    v = np.empty((js + 1, phi.dim))
    keep = min(js, it)
    v[:keep] = phi.values[:keep]
    v[keep:] = phi.values[it]
    return CadlagPath(0.0, phi.dt, v)


def _hist(phi: CadlagPath, t: float) -> np.ndarray:
    return phi.values[: phi.index(t) + 1][None, :, :]


# ---------------------------------------------------------------- operators


def jump_operator(u, t: float, phi: CadlagPath, gamma: Callable, model: LevyModel) -> float:
    """Σ_k [u(t, φ + γ(t, φ, z_k)) - u(t, φ)] λ(z_k) w_k."""
    if model.n_atoms == 0:
        return 0.0
    hist = _hist(phi, t)
    base = u(t, phi)
    acc = 0.0
    for k in range(model.n_atoms):
        if model.w[k] == 0.0 or model.lam[k] == 0.0:
            continue
        g = np.asarray(gamma(t, hist, model.z[k]), dtype=float).reshape(-1)
        if not np.any(g):
            continue
        acc += (u(t, bump_path(phi, t, g)) - base) * model.lam[k] * model.w[k]
    return float(acc)


def _probe_markov(u, t: float, phi: CadlagPath, bump: float) -> None:
    i = phi.index(t)
    if i == 0:
        return
    v = phi.values.copy()
    v[:i] += bump
    other = u(t, CadlagPath(phi.t_start, phi.dt, v))
    base = u(t, phi)
    if abs(other - base) > 1e-9 * (1.0 + abs(base)):
        raise UnsupportedInputError(
            f"u depends on the past of the path (probe moved u by {other - base:.3g}); "
            "finite differences in the present state do not apply")


def derivatives(u, t: float, phi: CadlagPath, bump: float) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient and Hessian in the present coordinate."""
    d = phi.dim
    e = np.eye(d) * bump
    u0 = u(t, phi)
    plus = [u(t, bump_path(phi, t, e[j])) for j in range(d)]
    minus = [u(t, bump_path(phi, t, -e[j])) for j in range(d)]
    grad = np.array([(plus[j] - minus[j]) / (2 * bump) for j in range(d)])
    H = np.zeros((d, d))
    for j in range(d):
        H[j, j] = (plus[j] - 2 * u0 + minus[j]) / bump**2
        for k in range(j + 1, d):
            pp = u(t, bump_path(phi, t, e[j] + e[k]))
            pm = u(t, bump_path(phi, t, e[j] - e[k]))
            mp = u(t, bump_path(phi, t, -e[j] + e[k]))
            mm = u(t, bump_path(phi, t, -e[j] - e[k]))
            H[j, k] = H[k, j] = (pp - pm - mp + mm) / (4 * bump**2)
    return grad, H


def generator_L(u, t: float, phi: CadlagPath, b: Callable, sigma: Callable, bump: float,
                probe: bool = True) -> float:
    """½ Tr[σσ* ∂²u] + <b, ∂u> by central differences with step ``bump``."""
    if not bump > 0:
        raise ValueError("bump must be positive")
    if probe:
        _probe_markov(u, t, phi, bump)
    hist = _hist(phi, t)
    grad, H = derivatives(u, t, phi, bump)
    bv = np.asarray(b(t, hist), dtype=float).reshape(-1)
    s = np.asarray(sigma(t, hist), dtype=float).reshape(phi.dim, -1)
    return float(0.5 * np.trace(s @ s.T @ H) + bv @ grad)


@dataclass(frozen=True)
class PideReport:
    residual: float
    std_err: float
    u: float
    dt_u: float
    Lu: float
    jump: float
    driver: float
    jump_generator: float = 0.0


def pide_report(u, t: float, phi: CadlagPath, coeffs: ForwardCoefficients, model: LevyModel, gen: GeneratorSpec,
                dt_time: float, bump: float, jump_generator: bool = True) -> PideReport:
    """Residual of -∂_t u - Lu - Au - f(t, φ, u, ∂_x u σ, u-segment, Ju) at (t, φ).

    ``Au = Σ_k w_k [u(φ + γ_k) - u(φ) - <∂_x u, γ_k>]`` is the part of the
    forward generator that comes from its compensated jumps. Without it the
    exact solution of a jump model leaves exactly that term as residual;
    ``jump_generator=False`` drops it. The delayed argument is the constant
    segment u(t, φ); the reduction is meant for drivers that ignore it.
    """
    T = None
    if isinstance(u, MonteCarloU):
        T = u.config.T
    u0 = u(t, phi)
    lo = t - dt_time if t - dt_time >= -1e-12 else t
    hi = t + dt_time if T is None or t + dt_time <= T + 1e-12 else t
    u_hi, u_lo = u(hi, time_shift(phi, t, hi)), u(lo, time_shift(phi, t, lo))
    dt_u = (u_hi - u_lo) / (hi - lo)
    _probe_markov(u, t, phi, bump)
    hist = _hist(phi, t)
    grad, H = derivatives(u, t, phi, bump)
    bv = np.asarray(coeffs.drift(t, hist), dtype=float).reshape(-1)
    s = np.asarray(coeffs.vol(t, hist), dtype=float).reshape(phi.dim, -1)
    Lu = float(0.5 * np.trace(s @ s.T @ H) + bv @ grad)
    J = jump_operator(u, t, phi, coeffs.jump, model)
    A = 0.0
    if jump_generator and model.n_atoms:
        for k in range(model.n_atoms):
            g = np.asarray(coeffs.jump(t, hist, model.z[k]), dtype=float).reshape(-1)
            if np.any(g) and model.w[k] > 0:
                A += model.w[k] * (u(t, bump_path(phi, t, g)) - u0 - grad @ g)
    z = u.z(t, phi) if isinstance(u, MonteCarloU) else grad @ s
    m = segment_length(gen.delta, phi.dt) if gen.delta > 0 else 1
    fv = float(np.asarray(gen.f(t, hist, np.array([u0]), np.atleast_2d(z), np.array([J]),
                                np.full((1, m), u0)))[0])
    res = -dt_u - Lu - A - fv
    se = 0.0
    if isinstance(u, MonteCarloU):
        # paired samples share noise window by window, so the linear part of the
        # residual has a pathwise estimator
        S = lambda tt, p: u.estimate(tt, p).samples
        d = phi.dim
        combo = -(S(hi, time_shift(phi, t, hi)) - S(lo, time_shift(phi, t, lo))) / (hi - lo)
        if d == 1:
            sp = S(t, bump_path(phi, t, [bump]))
            sm = S(t, bump_path(phi, t, [-bump]))
            s0 = S(t, phi)
            combo = combo - 0.5 * float(s[0] @ s[0]) * (sp - 2 * s0 + sm) / bump**2 - bv[0] * (sp - sm) / (2 * bump)
        se = float(np.std(combo) / math.sqrt(combo.size))
    return PideReport(float(res), se, float(u0), float(dt_u), Lu, J, fv, float(A))


def pide_residual(u, t: float, phi: CadlagPath, coeffs: ForwardCoefficients, model: LevyModel,
                  gen: GeneratorSpec, dt_time: float, bump: float, jump_generator: bool = True) -> float:
    return pide_report(u, t, phi, coeffs, model, gen, dt_time, bump, jump_generator).residual


# ---------------------------------------------------------------- mild form


def _trapezoid(y: np.ndarray, dt: float) -> np.ndarray:
    return dt * (0.5 * y[..., 0] + np.sum(y[..., 1:-1], axis=-1) + 0.5 * y[..., -1])


def mild_residual(u, t: float, phi: CadlagPath, config: SolverConfig, return_se: bool = False):
    """P_{t,T} h(φ) + ∫_t^T P_{t,s}[f(...)] ds - u(t, φ), trapezoid in time.

    For a Monte Carlo ``u`` the integrand is read off the solver (Y, Z, Ũ
    along each path); for an analytic ``u`` it is evaluated from the closed
    form on a fresh ensemble, with Z = ∂_x u σ and Ju in the jump slot.
    """
    gen, dt = config.gen, config.dt
    if isinstance(u, MonteCarloU):
        est = u.full_estimate(t, phi)
        sol, ens = est.solution, est.ensemble
        i0, N = ens.start_index, ens.n_steps
        f = sol.driver.copy()
        m = segment_length(gen.delta, dt) if gen.delta > 0 else 1
        idx = np.maximum(np.arange(N - m + 1, N + 1), 0)
        f[:, N] = gen.f(N * dt, ens.paths, sol.y[:, N], sol.z[:, N - 1], sol.u_tilde[:, N - 1], sol.y[:, idx])
        u0 = est.value
    else:
        ens = simulate_ensemble(config.coeffs, config.model, t, phi, config.T, dt, config.n_paths, config.seed,
                                config.threads)
        i0, N = ens.start_index, ens.n_steps
        f = np.zeros((ens.n_paths, N + 1))
        model = config.model
        for i in range(i0, N + 1):
            s_i = i * dt
            hist = ens.paths[:, : i + 1]
            x = hist[:, -1]
            val = np.asarray(u.fn(s_i, x), dtype=float)
            sig = np.asarray(config.coeffs.vol(s_i, hist), dtype=float)
            h = 1e-4 * (1.0 + np.abs(x))
            grad = np.stack([(u.fn(s_i, x + h * e) - u.fn(s_i, x - h * e)) / (2 * h[:, j])
                             for j, e in enumerate(np.eye(x.shape[1]))], axis=1)
            z = np.einsum("nd,ndl->nl", grad, sig)
            J = np.zeros(ens.n_paths)
            for k in range(model.n_atoms):
                g = np.asarray(config.coeffs.jump(s_i, hist, model.z[k]), dtype=float)
                J += (u.fn(s_i, x + g) - val) * model.lam[k] * model.w[k]
            m = segment_length(gen.delta, dt) if gen.delta > 0 else 1
            f[:, i] = gen.f(s_i, hist, val, z, J, np.repeat(val[:, None], m, axis=1))
        u0 = u(t, phi)
    h = config.term(ens.paths)
    samples = h + _trapezoid(f[:, i0:], dt) if N > i0 else h
    res = float(np.mean(samples) - u0)
    if return_se:
        return res, float(np.std(samples) / math.sqrt(samples.size))
    return res


# ---------------------------------------------------------------- consistency


@dataclass(frozen=True)
class ConsistencyReport:
    fraction: float
    rows: list


def representation_check(config: SolverConfig, phi: CadlagPath, n_probe_paths: int = 100, n_times: int = 3,
                         probe_paths: int = 10_000, seed: int = 0, z_score: float = 3.0) -> ConsistencyReport:
    """Compare the solver's Y^{0,φ}(s) on realised paths with fresh evaluations of u(s, X).

    Each probe re-simulates from the realised path prefix with an independent
    seed. The tolerance combines the probe's standard error with the
    prediction standard error of the solver's regression at that node.
    """
    ens = simulate_ensemble(config.coeffs, config.model, 0.0, phi, config.T, config.dt, config.n_paths,
                            config.seed, config.threads)
    sol = picard_solve(ens, config.gen, config.term, config.basis, config.tol, config.max_iter, with_se=True)
    g = rngmod.substream(seed, rngmod.TAG_SCENARIO, 1)
    N = ens.n_steps
    rows = []
    for p in range(n_probe_paths):
        nodes = np.sort(g.choice(np.arange(1, N), size=n_times, replace=False))
        for i in nodes:
            s = i * config.dt
            sub = replace(config, n_paths=probe_paths, seed=rngmod.derive_seed(seed, p, int(i)))
            prefix = CadlagPath(0.0, config.dt, ens.paths[p, : i + 1])
            est = evaluate_u(s, prefix, sub)
            tol_se = math.hypot(est.std_err, float(sol.y_se[p, i]))
            gap = abs(float(sol.y[p, i]) - est.value)
            rows.append((p, s, float(sol.y[p, i]), est.value, tol_se, gap <= z_score * tol_se))
    frac = float(np.mean([r[-1] for r in rows]))
    return ConsistencyReport(frac, rows)


def lipschitz_probe(u, t: float, pairs: list[tuple[CadlagPath, CadlagPath]], m: float = 1.0) -> float:
    """Largest |u(φ1) - u(φ2)| / (‖φ1-φ2‖ (1 + ‖φ1‖ + ‖φ2‖)^m) over the pairs, lifted norms."""
    worst = 0.0
    for a, b in pairs:
        pa, pb = lift_eta(a, t), lift_eta(b, t)
        diff = M2Point(CadlagPath(pa.history.t_start, pa.history.dt, pa.history.values - pb.history.values),
                       pa.present - pb.present)
        den = m2_norm(diff) * (1.0 + m2_norm(pa) + m2_norm(pb)) ** m
        if den > 0:
            worst = max(worst, abs(u(t, a) - u(t, b)) / den)
    return worst
