"""Euler–Maruyama for path-dependent jump diffusions.

Coefficients are vectorised over an ensemble. Each one receives the time and
``hist``, an array of shape ``(n, i+1, d)`` holding every path up to and
including the current node, and nothing later. That makes every coefficient
non-anticipative by construction and lets it read delayed values freely.

Noise is drawn per (path block, window) from keyed substreams (see
:mod:`delaybsde.rng`), indexed by the absolute grid window. Two runs that
share a seed therefore see the same increments on every window they have in
common, whatever their start time.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, NumericError
from .levy import JumpTrain, LevyModel, draw_window_counts
from .paths import CadlagPath, grid_steps

Drift = Callable[[float, np.ndarray], np.ndarray]
Vol = Callable[[float, np.ndarray], np.ndarray]
Jump = Callable[[float, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class ForwardCoefficients:
    """b, σ and γ of the forward equation.

    ``drift(t, hist) -> (n, d)``, ``vol(t, hist) -> (n, d, l)`` and
    ``jump(t, hist, z) -> (n, d)``. ``lipschitz_ell`` is a declared constant,
    kept for reporting only.
    """

    drift: Drift
    vol: Vol
    jump: Jump
    dim: int = 1
    noise_dim: int = 1
    lipschitz_ell: float = float("nan")
    name: str = "custom"


def _zeros_drift(t, hist):
    return np.zeros((hist.shape[0], hist.shape[2]))


def constant_coefficients(b=0.0, sigma=0.0, jump_scale=0.0, dim: int = 1) -> ForwardCoefficients:
    """b and σ constant; γ(t, φ, z) = jump_scale * z."""
    b = np.broadcast_to(np.asarray(b, dtype=float), (dim,))
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,))

    def drift(t, hist):
        return np.broadcast_to(b, (hist.shape[0], dim))

    def vol(t, hist):
        return np.broadcast_to(np.diag(s) if dim > 1 else s[:, None], (hist.shape[0], dim, dim))

    def jump(t, hist, z):
        return np.full((hist.shape[0], dim), jump_scale * z)

    ell = float(max(np.max(np.abs(s)), abs(jump_scale), 0.0))
    return ForwardCoefficients(drift, vol, jump, dim, dim, ell, "constant")


def linear_coefficients(b0=0.0, b1=0.0, s0=0.0, s1=0.0, jump_scale=0.0, jump_prop=0.0) -> ForwardCoefficients:
    """Scalar affine dynamics: b = b0 + b1 x, σ = s0 + s1 x, γ = (jump_scale + jump_prop x) z."""

    def drift(t, hist):
        return b0 + b1 * hist[:, -1, :]

    def vol(t, hist):
        return (s0 + s1 * hist[:, -1, :])[:, :, None]

    def jump(t, hist, z):
        return (jump_scale + jump_prop * hist[:, -1, :]) * z

    return ForwardCoefficients(drift, vol, jump, 1, 1, float(max(abs(b1), abs(s1), abs(jump_prop))), "linear")


def geometric_coefficients(mu: float, sigma: float) -> ForwardCoefficients:
    return linear_coefficients(b1=mu, s1=sigma)


def merton_coefficients(mu: float, sigma: float) -> ForwardCoefficients:
    """dX = X(μ dt + σ dW + ∫ z Ñ(dt, dz)); jumps scale with the left limit."""
    c = linear_coefficients(b1=mu, s1=sigma, jump_prop=1.0)
    return ForwardCoefficients(c.drift, c.vol, c.jump, 1, 1, c.lipschitz_ell, "merton")


def delayed_drift_coefficients(kappa: float, lag_steps: int, sigma: float, jump_scale: float = 0.0) -> ForwardCoefficients:
    """b = κ X(t - lag), σ constant. Before time 0 the initial value is used."""

    def drift(t, hist):
        i = hist.shape[1] - 1
        return kappa * hist[:, max(i - lag_steps, 0), :]

    def vol(t, hist):
        return np.full((hist.shape[0], 1, 1), sigma)

    def jump(t, hist, z):
        return np.full((hist.shape[0], 1), jump_scale * z)

    return ForwardCoefficients(drift, vol, jump, 1, 1, abs(kappa), "delayed-drift")


@dataclass(eq=False)
class ForwardEnsemble:
    """Simulated paths plus the noise that drove them.

    ``dW[:, i]`` and ``jump_counts[:, i]`` belong to the window
    ``(t_i, t_{i+1}]``; windows before the start node are zero.
    ``jump_counts`` is ``None`` for models without jumps.
    """

    paths: np.ndarray
    dW: np.ndarray
    jump_counts: np.ndarray | None
    model: LevyModel
    dt: float
    T: float
    t: float
    phi: CadlagPath
    seed: int
    gamma_moment_max: float = 0.0
    coeff_name: str = "custom"
    _start: int = field(init=False)

    def __post_init__(self):
        self._start = grid_steps(self.t, self.dt, "t")

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_steps(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def start_index(self) -> int:
        return self._start

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def path(self, p: int) -> CadlagPath:
        return CadlagPath(0.0, self.dt, self.paths[p])

    def compensated_jumps(self, weights: np.ndarray) -> np.ndarray:
        """Σ_jumps g(z) - dt ∫ g dν per path and window, for g tabulated on the atoms."""
        n, N = self.n_paths, self.n_steps
        if self.jump_counts is None:
            return np.zeros((n, N))
        out = self.jump_counts @ np.asarray(weights, dtype=float) - self.dt * float(np.dot(self.model.w, weights))
        out[:, : self._start] = 0.0
        return out

    def jump_train(self, p: int, window: int) -> JumpTrain:
        """Re-derive the full jump train (times and marks) of path ``p`` on one window.

        Only the per-atom counts are kept in memory; this replays the keyed
        substream, so the counts agree with ``jump_counts[p, window]``.
        """
        g = rngmod.substream(self.seed, rngmod.TAG_JUMP_TRAIN, p, window)
        counts = self.jump_counts[p, window] if self.jump_counts is not None else np.zeros(0, dtype=int)
        t0 = window * self.dt
        times = np.sort(t0 + (1.0 - g.random(int(counts.sum()))) * self.dt)
        idx = np.repeat(np.arange(self.model.n_atoms), counts)
        idx = g.permutation(idx) if idx.size else idx.astype(np.int64)
        return JumpTrain(times, self.model.z[idx], idx)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "dt": self.dt,
            "T": self.T,
            "t": self.t,
            "n_paths": self.n_paths,
            "model_digest": self.model.digest(),
            "coefficients": self.coeff_name,
        }

    def to_csv(self, max_paths: int | None = None) -> str:
        d = self.paths.shape[2]
        lines = ["path_id,t," + ",".join(f"x{j + 1}" for j in range(d))]
        times = self.times
        for p in range(self.n_paths if max_paths is None else min(max_paths, self.n_paths)):
            for i in range(self.n_steps + 1):
                lines.append(f"{p},{times[i]:.17g}," + ",".join(f"{x:.17g}" for x in self.paths[p, i]))
        return "\n".join(lines) + "\n"


def _window_noise(seed, block, window, l, model, dt):
    g = rngmod.substream(seed, rngmod.TAG_FORWARD, block, window)
    dw = g.standard_normal((rngmod.BLOCK_SIZE, l)) * np.sqrt(dt)
    counts = draw_window_counts(model, g, rngmod.BLOCK_SIZE, dt) if model.total_intensity > 0 else None
    return dw, counts


def generate_noise(seed: int, n_paths: int, n_steps: int, start: int, l: int, model: LevyModel, dt: float,
                   threads: int = 1, path_offset: int = 0):
    """Brownian increments and per-atom jump counts for windows ``start..n_steps-1``.

    ``path_offset`` selects which global path indices are produced (only
    block-aligned offsets are supported); single-path simulation uses it to
    pull path ``p`` out of the same stream an ensemble would use.
    """
    dW = np.zeros((n_paths, n_steps, l))
    jumps = model.total_intensity > 0
    counts = np.zeros((n_paths, n_steps, model.n_atoms), dtype=np.int32) if jumps else None
    first_block, inner = divmod(path_offset, rngmod.BLOCK_SIZE)
    span = inner + n_paths
    tasks = [(first_block + b, lo, hi) for b, lo, hi in rngmod.blocks(span)]

    def work(task):
        b, lo, hi = task
        for w in range(start, n_steps):
            dw, c = _window_noise(seed, b, w, l, model, dt)
            a0, a1 = max(lo, inner), hi
            if a1 <= a0:
                continue
            dW[a0 - inner:a1 - inner, w] = dw[a0 - lo:a1 - lo]
            if jumps:
                counts[a0 - inner:a1 - inner, w] = c[a0 - lo:a1 - lo]

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, tasks))
    else:
        for task in tasks:
            work(task)
    return dW, counts


def euler_step(coeffs: ForwardCoefficients, hist: np.ndarray, t_i: float, dt: float, dW: np.ndarray,
               counts: np.ndarray | None, model: LevyModel) -> np.ndarray:
    """One explicit step for every path in ``hist``.

    X_{i+1} = X_i + b dt + σ dW + Σ_k counts_k γ(z_k) - dt Σ_k w_k γ(z_k),
    all coefficients frozen at the left end of the step.
    """
    x = hist[:, -1, :]
    b = np.asarray(coeffs.drift(t_i, hist), dtype=float)
    s = np.asarray(coeffs.vol(t_i, hist), dtype=float)
    out = x + b * dt + np.einsum("ndl,nl->nd", s, dW)
    if model.n_atoms:
        for k in range(model.n_atoms):
            g = np.asarray(coeffs.jump(t_i, hist, model.z[k]), dtype=float)
            c = counts[:, k][:, None] if counts is not None else 0.0
            out = out + (c - dt * model.w[k]) * g
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        ids = np.flatnonzero(bad)
        raise NumericError(f"non-finite state after step at t={t_i}, paths {ids[:5].tolist()}",
                           t=t_i, paths=ids.tolist())
    return out


def _gamma_moment(coeffs, hist, t_i, model):
    if model.n_atoms == 0:
        return 0.0
    acc = np.zeros(hist.shape[0])
    for k in range(model.n_atoms):
        g = np.asarray(coeffs.jump(t_i, hist, model.z[k]), dtype=float)
        acc += model.w[k] * np.sum(g * g, axis=1)
    return float(acc.max())


def integrate(coeffs: ForwardCoefficients, model: LevyModel, X: np.ndarray, start: int, dt: float,
              dW: np.ndarray, counts: np.ndarray | None) -> float:
    """Run the Euler recursion in place on ``X[:, start:]``. Returns the sampled (A3) moment."""
    gmax = 0.0
    for i in range(start, X.shape[1] - 1):
        hist = X[:, : i + 1, :]
        t_i = i * dt
        c = counts[:, i] if counts is not None else None
        X[:, i + 1] = euler_step(coeffs, hist, t_i, dt, dW[:, i], c, model)
        gmax = max(gmax, _gamma_moment(coeffs, hist, t_i, model))
    return gmax


def _initial(phi: CadlagPath, t: float, dt: float, N: int, n: int, d: int) -> tuple[np.ndarray, int]:
    if not np.isclose(phi.dt, dt, rtol=1e-12) or abs(phi.t_start) > 1e-12:
        raise ConfigurationError("initial path must start at 0 on the simulation grid")
    if phi.dim != d:
        raise ConfigurationError(f"initial path has dimension {phi.dim}, coefficients expect {d}")
    start = grid_steps(t, dt, "t")
    if start > N:
        raise ConfigurationError("start time beyond the horizon")
    if phi.n_nodes < start + 1:
        raise ConfigurationError("initial path must be defined on [0, t]")
    X = np.empty((n, N + 1, d))
    X[:, : start + 1] = phi.values[: start + 1]
    X[:, start + 1:] = np.nan
    return X, start


def simulate_ensemble(coeffs: ForwardCoefficients, model: LevyModel, t: float, phi: CadlagPath, T: float,
                      dt: float, n_paths: int, seed: int, threads: int = 1, path_offset: int = 0) -> ForwardEnsemble:
    if n_paths <= 0:
        raise ConfigurationError("n_paths must be positive")
    N = grid_steps(T, dt, "T")
    X, start = _initial(phi, t, dt, N, n_paths, coeffs.dim)
    dW, counts = generate_noise(seed, n_paths, N, start, coeffs.noise_dim, model, dt, threads, path_offset)
    gmax = integrate(coeffs, model, X, start, dt, dW, counts)
    return ForwardEnsemble(X, dW, counts, model, dt, T, t, phi, seed, gmax, coeffs.name)


def simulate(coeffs: ForwardCoefficients, model: LevyModel, t: float, phi: CadlagPath, T: float, dt: float,
             seed: int, path_index: int = 0) -> CadlagPath:
    """A single path. Identical to path ``path_index`` of the ensemble with the same seed."""
    block_start = (path_index // rngmod.BLOCK_SIZE) * rngmod.BLOCK_SIZE
    ens = simulate_ensemble(coeffs, model, t, phi, T, dt, path_index - block_start + 1, seed,
                            path_offset=block_start)
    return ens.path(path_index - block_start)


def flow_check(coeffs: ForwardCoefficients, model: LevyModel, t: float, phi: CadlagPath, s_mid: float, T: float,
               dt: float, seed: int, n_paths: int = 32, n_restarts: int = 4) -> float:
    """Max gap between a direct run and runs restarted at ``s_mid`` on the same noise.

    Every path is restarted in place from its realised state at ``s_mid``.
    The first ``n_restarts`` paths are also restarted through :func:`simulate`
    with the realised prefix as initial path, which regenerates their noise
    from the keyed streams.
    """
    ens = simulate_ensemble(coeffs, model, t, phi, T, dt, n_paths, seed)
    mid = grid_steps(s_mid, dt, "s_mid")
    if mid < ens.start_index or mid > ens.n_steps:
        raise ConfigurationError("s_mid must lie in [t, T]")
    X = ens.paths.copy()
    X[:, mid + 1:] = np.nan
    integrate(coeffs, model, X, mid, dt, ens.dW, ens.jump_counts)
    gap = float(np.max(np.abs(X - ens.paths)))
    for p in range(min(n_restarts, n_paths)):
        prefix = CadlagPath(0.0, dt, ens.paths[p, : mid + 1])
        again = simulate(coeffs, model, mid * dt, prefix, T, dt, seed, path_index=p)
        gap = max(gap, float(np.max(np.abs(again.values - ens.paths[p]))))
    return gap


def run_manifest(ens: ForwardEnsemble) -> str:
    return json.dumps(ens.manifest(), sort_keys=True, indent=2)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
