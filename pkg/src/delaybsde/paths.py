"""Càdlàg step paths on a uniform grid and the Delfour–Mitter lifting.

A :class:`CadlagPath` stores the right limits at ``t_start + i*dt``; between
nodes it is constant, so evaluation at ``s`` returns the node at or before
``s``. All times that the rest of the package uses (start times, delays,
horizons) are required to be multiples of ``dt``.

Note that :func:`lift_eta` fills the history before ``-t`` with ``phi(0)``
while :func:`unlift_varphi` extends the path after ``t`` with the present
value ``history(0) = phi(t)``. The two maps are therefore not inverse to each
other beyond ``[0, t]``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

# relative slack when mapping a time to a grid index
GRID_EPS = 1e-9


def grid_steps(length: float, dt: float, what: str = "time") -> int:
    """Number of ``dt`` steps in ``length``; raise unless it is an integer."""
    k = length / dt
    n = round(k)
    if abs(k - n) > GRID_EPS * max(1.0, abs(k)):
        raise ConfigurationError(f"{what}={length!r} is not a multiple of dt={dt!r}")
    return int(n)


@dataclass(frozen=True, eq=False)
class CadlagPath:
    t_start: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] == 0:
            raise ConfigurationError("values must be a non-empty (n_nodes, d) array")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("path values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, c, t_start: float, t_end: float, dt: float) -> "CadlagPath":
        n = grid_steps(t_end - t_start, dt, "path length") + 1
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(t_start, dt, np.tile(c, (n, 1)))

    @classmethod
    def from_function(cls, fn, t_start: float, t_end: float, dt: float) -> "CadlagPath":
        n = grid_steps(t_end - t_start, dt, "path length") + 1
        times = t_start + dt * np.arange(n)
        return cls(t_start, dt, np.array([np.atleast_1d(fn(s)) for s in times]))

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n_nodes - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_nodes)

    def index(self, s: float) -> int:
        """Grid index of the node at or before ``s``."""
        k = (s - self.t_start) / self.dt
        i = math.floor(k + GRID_EPS * max(1.0, abs(k)))
        if i < 0 or i > self.n_nodes - 1 or (i == self.n_nodes - 1 and k > i + GRID_EPS * max(1.0, k)):
            raise DomainError(f"s={s} outside [{self.t_start}, {self.t_end}]")
        return i

    def eval(self, s: float) -> np.ndarray:
        return self.values[self.index(s)]

    def __call__(self, s: float) -> np.ndarray:
        return self.eval(s)

    def truncate(self, s: float) -> "CadlagPath":
        """The path restricted to ``[t_start, s]``."""
        return CadlagPath(self.t_start, self.dt, self.values[: self.index(s) + 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{j + 1}" for j in range(self.dim)])
        for t, row in zip(self.times, self.values):
            w.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CadlagPath":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(x) for x in r] for r in rows[1:]])
        times = data[:, 0]
        dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
        return cls(float(times[0]), dt, data[:, 1:])


@dataclass(frozen=True, eq=False)
class Segment:
    """Restriction of a path to ``[r - delta, r]`` sampled on the grid.

    ``values[j]`` is the value at ``r - delta + j*dt``.
    """

    r: float
    delta: float
    dt: float
    values: np.ndarray

    @property
    def thetas(self) -> np.ndarray:
        n = self.values.shape[0]
        return self.dt * (np.arange(n) - (n - 1))


def segment_length(delta: float, dt: float) -> int:
    return math.ceil(delta / dt - GRID_EPS * max(1.0, delta / dt)) + 1


def segment(path: CadlagPath, r: float, delta: float) -> Segment:
    """Delayed window of ``path`` ending at ``r``.

    Nodes before the start of the path take the initial value (prolongation
    by the initial datum).
    """
    if not delta > 0:
        raise DomainError("delay must be positive")
    i = path.index(r)
    m = segment_length(delta, path.dt)
    idx = np.maximum(np.arange(i - m + 1, i + 1), 0)
    return Segment(r, delta, path.dt, path.values[idx])


@dataclass(frozen=True, eq=False)
class M2Point:
    """Point of L²([-T, 0]; R^d) x R^d: a history path and a present value."""

    history: CadlagPath
    present: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "present", np.atleast_1d(np.asarray(self.present, dtype=float)))


def l2_norm(path: CadlagPath) -> float:
    """L² norm of a step path, by a left-Riemann sum over the grid."""
    v = path.values[:-1]
    return math.sqrt(float(np.sum(v * v)) * path.dt)


def sup_norm(path: CadlagPath) -> float:
    return float(np.max(np.linalg.norm(path.values, axis=1)))


def m2_norm(point: M2Point) -> float:
    return math.sqrt(l2_norm(point.history) ** 2 + float(np.sum(point.present**2)))


def lift_eta(phi: CadlagPath, t: float) -> M2Point:
    """Map a path on ``[0, T]`` to its lifted state at time ``t``.

    history(θ) = φ(t + θ) for θ in [-t, 0] and φ(0) for θ in [-T, -t).

    Note the asymmetry with ``unlift_varphi``: the lifted past is padded
    with the initial value φ(0), while the rebuilt future is frozen at the
    present value. Lifting and then unlifting therefore only round-trips on
    ``[0, t]``.
    """
    T = phi.t_end
    if t < phi.t_start - GRID_EPS or t > T + GRID_EPS:
        raise DomainError(f"t={t} outside [0, {T}]")
    n = phi.n_nodes
    it = phi.index(t)
    # history node j sits at θ = -T + j*dt, i.e. at path index it - (n-1) + j
    src = np.arange(n) + it - (n - 1)
    hist = phi.values[np.maximum(src, 0)]
    return M2Point(CadlagPath(-T, phi.dt, hist), phi.values[it])


def unlift_varphi(point: M2Point, t: float, T: float) -> CadlagPath:
    """Rebuild a path on ``[0, T]``: history(θ - t) on [0, t], history(0) after."""
    h = point.history
    n = grid_steps(T, h.dt, "T") + 1
    it = grid_steps(t, h.dt, "t")
    last = h.n_nodes - 1
    src = np.arange(n) - it + last
    vals = h.values[np.clip(src, 0, last)]
    return CadlagPath(0.0, h.dt, vals)
