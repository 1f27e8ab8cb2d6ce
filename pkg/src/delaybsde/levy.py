"""Finite-activity Poisson random measures represented by atoms.

The Lévy measure is a finite list of ``(z_k, w_k)`` pairs, so integrals against
it are exact finite sums and the second moment is finite by construction.
Continuous jump laws are handled by quadrature helpers such as
:func:`normal_jump_atoms` before a model is built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

WEIGHT_PRESETS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda z: np.ones_like(z),
    "abs": np.abs,
    "square": np.square,
}


@dataclass(frozen=True, eq=False)
class LevyModel:
    """Atomic Lévy measure with a jump weight ``lam`` tabulated on the atoms.

    Attributes
    ----------
    z : ndarray, shape (K,)
        Jump sizes, all non-zero.
    w : ndarray, shape (K,)
        Measure of each atom (jumps per unit time).
    lam : ndarray, shape (K,)
        Weight function evaluated on the atoms. Bounded and non-negative.
    weight_name : str
        Preset name, or ``"table"`` when ``lam`` was given explicitly.
    """

    z: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    weight_name: str = "one"
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if z.ndim != 1 or z.shape != w.shape or z.shape != lam.shape:
            raise ConfigurationError("atoms, weights and lam must be 1-d and equally long")
        if np.any(z == 0.0):
            raise ConfigurationError("jump sizes must be non-zero")
        if np.any(w < 0.0) or np.any(lam < 0.0):
            raise ConfigurationError("atom weights and lam must be non-negative")
        second = float(np.sum(z**2 * w))
        if not np.all(np.isfinite(np.concatenate([z, w, lam]))) or not np.isfinite(second):
            raise ConfigurationError("Lévy measure must be finite with finite second moment")
        for name, arr in (("z", z), ("w", w), ("lam", lam)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        total = float(np.sum(w))
        cum = np.cumsum(w) / total if total > 0 else np.zeros(0)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_atoms(
        cls,
        atoms: Iterable[Sequence[float]],
        weight: str | Sequence[float] | Callable = "one",
        total_intensity: float | None = None,
    ) -> "LevyModel":
        atoms = [tuple(a) for a in atoms]
        z = np.array([a[0] for a in atoms], dtype=float)
        w = np.array([a[1] for a in atoms], dtype=float)
        if isinstance(weight, str):
            if weight not in WEIGHT_PRESETS:
                raise ConfigurationError(f"unknown weight preset {weight!r}")
            lam, name = WEIGHT_PRESETS[weight](z), weight
        elif callable(weight):
            lam, name = np.array([weight(zk) for zk in z], dtype=float), "callable"
        else:
            lam, name = np.asarray(weight, dtype=float), "table"
        model = cls(z, w, lam, name)
        if total_intensity is not None:
            if len(z) == 0 and total_intensity > 0:
                raise ConfigurationError("positive intensity with an empty atom list")
            if not np.isclose(total_intensity, model.total_intensity, rtol=1e-12, atol=0.0):
                raise ConfigurationError(
                    f"total_intensity {total_intensity} != sum of atom weights {model.total_intensity}"
                )
        return model

    @classmethod
    def no_jumps(cls) -> "LevyModel":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @property
    def n_atoms(self) -> int:
        return self.z.size

    @property
    def total_intensity(self) -> float:
        return float(np.sum(self.w))

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.z, self.w)]

    def second_moment(self) -> float:
        return float(np.sum(self.z**2 * self.w))

    def lam_norm_sq(self) -> float:
        """∫ lam(z)² ν(dz), the normaliser used by the Ũ regression."""
        return float(np.sum(self.lam**2 * self.w))

    def draw_marks(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Atom indices drawn with probability ``w_k / total_intensity``."""
        u = rng.random(size)
        idx = np.searchsorted(self._cum, u, side="right")
        return np.minimum(idx, self.n_atoms - 1)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.z, self.w, self.lam):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def normal_jump_atoms(intensity: float, mean: float, std: float, n: int = 8) -> list[tuple[float, float]]:
    """Gauss–Hermite atoms for ``intensity * N(mean, std²)`` jump sizes."""
    if n < 1 or std < 0 or intensity < 0:
        raise ConfigurationError("need n >= 1, std >= 0, intensity >= 0")
    if std == 0:
        return [(mean, intensity)]
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    weights = weights / weights.sum()
    atoms = [(mean + std * x, intensity * p) for x, p in zip(nodes, weights)]
    if any(a[0] == 0.0 for a in atoms):
        raise ConfigurationError("a quadrature node falls on z = 0; use an even n or shift the mean")
    return atoms


@dataclass(frozen=True, eq=False)
class JumpTrain:
    """Realisation of the jump measure on a window ``(t0, t1]``."""

    times: np.ndarray
    marks: np.ndarray
    atom_index: np.ndarray

    def __len__(self):
        return self.times.size


def sample_jump_train(model: LevyModel, t0: float, t1: float, rng: np.random.Generator) -> JumpTrain:
    if not t0 < t1:
        raise ConfigurationError(f"need t0 < t1, got {t0}, {t1}")
    rate = model.total_intensity
    if rate == 0.0:
        empty = np.zeros(0)
        return JumpTrain(empty, empty, np.zeros(0, dtype=np.int64))
    if model.n_atoms == 0:
        raise ConfigurationError("positive intensity with an empty atom list")
    count = int(rng.poisson(rate * (t1 - t0)))
    idx = model.draw_marks(rng, count)
    # 1 - U lies in (0, 1], which puts the jumps in (t0, t1]
    times = np.sort(t0 + (1.0 - rng.random(count)) * (t1 - t0))
    return JumpTrain(times, model.z[idx], idx)


def draw_window_counts(model: LevyModel, rng: np.random.Generator, size: int, dt: float) -> np.ndarray:
    """Per-atom jump counts on one window for ``size`` paths, shape ``(size, K)``.

    Uses the same two-stage law as :func:`sample_jump_train`: a Poisson total
    per path, then categorical marks.
    """
    K = model.n_atoms
    if model.total_intensity == 0.0:
        return np.zeros((size, K), dtype=np.int32)
    totals = rng.poisson(model.total_intensity * dt, size=size)
    n = int(totals.sum())
    marks = model.draw_marks(rng, n)
    owner = np.repeat(np.arange(size), totals)
    counts = np.bincount(owner * K + marks, minlength=size * K)
    return counts.reshape(size, K).astype(np.int32)


def _check_finite(values: np.ndarray, model: LevyModel) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        k = int(np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1))[0])
        raise NumericError(f"integrand is not finite at atom z={model.z[k]}", atom=float(model.z[k]), index=k)


def nu_integral(model: LevyModel, g: Callable[[np.ndarray], np.ndarray]) -> float | np.ndarray:
    """Σ_k g(z_k) w_k. ``g`` is vectorised over the atom array.

    If ``g`` returns shape ``(K, ...)`` the trailing axes are kept, which is how
    vector-valued jump coefficients are integrated componentwise.
    """
    if model.n_atoms == 0:
        return 0.0
    values = np.asarray(g(model.z), dtype=float)
    if values.ndim == 0:
        values = np.full(model.n_atoms, float(values))
    _check_finite(values, model)
    out = np.tensordot(model.w, values, axes=(0, 0))
    return float(out) if np.ndim(out) == 0 else out


def compensated_increment(
    train: JumpTrain, model: LevyModel, g: Callable[[np.ndarray], np.ndarray], t0: float, t1: float
) -> float:
    """Σ over jumps of g(z) minus (t1 - t0)·∫g dν."""
    jumps = 0.0
    if len(train):
        vals = np.asarray(g(train.marks), dtype=float) * np.ones(len(train))
        if not np.all(np.isfinite(vals)):
            raise NumericError("integrand is not finite on a sampled jump")
        jumps = float(np.sum(vals))
    return jumps - (t1 - t0) * float(nu_integral(model, g))
