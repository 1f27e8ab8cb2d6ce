"""Scenario files: YAML with fixed sections, strict keys and named presets.

Every error message carries the line of the offending entry. A scenario
serialises back to YAML, and loading that text again gives an equal object.

Example::

    mode: solve
    forward: {preset: constant, params: {sigma: 1.0}, x0: 0.0}
    generator: {preset: zero}
    terminal: {preset: square}
    numerics: {T: 1.0, dt: 0.01, n_paths: 20000, seed: 7}
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
import yaml

from . import backward as bw
from . import forward as fw
from .errors import ConfigurationError
from .levy import LevyModel, normal_jump_atoms
from .paths import GRID_EPS, CadlagPath, grid_steps

MODES = ("simulate", "solve", "verify", "certify", "hedge")

FORWARD_PRESETS = {
    "constant": ("b", "sigma", "jump_scale", "dim"),
    "linear": ("b0", "b1", "s0", "s1", "jump_scale", "jump_prop"),
    "geometric": ("mu", "sigma"),
    "merton": ("mu", "sigma"),
    "delayed_drift": ("kappa", "lag", "sigma", "jump_scale"),
}
GENERATOR_PRESETS = {
    "zero": (),
    "discount": ("rho",),
    "linear": ("rho", "theta", "eta", "kappa", "const"),
    "delay": ("kappa",),
}
TERMINAL_PRESETS = {
    "constant": ("c",),
    "identity": ("component",),
    "square": ("component",),
    "call": ("strike", "component"),
    "put": ("strike", "component"),
}
ANALYTIC_PRESETS = ("heat", "discount", "identity")


@dataclass(frozen=True)
class ModelSection:
    atoms: tuple = ()
    weight: str = "one"
    normal: dict | None = None


@dataclass(frozen=True)
class ForwardSection:
    preset: str = "constant"
    params: dict = field(default_factory=dict)
    x0: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class GeneratorSection:
    preset: str = "zero"
    params: dict = field(default_factory=dict)
    delta: float = 0.0
    alpha: tuple = ()


@dataclass(frozen=True)
class TerminalSection:
    preset: str = "identity"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NumericsSection:
    T: float = 1.0
    dt: float = 0.01
    n_paths: int = 10_000
    seed: int = 0
    tol: float = 1e-4
    max_iter: int = 50
    degree: int = 3
    path_stats: bool = True


@dataclass(frozen=True)
class VerifySection:
    probes: tuple = ((0.5, 0.0),)
    bump: float | None = None
    dt_time: float | None = None
    tolerance: float = 0.05
    analytic: str | None = None
    mild: bool = True


@dataclass(frozen=True)
class MarketSection:
    r: float = 0.0
    mu: float = 0.0
    kappa: float = 0.0
    sigma: float = 0.2
    s0: float = 1.0
    jump_factor: float = 0.0
    stock_drift: float | None = None
    pnl_paths: int | None = None


@dataclass(frozen=True)
class OutputSection:
    export_paths: int = 100
    histogram_bins: int = 50


@dataclass(frozen=True)
class Scenario:
    mode: str = "solve"
    model: ModelSection = field(default_factory=ModelSection)
    forward: ForwardSection = field(default_factory=ForwardSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    terminal: TerminalSection = field(default_factory=TerminalSection)
    numerics: NumericsSection = field(default_factory=NumericsSection)
    verify: VerifySection = field(default_factory=VerifySection)
    market: MarketSection = field(default_factory=MarketSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ------------------------------------------------------------ builders

    def levy_model(self) -> LevyModel:
        m = self.model
        if m.normal is not None:
            nd = m.normal
            atoms = normal_jump_atoms(nd["intensity"], nd.get("mean", 0.0), nd.get("std", 0.0), int(nd.get("n", 8)))
            return LevyModel.from_atoms(atoms, weight=m.weight)
        if not m.atoms:
            return LevyModel.no_jumps()
        return LevyModel.from_atoms([tuple(a) for a in m.atoms], weight=m.weight)

    def coefficients(self) -> fw.ForwardCoefficients:
        f, p, dt = self.forward, dict(self.forward.params), self.numerics.dt
        if f.preset == "constant":
            return fw.constant_coefficients(p.get("b", 0.0), p.get("sigma", 0.0), p.get("jump_scale", 0.0),
                                            int(p.get("dim", 1)))
        if f.preset == "linear":
            return fw.linear_coefficients(**{k: float(v) for k, v in p.items()})
        if f.preset == "geometric":
            return fw.geometric_coefficients(p.get("mu", 0.0), p.get("sigma", 0.0))
        if f.preset == "merton":
            return fw.merton_coefficients(p.get("mu", 0.0), p.get("sigma", 0.0))
        lag = grid_steps(float(p.get("lag", 0.0)), dt, "forward lag")
        return fw.delayed_drift_coefficients(p.get("kappa", 0.0), lag, p.get("sigma", 0.0), p.get("jump_scale", 0.0))

    def generator_spec(self) -> bw.GeneratorSpec:
        g, p = self.generator, dict(self.generator.params)
        th = tuple(float(a[0]) for a in g.alpha)
        wt = tuple(float(a[1]) for a in g.alpha)
        if g.preset == "zero" and g.delta == 0:
            return bw.zero_generator()
        if g.preset == "discount":
            p = {"rho": p.get("rho", 0.0)}
        if g.preset == "delay":
            p = {"kappa": p.get("kappa", 1.0)}
        return bw.linear_generator(delta=g.delta, alpha_theta=th, alpha_weights=wt, name=g.preset, **p)

    def terminal_spec(self) -> bw.TerminalSpec:
        t, p = self.terminal, dict(self.terminal.params)
        comp = int(p.get("component", 0))
        if t.preset == "constant":
            return bw.constant_terminal(p.get("c", 1.0))
        if t.preset == "identity":
            return bw.identity_terminal(comp)
        if t.preset == "square":
            return bw.square_terminal(comp)
        if t.preset == "call":
            return bw.call_terminal(p.get("strike", 1.0), comp)
        return bw.put_terminal(p.get("strike", 1.0), comp)

    def basis(self) -> bw.PolynomialBasis:
        return bw.PolynomialBasis(self.numerics.degree, self.numerics.path_stats)

    def initial_path(self) -> CadlagPath:
        n = self.numerics
        dim = self.coefficients().dim
        return CadlagPath.constant(np.full(dim, self.forward.x0), 0.0, self.forward.t, n.dt)

    # ------------------------------------------------------------ text

    def to_dict(self) -> dict:
        d = asdict(self)

        def plain(v):
            if isinstance(v, (tuple, list)):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return plain(d)

    def serialize(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, numerics=replace(self.numerics, seed=int(seed)))


# ---------------------------------------------------------------- loading

_SECTIONS = {
    "model": ModelSection, "forward": ForwardSection, "generator": GeneratorSection,
    "terminal": TerminalSection, "numerics": NumericsSection, "verify": VerifySection,
    "market": MarketSection, "output": OutputSection,
}


def _to_python(node: yaml.Node, lines: dict, path: tuple):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigurationError(f"line {k.start_mark.line + 1}: duplicate key '{key}'")
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _to_python(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, lines, path + (j,)) for j, v in enumerate(node.value)]
    return _scalar(node)


def _scalar(node: yaml.ScalarNode):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def _where(lines: dict, path: tuple) -> str:
    while path and path not in lines:
        path = path[:-1]
    return f"line {lines.get(path, 1)}"


def _num(v, lines, path, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{_where(lines, path)}: '{'.'.join(map(str, path))}' must be a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigurationError(f"{_where(lines, path)}: '{'.'.join(map(str, path))}' must be an integer")
        return int(v)
    return float(v)


def _params(raw, allowed, lines, path) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{_where(lines, path)}: params must be a mapping")
    out = {}
    for k, v in raw.items():
        if k not in allowed:
            raise ConfigurationError(f"{_where(lines, path + (k,))}: unknown parameter '{k}' "
                                     f"(allowed: {', '.join(allowed) or 'none'})")
        out[k] = _num(v, lines, path + (k,))
    return out


def _preset(raw, table, lines, path):
    name = raw.get("preset", None)
    if name not in table:
        raise ConfigurationError(f"{_where(lines, path + ('preset',))}: unknown preset {name!r} "
                                 f"(choose from {', '.join(table)})")
    return name, _params(raw.get("params"), table[name], lines, path + ("params",))


def _pairs(raw, lines, path) -> tuple:
    if not isinstance(raw, list):
        raise ConfigurationError(f"{_where(lines, path)}: expected a list of pairs")
    out = []
    for j, a in enumerate(raw):
        if not isinstance(a, list) or len(a) != 2:
            raise ConfigurationError(f"{_where(lines, path + (j,))}: expected a [value, value] pair")
        out.append((_num(a[0], lines, path + (j, 0)), _num(a[1], lines, path + (j, 1))))
    return tuple(out)


def _section(name, raw, lines):
    cls = _SECTIONS[name]
    path = (name,)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{_where(lines, path)}: section '{name}' must be a mapping")
    known = set(cls.__dataclass_fields__)
    for k in raw:
        if k not in known:
            raise ConfigurationError(f"{_where(lines, path + (k,))}: unknown key '{name}.{k}' "
                                     f"(allowed: {', '.join(sorted(known))})")
    kw: dict[str, Any] = {}
    if name in ("forward", "generator", "terminal"):
        table = {"forward": FORWARD_PRESETS, "generator": GENERATOR_PRESETS, "terminal": TERMINAL_PRESETS}[name]
        raw = {"preset": cls().preset, **raw}
        kw["preset"], kw["params"] = _preset(raw, table, lines, path)
    for k, v in raw.items():
        if k in ("preset", "params"):
            continue
        p = path + (k,)
        default = cls.__dataclass_fields__[k].default
        if k in ("atoms", "alpha", "probes"):
            kw[k] = _pairs(v, lines, p)
        elif k == "weight":
            if v not in ("one", "abs", "square"):
                raise ConfigurationError(f"{_where(lines, p)}: weight must be one, abs or square")
            kw[k] = v
        elif k == "normal":
            if v is not None:
                allowed = ("intensity", "mean", "std", "n")
                v = _params(v, allowed, lines, p)
                if "intensity" not in v:
                    raise ConfigurationError(f"{_where(lines, p)}: normal jumps need an intensity")
            kw[k] = v
        elif k == "analytic":
            if v is not None and v not in ANALYTIC_PRESETS:
                raise ConfigurationError(f"{_where(lines, p)}: analytic must be one of {', '.join(ANALYTIC_PRESETS)}")
            kw[k] = v
        elif k in ("path_stats", "mild"):
            if not isinstance(v, bool):
                raise ConfigurationError(f"{_where(lines, p)}: '{k}' must be true or false")
            kw[k] = v
        elif v is None and default is None:
            kw[k] = None
        else:
            kind = int if isinstance(default, int) and not isinstance(default, bool) or k in ("pnl_paths",) else float
            kw[k] = _num(v, lines, p, kind)
    return cls(**kw)


def load_scenario(text: str) -> Scenario:
    """Parse and validate scenario text."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigurationError(f"{where}malformed scenario ({getattr(exc, 'problem', exc)})") from None
    lines: dict = {}
    data = _to_python(root, lines, ()) if root is not None else {}
    if not isinstance(data, dict):
        raise ConfigurationError("line 1: a scenario is a mapping of sections")
    for k in data:
        if k != "mode" and k not in _SECTIONS:
            raise ConfigurationError(f"{_where(lines, (k,))}: unknown section '{k}' "
                                     f"(allowed: mode, {', '.join(_SECTIONS)})")
    mode = data.get("mode", "solve")
    if mode not in MODES:
        raise ConfigurationError(f"{_where(lines, ('mode',))}: mode must be one of {', '.join(MODES)}")
    sections = {name: _section(name, data.get(name), lines) for name in _SECTIONS}
    sc = Scenario(mode=mode, **sections)
    validate(sc, lines)
    return sc


def validate(sc: Scenario, lines: dict | None = None) -> None:
    lines = lines or {}
    n = sc.numerics
    if not n.dt > 0:
        raise ConfigurationError(f"{_where(lines, ('numerics', 'dt'))}: dt must be positive")
    if not n.T > 0:
        raise ConfigurationError(f"{_where(lines, ('numerics', 'T'))}: T must be positive")
    for path, val, what in ((("numerics", "T"), n.T, "T"), (("generator", "delta"), sc.generator.delta, "delta"),
                            (("forward", "t"), sc.forward.t, "start time t")):
        k = round(val / n.dt)
        if abs(k * n.dt - val) > GRID_EPS * max(1.0, abs(val)):
            raise ConfigurationError(f"{_where(lines, path)}: {what}={val} is not a multiple of dt={n.dt}")
    if sc.generator.delta < 0:
        raise ConfigurationError(f"{_where(lines, ('generator', 'delta'))}: delta must be non-negative")
    if not 0 <= sc.forward.t <= n.T:
        raise ConfigurationError(f"{_where(lines, ('forward', 't'))}: start time must lie in [0, T]")
    if n.n_paths < 1 or n.max_iter < 1 or n.degree < 0 or not n.tol > 0:
        raise ConfigurationError(f"{_where(lines, ('numerics',))}: n_paths, max_iter must be >= 1, "
                                 "degree >= 0 and tol > 0")
    if sc.mode not in ("certify", "simulate"):
        dim = int(sc.forward.params.get("dim", 1)) if sc.forward.preset == "constant" else 1
        size = sc.basis().size(dim) if sc.mode != "hedge" else bw.PolynomialBasis(n.degree, False).size(1)
        if n.n_paths < 10 * size:
            raise ConfigurationError(f"{_where(lines, ('numerics', 'n_paths'))}: n_paths={n.n_paths} is below "
                                     f"10 x basis size ({size})")
    for j, (t, _) in enumerate(sc.verify.probes):
        if not 0 <= t <= n.T or abs(round(t / n.dt) * n.dt - t) > GRID_EPS:
            raise ConfigurationError(f"{_where(lines, ('verify', 'probes', j))}: probe time {t} must be a grid "
                                     "time in [0, T]")
    try:
        sc.levy_model()
        sc.generator_spec()
    except ConfigurationError as exc:
        raise ConfigurationError(f"{_where(lines, ('generator',))}: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"{_where(lines, ('model',))}: {exc}") from None
    if sc.mode == "hedge" and not sc.market.s0 > 0:
        raise ConfigurationError(f"{_where(lines, ('market', 's0'))}: s0 must be positive")
