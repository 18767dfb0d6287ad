"""Run configuration: flat TOML sections, validation, exact round trip."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ciarlet_necas import OverlapPenaltyParams
from .errors import ConfigError
from .grid import ReferenceGrid
from .loads import LoadSpec
from .materials import MaterialModel
from .stepper import SolverOptions


@dataclass(frozen=True)
class GridSettings:
    x_range: tuple = (0.0, 1.0)
    y_range: tuple = (0.0, 1.0)
    nx: int = 32
    ny: int = 32
    degree: int = 3
    quad_order: int | None = None
    holes: tuple = ()


@dataclass(frozen=True)
class BoundarySettings:
    dirichlet: tuple = ("left",)
    dirichlet_segments: tuple = ()


@dataclass(frozen=True)
class TimeSettings:
    T: float = 1.0
    tau: float = 0.025


@dataclass(frozen=True)
class CNSettings:
    """Overrides of the grid-dependent overlap defaults (None = default)."""

    delta: float | None = None
    r_min: float | None = None
    kappa: float = 1e2
    kappa_max: float = 1e6
    kappa_growth: float = 10.0
    eps_contact: float | None = None
    h_pix: float | None = None
    tol_cn: float | None = None
    cover: float = 0.5


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"
    frame_stride: int = 1


@dataclass(frozen=True)
class RunConfig:
    grid: GridSettings = field(default_factory=GridSettings)
    boundary: BoundarySettings = field(default_factory=BoundarySettings)
    material: MaterialModel = field(default_factory=MaterialModel)
    time: TimeSettings = field(default_factory=TimeSettings)
    load: LoadSpec = field(default_factory=LoadSpec)
    cn: CNSettings = field(default_factory=CNSettings)
    solver: SolverOptions = field(default_factory=SolverOptions)
    output: OutputSettings = field(default_factory=OutputSettings)
    seed: int = 0

    @cached_property
    def _grid(self):
        g = self.grid
        return ReferenceGrid(
            x_range=tuple(g.x_range), y_range=tuple(g.y_range), nx=g.nx, ny=g.ny,
            degree=g.degree, quad_order=g.quad_order,
            dirichlet=tuple(self.boundary.dirichlet) + tuple(self.boundary.dirichlet_segments),
            holes=tuple(g.holes))

    def build_grid(self):
        return self._grid

    def penalty_params(self, grid=None):
        grid = self._grid if grid is None else grid
        overrides = {k: v for k, v in asdict(self.cn).items() if v is not None}
        return OverlapPenaltyParams.for_grid(grid, **overrides)

    @property
    def tau(self):
        return self.time.tau

    @property
    def T(self):
        return self.time.T

    @property
    def n_steps(self):
        return int(round(self.time.T / self.time.tau))

    @property
    def frame_stride(self):
        return self.output.frame_stride

    def replace(self, **blocks):
        """Copy with some blocks (or block fields given as ``block__field``) replaced."""
        from dataclasses import replace as dc_replace
        top = {}
        nested = {}
        for key, val in blocks.items():
            if "__" in key:
                blk, fld = key.split("__", 1)
                nested.setdefault(blk, {})[fld] = val
            else:
                top[key] = val
        for blk, kv in nested.items():
            top[blk] = dc_replace(top.get(blk, getattr(self, blk)), **kv)
        return dc_replace(self, **top)


_SECTIONS = {
    "grid": GridSettings,
    "boundary": BoundarySettings,
    "material": MaterialModel,
    "time": TimeSettings,
    "load": LoadSpec,
    "cn": CNSettings,
    "solver": SolverOptions,
    "output": OutputSettings,
}

_SURFACE_KEYS = {"traction", "surface_load", "neumann", "pressure"}


def _coerce(value, kind, name):
    """Convert a TOML value to the field's kind ("int", "float" or anything else)."""
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name}: expected an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name}: expected a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError(f"{name}: expected a string")
        return value
    if isinstance(value, list):
        return tuple(_coerce(v, None, name) for v in value)
    return value


def _kind(f):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    head = t.split("|")[0].strip()
    return head if head in ("int", "float", "str") else None


def _build_block(section, raw, violations):
    cls = _SECTIONS[section]
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in _SURFACE_KEYS and section in ("load", "boundary"):
            violations.append(f"{section}.{key}: surface loads are not supported (bulk loads only)")
            continue
        if key not in known:
            violations.append(f"{section}.{key}: unknown key")
            continue
        try:
            kwargs[key] = _coerce(value, _kind(known[key]), f"{section}.{key}")
        except TypeError as exc:
            violations.append(str(exc))
    if section == "load" and "region" in kwargs and kwargs["region"] is not None:
        kwargs["region"] = tuple(float(v) for v in kwargs["region"])
    for key in ("direction", "center", "x_range", "y_range"):
        if key in kwargs:
            kwargs[key] = tuple(float(v) for v in kwargs[key])
    if section == "load" and "times" in kwargs:
        kwargs["times"] = tuple(float(v) for v in kwargs["times"])
    if section == "load" and "values" in kwargs:
        kwargs["values"] = tuple(tuple(float(x) for x in v) for v in kwargs["values"])
    if section == "boundary" and "dirichlet_segments" in kwargs:
        kwargs["dirichlet_segments"] = tuple(tuple(float(x) for x in v)
                                             for v in kwargs["dirichlet_segments"])
    if section == "grid" and "holes" in kwargs:
        kwargs["holes"] = tuple(tuple(int(x) for x in h) for h in kwargs["holes"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        for msg in str(exc).split("; "):
            violations.append(f"{section}: {msg}")
        return None


def _validate(cfg, violations):
    t = cfg.time
    if not t.T > 0:
        violations.append("time.T: must be positive")
    if not t.tau > 0:
        violations.append("time.tau: must be positive")
    elif t.T > 0:
        n = round(t.T / t.tau)
        if n < 1 or abs(n * t.tau - t.T) > 1e-9 * t.T:
            violations.append(f"time: T / tau = {t.T / t.tau:.12g} must be an integer")
    violations.extend(cfg.load.violations())
    violations.extend(cfg.solver.violations())
    if cfg.output.frame_stride < 1:
        violations.append("output.frame_stride: must be >= 1")
    for name in ("delta", "r_min", "eps_contact", "h_pix", "tol_cn"):
        v = getattr(cfg.cn, name)
        if v is not None and not v > 0:
            violations.append(f"cn.{name}: must be positive")
    if not (cfg.cn.kappa > 0 and cfg.cn.kappa_max >= cfg.cn.kappa):
        violations.append("cn.kappa: need 0 < kappa <= kappa_max")
    if not cfg.cn.kappa_growth > 1:
        violations.append("cn.kappa_growth: must exceed 1")
    if not 0 < cfg.cn.cover <= 0.5:
        violations.append("cn.cover: must lie in (0, 1/2]")
    g = cfg.grid
    for h in g.holes:
        if len(h) != 4 or not (0 <= h[0] < h[1] <= g.nx and 0 <= h[2] < h[3] <= g.ny):
            violations.append(f"grid.holes: invalid cell box {list(h)}")
    if violations:
        return
    try:
        grid = cfg.build_grid()
    except ValueError as exc:
        violations.append(f"grid: {exc}")
        return
    try:
        params = cfg.penalty_params(grid)
        params.validate_for(grid)
    except ValueError as exc:
        violations.append(f"cn: {exc}")


def from_dict(data):
    """Build and validate a RunConfig from a parsed document."""
    violations = []
    blocks = {}
    for key, value in data.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                violations.append("seed: expected an integer")
            continue
        if key not in _SECTIONS:
            violations.append(f"{key}: unknown section")
            continue
        if not isinstance(value, dict):
            violations.append(f"{key}: expected a table")
            continue
        blk = _build_block(key, value, violations)
        if blk is not None:
            blocks[key] = blk
    seed = data.get("seed", 0)
    cfg = RunConfig(**blocks, seed=seed if isinstance(seed, int) else 0)
    # blocks that failed to build fall back to defaults so the remaining rules still get checked
    _validate(cfg, violations)
    if violations:
        raise ConfigError(violations)
    return cfg


def parse_config(text):
    """Parse TOML text into a validated RunConfig; all violations reported together."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return from_dict(data)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- serialisation ----------------------------------------------------------------

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def to_dict(cfg):
    out = {"seed": cfg.seed}
    for section in _SECTIONS:
        blk = getattr(cfg, section)
        out[section] = {f.name: getattr(blk, f.name) for f in fields(blk)
                        if getattr(blk, f.name) is not None}
    return out


def serialize(cfg):
    """TOML text such that parse_config(serialize(cfg)) == cfg."""
    d = to_dict(cfg)
    lines = [f"seed = {d.pop('seed')}"]
    for section, kv in d.items():
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in kv.items():
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
