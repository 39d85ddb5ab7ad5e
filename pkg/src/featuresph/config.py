"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment.  Vectors are comma separated
(``lo = 0, 0``); point lists separate points with ``;`` and polylines with
``|``.  Every key is listed in :data:`KEYS`; anything else is an error.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "KEYS", "parse_config", "parse_config_text", "config_to_text"]


class ConfigError(ValueError):
    pass


GEOMETRIES = ("box", "circle", "sphere", "zalesak", "field")
SIZINGS = ("point", "shell", "surface", "constant")
MODES = ("improved", "baseline")
SAMPLINGS = ("density", "uniform")


@dataclass
class RunConfig:
    seed: int
    geometry: str = "box"
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0
    slot_width: float = 0.0
    slot_length: float = 0.0
    field_path: str = ""
    grid_spacing: float = 0.0
    ghost: float = 0.0
    sizing: str = "constant"
    h_min: float = 1.0
    h_max: float = 1.0
    sizing_focus: tuple[float, ...] = ()
    sizing_scale: float = 0.0
    sizing_slope: float = 0.0
    sizing_radius: float = 0.0
    auto_singularities: bool = True
    singularities: tuple[tuple[float, ...], ...] = ()
    curves: tuple[tuple[tuple[float, ...], ...], ...] = ()
    sampling: str = "density"
    mode: str = "improved"
    correction: bool | None = None
    nullify_period: int | None = None
    damping: float = 0.05
    transition_steps: int = 200
    phase_one_budget: int = 20000
    phase_two_budget: int = 2000
    sample_interval: int = 20
    window: int = 200
    threshold: float = 5e-6
    p0: float = 1.0
    kernel_scale: float = 0.8
    output_dir: str = "output"
    snapshot_every: int = 1000
    workers: int = 0
    source: str = field(default="", repr=False)

    def __post_init__(self):
        self.validate()

    @property
    def dim(self) -> int:
        if self.geometry == "sphere":
            return 3
        if self.geometry in ("circle", "zalesak"):
            return 2
        if self.geometry == "box":
            return len(self.lo)
        return len(self.lo) if self.lo else 0

    @property
    def corrected(self) -> bool:
        """Boundary correction is on unless switched off or baseline mode is selected."""
        if self.mode == "baseline":
            return False
        return True if self.correction is None else self.correction

    @property
    def period(self) -> int:
        """Phase-one nullification period; baseline mode nullifies every step."""
        if self.mode == "baseline":
            return 1
        return 100 if self.nullify_period is None else self.nullify_period

    @property
    def slope(self) -> float:
        if self.sizing_scale > 0:
            return (self.h_max - self.h_min) / self.sizing_scale
        return self.sizing_slope

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get("FEATURESPH_OUTPUT_DIR") or self.output_dir)

    def validate(self) -> None:
        _choice("geometry", self.geometry, GEOMETRIES)
        _choice("sizing", self.sizing, SIZINGS)
        _choice("mode", self.mode, MODES)
        _choice("sampling", self.sampling, SAMPLINGS)
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if not 0 < self.h_min < self.h_max:
            raise ConfigError(f"need 0 < h_min < h_max, got h_min={self.h_min}, h_max={self.h_max}")
        if self.geometry == "box" and (len(self.lo) != len(self.hi) or len(self.lo) not in (2, 3)):
            raise ConfigError("box geometry needs lo and hi of equal dimension 2 or 3")
        if self.geometry in ("circle", "sphere", "zalesak"):
            want = 3 if self.geometry == "sphere" else 2
            if len(self.center) != want or self.radius <= 0:
                raise ConfigError(f"{self.geometry} geometry needs a {want}D center and radius > 0")
        if self.geometry == "zalesak" and not (0 < self.slot_width < 2 * self.radius and self.slot_length > 0):
            raise ConfigError("zalesak geometry needs 0 < slot_width < 2 radius and slot_length > 0")
        if self.geometry == "field" and not self.field_path:
            raise ConfigError("field geometry needs field_path")
        if self.geometry != "field" and self.grid_spacing <= 0:
            raise ConfigError("grid_spacing must be positive")
        if self.sizing in ("point", "shell") and not self.sizing_focus:
            raise ConfigError(f"{self.sizing} sizing needs sizing_focus")
        if self.sizing_scale < 0 or self.sizing_slope < 0:
            raise ConfigError("sizing_scale and sizing_slope must be non-negative")
        if self.sizing_scale > 0 and self.sizing_slope > 0:
            raise ConfigError("give sizing_scale or sizing_slope, not both")
        if self.nullify_period is not None and self.nullify_period < 1:
            raise ConfigError("nullify_period must be >= 1")
        if not 0.0 <= self.damping <= 0.2:
            raise ConfigError("damping must lie in [0, 0.2]")
        for name in ("phase_one_budget", "phase_two_budget", "sample_interval", "window", "snapshot_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.window % self.sample_interval:
            raise ConfigError("window must be a multiple of sample_interval")
        if self.transition_steps < 0 or self.workers < 0:
            raise ConfigError("transition_steps and workers must be >= 0")
        if self.threshold <= 0 or self.p0 <= 0 or self.kernel_scale <= 0:
            raise ConfigError("threshold, p0 and kernel_scale must be positive")


def _choice(name, value, options):
    if value not in options:
        raise ConfigError(f"{name} must be one of {', '.join(options)}; got {value!r}")


def _vector(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _points(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_vector(t) for t in text.split(";") if t.strip())


def _curves(text: str):
    return tuple(_points(t) for t in text.split("|") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {text!r}")
    return v


_PARSERS = {
    "seed": int, "geometry": str, "lo": _vector, "hi": _vector, "center": _vector,
    "radius": _float, "slot_width": _float, "slot_length": _float, "field_path": str,
    "grid_spacing": _float, "ghost": _float, "sizing": str, "h_min": _float, "h_max": _float,
    "sizing_focus": _vector, "sizing_scale": _float, "sizing_slope": _float,
    "sizing_radius": _float, "auto_singularities": _bool, "singularities": _points,
    "curves": _curves, "sampling": str, "mode": str, "correction": _bool,
    "nullify_period": int, "damping": _float, "transition_steps": int,
    "phase_one_budget": int, "phase_two_budget": int, "sample_interval": int, "window": int,
    "threshold": _float, "p0": _float, "kernel_scale": _float, "output_dir": str,
    "snapshot_every": int, "workers": int,
}

KEYS = tuple(_PARSERS)


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    if "seed" not in values:
        raise ConfigError(f"{source}: missing required key 'seed'")
    try:
        return RunConfig(**values, source=source)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text(), str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            if value[0] and isinstance(value[0][0], tuple):
                return " | ".join(_format(c) for c in value)
            return "; ".join(_format(p) for p in value)
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Serialise back to the key/value format; parsing the result reproduces ``cfg``."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "source":
            continue
        value = getattr(cfg, f.name)
        if value is None or value == () or value == "":
            continue
        lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"
