"""Target feature size ``h_t`` and target density ``rho_t = h_t**-d``."""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .geometry import LevelSetGrid, _interp

__all__ = ["SizingField", "SizingError", "eval_target_size", "eval_target_density"]

KINDS = ("point", "shell", "surface", "constant", "gridded")


class SizingError(ValueError):
    pass


@dataclass
class SizingField:
    """Clamped target-size field.

    kinds
        ``point``     ``h_min + slope * |x - focus|``  (linear distance to a point)
        ``shell``     ``h_min + slope * | |x - focus| - radius |``
        ``surface``   ``h_min + slope * max(phi(x), 0)``  (needs ``levelset``)
        ``constant``  ``h_min``
        ``gridded``   multilinear interpolation of an imported field
    """

    kind: str
    h_min: float
    h_max: float
    dim: int
    focus: np.ndarray | None = None
    slope: float = 0.0
    radius: float = 0.0
    levelset: LevelSetGrid | None = field(default=None, repr=False)
    grid: LevelSetGrid | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SizingError(f"unknown sizing kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.h_min <= self.h_max:
            raise SizingError(f"need 0 < h_min <= h_max, got {self.h_min}, {self.h_max}")
        if self.focus is not None:
            self.focus = np.asarray(self.focus, dtype=float)
        if self.kind in ("point", "shell") and self.focus is None:
            raise SizingError(f"{self.kind} sizing needs a focus point")
        if self.kind == "surface" and self.levelset is None:
            raise SizingError("surface sizing needs the level-set grid")
        if self.kind == "gridded" and self.grid is None:
            raise SizingError("gridded sizing needs a field grid")

    @classmethod
    def linear_distance(cls, focus, h_min, h_max, scale, dim=None) -> "SizingField":
        """``h_t = (h_max - h_min) / scale * |x - focus| + h_min`` as used by the square and
        sphere cases (``scale`` is the distance at which ``h_max`` is reached)."""
        focus = np.asarray(focus, float)
        return cls("point", h_min, h_max, dim or len(focus), focus=focus,
                   slope=(h_max - h_min) / scale)

    def _raw(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "point":
            return self.h_min + self.slope * np.linalg.norm(x - self.focus, axis=-1)
        if self.kind == "shell":
            r = np.linalg.norm(x - self.focus, axis=-1)
            return self.h_min + self.slope * np.abs(r - self.radius)
        if self.kind == "surface":
            phi = _interp(self.levelset, x, check=False)
            return self.h_min + self.slope * np.maximum(phi, 0.0)
        if self.kind == "constant":
            return np.full(len(x), self.h_min)
        return _interp(self.grid, x, check=False)

    def size(self, x) -> np.ndarray | float:
        arr = np.asarray(x, dtype=float)
        h = np.clip(self._raw(np.atleast_2d(arr)), self.h_min, self.h_max)
        return float(h[0]) if arr.ndim == 1 else h

    def density(self, x, dim: int | None = None):
        d = self.dim if dim is None else dim
        return self.size(x) ** (-float(d))


def eval_target_size(field: SizingField, x):
    return field.size(x)


def eval_target_density(field: SizingField, x, dim_override: int | None = None):
    """``h_t(x) ** -dim``; ``dim_override`` selects the curve/surface/volume density."""
    return field.density(x, dim_override)

