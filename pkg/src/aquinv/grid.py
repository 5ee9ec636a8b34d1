"""
Spatial grid, fields, the source description and the parameter-vector layout.

Coordinates are ``(x, y)`` with ``x`` along the long axis (columns) and ``y``
along the short axis (rows). Cells are addressed ``(row, col)`` with row 0 at
``y = 0``. Points map to cells by floor division; points on the far boundary
belong to the last cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray


class OutOfDomainError(ValueError):
    """A coordinate lies outside the model domain."""


class ParameterError(ValueError):
    """A parameter vector or source description is malformed or out of bounds."""


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular cell grid.

    Parameters
    ----------
    height_cells, width_cells : int
        Number of rows and columns.
    domain_height, domain_width : float
        Physical extent [L] along y and x.
    """

    height_cells: int = 41
    width_cells: int = 81
    domain_height: float = 10.0
    domain_width: float = 20.0

    def __post_init__(self):
        if self.height_cells < 2 or self.width_cells < 2:
            raise ValueError("grid needs at least 2 cells along each axis")
        if not (self.domain_height > 0 and self.domain_width > 0):
            raise ValueError("domain extents must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def n_cells(self) -> int:
        return self.height_cells * self.width_cells

    @property
    def dx(self) -> float:
        return self.domain_width / self.width_cells

    @property
    def dy(self) -> float:
        return self.domain_height / self.height_cells

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def cell_centers(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Return ``(X, Y)`` arrays of shape ``grid.shape`` with cell-center coordinates."""
        x = (np.arange(self.width_cells) + 0.5) * self.dx
        y = (np.arange(self.height_cells) + 0.5) * self.dy
        Y, X = np.meshgrid(y, x, indexing="ij")
        return X, Y

    def to_dict(self) -> dict:
        return {
            "height_cells": self.height_cells,
            "width_cells": self.width_cells,
            "domain_height": self.domain_height,
            "domain_width": self.domain_width,
        }


UNITS = ("head", "concentration", "conductivity", "log-conductivity", "none")


@dataclass(frozen=True)
class Field:
    """A scalar field over a grid. Values are copied and made read-only."""

    grid: Grid
    values: NDArray[np.float64]
    units: str = "none"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if self.units not in UNITS:
            raise ValueError(f"unknown units tag {self.units!r}")
        if self.units == "concentration" and np.any(values < 0):
            raise ValueError("concentration fields must be non-negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def locate_cell(grid: Grid, point) -> tuple[int, int]:
    """Return the 0-based ``(row, col)`` of the cell containing ``point = (x, y)``.

    Raises
    ------
    OutOfDomainError
        If the point is outside ``[0, domain_width] x [0, domain_height]``.
    """
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= grid.domain_width and 0.0 <= y <= grid.domain_height):
        raise OutOfDomainError(f"point ({x}, {y}) outside the domain")
    col = min(int(np.floor(x / grid.dx)), grid.width_cells - 1)
    row = min(int(np.floor(y / grid.dy)), grid.height_cells - 1)
    return row, col


RELEASE_TIMES = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)


@dataclass(frozen=True)
class SourceSpec:
    """Point contaminant source with a piecewise-constant mass-loading rate.

    ``strengths[j]`` [M/T] is released during ``(boundaries[j], boundaries[j+1]]``.
    """

    location: tuple[float, float]
    strengths: tuple[float, ...]
    boundaries: tuple[float, ...] = RELEASE_TIMES

    def __post_init__(self):
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))
        object.__setattr__(self, "strengths", tuple(float(s) for s in self.strengths))
        object.__setattr__(self, "boundaries", tuple(float(t) for t in self.boundaries))
        if len(self.boundaries) != len(self.strengths) + 1:
            raise ParameterError("need one more segment boundary than strengths")
        if any(s < 0 for s in self.strengths):
            raise ParameterError("source strengths must be non-negative")
        if np.any(np.diff(self.boundaries) <= 0):
            raise ParameterError("segment boundaries must be strictly increasing")

    @property
    def n_segments(self) -> int:
        return len(self.strengths)

    def rate(self, t0: float, t1: float) -> float:
        """Mean release rate over ``[t0, t1]``."""
        b = np.asarray(self.boundaries)
        s = np.asarray(self.strengths)
        overlap = np.clip(np.minimum(b[1:], t1) - np.maximum(b[:-1], t0), 0.0, None)
        return float(overlap @ s) / (t1 - t0)

    def mass_released(self, t: float) -> float:
        """Cumulative mass released from time ``boundaries[0]`` to ``t``."""
        b = np.asarray(self.boundaries)
        overlap = np.clip(np.minimum(b[1:], t) - b[:-1], 0.0, None)
        return float(overlap @ np.asarray(self.strengths))


# prior bounds of the source parameters
SOURCE_BOUNDS = {
    "x": (3.0, 5.0),
    "y": (4.0, 6.0),
    "strength": (0.0, 8.0),
}

REFERENCE_SOURCE = SourceSpec(
    location=(4.5234, 4.0618),
    strengths=(6.5989, 1.0502, 1.8535, 6.5638, 2.9540),
)


def source_images(grid: Grid, source: SourceSpec, n_t: int) -> NDArray[np.float64]:
    """Rasterize the source into ``n_t`` images of shape ``grid.shape``.

    Image ``j`` holds ``strengths[j]`` at the source cell and zero elsewhere;
    images past the last release segment are all zero.
    """
    if n_t < source.n_segments:
        raise ValueError("n_t must be at least the number of release segments")
    images = np.zeros((n_t, *grid.shape))
    row, col = locate_cell(grid, source.location)
    images[: source.n_segments, row, col] = source.strengths
    return images


@dataclass(frozen=True)
class ParameterVector:
    """KLE coefficients plus the seven source parameters."""

    xi: NDArray[np.float64]
    source: SourceSpec

    def __post_init__(self):
        xi = np.array(self.xi, dtype=np.float64).ravel()
        xi.flags.writeable = False
        object.__setattr__(self, "xi", xi)

    @property
    def n_kl(self) -> int:
        return self.xi.size

    def __len__(self):
        return self.n_kl + 2 + self.source.n_segments

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return np.array_equal(self.xi, other.xi) and self.source == other.source

    __hash__ = None


N_SOURCE_PARAMS = 7


def pack(params: ParameterVector) -> NDArray[np.float64]:
    """Flatten to ``[xi_1..xi_nkl, S_lx, S_ly, S_s1..S_s5]``."""
    return np.concatenate([params.xi, params.source.location, params.source.strengths])


def check_source_bounds(vector, bounds=SOURCE_BOUNDS) -> None:
    """Raise :class:`ParameterError` if the trailing 7 entries leave the prior box."""
    tail = np.asarray(vector, dtype=float)[-N_SOURCE_PARAMS:]
    lo, hi = source_bounds_arrays(bounds)
    bad = np.flatnonzero((tail < lo) | (tail > hi))
    if bad.size:
        names = SOURCE_PARAM_NAMES
        raise ParameterError(
            "source parameters out of bounds: "
            + ", ".join(f"{names[i]}={tail[i]:.4g} not in [{lo[i]}, {hi[i]}]" for i in bad)
        )


SOURCE_PARAM_NAMES = ("S_lx", "S_ly", "S_s1", "S_s2", "S_s3", "S_s4", "S_s5")


def source_bounds_arrays(bounds=SOURCE_BOUNDS) -> tuple[NDArray, NDArray]:
    """Lower and upper bounds of the 7 source parameters as arrays."""
    lo = np.array([bounds["x"][0], bounds["y"][0]] + [bounds["strength"][0]] * 5)
    hi = np.array([bounds["x"][1], bounds["y"][1]] + [bounds["strength"][1]] * 5)
    return lo, hi


def unpack(
    vector,
    n_kl: int,
    strict: bool = False,
    bounds=SOURCE_BOUNDS,
    boundaries: tuple[float, ...] = RELEASE_TIMES,
) -> ParameterVector:
    """Inverse of :func:`pack`.

    With ``strict=True`` the source parameters are checked against ``bounds``.
    """
    v = np.asarray(vector, dtype=np.float64).ravel()
    if v.size != n_kl + N_SOURCE_PARAMS:
        raise ParameterError(f"expected {n_kl + N_SOURCE_PARAMS} entries, got {v.size}")
    if strict:
        check_source_bounds(v, bounds)
    source = SourceSpec(location=(v[n_kl], v[n_kl + 1]), strengths=tuple(v[n_kl + 2 :]), boundaries=boundaries)
    return ParameterVector(xi=v[:n_kl], source=source)
