"""Trend-basis families.

A basis is a callable mapping a (k, d) location array to a (k, p) matrix of
regressor values.  These are top-level classes rather than closures so fitted
models that reference them stay picklable.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, DimensionMismatchError


class ConstantBasis:
    """U(x) = [1]: an intercept-only trend."""

    p = 1

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.atleast_2d(locations)
        return np.ones((locations.shape[0], 1))

    def __eq__(self, other):
        return isinstance(other, ConstantBasis)


class LinearBasis:
    """U(x) = [1, x_1, ..., x_d]: intercept plus coordinates."""

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        return np.hstack([np.ones((locations.shape[0], 1)), locations])

    def __eq__(self, other):
        return isinstance(other, LinearBasis)


class TabulatedBasis:
    """U(x) = [1, g(x)] where g interpolates a field tabulated on a grid.

    Used when the second regressor is a covariate known only through a table
    (e.g. a process-rate map).  ``grid`` is a tuple of per-axis coordinate
    vectors and ``values`` the tabulated field on their product.  Queries
    outside the table are clamped to its edge.
    """

    def __init__(self, grid, values):
        grid = tuple(np.asarray(g, dtype=float).reshape(-1) for g in grid)
        values = np.asarray(values, dtype=float)
        if values.shape != tuple(g.size for g in grid):
            raise ConfigurationError(
                f"tabulated values of shape {values.shape} do not match grid "
                f"sizes {tuple(g.size for g in grid)}"
            )
        self.grid = grid
        self.values = values
        self._interp = RegularGridInterpolator(
            grid, values, bounds_error=False, fill_value=None
        )

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        if locations.shape[1] != len(self.grid):
            raise DimensionMismatchError(
                f"tabulated basis is {len(self.grid)}-dimensional, got "
                f"locations of shape {locations.shape}"
            )
        clipped = np.column_stack(
            [np.clip(locations[:, i], g[0], g[-1]) for i, g in enumerate(self.grid)]
        )
        g = self._interp(clipped)
        return np.column_stack([np.ones(locations.shape[0]), g])


class CallableRegressorBasis:
    """U(x) = [1, f(x)] for an arbitrary scalar covariate function ``f``.

    ``f`` receives a (k, d) array and must return (k,) values.
    """

    def __init__(self, f):
        self.f = f

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        g = np.asarray(self.f(locations), dtype=float).reshape(-1)
        if g.size != locations.shape[0]:
            raise DimensionMismatchError(
                f"regressor function returned {g.size} values for "
                f"{locations.shape[0]} locations"
            )
        return np.column_stack([np.ones(locations.shape[0]), g])
