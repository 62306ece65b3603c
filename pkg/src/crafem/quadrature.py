"""Quadrature rules on triangles (barycentric) and on the unit interval."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _deg5_rule() -> tuple[np.ndarray, np.ndarray]:
    s = np.sqrt(15.0)
    a1, a2 = (6.0 - s) / 21.0, (6.0 + s) / 21.0
    w1, w2 = (155.0 - s) / 1200.0, (155.0 + s) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9.0 / 40.0]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(a, a, b), (a, b, a), (b, a, a)]
        wts += [w, w, w]
    return np.array(pts), np.array(wts)


#: 7-point rule, exact for polynomials of total degree 5. Weights sum to 1.
DEG5_POINTS, DEG5_WEIGHTS = _deg5_rule()

#: Edge-midpoint rule, exact for degree 2.
DEG2_POINTS = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
DEG2_WEIGHTS = np.full(3, 1.0 / 3.0)


@lru_cache(maxsize=None)
def collapsed_gauss(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Duffy-collapsed tensor Gauss rule exact for total degree ``degree``."""
    n = max(1, (degree + 2) // 2 + 1)
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    # (u, v) in unit square -> (s, t) in reference triangle, Jacobian (1 - u)
    s = u.ravel()
    t = (v * (1.0 - u)).ravel()
    wts = 2.0 * (wu * wv * (1.0 - u)).ravel()
    pts = np.column_stack([1.0 - s - t, s, t])
    return pts, wts


def triangle_rule(degree: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points and area-normalised weights exact for ``degree``.

    ``None`` selects the default 7-point rule.
    """
    if degree is None or degree <= 5:
        return DEG5_POINTS, DEG5_WEIGHTS
    return collapsed_gauss(degree)


@lru_cache(maxsize=None)
def gauss_interval(n: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w
