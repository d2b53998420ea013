"""Quadrature rules on triangles in barycentric coordinates.

Weights are normalised to sum to one; multiply by the element area.
"""
from functools import lru_cache

import numpy as np


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    pts = [(a, a, b), (a, b, a), (b, a, a)]
    return pts, [w] * 3


@lru_cache(maxsize=None)
def _symmetric_rule(order):
    if order <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if order == 2:
        pts, wts = _orbit3(1 / 6, 1 / 3)
        return np.array(pts), np.array(wts)
    if order in (3, 4):
        p1, w1 = _orbit3(0.445948490915965, 0.223381589678011)
        p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
        return np.array(p1 + p2), np.array(w1 + w2)
    if order == 5:
        p1, w1 = _orbit3(0.470142064105115, 0.132394152788506)
        p2, w2 = _orbit3(0.101286507323456, 0.125939180544827)
        pts = [(1 / 3, 1 / 3, 1 / 3)] + p1 + p2
        return np.array(pts), np.array([0.225] + w1 + w2)
    return None


@lru_cache(maxsize=None)
def _collapsed_gauss(order):
    # Duffy map of a tensor Gauss-Legendre rule onto the reference triangle
    n = order // 2 + 2
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    l1 = s.ravel()
    l2 = (t * (1.0 - s)).ravel()
    weights = (ws * wt * (1.0 - s)).ravel() * 2.0
    pts = np.column_stack([1.0 - l1 - l2, l1, l2])
    return pts, weights


def triangle_rule(order):
    """Return (barycentric points (nq, 3), weights (nq,)) exact for polynomials of `order`."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    rule = _symmetric_rule(order)
    if rule is None:
        rule = _collapsed_gauss(order)
    return rule


def gauss_square(n):
    """Tensor Gauss-Legendre rule on (0,1)^2 with n points per axis."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()
