"""Composite Gauss-Legendre rules for expectations under the uniform law on [-1, 1]."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _rule(n: int, panels: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 1 or panels < 1:
        raise ValueError("need at least one node and one panel")
    per_panel = max(1, n // panels)
    base_x, base_w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.linspace(-1.0, 1.0, panels + 1)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        nodes.append(0.5 * (a + b) + half * base_x)
        weights.append(half * base_w)
    x = np.concatenate(nodes)
    # divide by |[-1,1]| = 2 so the weights integrate the uniform density
    w = np.concatenate(weights) / 2.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def uniform_rule(n: int = 64, panels: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with ``sum(w * g(x)) ~= E[g(U)]`` for U ~ Uniform[-1, 1]."""
    return _rule(int(n), int(panels))


def expect_univariate(g, n: int = 64, panels: int = 4) -> float:
    x, w = uniform_rule(n, panels)
    return float(np.dot(w, g(x)))


def expect_first(g, y, n: int = 64, panels: int = 4) -> np.ndarray:
    """E over the first argument of a bivariate ``g``, as a function of the second."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x, w = uniform_rule(n, panels)
    vals = g(x[:, None], y[None, :])
    return w @ np.broadcast_to(vals, (x.size, y.size))


def expect_second(g, x, n: int = 64, panels: int = 4) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y, w = uniform_rule(n, panels)
    vals = g(x[:, None], y[None, :])
    return np.broadcast_to(vals, (x.size, y.size)) @ w


def expect_joint(g, n: int = 64, panels: int = 4) -> float:
    x, w = uniform_rule(n, panels)
    vals = np.broadcast_to(g(x[:, None], x[None, :]), (x.size, x.size))
    return float(w @ vals @ w)
