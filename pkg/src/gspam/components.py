"""Estimation of the individual component functions once the supports are known.

Each component is sampled on a small axis-aligned grid, fitted with a spline
(exact or bounded-noise queries) or a local cubic smoother followed by spline
interpolation (Gaussian noise), and then centred so that the estimates match
the unique ANOVA form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline

from .model import ComponentFunction, QueryOracle

__all__ = [
    "FitError",
    "Target",
    "ComponentEstimate",
    "ComponentModel",
    "component_targets",
    "sample_component_grid",
    "fit_component",
    "sup_error",
    "estimate_components",
    "local_polynomial_smooth",
]


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class Target:
    """What to estimate.

    ``kind`` is ``"univariate"`` (``key = p``), ``"bivariate"`` (``key = (l, l')``)
    or ``"marginal"`` (``key = l`` with degree > 1).  ``degrees`` holds the
    degrees of ``l`` and ``l'`` for a bivariate target.  ``partners`` lists
    the other interaction variables held at a common value when sampling a
    marginal.
    """

    kind: str
    key: object
    degrees: tuple = (1, 1)
    partners: tuple = ()

    def __post_init__(self):
        if self.kind not in ("univariate", "bivariate", "marginal"):
            raise FitError(f"unknown target kind {self.kind!r}")
        if self.kind == "bivariate" and not (isinstance(self.key, tuple) and len(self.key) == 2):
            raise FitError(f"bivariate target needs a pair, got {self.key!r}")

    @property
    def arity(self) -> int:
        return 1 if self.kind == "univariate" else 2

    @property
    def centering(self) -> str:
        if self.kind == "univariate":
            return "subtract-mean"
        if self.kind == "marginal":
            return "partner-mean-minus-total"
        dl, dlp = self.degrees
        if dl == 1 and dlp == 1:
            return "subtract-joint-mean"
        if dl == 1:
            return "subtract-first-mean"
        if dlp == 1:
            return "subtract-second-mean"
        return "double-centre"


def component_targets(S1: Iterable[int], S2: Iterable[tuple]) -> list[Target]:
    """Targets for every univariate term, pair and marginal (variables of degree > 1)."""
    S2 = sorted(tuple(p) for p in S2)
    deg: dict[int, int] = {}
    for l, lp in S2:
        deg[l] = deg.get(l, 0) + 1
        deg[lp] = deg.get(lp, 0) + 1
    S2var = sorted(deg)
    out = [Target("univariate", int(p)) for p in sorted(S1)]
    out += [Target("bivariate", (l, lp), (deg[l], deg[lp])) for l, lp in S2]
    out += [
        Target("marginal", q, partners=tuple(v for v in S2var if v != q)) for q in S2var if deg[q] > 1
    ]
    return out


def _levels(n):
    if n < 2:
        raise FitError(f"need at least two sample levels, got {n}")
    return np.linspace(-1.0, 1.0, n)


def sample_component_grid(target: Target, n: int, d: int) -> np.ndarray:
    """Query points for ``target`` (variable labels are 1-based).

    Univariate: ``n`` points moving coordinate ``p``.  Bivariate: ``n^2`` points
    moving ``(l, l')`` with ``l`` as the slow index.  Marginal: ``n^2`` points
    with ``x_l = t_i`` and every partner variable ``= t_j``.
    """
    if n < 4:
        raise FitError(f"need n >= 4 samples per axis, got {n}")
    t = _levels(n)
    if target.kind == "univariate":
        X = np.zeros((n, d))
        X[:, target.key - 1] = t
        return X
    U, W = np.meshgrid(t, t, indexing="ij")
    X = np.zeros((n * n, d))
    if target.kind == "bivariate":
        l, lp = target.key
        X[:, l - 1] = U.ravel()
        X[:, lp - 1] = W.ravel()
        return X
    X[:, target.key - 1] = U.ravel()
    for v in target.partners:
        X[:, v - 1] = W.ravel()
    return X


# ---------------------------------------------------------------------------
# spline machinery


def _basis(knots, degree, x):
    n_basis = len(knots) - degree - 1
    x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
    return BSpline(knots, np.eye(n_basis), degree, extrapolate=False)(x)


def _basis_means(knots, degree):
    """``E[B_i(U)]`` for U uniform on [-1, 1].

    Each B-spline integrates to ``(t[i+k+1] - t[i]) / (k+1)``; the clamped knot
    vectors used here keep every support inside [-1, 1].
    """
    t = np.asarray(knots, dtype=float)
    n_basis = len(t) - degree - 1
    return (t[degree + 1 : degree + 1 + n_basis] - t[:n_basis]) / (degree + 1) / 2.0


@dataclass(frozen=True)
class ComponentEstimate:
    """Spline curve or tensor-product surface on ``[-1, 1]^arity``.

    For a surface, ``coefficients[i, j]`` multiplies ``B_i(u) B_j(v)``.
    """

    target: Target
    knots: tuple
    coefficients: np.ndarray
    degree: int
    centering: str
    n_samples: int

    @property
    def arity(self) -> int:
        return len(self.knots)

    def __call__(self, *args):
        if len(args) != self.arity:
            raise TypeError(f"estimate of arity {self.arity} called with {len(args)} arguments")
        if self.arity == 1:
            x = np.asarray(args[0], dtype=float)
            out = _basis(self.knots[0], self.degree, x.ravel()) @ self.coefficients
            return out.reshape(x.shape) if x.ndim else float(out[0])
        u, v = np.broadcast_arrays(np.asarray(args[0], dtype=float), np.asarray(args[1], dtype=float))
        Bu = _basis(self.knots[0], self.degree, u.ravel())
        Bv = _basis(self.knots[1], self.degree, v.ravel())
        out = np.einsum("ni,ij,nj->n", Bu, self.coefficients, Bv)
        return out.reshape(u.shape) if u.ndim else float(out[0])

    def as_component(self) -> ComponentFunction:
        return ComponentFunction(self.arity, self, label=f"estimate {self.target.key}")

    def mean(self) -> float:
        w = [_basis_means(t, self.degree) for t in self.knots]
        if self.arity == 1:
            return float(w[0] @ self.coefficients)
        return float(w[0] @ self.coefficients @ w[1])

    def to_csv(self, path) -> None:
        """Knot vectors and coefficients, one labelled row each."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["field", "axis", "values"])
            writer.writerow(["target", "", f"{self.target.kind}:{self.target.key}"])
            writer.writerow(["degree", "", self.degree])
            writer.writerow(["centering", "", self.centering])
            for axis, t in enumerate(self.knots):
                writer.writerow(["knots", axis, " ".join(f"{v:.17g}" for v in t)])
            coef = np.atleast_2d(self.coefficients)
            for i, row in enumerate(coef):
                writer.writerow(["coefficients", i, " ".join(f"{v:.17g}" for v in row)])

    def dense_grid_csv(self, path, grid_n: int = 101) -> None:
        t = np.linspace(-1.0, 1.0, grid_n)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.arity == 1:
                writer.writerow(["x", "value"])
                for x, y in zip(t, self(t)):
                    writer.writerow([f"{x:.17g}", f"{y:.17g}"])
            else:
                writer.writerow(["u", "v", "value"])
                U, W = np.meshgrid(t, t, indexing="ij")
                for u, v, y in zip(U.ravel(), W.ravel(), self(U.ravel(), W.ravel())):
                    writer.writerow([f"{u:.17g}", f"{v:.17g}", f"{y:.17g}"])


def _centre_coefficients(target: Target, knots, coef, degree):
    """Apply the centring rule to spline coefficients.

    Partial means of a tensor spline are splines in the remaining variable, and
    since the B-splines sum to one on [-1, 1] a function of ``v`` alone has
    coefficient matrix ``ones(n_u) x c_v``; every rule is therefore a linear map
    on the coefficients.
    """
    if target.kind == "univariate":
        w = _basis_means(knots[0], degree)
        return coef - w @ coef
    wu, wv = _basis_means(knots[0], degree), _basis_means(knots[1], degree)
    mean_u = wu @ coef  # E over the first variable, coefficients in v
    mean_v = coef @ wv  # E over the second variable, coefficients in u
    total = wu @ coef @ wv
    ones_u, ones_v = np.ones(coef.shape[0]), np.ones(coef.shape[1])
    rule = target.centering
    if rule == "subtract-joint-mean":
        return coef - total
    if rule == "subtract-first-mean":
        return coef - np.outer(ones_u, mean_u)
    if rule == "subtract-second-mean":
        return coef - np.outer(mean_v, ones_v)
    if rule == "double-centre":
        return coef - np.outer(ones_u, mean_u) - np.outer(mean_v, ones_v) + total
    raise FitError(f"no coefficient rule for {rule}")


# ---------------------------------------------------------------------------
# local polynomial smoothing for Gaussian noise


def _bandwidth(n_samples, arity, c_b=1.0):
    expo = 1.0 / 7.0 if arity == 1 else 1.0 / 8.0
    return c_b * (math.log(n_samples) / n_samples) ** expo


def _poly_features(P, degree):
    """Monomials of total degree <= ``degree`` in the last axis of ``P`` (1 or 2 wide)."""
    if P.shape[-1] == 1:
        return np.stack([P[..., 0] ** j for j in range(degree + 1)], axis=-1)
    u, v = P[..., 0], P[..., 1]
    return np.stack([u**i * v**j for i in range(degree + 1) for j in range(degree + 1 - i)], axis=-1)


def local_polynomial_smooth(points, values, at=None, degree: int = 3, bandwidth: Optional[float] = None, c_b=1.0):
    """Local polynomial regression with an Epanechnikov kernel.

    ``points`` is ``(n,)`` or ``(n, 2)``; the fit is evaluated at ``at``
    (defaults to ``points``).  The bandwidth grows per point (by factors of
    1.25) when fewer samples than coefficients fall inside the window.
    """
    P = np.asarray(points, dtype=float)
    P = P[:, None] if P.ndim == 1 else P
    A = P if at is None else np.asarray(at, dtype=float)
    A = A[:, None] if A.ndim == 1 else A
    y = np.asarray(values, dtype=float)
    h0 = _bandwidth(P.shape[0], P.shape[1], c_b) if bandwidth is None else bandwidth
    n_coef = _poly_features(P[:1], degree).shape[-1]
    out = np.empty(A.shape[0])
    chunk = max(1, (1 << 22) // (P.shape[0] * n_coef))
    for start in range(0, A.shape[0], chunk):
        Ac = A[start : start + chunk]
        diff = P[None, :, :] - Ac[:, None, :]
        dist = np.sqrt(np.sum(diff**2, axis=-1))
        kth = np.partition(dist, min(n_coef, P.shape[0] - 1), axis=1)[:, min(n_coef, P.shape[0] - 1)]
        h = np.full(Ac.shape[0], float(h0))
        while np.any(short := kth >= h):
            h[short] *= 1.25
        w = np.clip(1.0 - (dist / h[:, None]) ** 2, 0.0, None)
        F = _poly_features(diff / h[:, None, None], degree)
        WF = F * w[..., None]
        M = np.einsum("cnk,cnl->ckl", WF, F)
        rhs = np.einsum("cnk,n->ck", WF, y)
        try:
            beta = np.linalg.solve(M, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            beta = np.stack([np.linalg.lstsq(M[i], rhs[i], rcond=None)[0] for i in range(M.shape[0])])
        out[start : start + chunk] = beta[:, 0]
    return out


# ---------------------------------------------------------------------------
# fitting


def fit_component(
    target: Target,
    values,
    n: int,
    noise_mode: str = "none",
    degree: int = 2,
    c_b: float = 1.0,
) -> ComponentEstimate:
    """Fit and centre one component from values on the ``sample_component_grid`` layout.

    ``degree`` is the spline degree (2 gives an order-3 interpolant whose error
    decays like ``n^-3``).  For ``noise_mode="gaussian"`` the raw values are
    first replaced by a local cubic fit.
    """
    if noise_mode not in ("none", "bounded", "gaussian"):
        raise FitError(f"unknown noise mode {noise_mode!r}")
    if degree not in (1, 2, 3):
        raise FitError(f"spline degree must be 1, 2 or 3, got {degree}")
    t = _levels(n)
    y = np.asarray(values, dtype=float)
    expected = n if target.arity == 1 else n * n
    if y.size != expected:
        raise FitError(f"expected {expected} samples for an {target.kind} target with n={n}, got {y.size}")
    if n <= degree:
        raise FitError(f"need more than {degree} samples per axis for a degree-{degree} spline")
    if noise_mode == "gaussian":
        if target.arity == 1:
            y = local_polynomial_smooth(t, y, c_b=c_b)
        else:
            U, W = np.meshgrid(t, t, indexing="ij")
            P = np.column_stack([U.ravel(), W.ravel()])
            y = local_polynomial_smooth(P, y, c_b=c_b)
    if target.arity == 1:
        spl = make_interp_spline(t, y, k=degree)
        knots = (spl.t,)
        coef = spl.c
    else:
        G = y.reshape(n, n)
        first = make_interp_spline(t, G, k=degree, axis=0)
        second = make_interp_spline(t, first.c, k=degree, axis=1)
        knots = (first.t, second.t)
        coef = second.c
    for kv in knots:
        if np.any(np.diff(kv[degree : len(kv) - degree]) <= 0):
            raise FitError("degenerate knot vector (repeated interior knots)")
    if target.kind == "marginal":
        # E over the partner value minus the overall mean: a curve in x_l
        wv = _basis_means(knots[1], degree)
        curve = coef @ wv
        wu = _basis_means(knots[0], degree)
        curve = curve - wu @ curve
        return ComponentEstimate(target, (knots[0],), curve, degree, target.centering, int(y.size))
    coef = _centre_coefficients(target, knots, coef, degree)
    return ComponentEstimate(target, knots, coef, degree, target.centering, int(y.size))


def sup_error(estimate: Callable, truth: Callable, grid_n: int = 256, arity: Optional[int] = None) -> float:
    """Largest absolute deviation on an equispaced grid over ``[-1, 1]^arity``."""
    if grid_n < 32:
        raise ValueError(f"grid_n must be >= 32, got {grid_n}")
    if arity is None:
        arity = getattr(estimate, "arity", None) or getattr(truth, "arity", 1)
    t = np.linspace(-1.0, 1.0, grid_n)
    if arity == 1:
        return float(np.max(np.abs(np.asarray(estimate(t)) - np.asarray(truth(t)))))
    U, W = np.meshgrid(t, t, indexing="ij")
    diff = np.asarray(estimate(U, W)) - np.asarray(truth(U, W))
    return float(np.max(np.abs(diff)))


@dataclass
class ComponentModel:
    """``c + sum of fitted components``, evaluable at points of ``R^d``."""

    d: int
    estimates: dict
    constant: float
    queries: int = 0

    def evaluate(self, x) -> np.ndarray | float:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(X.shape[0], self.constant)
        for est in self.estimates.values():
            key = est.target.key
            if est.arity == 1:
                out += est(X[:, key - 1])
            else:
                out += est(X[:, key[0] - 1], X[:, key[1] - 1])
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    __call__ = evaluate


def estimate_components(
    oracle: QueryOracle,
    S1: Iterable[int],
    S2: Iterable[tuple],
    n: int = 16,
    n1: Optional[int] = None,
    noise_mode: Optional[str] = None,
    degree: int = 2,
    constant_samples: int = 256,
    seed: int = 0,
) -> ComponentModel:
    """Sample and fit every component of the recovered structure.

    The global constant is the average of ``f - sum of estimates`` over
    ``constant_samples`` uniform random points of ``[-1, 1]^d``.
    """
    d = oracle.d
    n1 = n if n1 is None else n1
    mode = noise_mode or ("none" if oracle.noise.mode == "none" else oracle.noise.mode)
    start = oracle.count
    estimates = {}
    for i, target in enumerate(component_targets(S1, S2)):
        size = n if target.arity == 1 else n1
        X = sample_component_grid(target, size, d)
        values = oracle.query_batch(X, stream=(3, i))
        estimates[(target.kind, target.key)] = fit_component(target, values, size, mode, degree)
    model = ComponentModel(d, estimates, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    Xc = rng.uniform(-1.0, 1.0, size=(constant_samples, d))
    model.constant = float(np.mean(oracle.query_batch(Xc, stream=(4,)) - model.evaluate(Xc)))
    model.queries = oracle.count - start
    return model
