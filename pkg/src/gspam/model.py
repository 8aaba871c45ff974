"""Ground-truth sparse additive models with pairwise interactions.

Variables are labelled ``1..d`` throughout the public API (pairs are stored as
``(l, l')`` with ``l < l'``); arrays are indexed from zero internally.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .quadrature import expect_first, expect_joint, expect_second, expect_univariate

__all__ = [
    "DomainError",
    "ConfigurationError",
    "ComponentFunction",
    "GroundTruthModel",
    "ProblemParams",
    "NoiseSpec",
    "QueryOracle",
    "evaluate",
    "degree",
    "make_benchmark",
    "benchmark_problem",
    "center_components",
    "derivative_sup_norms",
    "BENCHMARKS",
]


class DomainError(ValueError):
    """A query point left the enlarged box ``[-(1+r), 1+r]^d``."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ComponentFunction:
    """A univariate or bivariate term of the model.

    ``evaluator`` must broadcast over numpy arrays.  ``smoothness_bounds`` holds
    the declared sup-norm bounds ``(B0, B1, B2, B3)``; unknown entries are None.
    """

    arity: int
    evaluator: Callable
    smoothness_bounds: tuple = (None, None, None, None)
    label: str = ""

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ConfigurationError(f"arity must be 1 or 2, got {self.arity}")
        if len(self.smoothness_bounds) != 4:
            raise ConfigurationError("smoothness_bounds needs four entries (B0..B3)")

    def __call__(self, *args):
        if len(args) != self.arity:
            raise TypeError(f"component of arity {self.arity} called with {len(args)} arguments")
        return self.evaluator(*args)


def _frozen(mapping):
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True)
class GroundTruthModel:
    """``f(x) = constant + sum_p phi_p(x_p) + sum_(l,l') phi_(l,l')(x_l, x_l') + sum_q phi_q(x_q)``.

    ``univariate`` holds the S1 terms, ``bivariate`` the S2 terms and
    ``marginals`` the net univariate effects of interaction variables of
    degree > 1 (only present in centred form).
    """

    d: int
    univariate: Mapping[int, ComponentFunction]
    bivariate: Mapping[tuple, ComponentFunction]
    marginals: Mapping[int, ComponentFunction] = field(default_factory=dict)
    constant: float = 0.0
    r: float = 0.1
    name: str = ""

    def __post_init__(self):
        if int(self.d) < 1:
            raise ConfigurationError(f"dimension must be positive, got {self.d}")
        if not self.r > 0:
            raise ConfigurationError(f"enlargement r must be positive, got {self.r}")
        object.__setattr__(self, "univariate", _frozen(self.univariate))
        object.__setattr__(self, "bivariate", _frozen(self.bivariate))
        object.__setattr__(self, "marginals", _frozen(self.marginals))
        for p, comp in self.univariate.items():
            self._check_index(p)
            if comp.arity != 1:
                raise ConfigurationError(f"univariate term {p} has arity {comp.arity}")
        for pair, comp in self.bivariate.items():
            if len(pair) != 2 or not pair[0] < pair[1]:
                raise ConfigurationError(f"pair {pair} must satisfy l < l'")
            self._check_index(pair[0])
            self._check_index(pair[1])
            if comp.arity != 2:
                raise ConfigurationError(f"bivariate term {pair} has arity {comp.arity}")
        overlap = set(self.univariate) & self.S2var
        if overlap:
            raise ConfigurationError(
                f"S1 and the interaction variables must be disjoint; shared: {sorted(overlap)}"
            )
        for q in self.marginals:
            if q not in self.S2var:
                raise ConfigurationError(f"marginal term {q} is not an interaction variable")

    def _check_index(self, l):
        if not (isinstance(l, (int, np.integer)) and 1 <= l <= self.d):
            raise ConfigurationError(f"variable index {l} outside 1..{self.d}")

    @property
    def S1(self) -> frozenset:
        return frozenset(self.univariate)

    @property
    def S2(self) -> frozenset:
        return frozenset(self.bivariate)

    @property
    def S2var(self) -> frozenset:
        return frozenset(v for pair in self.bivariate for v in pair)

    @property
    def k(self) -> int:
        return len(self.S1) + len(self.S2var)

    @property
    def rho_m(self) -> int:
        return max((self.degree(l) for l in self.S2var), default=0)

    def degree(self, l: int) -> int:
        if not 1 <= l <= self.d:
            raise IndexError(f"variable index {l} outside 1..{self.d}")
        return sum(1 for pair in self.bivariate if l in pair)

    def check_domain(self, X: np.ndarray) -> None:
        bound = 1.0 + self.r + 1e-12
        if X.size == 0 or (X.max() <= bound and X.min() >= -bound):
            return
        bad = np.abs(X) > bound
        if bad.any():
            row, col = np.argwhere(bad)[0] if X.ndim == 2 else (None, np.flatnonzero(bad)[0])
            value = X[row, col] if X.ndim == 2 else X[col]
            raise DomainError(
                f"coordinate {col + 1} = {value:.6g} is outside [-{1 + self.r:g}, {1 + self.r:g}]",
                coordinate=int(col) + 1,
            )

    def evaluate(self, x) -> np.ndarray | float:
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}, got {X2.shape[1]}")
        self.check_domain(X2)
        out = np.full(X2.shape[0], float(self.constant))
        for p, comp in self.univariate.items():
            out += comp(X2[:, p - 1])
        for q, comp in self.marginals.items():
            out += comp(X2[:, q - 1])
        for (l, lp), comp in self.bivariate.items():
            out += comp(X2[:, l - 1], X2[:, lp - 1])
        return float(out[0]) if single else out

    __call__ = evaluate


def evaluate(model: GroundTruthModel, x):
    return model.evaluate(x)


def degree(model: GroundTruthModel, l: int) -> int:
    return model.degree(l)


@dataclass(frozen=True)
class ProblemParams:
    """Identifiability constants and sparsity upper bounds handed to the learner."""

    D1: float
    D2: float
    lambda1: float
    lambda2: float
    B3: float
    k: int
    rho: int

    def __post_init__(self):
        for name in ("D1", "D2", "lambda1", "lambda2", "B3"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda1 > 2 or self.lambda2 > 2:
            raise ConfigurationError("critical interval lengths must lie in (0, 2]")
        if self.k < 1:
            raise ConfigurationError(f"sparsity bound k must be >= 1, got {self.k}")
        if self.rho < 0:
            raise ConfigurationError(f"degree bound rho must be >= 0, got {self.rho}")


# ---------------------------------------------------------------------------
# benchmarks


def _uni(fn, B3, label):
    return ComponentFunction(1, fn, (None, None, None, B3), label)


def _biv(fn, B3, label):
    return ComponentFunction(2, fn, (None, None, None, B3), label)


def _linear(a):
    return lambda x: a * x


def _square(a):
    return lambda x: a * x * x


def _product(a):
    return lambda x, y: a * x * y


# (lambda1, lambda2, D1, D2, B3, default C_tilde)
BENCHMARKS = {
    "f1": dict(lambda1=0.3, lambda2=1.0, D1=2.0, D2=3.0, B3=6.0, C_tilde=5.6),
    "f2": dict(lambda1=0.3, lambda2=0.3, D1=8.0, D2=4.0, B3=35.0, C_tilde=5.6),
    "f3": dict(lambda1=0.3, lambda2=1.0, D1=2.0, D2=3.0, B3=6.0, C_tilde=5.6),
    "f4": dict(lambda1=0.3, lambda2=1.0, D1=2.0, D2=3.0, B3=6.0, C_tilde=6.0),
}


def make_benchmark(
    name: str, d: int, T: Optional[int] = None, *, seed: int = 0, r: float = 0.1
) -> GroundTruthModel:
    """Build one of the synthetic test functions f1..f4.

    For f3 and f4 the coefficients are drawn uniformly from [2, 5] with ``seed``
    and stay fixed for every trial that reuses the same seed.
    """
    if name not in BENCHMARKS:
        raise ConfigurationError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}")
    B3 = BENCHMARKS[name]["B3"]
    uni, biv = {}, {}
    if name == "f1":
        _need(d, 5, name)
        uni = {1: _uni(_linear(2.0), B3, "2x"), 2: _uni(_square(-3.0), B3, "-3x^2")}
        biv = {(3, 4): _biv(_product(4.0), B3, "4xy"), (4, 5): _biv(_product(-5.0), B3, "-5xy")}
    elif name == "f2":
        _need(d, 5, name)
        uni = {
            1: _uni(lambda x: 10.0 * np.sin(np.pi * x), B3, "10sin(pi x)"),
            2: _uni(lambda x: 5.0 * np.exp(-2.0 * x), B3, "5exp(-2x)"),
        }
        biv = {
            (3, 4): _biv(lambda x, y: 10.0 * np.sin(np.pi * x * y), B3, "10sin(pi xy)"),
            (4, 5): _biv(lambda x, y: 5.0 * np.exp(-2.0 * x * y), B3, "5exp(-2xy)"),
        }
    elif name == "f3":
        if T is None or T < 1:
            raise ConfigurationError(f"f3 needs a block count T >= 1, got {T}")
        _need(d, 5 * T, name)
        a1, a2, a3, a4 = np.random.default_rng(seed).uniform(2.0, 5.0, size=4)
        for i in range(T):
            o = 5 * i
            uni[o + 1] = _uni(_linear(a1), B3, f"{a1:.4g}x")
            uni[o + 2] = _uni(_square(-a2), B3, f"-{a2:.4g}x^2")
            biv[(o + 3, o + 4)] = _biv(_product(a3), B3, f"{a3:.4g}xy")
            biv[(o + 4, o + 5)] = _biv(_product(-a4), B3, f"-{a4:.4g}xy")
    elif name == "f4":
        if T is None or T < 1:
            raise ConfigurationError(f"f4 needs a degree count T >= 1, got {T}")
        _need(d, max(13, T + 3), name)
        rng = np.random.default_rng(seed)
        a1, a2 = rng.uniform(2.0, 5.0, size=2)
        a3 = rng.uniform(2.0, 5.0, size=T)
        a4 = rng.uniform(2.0, 5.0, size=5)
        uni = {1: _uni(_linear(a1), B3, f"{a1:.4g}x"), 2: _uni(_square(-a2), B3, f"-{a2:.4g}x^2")}
        for i in range(1, T + 1):
            biv[(3, i + 3)] = _biv(_product(a3[i - 1]), B3, f"{a3[i - 1]:.4g}xy")
        for i in range(1, 6):
            pair = (2 + 2 * i, 3 + 2 * i)
            if pair in biv:
                raise ConfigurationError(f"f4 pattern produced duplicate pair {pair}")
            biv[pair] = _biv(_product(a4[i - 1]), B3, f"{a4[i - 1]:.4g}xy")
    label = name if T is None else f"{name}(T={T})"
    return GroundTruthModel(d=d, univariate=uni, bivariate=biv, r=r, name=label)


def _need(d, minimum, name):
    if d < minimum:
        raise ConfigurationError(f"{name} needs d >= {minimum}, got d={d}")


def benchmark_problem(name: str, model: GroundTruthModel, **overrides) -> ProblemParams:
    """Problem constants used for ``name`` in the synthetic experiments, with ``k`` and ``rho`` from ``model``."""
    if name not in BENCHMARKS:
        raise ConfigurationError(f"unknown benchmark {name!r}")
    base = dict(BENCHMARKS[name])
    base.pop("C_tilde")
    base.update(k=model.k, rho=model.rho_m)
    unknown = set(overrides) - set(base)
    if unknown:
        raise ConfigurationError(f"unknown problem parameter(s): {sorted(unknown)}")
    base.update(overrides)
    return ProblemParams(**base)


# ---------------------------------------------------------------------------
# ANOVA centring


def center_components(model: GroundTruthModel, quadrature_n: int = 64) -> GroundTruthModel:
    """Rewrite ``model`` in its unique ANOVA form.

    Univariate terms lose their mean, each bivariate term is centred according to
    the degrees of its two variables, the removed one-dimensional effects are
    collected into marginal terms for variables of degree > 1, and all means go
    into ``constant``.  The function values are unchanged.
    """
    if quadrature_n < 8:
        raise ConfigurationError(f"quadrature_n must be >= 8, got {quadrature_n}")
    n = int(quadrature_n)
    panels = max(1, n // 16)
    const = float(model.constant)
    uni = {}
    for p, comp in model.univariate.items():
        mean = expect_univariate(comp.evaluator, n, panels)
        const += mean
        uni[p] = ComponentFunction(1, _shifted(comp.evaluator, mean), comp.smoothness_bounds, comp.label)

    # marginal pieces: q -> list of callables g(x_q) whose sum forms phi_q
    pieces: dict[int, list] = {}
    for q, comp in model.marginals.items():
        mean = expect_univariate(comp.evaluator, n, panels)
        const += mean
        pieces.setdefault(q, []).append(_shifted(comp.evaluator, mean))

    biv = {}
    for (l, lp), comp in model.bivariate.items():
        g = comp.evaluator
        mean = expect_joint(g, n, panels)
        const += mean
        deg_l, deg_lp = model.degree(l), model.degree(lp)
        # E_l[g] is a function of x_l'; E_l'[g] is a function of x_l
        E_l = _partial_mean(g, "first", n, panels)
        E_lp = _partial_mean(g, "second", n, panels)
        if deg_l == 1 and deg_lp == 1:
            centred = _shifted2(g, mean)
        elif deg_l == 1:
            centred = _minus_first(g, E_l)
        elif deg_lp == 1:
            centred = _minus_second(g, E_lp)
        else:
            centred = _double_centre(g, E_l, E_lp, mean)
        biv[(l, lp)] = ComponentFunction(2, centred, comp.smoothness_bounds, comp.label)
        if deg_l > 1:
            pieces.setdefault(l, []).append(_shifted(E_lp, mean))
        if deg_lp > 1:
            pieces.setdefault(lp, []).append(_shifted(E_l, mean))

    marg = {q: ComponentFunction(1, _summed(fs), (None, None, None, None), f"marginal x{q}") for q, fs in pieces.items()}
    return GroundTruthModel(
        d=model.d, univariate=uni, bivariate=biv, marginals=marg, constant=const, r=model.r, name=model.name
    )


def _shifted(g, c):
    return lambda x: g(x) - c


def _shifted2(g, c):
    return lambda x, y: g(x, y) - c


def _partial_mean(g, axis, n, panels):
    if axis == "first":
        return lambda y: _reshape_like(expect_first(g, np.ravel(y), n, panels), y)
    return lambda x: _reshape_like(expect_second(g, np.ravel(x), n, panels), x)


def _reshape_like(values, ref):
    ref = np.asarray(ref)
    return values.reshape(ref.shape) if ref.ndim else float(values[0])


def _minus_first(g, E_l):
    def centred(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return g(x, y) - E_l(y)

    return centred


def _minus_second(g, E_lp):
    def centred(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return g(x, y) - E_lp(x)

    return centred


def _double_centre(g, E_l, E_lp, mean):
    def centred(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return g(x, y) - E_l(y) - E_lp(x) + mean

    return centred


def _summed(fs):
    def total(x):
        return sum(f(x) for f in fs)

    return total


def derivative_sup_norms(comp: ComponentFunction, r: float = 0.1, n: int = 201, h: float = 1e-2) -> np.ndarray:
    """Finite-difference estimates of the sup-norms of all derivatives of orders 0..3.

    Mixed partials are included for bivariate terms; the probe grid covers the
    enlarged box ``[-(1+r), 1+r]^arity``.
    """
    lo, hi = -(1 + r), 1 + r
    if comp.arity == 1:
        x = np.linspace(lo, hi, n)
        f = comp.evaluator
        d1 = (f(x + h) - f(x - h)) / (2 * h)
        d2 = (f(x + h) - 2 * f(x) + f(x - h)) / h**2
        d3 = (f(x + 2 * h) - 2 * f(x + h) + 2 * f(x - h) - f(x - 2 * h)) / (2 * h**3)
        return np.array([np.max(np.abs(v)) for v in (f(x) + 0 * x, d1, d2, d3)])
    g = comp.evaluator
    m = max(21, n // 4)
    X, Y = np.meshgrid(np.linspace(lo, hi, m), np.linspace(lo, hi, m), indexing="ij")

    def partial(F, ax):
        e = (h, 0.0) if ax == 0 else (0.0, h)
        return lambda x, y: (F(x + e[0], y + e[1]) - F(x - e[0], y - e[1])) / (2 * h)

    out = [np.max(np.abs(g(X, Y) + 0 * X))]
    layer = [g]
    for _order in (1, 2, 3):
        nxt = []
        for F in layer:
            nxt.extend([partial(F, 0), partial(F, 1)])
        out.append(max(np.max(np.abs(F(X, Y))) for F in nxt))
        layer = nxt
    return np.array(out)


# ---------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class NoiseSpec:
    """External query noise.

    ``mode`` is ``"none"``, ``"bounded"`` (``level`` is the strict bound eps on
    |z|) or ``"gaussian"`` (``level`` is the variance sigma^2).  Bounded noise is
    drawn uniformly (``pattern="uniform"``) or as a deterministic sign pattern of
    magnitude just below eps (``pattern="sign"``).
    """

    mode: str = "none"
    level: float = 0.0
    pattern: str = "uniform"

    def __post_init__(self):
        if self.mode not in ("none", "bounded", "gaussian"):
            raise ConfigurationError(f"unknown noise mode {self.mode!r}")
        if self.mode != "none" and not self.level > 0:
            raise ConfigurationError(f"{self.mode} noise needs a positive level")
        if self.pattern not in ("uniform", "sign"):
            raise ConfigurationError(f"unknown bounded-noise pattern {self.pattern!r}")

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def bounded(cls, eps, pattern="uniform"):
        return cls("bounded", float(eps), pattern)

    @classmethod
    def gaussian(cls, variance):
        return cls("gaussian", float(variance))

    @property
    def sigma(self) -> float:
        return math.sqrt(self.level) if self.mode == "gaussian" else 0.0


_MAX_DRAWS = 1 << 22


class QueryOracle:
    """Black-box access to ``model`` with optional noise and a query counter.

    Each call draws its noise from an independent stream keyed by
    ``(seed, stream)``; when no stream key is passed, the running call index is
    used.  Callers that issue queries concurrently should pass explicit keys to
    keep results reproducible.
    """

    def __init__(self, model: GroundTruthModel, noise: NoiseSpec | None = None, seed: int = 0):
        self.model = model
        self.noise = noise or NoiseSpec.none()
        self.seed = int(seed)
        self._count = 0
        self._calls = 0
        self._lock = threading.Lock()
        self._sign_w = None
        if self.noise.mode == "bounded" and self.noise.pattern == "sign":
            ss = np.random.SeedSequence(self.seed, spawn_key=(0x5167,))
            self._sign_w = np.random.default_rng(ss).standard_normal(model.d)

    @property
    def count(self) -> int:
        return self._count

    @property
    def d(self) -> int:
        return self.model.d

    def reset(self) -> None:
        with self._lock:
            self._count = 0
            self._calls = 0

    def query(self, x, resamples: int = 1, stream: Sequence[int] | None = None) -> float:
        return float(self.query_batch(np.asarray(x, dtype=float)[None, :], resamples, stream)[0])

    def query_batch(self, X, resamples: int = 1, stream: Sequence[int] | None = None) -> np.ndarray:
        """Mean of ``resamples`` noisy evaluations at each row of ``X``."""
        if resamples < 1:
            raise ValueError(f"resamples must be >= 1, got {resamples}")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        values = self.model.evaluate(X)
        with self._lock:
            self._count += X.shape[0] * resamples
            call = self._calls
            self._calls += 1
        if self.noise.mode == "none":
            return values
        key = tuple(int(s) for s in stream) if stream is not None else (call,)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))
        return values + self._noise(rng, X, resamples)

    def _noise(self, rng, X, resamples):
        n = X.shape[0]
        if self.noise.mode == "bounded":
            eps = self.noise.level * (1.0 - 1e-9)
            if self.noise.pattern == "sign":
                s = np.where(X @ self._sign_w >= 0.0, 1.0, -1.0)
                return eps * s
            return _chunked_mean(lambda shape: rng.uniform(-eps, eps, size=shape), n, resamples)
        sigma = self.noise.sigma
        return sigma * _chunked_mean(rng.standard_normal, n, resamples)


def _chunked_mean(draw, n, resamples):
    if resamples == 1:
        return draw((n,))
    rows = max(1, _MAX_DRAWS // resamples)
    out = np.empty(n)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        out[start:stop] = draw((stop - start, resamples)).mean(axis=1)
    return out
