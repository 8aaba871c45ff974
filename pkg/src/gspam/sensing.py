"""Random sign ensembles, finite-difference measurements and sparse recovery."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .model import DomainError, QueryOracle

__all__ = [
    "SolverError",
    "BernoulliEnsemble",
    "MeasurementVector",
    "draw_ensemble",
    "probe_offsets",
    "gradient_measurements",
    "gradient_measurements_batch",
    "hessian_row_measurements",
    "hessian_measurement_matrix",
    "sparse_recover",
    "sparse_recover_batch",
]


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class BernoulliEnsemble:
    """``m x d`` matrix with i.i.d. entries ``+-1/sqrt(m)``."""

    matrix: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float, copy=True)
        if mat.ndim != 2 or min(mat.shape) < 1:
            raise ValueError(f"ensemble must be a non-empty matrix, got shape {mat.shape}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def draw_ensemble(m: int, d: int, rng: np.random.Generator | int | None = None) -> BernoulliEnsemble:
    if m < 1 or d < 1:
        raise ValueError(f"ensemble dimensions must be positive, got m={m}, d={d}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng)
    signs = gen.integers(0, 2, size=(m, d)) * 2 - 1
    return BernoulliEnsemble(signs / np.sqrt(m), seed)


@dataclass(frozen=True)
class MeasurementVector:
    values: np.ndarray
    step: float
    base_point: Optional[np.ndarray] = None
    restriction: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("measurement values must be finite")
        if self.restriction is not None and len(self.restriction) == 0:
            raise ValueError("restriction must be non-empty when given")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


def _ensemble_matrix(V) -> np.ndarray:
    return V.matrix if isinstance(V, BernoulliEnsemble) else np.asarray(V, dtype=float)


def probe_offsets(V, step: float, d: int, restriction: Optional[Sequence[int]] = None) -> np.ndarray:
    """Rows ``step * v_j`` embedded in ``R^d`` (zero outside ``restriction``, 0-based)."""
    mat = _ensemble_matrix(V)
    if restriction is None:
        if mat.shape[1] != d:
            raise ValueError(f"ensemble has {mat.shape[1]} columns, expected {d}")
        return step * mat
    idx = np.asarray(restriction, dtype=int)
    if mat.shape[1] != idx.size:
        raise ValueError(f"ensemble has {mat.shape[1]} columns, restriction has {idx.size}")
    out = np.zeros((mat.shape[0], d))
    out[:, idx] = step * mat
    return out


def _restricted_base(X, restriction):
    if restriction is None:
        return X
    keep = np.zeros(X.shape[-1], dtype=bool)
    keep[np.asarray(restriction, dtype=int)] = True
    return np.where(keep, X, 0.0)


def _check_probes(base, offsets, limit, offset_max=None):
    if offset_max is None:
        offset_max = np.max(np.abs(offsets))
    if np.max(np.abs(base)) + offset_max <= limit + 1e-12:
        return
    # the largest coordinate over +-offsets, per probe j
    reach = np.max(np.abs(base)[None, :] + np.abs(offsets), axis=1)
    bad = np.flatnonzero(reach > limit + 1e-12)
    if bad.size:
        j = int(bad[0])
        raise DomainError(
            f"probe j={j + 1} reaches |x| = {reach[j]:.6g} beyond the domain bound {limit:.6g}", coordinate=None
        )


def gradient_measurements(
    oracle: QueryOracle,
    x,
    V,
    step: float,
    restriction: Optional[Sequence[int]] = None,
    resamples: int = 1,
    stream: Optional[Sequence[int]] = None,
) -> MeasurementVector:
    """Central differences ``(f(x + step v_j) - f(x - step v_j)) / (2 step)`` for every row ``v_j``.

    With ``restriction`` (0-based indices ``P``) the base point and the probes are
    zeroed outside ``P`` and ``V`` has ``|P|`` columns.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=float)
    Y = gradient_measurements_batch(oracle, x[None, :], V, step, restriction, resamples, [stream] if stream else None)
    base = _restricted_base(x, restriction)
    return MeasurementVector(Y[:, 0], step, base, None if restriction is None else np.asarray(restriction))


def gradient_measurements_batch(
    oracle: QueryOracle,
    X,
    V,
    step: float,
    restriction: Optional[Sequence[int]] = None,
    resamples: int = 1,
    streams: Optional[Sequence[Sequence[int]]] = None,
) -> np.ndarray:
    """Column ``i`` holds the central-difference measurements at base point ``X[i]``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    offsets = probe_offsets(V, step, d, restriction)
    m = offsets.shape[0]
    base = _restricted_base(X, restriction)
    limit = 1.0 + oracle.model.r
    out = np.empty((m, n))
    offset_max = np.max(np.abs(offsets))
    probes = np.empty((2 * m, d))
    for i in range(n):
        _check_probes(base[i], offsets, limit, offset_max)
        np.add(base[i], offsets, out=probes[:m])
        np.subtract(base[i], offsets, out=probes[m:])
        key = None if streams is None else streams[i]
        vals = oracle.query_batch(probes, resamples, key)
        out[:, i] = (vals[:m] - vals[m:]) / (2.0 * step)
    return out


def hessian_row_measurements(grad_at_x, grads_at_offsets, step: float, q: int) -> MeasurementVector:
    """``(grad(x + step v'_j) - grad(x))_q / step`` for each offset ``j`` (``q`` 0-based)."""
    G = np.atleast_2d(np.asarray(grads_at_offsets, dtype=float))
    g0 = np.asarray(grad_at_x, dtype=float)
    if G.shape[1] != g0.shape[0]:
        raise ValueError(f"gradient lengths differ: {G.shape[1]} vs {g0.shape[0]}")
    if not 0 <= q < g0.shape[0]:
        raise IndexError(f"row {q} outside 0..{g0.shape[0] - 1}")
    return MeasurementVector((G[:, q] - g0[q]) / step, step)


def hessian_measurement_matrix(grad_at_x, grads_at_offsets, step: float) -> np.ndarray:
    """All rows at once: column ``q`` is the measurement vector of Hessian row ``q``."""
    G = np.atleast_2d(np.asarray(grads_at_offsets, dtype=float))
    g0 = np.asarray(grad_at_x, dtype=float)
    if G.shape[1] != g0.shape[0]:
        raise ValueError(f"gradient lengths differ: {G.shape[1]} vs {g0.shape[0]}")
    return (G - g0[None, :]) / step


# ---------------------------------------------------------------------------
# sparse recovery

_RESIDUAL_TOL = 1e-9
_MAX_ITER = 500
_CHUNK_FLOATS = 1 << 23


def sparse_recover(V, y, budget: int, mode: str = "hard_threshold", **kwargs) -> np.ndarray:
    """Sparse ``z`` with ``V z ~= y``.

    ``hard_threshold`` returns a ``budget``-sparse least-squares fit found by
    hard thresholding pursuit; ``l1_equality`` solves ``min ||z||_1 s.t. V z = y``.
    """
    values = y.values if isinstance(y, MeasurementVector) else np.asarray(y, dtype=float)
    return sparse_recover_batch(V, values[:, None], budget, mode, **kwargs)[:, 0]


def sparse_recover_batch(
    V,
    Y,
    budget: int,
    mode: str = "hard_threshold",
    max_iter: int = _MAX_ITER,
    tol: float = _RESIDUAL_TOL,
    trace: Optional[list] = None,
) -> np.ndarray:
    """Solve one recovery problem per column of ``Y``; returns a ``(d, n)`` array.

    When ``trace`` is a list, the hard-thresholding residual norms of every
    column after each iteration are appended to it (one array per iteration).
    A ``None`` entry marks the restart of unsettled columns from a greedy start.
    """
    mat = _ensemble_matrix(V)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != mat.shape[0]:
        raise ValueError(f"measurements must have {mat.shape[0]} rows, got shape {Y.shape}")
    if budget < 1:
        raise ValueError(f"sparsity budget must be >= 1, got {budget}")
    m, d = mat.shape
    Z = np.zeros((d, Y.shape[1]))
    live = np.flatnonzero(np.linalg.norm(Y, axis=0) > tol)
    if live.size == 0:
        return Z
    if mode == "hard_threshold":
        s = min(budget, d, m)
        step = max(1, _CHUNK_FLOATS // max(1, s * m + d))
        for start in range(0, live.size, step):
            cols = live[start : start + step]
            Z[:, cols] = _htp(mat, Y[:, cols], s, max_iter, tol, trace)
    elif mode == "l1_equality":
        for c in live:
            Z[:, c] = _basis_pursuit(mat, Y[:, c])
    else:
        raise ValueError(f"unknown recovery mode {mode!r}")
    return Z


def _basis_pursuit(V, y):
    m, d = V.shape
    # z = u - w with u, w >= 0
    res = linprog(
        np.ones(2 * d),
        A_eq=np.hstack([V, -V]),
        b_eq=y,
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        resid = None if res.x is None else float(np.linalg.norm(V @ (res.x[:d] - res.x[d:]) - y))
        raise SolverError(f"basis pursuit failed: {res.message}", residual=resid)
    z = res.x[:d] - res.x[d:]
    z[np.abs(z) < 1e-13] = 0.0
    return z


def _top(W, s):
    if s >= W.shape[0]:
        return np.broadcast_to(np.arange(W.shape[0])[:, None], W.shape).copy()
    idx = np.argpartition(-np.abs(W), s - 1, axis=0)[:s]
    return np.sort(idx, axis=0)


def _ls_on_support(V, Y, S):
    """Least squares restricted to support ``S`` (``(s, n)`` indices) for every column."""
    n = Y.shape[1]
    A = V.T[S.T]  # (n, s, m)
    gram = A @ A.transpose(0, 2, 1)
    rhs = np.einsum("nsm,mn->ns", A, Y)
    try:
        coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        coef = np.stack([np.linalg.lstsq(A[i].T, Y[:, i], rcond=None)[0] for i in range(n)])
    Z = np.zeros((V.shape[1], n))
    np.put_along_axis(Z, S, coef.T, axis=0)
    return Z


def _htp(V, Y, s, max_iter, tol, trace=None):
    """Hard thresholding pursuit with a normalised gradient step.

    Each column keeps its own iterate and stops once its support is stationary.
    A step is accepted only if it lowers the residual; otherwise the step is
    halved a few times before the column is declared stationary.
    """
    best = _pursue(V, Y, s, max_iter, tol, _initial_threshold(V, Y, s), trace)
    res = np.linalg.norm(Y - V @ best, axis=0)
    retry = np.flatnonzero(res > tol)
    if retry.size:
        if trace is not None:
            trace.append(None)
        # a greedy start often escapes the stationary point of the thresholding start
        alt = _pursue(V, Y[:, retry], s, max_iter, tol, _greedy_start(V, Y[:, retry], s), trace)
        alt_res = np.linalg.norm(Y[:, retry] - V @ alt, axis=0)
        better = alt_res < res[retry]
        best[:, retry[better]] = alt[:, better]
    return best


def _initial_threshold(V, Y, s):
    return _ls_on_support(V, Y, _top(V.T @ Y, s))


def _greedy_start(V, Y, s):
    n = Y.shape[1]
    S = np.empty((0, n), dtype=int)
    Z = np.zeros((V.shape[1], n))
    for _ in range(s):
        corr = np.abs(V.T @ (Y - V @ Z))
        if S.size:
            np.put_along_axis(corr, S, -1.0, axis=0)
        S = np.vstack([S, np.argmax(corr, axis=0)[None, :]])
        Z = _ls_on_support(V, Y, S)
    return Z


def _pursue(V, Y, s, max_iter, tol, Z, trace=None):
    R = Y - V @ Z
    res = np.linalg.norm(R, axis=0)
    if trace is not None:
        trace.append(res.copy())
    active = res > tol
    for _ in range(max_iter):
        cols = np.flatnonzero(active)
        if cols.size == 0:
            return Z
        Zc, Rc = Z[:, cols], R[:, cols]
        G = V.T @ Rc
        S_now = Zc != 0
        # step size from the gradient restricted to the current support and its best extension
        mask = S_now.copy()
        np.put_along_axis(mask, _top(np.where(S_now, 0.0, G), s), True, axis=0)
        Gm = np.where(mask, G, 0.0)
        num = np.sum(Gm * Gm, axis=0)
        den = np.sum((V @ Gm) ** 2, axis=0)
        alpha = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
        moved = np.zeros(cols.size, dtype=bool)
        new_Z = Zc.copy()
        new_res = res[cols].copy()
        trial_alpha = alpha
        pending = np.ones(cols.size, dtype=bool)
        for _half in range(6):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            W = Zc[:, idx] + trial_alpha[idx] * G[:, idx]
            S_try = _top(W, s)
            same = np.all(np.take_along_axis(S_now[:, idx], S_try, axis=0), axis=0) & (
                S_now[:, idx].sum(axis=0) == s
            )
            Z_try = _ls_on_support(V, Y[:, cols[idx]], S_try)
            r_try = np.linalg.norm(Y[:, cols[idx]] - V @ Z_try, axis=0)
            ok = (r_try < res[cols[idx]] * (1 - 1e-12)) & ~same
            new_Z[:, idx[ok]] = Z_try[:, ok]
            new_res[idx[ok]] = r_try[ok]
            moved[idx[ok]] = True
            # columns whose support did not change are stationary; others retry with a shorter step
            pending[idx[ok | same]] = False
            trial_alpha = trial_alpha * 0.5
        Z[:, cols] = new_Z
        R[:, cols] = Y[:, cols] - V @ new_Z
        res[cols] = new_res
        active[cols] = moved & (new_res > tol)
        if trace is not None:
            trace.append(res.copy())
    if active.any():
        raise SolverError(
            f"hard thresholding did not settle within {max_iter} iterations",
            residual=float(np.max(res[active])),
        )
    return Z
