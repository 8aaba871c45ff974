"""Two-colour hash families and the sampling grids built from them."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "HashConstructionError",
    "HashFamily",
    "SampleGrid",
    "family_size",
    "build_hash_family",
    "is_separating",
    "indicator_vectors",
    "hessian_grid",
    "combined_hessian_grid",
    "diagonal_grid",
    "grid_levels",
]


class HashConstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class HashFamily:
    """Colourings ``h: [d] -> {1, 2}``; row ``i`` of ``colors`` is member ``i``."""

    d: int
    colors: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        colors = np.array(self.colors, dtype=np.int8, copy=True)
        if colors.ndim != 2 or colors.shape[1] != self.d:
            raise ValueError(f"colors must have shape (size, {self.d}), got {colors.shape}")
        if colors.size and not np.isin(colors, (1, 2)).all():
            raise ValueError("colours must be 1 or 2")
        colors.setflags(write=False)
        object.__setattr__(self, "colors", colors)

    @property
    def t(self) -> int:
        return 2

    def __len__(self) -> int:
        return self.colors.shape[0]

    def member(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(f"member index {index} outside 0..{len(self) - 1}")
        return self.colors[index]

    def indicator_vectors(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        h = self.member(index)
        return (h == 1).astype(float), (h == 2).astype(float)

    def is_separating(self) -> bool:
        return is_separating(self.colors)


def family_size(d: int, c_prime: float = 1.7) -> int:
    """``ceil(c_prime * ln d)``, at least 1."""
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    return max(1, math.ceil(c_prime * math.log(d)))


def is_separating(colors: np.ndarray) -> bool:
    """True when every pair of columns differs in some row.

    Two indices are never split exactly when their colour columns coincide, so
    the check reduces to all column signatures being distinct.
    """
    colors = np.asarray(colors)
    if colors.shape[1] < 2:
        return True
    cols = np.ascontiguousarray(colors.T)
    return np.unique(cols, axis=0).shape[0] == cols.shape[0]


def build_hash_family(
    d: int,
    target_size: int,
    rng: np.random.Generator | int | None = None,
    method: str = "distinct",
    max_retries: int = 32,
) -> HashFamily:
    """Random (d, 2)-hash family with ``target_size`` members.

    ``method="iid"`` draws every colour independently and redraws the whole
    family until it separates all pairs.  ``method="distinct"`` assigns each
    index a distinct random codeword in ``{1,2}^target_size``, which is the iid
    law conditioned on separation and never needs a retry.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if target_size < 1:
        raise ValueError(f"target_size must be >= 1, got {target_size}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng)
    if method == "iid":
        for _ in range(max_retries):
            colors = gen.integers(1, 3, size=(target_size, d))
            if is_separating(colors):
                return HashFamily(d, colors, seed)
        raise HashConstructionError(
            f"no separating family of size {target_size} for d={d} after {max_retries} draws; increase target_size"
        )
    if method != "distinct":
        raise ValueError(f"unknown construction method {method!r}")
    if target_size < 63 and 2**target_size < d:
        raise HashConstructionError(
            f"{target_size} two-colourings cannot separate {d} indices (need 2^size >= d)"
        )
    codes = _distinct_codes(d, target_size, gen)
    bits = (codes[None, :] >> np.arange(target_size, dtype=np.uint64)[:, None]) & np.uint64(1)
    return HashFamily(d, bits.astype(np.int8) + 1, seed)


def _distinct_codes(d, size, gen):
    if size >= 63:
        # collisions are astronomically unlikely; still resolved below
        high = np.iinfo(np.int64).max
    else:
        high = 2**size
    if high <= 4 * d:
        return gen.permutation(high)[:d].astype(np.uint64)
    codes = gen.integers(0, high, size=d, dtype=np.int64)
    while True:
        _, first = np.unique(codes, return_index=True)
        dup = np.setdiff1d(np.arange(d), first)
        if dup.size == 0:
            return codes.astype(np.uint64)
        codes[dup] = gen.integers(0, high, size=dup.size, dtype=np.int64)


def indicator_vectors(family: HashFamily, index: int) -> tuple[np.ndarray, np.ndarray]:
    return family.indicator_vectors(index)


@dataclass(frozen=True)
class SampleGrid:
    points: np.ndarray
    origin_hash: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_csv(self, path) -> None:
        """One point per row as sparse ``coordinate:value`` pairs (1-based coordinates)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point", "origin_hash", "entries"])
            for i, p in enumerate(self.points):
                nz = np.flatnonzero(p)
                entries = " ".join(f"{j + 1}:{p[j]:.17g}" for j in nz)
                writer.writerow([i, "" if self.origin_hash is None else self.origin_hash, entries])


def grid_levels(m: int) -> np.ndarray:
    """The ``2m+1`` equispaced values ``-1, -(m-1)/m, ..., 1``."""
    if m < 1:
        raise ValueError(f"grid resolution must be >= 1, got {m}")
    return np.arange(-m, m + 1) / m


def hessian_grid(family: HashFamily, index: int, m_x: int) -> SampleGrid:
    """All ``(2m_x+1)^2`` points ``c1*e1(h) + c2*e2(h)`` for member ``index``."""
    e1, e2 = family.indicator_vectors(index)
    c = grid_levels(m_x)
    c1, c2 = np.meshgrid(c, c, indexing="ij")
    pts = c1.reshape(-1, 1) * e1 + c2.reshape(-1, 1) * e2
    return SampleGrid(pts, origin_hash=index)


def combined_hessian_grid(family: HashFamily, m_x: int, dedupe: bool = True) -> SampleGrid:
    """Union of the member grids, duplicates removed in first-seen order."""
    pts = np.vstack([hessian_grid(family, i, m_x).points for i in range(len(family))])
    if dedupe:
        _, first = np.unique(pts, axis=0, return_index=True)
        pts = pts[np.sort(first)]
    return SampleGrid(pts)


def diagonal_grid(m_x_prime: int, d: int) -> SampleGrid:
    c = grid_levels(m_x_prime)
    return SampleGrid(np.repeat(c[:, None], d, axis=1))
