"""Space-filling designs and likelihood-based reduction of the input region."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .simulator import make_rng

__all__ = [
    "PairMask",
    "InputRegion",
    "Design",
    "maximin_lhs",
    "reduce_region",
    "region_volume_fraction",
]


def _cell_index(x, lo, hi, grid):
    idx = np.floor((np.asarray(x, dtype=float) - lo) / (hi - lo) * grid).astype(np.int64)
    return np.clip(idx, 0, grid - 1)


@dataclass
class PairMask:
    """Admissible cells of a ``grid x grid`` partition of inputs ``i`` and ``j``.

    The grid spans ``[lo_i, hi_i] x [lo_j, hi_j]``, which is the box the
    mask was built on; later, narrower regions keep the original grid.
    """

    i: int
    j: int
    lo_i: float
    hi_i: float
    lo_j: float
    hi_j: float
    allowed: np.ndarray

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 2 or self.allowed.shape[0] != self.allowed.shape[1]:
            raise ValueError("mask must be a square boolean grid")

    @property
    def grid(self) -> int:
        return self.allowed.shape[0]

    def admits(self, X: np.ndarray) -> np.ndarray:
        xi, xj = X[:, self.i], X[:, self.j]
        inside = (xi >= self.lo_i) & (xi <= self.hi_i) & (xj >= self.lo_j) & (xj <= self.hi_j)
        a = _cell_index(xi, self.lo_i, self.hi_i, self.grid)
        b = _cell_index(xj, self.lo_j, self.hi_j, self.grid)
        return inside & self.allowed[a, b]

    def to_dict(self) -> dict:
        return {
            "inputs": [self.i, self.j],
            "box": [[self.lo_i, self.hi_i], [self.lo_j, self.hi_j]],
            "allowed": self.allowed.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> PairMask:
        (i, j), ((lo_i, hi_i), (lo_j, hi_j)) = d["inputs"], d["box"]
        return cls(i, j, lo_i, hi_i, lo_j, hi_j, np.array(d["allowed"], dtype=bool))


@dataclass
class InputRegion:
    """Box of marginal ranges intersected with any number of pairwise masks."""

    lower: np.ndarray
    upper: np.ndarray
    masks: list[PairMask] = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(~(self.lower < self.upper)):
            raise ValueError("every input needs lower < upper")
        for m in self.masks:
            if max(m.i, m.j) >= self.n_inputs:
                raise ValueError("mask refers to an unknown input")

    @property
    def n_inputs(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.all((X >= self.lower) & (X <= self.upper), axis=1)
        for m in self.masks:
            ok &= m.admits(X)
        return ok

    def point_test(self):
        """Fast ``x -> bool`` admissibility test for single points."""
        lower = self.lower.tolist()
        upper = self.upper.tolist()
        masks = [
            (m.i, m.j, m.lo_i, m.hi_i, m.lo_j, m.hi_j, m.grid, m.allowed.tolist())
            for m in self.masks
        ]

        def inside(x) -> bool:
            for v, lo, hi in zip(x, lower, upper):
                if not lo <= v <= hi:
                    return False
            for i, j, lo_i, hi_i, lo_j, hi_j, g, allowed in masks:
                xi, xj = x[i], x[j]
                if not (lo_i <= xi <= hi_i and lo_j <= xj <= hi_j):
                    return False
                a = min(int((xi - lo_i) / (hi_i - lo_i) * g), g - 1)
                b = min(int((xj - lo_j) / (hi_j - lo_j) * g), g - 1)
                if not allowed[a][b]:
                    return False
            return True

        return inside

    def to_unit(self, X):
        return (np.asarray(X, dtype=float) - self.lower) / self.width

    def from_unit(self, U):
        return self.lower + np.asarray(U, dtype=float) * self.width

    def copy(self) -> InputRegion:
        return InputRegion(self.lower.copy(), self.upper.copy(), list(self.masks))

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "masks": [m.to_dict() for m in self.masks],
        }

    @classmethod
    def from_dict(cls, d) -> InputRegion:
        return cls(d["lower"], d["upper"], [PairMask.from_dict(m) for m in d.get("masks", [])])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> InputRegion:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Design:
    """Design points with the bookkeeping needed to audit their construction.

    ``strata`` holds the Latin stratum of every retained point per column;
    ``candidate_min_distances`` the maximin score of every hypercube tried
    (unit-cube scaling, before admissibility filtering).
    """

    points: np.ndarray
    strata: np.ndarray
    min_distance: float
    candidate_min_distances: np.ndarray
    n_requested: int
    seed: object = None
    wave: int | None = None

    def __len__(self):
        return self.points.shape[0]

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "strata": self.strata.tolist(),
            "min_distance": self.min_distance,
            "candidate_min_distances": self.candidate_min_distances.tolist(),
            "n_requested": self.n_requested,
            "seed": self.seed,
            "wave": self.wave,
        }

    @classmethod
    def from_dict(cls, d) -> Design:
        p = np.array(d["points"], dtype=float)
        return cls(
            points=p.reshape(len(d["points"]), -1),
            strata=np.array(d["strata"], dtype=np.int64).reshape(p.shape[0], -1),
            min_distance=d["min_distance"],
            candidate_min_distances=np.array(d["candidate_min_distances"]),
            n_requested=d["n_requested"],
            seed=d.get("seed"),
            wave=d.get("wave"),
        )


def _latin_hypercube(n, p, rng):
    strata = np.column_stack([rng.permutation(n) for _ in range(p)])
    return strata, (strata + rng.random((n, p))) / n


def maximin_lhs(n: int, region: InputRegion, seed=None, restarts: int = 20,
                max_redraws: int = 50, max_swaps: int = 200, wave: int | None = None) -> Design:
    """Maximin Latin hypercube over ``region``.

    Among ``restarts`` random Latin hypercubes, keeps the one with the
    largest minimum pairwise distance in the unit cube.  Points that fall
    outside the pairwise masks are redrawn inside their own strata, then
    repaired by swapping strata with another point; whatever is still
    inadmissible is dropped.
    """
    if n < 2:
        raise ValueError("a design needs at least two points")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = make_rng(seed)
    p = region.n_inputs
    best = None
    scores = np.empty(restarts)
    for r in range(restarts):
        strata, U = _latin_hypercube(n, p, rng)
        scores[r] = pdist(U).min()
        if best is None or scores[r] > scores[best[0]]:
            best = (r, strata, U)
    _, strata, U = best
    strata = strata.copy()
    X = region.from_unit(U)

    bad = np.flatnonzero(~region.contains(X))
    for _ in range(max_redraws):
        if bad.size == 0:
            break
        U_new = (strata[bad] + rng.random((bad.size, p))) / n
        X[bad] = region.from_unit(U_new)
        bad = bad[~region.contains(X[bad])]

    for _ in range(max_swaps):
        if bad.size == 0:
            break
        i = bad[0]
        j = rng.integers(n)
        d = rng.integers(p)
        trial = strata[[i, j]].copy()
        trial[:, d] = trial[::-1, d]
        X_trial = region.from_unit((trial + rng.random((2, p))) / n)
        ok = region.contains(X_trial)
        j_was_ok = j not in bad
        if ok[0] and (ok[1] or not j_was_ok):
            strata[[i, j]] = trial
            X[[i, j]] = X_trial
            bad = np.flatnonzero(~region.contains(X))

    keep = region.contains(X)
    if not keep.any():
        raise ValueError("the input region has no admissible points within the retry budget")
    return Design(
        points=X[keep],
        strata=strata[keep],
        min_distance=float(scores[best[0]]),
        candidate_min_distances=scores,
        n_requested=n,
        seed=seed if isinstance(seed, (int, type(None))) else str(seed),
        wave=wave,
    )


def reduce_region(points, logliks, region: InputRegion, log_ratio_threshold: float = -40.0,
                  grid: int = 8) -> InputRegion:
    """Rule out parts of ``region`` whose binned maximum log-likelihood is too low.

    A marginal bin or pairwise grid cell is kept when the largest
    log-likelihood observed in it is at least ``max(logliks) +
    log_ratio_threshold``.  Bins that hold no points carry no evidence
    against themselves and are kept.  Marginal
    ranges shrink to the hull of the kept bins; the pairwise cells become new
    masks, intersected with the ones ``region`` already has.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    f = np.asarray(logliks, dtype=float).ravel()
    if X.shape[0] == 0 or X.shape[0] != f.size:
        raise ValueError("need at least one point and one log-likelihood per point")
    if X.shape[1] != region.n_inputs:
        raise ValueError("points do not match the region's dimension")
    if not np.all(np.isfinite(f)):
        raise ValueError("log-likelihoods must be finite")
    if log_ratio_threshold == -np.inf:
        return region.copy()
    cutoff = f.max() + log_ratio_threshold
    lo, hi = region.lower, region.upper
    cells = _cell_index(X, lo, hi, grid)

    new_lo, new_hi = lo.copy(), hi.copy()
    width = (hi - lo) / grid
    for d in range(region.n_inputs):
        bin_max = np.full(grid, -np.inf)
        np.maximum.at(bin_max, cells[:, d], f)
        count = np.bincount(cells[:, d], minlength=grid)
        kept = np.flatnonzero((bin_max >= cutoff) | (count == 0))
        if kept.size == 0:
            raise ValueError(f"every bin of input {d} is excluded; threshold too aggressive")
        new_lo[d] = lo[d] + kept[0] * width[d]
        new_hi[d] = lo[d] + (kept[-1] + 1) * width[d] if kept[-1] < grid - 1 else hi[d]

    masks = list(region.masks)
    for i, j in itertools.combinations(range(region.n_inputs), 2):
        cell_max = np.full((grid, grid), -np.inf)
        np.maximum.at(cell_max, (cells[:, i], cells[:, j]), f)
        count = np.zeros((grid, grid), dtype=np.int64)
        np.add.at(count, (cells[:, i], cells[:, j]), 1)
        allowed = (cell_max >= cutoff) | (count == 0)
        if not allowed.all():
            masks.append(PairMask(i, j, lo[i], hi[i], lo[j], hi[j], allowed))
    return InputRegion(new_lo, new_hi, masks)


def region_volume_fraction(region_after: InputRegion, region_before: InputRegion,
                           mc_points: int = 100_000, seed=0) -> tuple[float, float]:
    """Admissible volume of ``region_after`` relative to ``region_before``.

    Returns ``(fraction, standard_error)``.  Without masks the ratio of box
    volumes is exact and the standard error is zero.
    """
    if not region_after.masks and not region_before.masks:
        frac = np.prod(region_after.width / region_before.width)
        return float(frac), 0.0
    rng = make_rng(seed)
    U = rng.random((mc_points, region_before.n_inputs))
    X = region_before.from_unit(U)
    X = X[region_before.contains(X)]
    if X.shape[0] == 0:
        return 0.0, 0.0
    hits = region_after.contains(X)
    frac = hits.mean()
    return float(frac), float(np.sqrt(frac * (1 - frac) / X.shape[0]))
