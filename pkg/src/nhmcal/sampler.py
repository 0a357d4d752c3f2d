"""Importance sampling with an emulator-based proposal.

The proposal is a (flattened) emulator posterior mean, sampled by
Metropolis-within-Gibbs.  Where the emulator is uncertain about the proposal
draws, selected by pivoted Cholesky, the simulator is run and the emulator
refitted.  Once the emulator is adequate, every proposal draw is simulated
and weighted by ``exp(f(x) - alpha * m*(x))``; the calibrated sample is a
weighted resample.  Stored runs allow reweighting for other discrepancy
fractions without new simulation.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .design import InputRegion
from .likelihood import DiscrepancySpec, TargetData, total_loglik
from .simulator import SimulatorOutput, make_rng

__all__ = [
    "CalibrationError",
    "CalibrationConfig",
    "ImportanceSample",
    "MCMCResult",
    "PivotedCholesky",
    "RefinementSelection",
    "RunCache",
    "LoglikEvaluator",
    "CalibrationState",
    "CalibrationResult",
    "ReweightResult",
    "effective_sample_size",
    "mh_gibbs_sample",
    "pivoted_cholesky",
    "select_refinement_points",
    "calibration_iterate",
    "run_calibration",
    "resample",
    "reweight",
]

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """The calibration could not produce a usable sample."""


@dataclass
class CalibrationConfig:
    """Tuning of the sampling and refinement loop.

    ``near_zero`` is the normalised weight below which a draw counts as
    negligible, as a multiple of ``1/S``.
    """

    S: int = 2000
    thin: int = 50
    warmup: int = 1000
    u: int = 200
    v: float = 2.0
    alpha_start: float = 0.1
    alpha_step: float = 0.1
    alpha_cap: float = 1.0
    M: int = 1000
    max_iterations: int = 12
    ess_floor: float = 0.05
    corr_threshold: float = 0.9
    target_accept: float = 0.3
    refit_gibbs_iters: int = 50
    near_zero: float = 0.01

    def __post_init__(self):
        self.validate()

    @property
    def raw_length(self) -> int:
        return self.S * self.thin

    def validate(self) -> CalibrationConfig:
        if self.S < 2 or self.thin < 1 or self.M < 1:
            raise ValueError("S, thin and M must be positive (S >= 2)")
        if not 0 < self.alpha_start <= 1 or not 0 < self.alpha_cap <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.alpha_step < 0:
            raise ValueError("alpha_step must be >= 0")
        if not 1 <= self.u <= self.S:
            raise ValueError("u must satisfy 1 <= u <= S")
        if not self.v > 0:
            raise ValueError("v must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def effective_sample_size(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` computed from log weights."""
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        return 0.0
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


@dataclass
class ImportanceSample:
    """Proposal draws with their emulator means, log-likelihoods and weights."""

    points: np.ndarray
    emulator_mean: np.ndarray
    alpha: float
    loglik: np.ndarray
    run_keys: list[str]
    lam: DiscrepancySpec
    calibrated_index: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.emulator_mean = np.asarray(self.emulator_mean, dtype=float)
        self.loglik = np.asarray(self.loglik, dtype=float)

    @property
    def S(self) -> int:
        return self.points.shape[0]

    @property
    def log_weights(self) -> np.ndarray:
        lw = self.loglik - self.alpha * self.emulator_mean
        return np.where(np.isfinite(lw), lw, -np.inf)

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights
        if not np.any(np.isfinite(lw)):
            return np.zeros_like(lw)
        return np.exp(lw - logsumexp(lw))

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights)

    def near_zero_fraction(self, factor: float = 0.01) -> float:
        return float(np.mean(self.weights < factor / self.S))

    @property
    def calibrated(self) -> np.ndarray:
        if self.calibrated_index is None:
            raise CalibrationError("the sample has not been resampled yet")
        return self.points[self.calibrated_index]

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "emulator_mean": self.emulator_mean.tolist(),
            "alpha": self.alpha,
            "loglik": [v if np.isfinite(v) else None for v in self.loglik.tolist()],
            "run_keys": list(self.run_keys),
            "lam": self.lam.to_dict(),
            "weights": self.weights.tolist(),
            "ess": self.ess,
            "calibrated_index": None if self.calibrated_index is None
            else self.calibrated_index.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> ImportanceSample:
        idx = d.get("calibrated_index")
        return cls(
            points=np.array(d["points"], dtype=float),
            emulator_mean=np.array(d["emulator_mean"], dtype=float),
            alpha=float(d["alpha"]),
            loglik=np.array([np.nan if v is None else v for v in d["loglik"]], dtype=float),
            run_keys=list(d["run_keys"]),
            lam=DiscrepancySpec.from_dict(d["lam"]),
            calibrated_index=None if idx is None else np.array(idx, dtype=np.int64),
        )


class MCMCResult(NamedTuple):
    points: np.ndarray
    acceptance: np.ndarray
    step_sizes: np.ndarray


def _starting_point(log_density, inside, region, rng, tries=5000, candidates=200):
    best, best_lp, found = None, -np.inf, 0
    for _ in range(tries):
        x = region.from_unit(rng.random(region.n_inputs))
        if not inside(x):
            continue
        found += 1
        lp = log_density(x)
        if np.isfinite(lp) and lp > best_lp:
            best, best_lp = x, lp
        if found >= candidates:
            break
    if best is None:
        raise CalibrationError("no admissible starting point with finite density")
    return best


def mh_gibbs_sample(log_density: Callable, region: InputRegion, raw_length: int, thin: int,
                    seed=None, warmup: int = 1000, x0=None, target_accept: float = 0.3,
                    adapt_every: int = 50) -> MCMCResult:
    """Coordinate-wise random-walk Metropolis over ``region``.

    One Gaussian proposal per input per sweep.  Step sizes adapt towards
    ``target_accept`` during ``warmup`` sweeps and are frozen afterwards.
    Inadmissible proposals are rejected.  Returns every ``thin``-th of the
    ``raw_length`` post-warm-up states.
    """
    rng = make_rng(seed)
    inside = region.point_test()
    p = region.n_inputs

    def target(x):
        return log_density(x) if inside(x) else -np.inf

    x = np.array(x0, dtype=float) if x0 is not None else _starting_point(log_density, inside, region, rng)
    lp = target(x)
    if not np.isfinite(lp):
        raise CalibrationError("log density is not finite at the starting point")
    step = 0.1 * region.width
    window = np.zeros(p)
    warm_accepted = np.zeros(p)
    post_accepted = np.zeros(p)
    n_keep = raw_length // thin
    out = np.empty((n_keep, p))
    kept = 0
    total = warmup + raw_length
    noise = rng.standard_normal((total, p))
    log_u = np.log(rng.random((total, p)))
    for sweep in range(total):
        warming = sweep < warmup
        for k in range(p):
            old = x[k]
            x[k] = old + step[k] * noise[sweep, k]
            lp_new = target(x)
            if log_u[sweep, k] < lp_new - lp:
                lp = lp_new
                if warming:
                    window[k] += 1
                    warm_accepted[k] += 1
                else:
                    post_accepted[k] += 1
            else:
                x[k] = old
        if warming and (sweep + 1) % adapt_every == 0:
            step = np.minimum(step * np.exp(2.0 * (window / adapt_every - target_accept)), region.width)
            window[:] = 0
        if not warming and (sweep - warmup + 1) % thin == 0:
            out[kept] = x
            kept += 1
    if warmup > 0 and np.any(warm_accepted == 0):
        raise CalibrationError(
            "no proposal accepted during warm-up for inputs "
            f"{np.flatnonzero(warm_accepted == 0).tolist()}"
        )
    return MCMCResult(out, post_accepted / max(raw_length, 1), step)


class PivotedCholesky(NamedTuple):
    """``pivots[k]`` is the row chosen at step ``k`` with residual variance ``diag[k]``.

    ``L`` is indexed by original rows, so ``L @ L.T`` approximates the input.
    """

    pivots: np.ndarray
    diag: np.ndarray
    L: np.ndarray


def pivoted_cholesky(cov, max_rank: int | None = None, tol: float | None = None) -> PivotedCholesky:
    """Greedy pivoted Cholesky factorisation of a symmetric PSD matrix.

    Each step pivots on the largest residual diagonal (lowest index on ties).
    Factorisation stops after ``max_rank`` steps or once the residual falls
    to ``tol`` (default ``n * eps * largest diagonal``); rows not factorised
    are appended in order of their residual, so ``diag`` is non-increasing.
    """
    A = np.asarray(cov, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("covariance must be square")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10:
        raise ValueError("covariance must be symmetric")
    n = A.shape[0]
    rank = n if max_rank is None else min(int(max_rank), n)
    d = np.diag(A).copy()
    if np.any(d < -1e-8):
        raise ValueError("matrix is not positive semidefinite")
    if tol is None:
        tol = n * np.finfo(float).eps * max(float(d.max(initial=0.0)), 0.0)
    remaining = np.arange(n)
    L = np.zeros((n, rank))
    pivots, diag = [], []
    for k in range(rank):
        j = remaining[np.argmax(d[remaining])]
        pk = d[j]
        if pk < -1e-8:
            raise ValueError("matrix is not positive semidefinite")
        if pk <= tol:
            break
        col = (A[:, j] - L[:, :k] @ L[j, :k]) / np.sqrt(pk)
        col[pivots] = 0.0
        L[:, k] = col
        d = d - col ** 2
        d[j] = 0.0
        pivots.append(j)
        diag.append(pk)
        remaining = remaining[remaining != j]
        if np.any(d[remaining] < -1e-8 * max(1.0, diag[0])):
            raise ValueError("matrix is not positive semidefinite")
    L = L[:, : len(pivots)]
    if remaining.size and len(pivots) < rank:
        rest = np.maximum(d[remaining], 0.0)
        order = np.argsort(-rest, kind="stable")
        take = order[: rank - len(pivots)]
        pivots.extend(remaining[take].tolist())
        diag.extend(rest[take].tolist())
    return PivotedCholesky(np.array(pivots, dtype=np.int64), np.array(diag), L)


class RefinementSelection(NamedTuple):
    indices: np.ndarray  # into the sample; pivot order, only "large" pivots
    order: np.ndarray  # first u sample indices in pivot order
    pivot_values: np.ndarray  # residual variances for ``order``


def select_refinement_points(sample, emulator, u: int, v: float) -> RefinementSelection:
    """Proposal draws where the emulator is most uncertain.

    Pivoted Cholesky on the posterior covariance of the smooth surface over
    the sample; of the first ``u`` pivots, those with residual variance above
    ``v`` are returned.  An empty selection means the variance criterion is
    met.
    """
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    cov = emulator.posterior_cov(X, include_nugget=False)
    pc = pivoted_cholesky(cov, max_rank=u)
    large = pc.diag > v
    return RefinementSelection(pc.pivots[large], pc.pivots, pc.diag)


def _seed_prefix(seed) -> tuple:
    return tuple(int(v) for v in np.atleast_1d(seed).tolist())


def _run_key(x, cohort_size, seed) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(np.asarray(x, dtype=np.float64)).tobytes())
    h.update(repr((int(cohort_size), seed)).encode())
    return h.hexdigest()[:32]


class RunCache(dict):
    """Simulator outputs keyed by a hash of ``(inputs, cohort size, seed)``."""

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in sorted(self.items())}

    @classmethod
    def from_dict(cls, d) -> RunCache:
        return cls({k: SimulatorOutput.from_dict(v) for k, v in d.items()})


@dataclass
class LoglikEvaluator:
    """Runs the simulator at input points and scores the runs.

    Seeds are ``(*master_seed, *tag, index)`` (an integer master seed counts
    as a one-element prefix); outputs are cached so the same run is never
    simulated twice.  A failing run yields ``nan``.
    """

    simulator: Callable
    target: TargetData
    lam: DiscrepancySpec
    master_seed: int | tuple = 0
    cache: RunCache = field(default_factory=RunCache)
    n_evaluations: int = 0

    @property
    def cohort_size(self) -> int:
        return getattr(self.simulator, "cohort_size", 0)

    def __call__(self, points, tag=()) -> tuple[np.ndarray, list[str]]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        prefix = _seed_prefix(self.master_seed)
        f = np.empty(points.shape[0])
        keys = []
        for i, x in enumerate(points):
            seed = (*prefix, *map(int, tag), i)
            key = _run_key(x, self.cohort_size, seed)
            keys.append(key)
            if key not in self.cache:
                try:
                    self.cache[key] = self.simulator(x, seed)
                    self.n_evaluations += 1
                except Exception as exc:  # the simulator is a black box
                    log.warning("simulator failed at %s: %s", x.tolist(), exc)
                    f[i] = np.nan
                    continue
            f[i] = total_loglik(self.target, self.cache[key], self.lam)
        return f, keys


@dataclass
class CalibrationState:
    """Training data, fitted emulator and flattening for the next iteration."""

    X_train: np.ndarray
    f_train: np.ndarray
    emulator: object
    alpha: float
    iteration: int = 0

    def append(self, X, f) -> int:
        X = np.atleast_2d(X)
        f = np.asarray(f, dtype=float)
        ok = np.isfinite(f)
        X, f = X[ok], f[ok]
        existing = {row.tobytes() for row in self.X_train}
        fresh = []
        for i, row in enumerate(X):
            b = row.tobytes()
            if b not in existing:
                existing.add(b)
                fresh.append(i)
        self.X_train = np.vstack([self.X_train, X[fresh]])
        self.f_train = np.concatenate([self.f_train, f[fresh]])
        return len(fresh)


def _corr(a, b) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3 or np.std(a[ok]) == 0 or np.std(b[ok]) == 0:
        return float("nan")
    return float(np.corrcoef(a[ok], b[ok])[0, 1])


def _weight_histogram(sample: ImportanceSample, bins: int = 20) -> dict:
    w = sample.weights * sample.S
    pos = w[w > 0]
    if pos.size == 0:
        return {"edges": [], "counts": [], "zero": int(w.size)}
    counts, edges = np.histogram(np.log10(pos), bins=bins)
    return {"edges": edges.tolist(), "counts": counts.tolist(), "zero": int(np.sum(w == 0))}


def calibration_iterate(config: CalibrationConfig, region: InputRegion, evaluate: LoglikEvaluator,
                        state: CalibrationState, seed=0, final: bool = False):
    """One pass of sampling, refinement or weighting.

    Returns ``(state, sample, report)``.  ``sample`` is ``None`` when the pass
    refined the emulator instead of weighting.  ``final`` forces weighting.
    """
    it = state.iteration
    emulator = state.emulator
    alpha = state.alpha
    m_star = emulator.mean_function()
    chain = mh_gibbs_sample(
        lambda x: alpha * m_star(x), region, config.raw_length, config.thin,
        seed=(*_seed_prefix(seed), it, 0), warmup=config.warmup, target_accept=config.target_accept,
    )
    X_S = chain.points
    m_S = emulator.predict(X_S)
    sel = select_refinement_points(X_S, emulator, config.u, config.v)
    report = {
        "iteration": it,
        "alpha": alpha,
        "n_train": int(state.X_train.shape[0]),
        "n_dagger": int(sel.indices.size),
        "acceptance": chain.acceptance.tolist(),
        "max_pivot": float(sel.pivot_values[0]) if sel.pivot_values.size else 0.0,
    }

    if sel.indices.size and not final:
        pts = X_S[sel.indices]
        f_new, _ = evaluate(pts, tag=(1, it))
        failed = int(np.sum(~np.isfinite(f_new)))
        report.update(
            status="refined",
            failed_runs=failed,
            scatter={"f": f_new.tolist(), "m_star": m_S[sel.indices].tolist()},
            corr=_corr(f_new, m_S[sel.indices]),
        )
        added = state.append(pts, f_new)
        report["n_added"] = added
        state = _refit(state, config)
        return state, None, report

    f_S, keys = evaluate(X_S, tag=(2, it))
    sample = ImportanceSample(X_S, m_S, alpha, f_S, keys, evaluate.lam)
    corr = _corr(f_S, m_S)
    ess = sample.ess
    report.update(
        status="weighted",
        failed_runs=int(np.sum(~np.isfinite(f_S))),
        scatter={"f": [v if np.isfinite(v) else None for v in f_S.tolist()], "m_star": m_S.tolist()},
        corr=corr,
        ess=ess,
        ess_fraction=ess / config.S,
        near_zero_fraction=sample.near_zero_fraction(config.near_zero),
        weight_histogram=_weight_histogram(sample),
    )
    report["converged"] = bool(ess / config.S >= config.ess_floor and corr >= config.corr_threshold)
    return state, sample, report


def _refit(state: CalibrationState, config: CalibrationConfig) -> CalibrationState:
    try:
        emulator = state.emulator.refit(state.X_train, state.f_train, gibbs_iters=config.refit_gibbs_iters)
    except Exception as exc:
        raise CalibrationError(f"emulator refit failed at iteration {state.iteration}: {exc}") from exc
    return CalibrationState(
        state.X_train, state.f_train, emulator,
        min(state.alpha + config.alpha_step, config.alpha_cap), state.iteration + 1,
    )


@dataclass
class CalibrationResult:
    sample: ImportanceSample
    state: CalibrationState
    reports: list[dict]
    resample_seed: tuple = ()


def run_calibration(config: CalibrationConfig, region: InputRegion, evaluate: LoglikEvaluator,
                    state: CalibrationState, seed=0, callback=None) -> CalibrationResult:
    """Iterate until the weights are usable or the iteration budget is spent.

    When a weighting pass fails the stopping rule, the first ``u`` draws in
    pivot order (already simulated) join the training data and the loop
    continues.  The returned sample has been resampled to ``config.M``.
    """
    reports = []
    for it in range(config.max_iterations):
        final = it == config.max_iterations - 1
        state, sample, report = calibration_iterate(config, region, evaluate, state, seed, final=final)
        reports.append(report)
        if callback is not None:
            callback(report)
        log.info("iteration %d: %s (alpha=%.2f)", it, report["status"], report["alpha"])
        if sample is None:
            continue
        if report["converged"] or final:
            if sample.ess == 0:
                raise CalibrationError("all importance weights are zero")
            resample_seed = (*_seed_prefix(seed), it, 3)
            sample.calibrated_index = resample(sample, config.M, seed=resample_seed)
            report["resample_seed"] = list(resample_seed)
            return CalibrationResult(sample, state, reports, resample_seed)
        order = np.argsort(np.abs(sample.loglik - sample.emulator_mean))[::-1]
        order = order[np.isfinite(sample.loglik[order])][: config.u]
        state.append(sample.points[order], sample.loglik[order])
        state = _refit(state, config)
    raise CalibrationError("iteration budget exhausted")  # pragma: no cover


def resample(sample, M: int, seed=None) -> np.ndarray:
    """Indices of ``M`` draws with replacement, proportional to the weights."""
    w = sample.weights if isinstance(sample, ImportanceSample) else np.asarray(sample, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise CalibrationError("no positive importance weight; calibration failed")
    w = w / w.sum()
    rng = make_rng(seed)
    return rng.choice(w.size, size=int(M), replace=True, p=w)


@dataclass
class ReweightResult:
    sample: ImportanceSample
    calibrated: np.ndarray
    ess: float
    n_unique: int


def reweight(sample: ImportanceSample, outputs: Mapping[str, SimulatorOutput], target: TargetData,
             lam: DiscrepancySpec, M: int, seed=None) -> ReweightResult:
    """Weights and calibrated sample for other discrepancy fractions.

    Only the likelihood is recomputed from the stored runs; the proposal and
    its emulator means are unchanged.
    """
    missing = [i for i, k in enumerate(sample.run_keys) if np.isfinite(sample.loglik[i]) and k not in outputs]
    if missing:
        raise KeyError(f"stored simulator outputs missing for proposal points {missing}")
    f = np.array([
        total_loglik(target, outputs[k], lam) if np.isfinite(sample.loglik[i]) else np.nan
        for i, k in enumerate(sample.run_keys)
    ])
    new = ImportanceSample(sample.points, sample.emulator_mean, sample.alpha, f,
                           list(sample.run_keys), lam)
    new.calibrated_index = resample(new, M, seed)
    return ReweightResult(new, new.calibrated, new.ess, int(np.unique(new.calibrated_index).size))
