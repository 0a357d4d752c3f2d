"""Discrepancy-discounted likelihood of target counts given one simulator run.

The simulated probability behind every count is given a
``Beta(1 + lam * y, 1 + lam * (n - y))`` distribution (Dirichlet for the
multinomial outputs) and integrated out analytically.  ``lam`` in (0, 1]
discounts the simulated sample size, which is how simulator discrepancy
enters.  Everything is evaluated with log-gamma functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from .simulator import SimulatorOutput

__all__ = [
    "TargetData",
    "DiscrepancySpec",
    "VarianceBounds",
    "beta_binomial_loglik",
    "dirichlet_multinomial_loglik",
    "cases_by_age_loglik",
    "loglik_components",
    "total_loglik",
    "variance_bounds",
    "output_proportions",
    "target_proportions",
    "group_bounds",
    "GROUP_LABELS",
]

GROUP_LABELS = {
    "cases_by_age": [f"{a}-{a + 4}" for a in range(0, 85, 5)] + ["85+"],
    "cases_by_type": ["Dukes A", "Dukes B", "Dukes C", "Stage D"],
    "obstructed_by_type": ["Dukes B", "Dukes C", "Stage D"],
    "undetected_adenomas": ["<55", "55-64", "65-74", "75+"],
}
_TYPE_KEYS = tuple(GROUP_LABELS)


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)) or np.any(lam > 1):
        raise ValueError(f"discrepancy fractions must lie in (0, 1], got {lam}")
    return lam


def _count_array(values, name):
    arr = np.asarray(values, dtype=float)
    if np.any(arr < 0) or np.any(arr != np.round(arr)):
        raise ValueError(f"{name} must be non-negative integers")
    return arr


def _log_choose(N, z):
    return gammaln(N + 1) - gammaln(z + 1) - gammaln(N - z + 1)


def beta_binomial_loglik(z, N, y, n, lam):
    """Log-probability of ``z`` successes out of ``N`` given a run with ``y`` of ``n``.

    Broadcasts over array arguments.  ``n = 0`` is accepted and gives the
    uniform-prior answer ``-log(N + 1)``.
    """
    lam = _check_lambda(lam)
    z = _count_array(z, "z")
    N = _count_array(N, "N")
    y = _count_array(y, "y")
    n = _count_array(n, "n")
    if np.any(z > N) or np.any(y > n):
        raise ValueError("counts must satisfy 0 <= z <= N and 0 <= y <= n")
    a = 1.0 + lam * y
    b = 1.0 + lam * (n - y)
    out = _log_choose(N, z) + betaln(a + z, b + N - z) - betaln(a, b)
    return out if out.ndim else float(out)


def dirichlet_multinomial_loglik(z, N, y, n, lam) -> float:
    """Log-probability of category counts ``z`` given run proportions ``y``.

    ``y`` may be real valued (already discounted outputs are fine); factorials
    of non-integers are read as gamma functions.
    """
    lam = float(_check_lambda(lam))
    z = _count_array(z, "z")
    y = np.asarray(y, dtype=float)
    if z.ndim != 1 or y.shape != z.shape:
        raise ValueError(f"z and y must be vectors of equal length, got {z.shape} and {y.shape}")
    if np.any(y < 0):
        raise ValueError("y must be non-negative")
    if z.sum() != N:
        raise ValueError(f"sum(z) = {z.sum()} does not equal N = {N}")
    if not np.isclose(y.sum(), n, rtol=1e-12, atol=1e-12):
        raise ValueError(f"sum(y) = {y.sum()} does not equal n = {n}")
    K = z.size
    ly = lam * y
    ln = lam * float(n)
    return float(
        gammaln(N + 1.0) + gammaln(ln + K) - gammaln(N + ln + K)
        + np.sum(gammaln(z + ly + 1.0) - gammaln(z + 1.0) - gammaln(ly + 1.0))
    )


def cases_by_age_loglik(z, N, y, n, lam) -> float:
    """Log of the average over randomisations of the product of beta-binomial terms.

    ``y`` and ``n`` have shape ``(R, K)``; ``lam`` is a scalar or a length-K
    vector.
    """
    y = np.atleast_2d(y)
    n = np.atleast_2d(n)
    if y.shape[0] == 0:
        raise ValueError("at least one randomisation is required")
    per_r = np.sum(beta_binomial_loglik(z, N, y, n, lam), axis=1)
    return float(logsumexp(per_r) - np.log(per_r.size))


@dataclass(frozen=True)
class DiscrepancySpec:
    """Discount fractions for the four data types.

    ``lam1_groups`` and ``lam4_groups`` optionally override ``lam1``/``lam4``
    group by group.
    """

    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 1.0
    lam4: float = 1.0
    lam1_groups: tuple[float, ...] | None = None
    lam4_groups: tuple[float, ...] | None = None

    def __post_init__(self):
        _check_lambda([self.lam1, self.lam2, self.lam3, self.lam4])
        if self.lam1_groups is not None:
            object.__setattr__(self, "lam1_groups", tuple(map(float, self.lam1_groups)))
            _check_lambda(self.lam1_groups)
            if len(self.lam1_groups) != 18:
                raise ValueError("lam1_groups needs 18 entries")
        if self.lam4_groups is not None:
            object.__setattr__(self, "lam4_groups", tuple(map(float, self.lam4_groups)))
            _check_lambda(self.lam4_groups)
            if len(self.lam4_groups) != 4:
                raise ValueError("lam4_groups needs 4 entries")

    @classmethod
    def from_sequence(cls, values) -> DiscrepancySpec:
        values = [float(v) for v in values]
        if len(values) != 4:
            raise ValueError("expected four discrepancy fractions")
        return cls(*values)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lam1, self.lam2, self.lam3, self.lam4)

    @property
    def lambda1(self):
        return np.asarray(self.lam1_groups) if self.lam1_groups is not None else self.lam1

    @property
    def lambda4(self):
        return np.asarray(self.lam4_groups) if self.lam4_groups is not None else self.lam4

    def per_group(self) -> dict[str, np.ndarray]:
        return {
            "cases_by_age": np.broadcast_to(self.lambda1, (18,)).astype(float),
            "cases_by_type": np.full(4, self.lam2),
            "obstructed_by_type": np.full(3, self.lam3),
            "undetected_adenomas": np.broadcast_to(self.lambda4, (4,)).astype(float),
        }

    def to_dict(self) -> dict:
        d = {"lam1": self.lam1, "lam2": self.lam2, "lam3": self.lam3, "lam4": self.lam4}
        if self.lam1_groups is not None:
            d["lam1_groups"] = list(self.lam1_groups)
        if self.lam4_groups is not None:
            d["lam4_groups"] = list(self.lam4_groups)
        return d

    @classmethod
    def from_dict(cls, data) -> DiscrepancySpec:
        if isinstance(data, (list, tuple)):
            return cls.from_sequence(data)
        return cls(**data)


_GROUP_SCHEMA = {
    "type": "object",
    "required": ["labels", "z"],
    "properties": {
        "labels": {"type": "array", "items": {"type": "string"}},
        "z": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "N": {
            "oneOf": [
                {"type": "array", "items": {"type": "integer", "minimum": 0}},
                {"type": "integer", "minimum": 0},
            ]
        },
    },
}


def _sized(schema, k):
    s = json.loads(json.dumps(schema))
    for key in ("labels", "z"):
        s["properties"][key].update(minItems=k, maxItems=k)
    s["properties"]["N"]["oneOf"][0].update(minItems=k, maxItems=k)
    return s


TARGET_SCHEMA = {
    "type": "object",
    "required": list(_TYPE_KEYS),
    "properties": {key: _sized(_GROUP_SCHEMA, len(labels)) for key, labels in GROUP_LABELS.items()},
}


@dataclass
class TargetData:
    """Observed counts ``z`` with sample sizes ``N`` for the four data types."""

    z1: np.ndarray
    N1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    z4: np.ndarray
    N4: np.ndarray

    def __post_init__(self):
        for name in ("z1", "N1", "z2", "z3", "z4", "N4"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.validate()

    @property
    def N2(self) -> int:
        return int(self.z2.sum())

    @property
    def N3(self) -> int:
        return int(self.z3.sum())

    def validate(self) -> TargetData:
        expected = {"z1": 18, "N1": 18, "z2": 4, "z3": 3, "z4": 4, "N4": 4}
        for name, k in expected.items():
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must have {k} entries, got {getattr(self, name).shape}")
        for z, N in ((self.z1, self.N1), (self.z4, self.N4)):
            if np.any(z < 0) or np.any(z > N):
                raise ValueError("target counts must satisfy 0 <= z <= N")
        if np.any(self.z2 < 0) or np.any(self.z3 < 0):
            raise ValueError("target counts must be non-negative")
        return self

    @classmethod
    def from_output(cls, output: SimulatorOutput, randomization: int = 0) -> TargetData:
        return cls(
            z1=output.y1[randomization], N1=output.n1[randomization],
            z2=output.y2, z3=output.y3, z4=output.y4, N4=output.n4,
        )

    def to_dict(self) -> dict:
        return {
            "cases_by_age": {
                "labels": GROUP_LABELS["cases_by_age"], "z": self.z1.tolist(), "N": self.N1.tolist()
            },
            "cases_by_type": {
                "labels": GROUP_LABELS["cases_by_type"], "z": self.z2.tolist(), "N": self.N2
            },
            "obstructed_by_type": {
                "labels": GROUP_LABELS["obstructed_by_type"], "z": self.z3.tolist(), "N": self.N3
            },
            "undetected_adenomas": {
                "labels": GROUP_LABELS["undetected_adenomas"],
                "z": self.z4.tolist(),
                "N": self.N4.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> TargetData:
        jsonschema.validate(data, TARGET_SCHEMA)
        for key in ("cases_by_type", "obstructed_by_type"):
            total = data[key].get("N")
            if total is not None and total != sum(data[key]["z"]):
                raise ValueError(f"{key}: N = {total} does not equal the sum of z")
        return cls(
            z1=data["cases_by_age"]["z"],
            N1=data["cases_by_age"]["N"],
            z2=data["cases_by_type"]["z"],
            z3=data["obstructed_by_type"]["z"],
            z4=data["undetected_adenomas"]["z"],
            N4=data["undetected_adenomas"]["N"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> TargetData:
        return cls.from_dict(json.loads(Path(path).read_text()))


def loglik_components(target: TargetData, output: SimulatorOutput, lam: DiscrepancySpec) -> np.ndarray:
    """The four log-likelihood terms, one per data type."""
    return np.array([
        cases_by_age_loglik(target.z1, target.N1, output.y1, output.n1, lam.lambda1),
        dirichlet_multinomial_loglik(target.z2, target.N2, output.y2, output.n2, lam.lam2),
        dirichlet_multinomial_loglik(target.z3, target.N3, output.y3, output.n3, lam.lam3),
        float(np.sum(beta_binomial_loglik(target.z4, target.N4, output.y4, output.n4, lam.lambda4))),
    ])


def total_loglik(target: TargetData, output: SimulatorOutput, lam: DiscrepancySpec) -> float:
    """Log-likelihood of the complete target data for one simulator run."""
    return float(np.sum(loglik_components(target, output, lam)))


@dataclass
class VarianceBounds:
    """Approximate 95% half-widths around target proportions.

    ``measurement`` covers sampling variability of the data only,
    ``simulator`` adds stochastic simulator variability and ``discrepancy``
    adds the inflation implied by the discount fraction.
    """

    measurement: np.ndarray
    simulator: np.ndarray
    discrepancy: np.ndarray


def variance_bounds(p, N, p_x, n_x, lam) -> VarianceBounds:
    p = np.asarray(p, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    N = np.asarray(N, dtype=float)
    n_x = np.asarray(n_x, dtype=float)
    lam = _check_lambda(lam)
    if np.any(N < 1) or np.any(n_x < 1):
        raise ValueError("sample sizes must be >= 1")
    v_data = p * (1 - p) / N
    v_sim = p_x * (1 - p_x) / n_x
    v_disc = p_x * (1 - p_x) * (1 - lam) / (lam * n_x)
    return VarianceBounds(
        measurement=2 * np.sqrt(v_data),
        simulator=2 * np.sqrt(v_data + v_sim),
        discrepancy=2 * np.sqrt(v_data + v_sim + v_disc),
    )


def _ratio(y, n):
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.divide(y, n, out=np.zeros_like(y), where=n > 0)


def output_proportions(output: SimulatorOutput) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-group ``(p(x), n(x))`` of a run; cases by age are pooled over randomisations."""
    n1 = output.n1.sum(axis=0)
    return {
        "cases_by_age": (_ratio(output.y1.sum(axis=0), n1), n1 / output.n_randomizations),
        "cases_by_type": (_ratio(output.y2, output.n2), np.full(4, float(output.n2))),
        "obstructed_by_type": (_ratio(output.y3, output.n3), np.full(3, float(output.n3))),
        "undetected_adenomas": (_ratio(output.y4, output.n4), output.n4.astype(float)),
    }


def target_proportions(target: TargetData) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {
        "cases_by_age": (_ratio(target.z1, target.N1), target.N1.astype(float)),
        "cases_by_type": (_ratio(target.z2, target.N2), np.full(4, float(target.N2))),
        "obstructed_by_type": (_ratio(target.z3, target.N3), np.full(3, float(target.N3))),
        "undetected_adenomas": (_ratio(target.z4, target.N4), target.N4.astype(float)),
    }


def _smoothed_proportions(output: SimulatorOutput) -> dict[str, np.ndarray]:
    # posterior means under the uniform / Dirichlet(1) priors of the likelihood
    y1, n1 = output.y1.sum(axis=0), output.n1.sum(axis=0)
    return {
        "cases_by_age": (y1 + 1.0) / (n1 + 2.0),
        "cases_by_type": (output.y2 + 1.0) / (output.n2 + 4.0),
        "obstructed_by_type": (output.y3 + 1.0) / (output.n3 + 3.0),
        "undetected_adenomas": (output.y4 + 1.0) / (output.n4 + 2.0),
    }


def group_bounds(target: TargetData, best_output: SimulatorOutput, lam: DiscrepancySpec,
                 smooth: bool = True) -> dict:
    """Variance-decomposition bounds for every data group.

    ``best_output`` is the run with the highest likelihood; its proportions
    and sizes are used for every group.  Sizes below one are treated as one.
    With ``smooth`` the simulator proportion entering the variances is the
    posterior mean under the likelihood's flat priors, so that a group with
    no simulated events still gets a non-degenerate bound; ``p_x`` in the
    result is always the raw proportion.
    """
    tp = target_proportions(target)
    op = output_proportions(best_output)
    sp = _smoothed_proportions(best_output) if smooth else None
    lam_groups = lam.per_group()
    result = {}
    for key in _TYPE_KEYS:
        p, N = tp[key]
        p_x, n_x = op[key]
        p_var = sp[key] if smooth else p_x
        vb = variance_bounds(p, np.maximum(N, 1), p_var, np.maximum(n_x, 1), lam_groups[key])
        result[key] = {"labels": GROUP_LABELS[key], "p": p, "p_x": p_x, "bounds": vb}
    return result
