"""Cohort microsimulation of bowel-cancer natural history.

A structurally simple stand-in for a natural history model: each person is
followed from birth to death through an ordered chain of adenoma and cancer
states.  In every state three Weibull clocks are drawn (progression,
presentation, death) and the shortest one decides what happens next.
Presentation from a cancer state is a diagnosis; the person is treated,
returns to the non-cancer state and from then on progresses faster.

The simulation is vectorised over persons, so a cohort of a few thousand
people runs in milliseconds.  Records are materialised lazily.

Default input layout (25 inputs)
--------------------------------
Inputs 0, 1, 2, 11 and 24 carry the roles described for the original model
(adenoma onset age, log Weibull shape of pre-cancer progression, Weibull
scale of the first pre-cancer transition, post-treatment scale multiplier
and lifetime adenoma probability).  The remaining twenty are a convention of
this package, see :data:`INPUT_NAMES`.
"""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

__all__ = [
    "HealthState",
    "NhmInputs",
    "INPUT_NAMES",
    "Event",
    "Diagnosis",
    "CohortRecord",
    "Cohort",
    "SimulatorOutput",
    "NhmSimulator",
    "InputValidationError",
    "weibull_draw",
    "weibull_inverse_cdf",
    "simulate_cohort",
    "aggregate_outputs",
    "make_rng",
    "AGE_GROUP_EDGES",
    "ADENOMA_AGE_EDGES",
    "POPULATION_AGE_PROPORTIONS",
]


class InputValidationError(ValueError):
    """Raised when a simulator input is out of its admissible range."""


class HealthState(enum.IntEnum):
    NON_CANCER = 0
    LOW_ADENOMA = 1
    MEDIUM_ADENOMA = 2
    HIGH_ADENOMA = 3
    DUKES_A = 4
    DUKES_B = 5
    DUKES_C = 6
    STAGE_D = 7
    DEAD = 8

    @property
    def is_adenoma(self) -> bool:
        return HealthState.LOW_ADENOMA <= self <= HealthState.HIGH_ADENOMA

    @property
    def is_cancer(self) -> bool:
        return HealthState.DUKES_A <= self <= HealthState.STAGE_D


# 0-4, 5-9, ..., 80-84, 85+
AGE_GROUP_EDGES = tuple(float(a) for a in range(0, 90, 5))
# <55, 55-64, 65-74, 75+
ADENOMA_AGE_EDGES = (55.0, 65.0, 75.0)
# Rough shape of an ageing western population; a configurable default, not data.
_pop = np.array([6.0, 6, 6, 6, 6.5, 7, 7, 7, 7, 7, 6.5, 6, 6, 5, 4, 3, 2, 2])
POPULATION_AGE_PROPORTIONS = tuple((_pop / _pop.sum()).tolist())
del _pop


@dataclass(frozen=True)
class NhmInputs:
    """Named simulator inputs.  Ages and scales are in years."""

    onset_age: float = 20.0
    log_shape_precancer: float = float(np.log(1.5))
    scale_normal_to_low: float = 45.0
    scale_low_to_medium: float = 12.0
    scale_medium_to_high: float = 12.0
    scale_high_to_dukes_a: float = 10.0
    shape_cancer: float = 1.5
    scale_a_to_b: float = 2.0
    scale_b_to_c: float = 2.0
    scale_c_to_d: float = 2.0
    shape_presentation: float = 1.5
    post_treatment_multiplier: float = 0.7
    scale_present_adenoma: float = 60.0
    scale_present_a: float = 6.0
    scale_present_b: float = 3.0
    scale_present_c: float = 2.0
    scale_present_d: float = 1.0
    shape_cancer_death: float = 1.2
    scale_death_d: float = 2.5
    shape_background_death: float = 7.5
    scale_background_death: float = 82.0
    prob_obstruction_b: float = 0.10
    prob_obstruction_c: float = 0.15
    prob_obstruction_d: float = 0.25
    adenoma_prob: float = 0.4

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_vector(cls, values) -> NhmInputs:
        values = np.asarray(values, dtype=float).ravel()
        if values.size != len(INPUT_NAMES):
            raise InputValidationError(
                f"expected {len(INPUT_NAMES)} inputs, got {values.size}"
            )
        return cls(*values.tolist())

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in INPUT_NAMES], dtype=float)

    def replace(self, **changes) -> NhmInputs:
        unknown = set(changes) - set(INPUT_NAMES)
        if unknown:
            raise InputValidationError(f"unknown inputs: {sorted(unknown)}")
        return NhmInputs(**{**asdict(self), **changes})

    def validate(self) -> NhmInputs:
        for name in INPUT_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise InputValidationError(f"{name} must be finite, got {value!r}")
            if name.startswith(("shape_", "scale_")) or name == "post_treatment_multiplier":
                if value <= 0:
                    raise InputValidationError(f"{name} must be > 0, got {value!r}")
            elif name.startswith("prob_") or name == "adenoma_prob":
                if not 0.0 <= value <= 1.0:
                    raise InputValidationError(f"{name} must lie in [0, 1], got {value!r}")
            elif name == "onset_age" and value < 0:
                raise InputValidationError(f"onset_age must be >= 0, got {value!r}")
        return self


INPUT_NAMES: tuple[str, ...] = NhmInputs.names()


class Event(NamedTuple):
    state: HealthState
    age: float
    post_treatment: bool


class Diagnosis(NamedTuple):
    stage: HealthState
    age: float
    obstructed: bool


@dataclass
class CohortRecord:
    """Life history of one simulated person."""

    events: list[Event]
    death_age: float
    diagnoses: list[Diagnosis] = field(default_factory=list)
    adenoma_developed: bool = False
    adenoma_undetected: bool = False

    def to_dict(self) -> dict:
        return {
            "events": [[e.state.name, e.age, e.post_treatment] for e in self.events],
            "death_age": self.death_age,
            "diagnoses": [[d.stage.name, d.age, d.obstructed] for d in self.diagnoses],
            "adenoma_developed": self.adenoma_developed,
            "adenoma_undetected": self.adenoma_undetected,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CohortRecord:
        return cls(
            events=[Event(HealthState[s], float(a), bool(t)) for s, a, t in data["events"]],
            death_age=float(data["death_age"]),
            diagnoses=[
                Diagnosis(HealthState[s], float(a), bool(o)) for s, a, o in data["diagnoses"]
            ],
            adenoma_developed=bool(data["adenoma_developed"]),
            adenoma_undetected=bool(data["adenoma_undetected"]),
        )


def _seed_sequence(seed) -> np.random.SeedSequence:
    # SeedSequence pads entropy with zeros, so (5, 1) and (5, 1, 0) would
    # collide; prefixing the length keeps hierarchical keys distinct.
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([len(seed), *(int(s) for s in seed)])
    return np.random.SeedSequence(seed)


def make_rng(seed) -> np.random.Generator:
    """Generator from an integer seed or a tuple of integers (hierarchical key)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(_seed_sequence(seed))


def weibull_inverse_cdf(u, shape, scale):
    """Weibull quantile ``scale * (-ln u) ** (1 / shape)`` for ``u`` in (0, 1]."""
    return np.asarray(scale) * (-np.log(u)) ** (1.0 / np.asarray(shape))


def weibull_draw(shape, scale, rng, size=None):
    """Draw Weibull waiting times by inversion.

    ``scale`` may contain ``inf`` to switch a clock off; those draws are
    ``inf``.
    """
    shape_arr = np.asarray(shape, dtype=float)
    scale_arr = np.asarray(scale, dtype=float)
    if np.any(shape_arr <= 0) or np.any(scale_arr <= 0):
        raise ValueError("Weibull shape and scale must be positive")
    if size is None:
        size = np.broadcast(shape_arr, scale_arr).shape
    u = 1.0 - rng.random(size)  # (0, 1]
    with np.errstate(invalid="ignore"):
        t = weibull_inverse_cdf(u, shape_arr, scale_arr)
    return np.where(np.isinf(scale_arr), np.inf, t)


def _state_parameters(inputs: NhmInputs):
    inf = np.inf
    pre = float(np.exp(inputs.log_shape_precancer))
    c = inputs.shape_cancer
    prog_shape = np.array([pre, pre, pre, pre, c, c, c, 1.0])
    prog_scale = np.array([
        inputs.scale_normal_to_low,
        inputs.scale_low_to_medium,
        inputs.scale_medium_to_high,
        inputs.scale_high_to_dukes_a,
        inputs.scale_a_to_b,
        inputs.scale_b_to_c,
        inputs.scale_c_to_d,
        inf,
    ])
    pres_scale = np.array([
        inf,
        inputs.scale_present_adenoma,
        inputs.scale_present_adenoma,
        inputs.scale_present_adenoma,
        inputs.scale_present_a,
        inputs.scale_present_b,
        inputs.scale_present_c,
        inputs.scale_present_d,
    ])
    death_scale = np.array([inf] * 7 + [inputs.scale_death_d])
    obstruction = np.array([
        0, 0, 0, 0, 0,
        inputs.prob_obstruction_b,
        inputs.prob_obstruction_c,
        inputs.prob_obstruction_d,
    ])
    return prog_shape, prog_scale, pres_scale, death_scale, obstruction


def _race(t_progress, t_present, t_death):
    """Index of the winning clock (0 progression, 1 presentation, 2 death)."""
    clocks = np.stack([t_progress, t_present, t_death])
    return np.argmin(clocks, axis=0), np.min(clocks, axis=0)


class Cohort(Sequence):
    """Columnar result of :func:`simulate_cohort`.

    Behaves as a sequence of :class:`CohortRecord`; aggregation works on the
    arrays directly.
    """

    def __init__(self, size, death_age, death_state, adenoma_developed,
                 diag_person, diag_stage, diag_age, diag_obstructed,
                 event_person, event_state, event_age, event_treated):
        self.size = int(size)
        self.death_age = death_age
        self.death_state = death_state
        self.adenoma_developed = adenoma_developed
        self.diag_person = diag_person
        self.diag_stage = diag_stage
        self.diag_age = diag_age
        self.diag_obstructed = diag_obstructed
        self.event_person = event_person
        self.event_state = event_state
        self.event_age = event_age
        self.event_treated = event_treated
        self._event_index = None
        self._diag_index = None

    @property
    def adenoma_undetected(self) -> np.ndarray:
        return (self.death_state >= HealthState.LOW_ADENOMA) & (
            self.death_state <= HealthState.HIGH_ADENOMA
        )

    def __len__(self):
        return self.size

    def _split(self, person):
        order = np.argsort(person, kind="stable")
        bounds = np.searchsorted(person[order], np.arange(self.size + 1))
        return order, bounds

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.size))]
        if i < 0:
            i += self.size
        if not 0 <= i < self.size:
            raise IndexError(i)
        if self._event_index is None:
            self._event_index = self._split(self.event_person)
            self._diag_index = self._split(self.diag_person)
        order, b = self._event_index
        ev = order[b[i]:b[i + 1]]
        events = [
            Event(HealthState(int(s)), float(a), bool(t))
            for s, a, t in zip(self.event_state[ev], self.event_age[ev], self.event_treated[ev])
        ]
        order, b = self._diag_index
        dg = order[b[i]:b[i + 1]]
        diagnoses = [
            Diagnosis(HealthState(int(s)), float(a), bool(o))
            for s, a, o in zip(self.diag_stage[dg], self.diag_age[dg], self.diag_obstructed[dg])
        ]
        return CohortRecord(
            events=events,
            death_age=float(self.death_age[i]),
            diagnoses=diagnoses,
            adenoma_developed=bool(self.adenoma_developed[i]),
            adenoma_undetected=bool(self.adenoma_undetected[i]),
        )

    @classmethod
    def from_records(cls, records: Sequence[CohortRecord]) -> Cohort:
        if isinstance(records, Cohort):
            return records
        n = len(records)
        death_state = np.empty(n, dtype=np.int64)
        ev_p, ev_s, ev_a, ev_t = [], [], [], []
        dg_p, dg_s, dg_a, dg_o = [], [], [], []
        for i, rec in enumerate(records):
            alive = [e for e in rec.events if e.state != HealthState.DEAD]
            death_state[i] = alive[-1].state if alive else HealthState.NON_CANCER
            for e in rec.events:
                ev_p.append(i)
                ev_s.append(int(e.state))
                ev_a.append(e.age)
                ev_t.append(e.post_treatment)
            for d in rec.diagnoses:
                dg_p.append(i)
                dg_s.append(int(d.stage))
                dg_a.append(d.age)
                dg_o.append(d.obstructed)
        return cls(
            n,
            np.array([r.death_age for r in records], dtype=float),
            death_state,
            np.array([r.adenoma_developed for r in records], dtype=bool),
            np.array(dg_p, dtype=np.int64),
            np.array(dg_s, dtype=np.int64),
            np.array(dg_a, dtype=float),
            np.array(dg_o, dtype=bool),
            np.array(ev_p, dtype=np.int64),
            np.array(ev_s, dtype=np.int64),
            np.array(ev_a, dtype=float),
            np.array(ev_t, dtype=bool),
        )


def simulate_cohort(inputs: NhmInputs, cohort_size: int, seed, max_events: int = 1000) -> Cohort:
    """Follow a birth cohort from birth to death.

    Parameters
    ----------
    inputs : NhmInputs
        Validated simulator inputs.
    cohort_size : int
        Number of persons.
    seed : int or tuple of int
        Seed (or hierarchical seed key); the run is a pure function of
        ``(inputs, cohort_size, seed)``.
    max_events : int
        Safety cap on events per person; anyone still alive afterwards dies
        at their background death age.

    Returns
    -------
    Cohort
    """
    if not isinstance(inputs, NhmInputs):
        inputs = NhmInputs.from_vector(inputs)
    inputs.validate()
    if int(cohort_size) < 1:
        raise InputValidationError("cohort_size must be >= 1")
    n = int(cohort_size)
    rng = make_rng(seed)
    prog_shape, prog_scale, pres_scale, death_scale, obstruction = _state_parameters(inputs)

    state = np.zeros(n, dtype=np.int64)
    age = np.zeros(n)
    treated = np.zeros(n, dtype=bool)
    susceptible = rng.random(n) < inputs.adenoma_prob
    background_death = weibull_draw(
        inputs.shape_background_death, inputs.scale_background_death, rng, size=n
    )
    adenoma_developed = np.zeros(n, dtype=bool)
    death_age = np.empty(n)
    death_state = np.empty(n, dtype=np.int64)

    people = np.arange(n)
    ev = [(people, state.copy(), age.copy(), treated.copy())]
    dg = []
    active = people
    for step in range(max_events + 1):
        if active.size == 0:
            break
        s = state[active]
        a = age[active]
        tr = treated[active]
        m = active.size
        scale_mult = np.where(tr, inputs.post_treatment_multiplier, 1.0)

        t_prog = weibull_draw(prog_shape[s], prog_scale[s] * scale_mult, rng, size=m)
        normal = s == HealthState.NON_CANCER
        t_prog[normal & ~susceptible[active]] = np.inf
        t_prog[normal] += np.maximum(inputs.onset_age - a[normal], 0.0)
        t_pres = weibull_draw(inputs.shape_presentation, pres_scale[s], rng, size=m)
        t_death = np.minimum(
            background_death[active] - a,
            weibull_draw(inputs.shape_cancer_death, death_scale[s], rng, size=m),
        )
        if step == max_events:
            t_prog[:] = np.inf
            t_pres[:] = np.inf
            t_death = np.maximum(background_death[active] - a, 0.0)
        which, t = _race(t_prog, t_pres, t_death)
        new_age = a + t

        dies = which == 2
        gone = active[dies]
        death_age[gone] = new_age[dies]
        death_state[gone] = s[dies]
        ev.append((gone, np.full(gone.size, int(HealthState.DEAD)), new_age[dies], tr[dies]))

        prog = which == 0
        moved = active[prog]
        state[moved] = s[prog] + 1
        age[moved] = new_age[prog]
        adenoma_developed[moved[s[prog] == HealthState.NON_CANCER]] = True
        ev.append((moved, s[prog] + 1, new_age[prog], tr[prog]))

        pres = which == 1
        presented = active[pres]
        ps = s[pres]
        cancer = ps >= HealthState.DUKES_A
        diag = presented[cancer]
        obstructed = rng.random(diag.size) < obstruction[ps[cancer]]
        dg.append((diag, ps[cancer], new_age[pres][cancer], obstructed))
        state[presented] = HealthState.NON_CANCER
        age[presented] = new_age[pres]
        treated[presented] = True
        ev.append((
            presented,
            np.zeros(presented.size, dtype=np.int64),
            new_age[pres],
            np.ones(presented.size, dtype=bool),
        ))
        active = active[~dies]

    def cat(parts, k, dtype):
        if not parts:
            return np.array([], dtype=dtype)
        return np.concatenate([p[k] for p in parts]).astype(dtype, copy=False)

    return Cohort(
        n, death_age, death_state, adenoma_developed,
        cat(dg, 0, np.int64), cat(dg, 1, np.int64), cat(dg, 2, float), cat(dg, 3, bool),
        cat(ev, 0, np.int64), cat(ev, 1, np.int64), cat(ev, 2, float), cat(ev, 3, bool),
    )


@dataclass
class SimulatorOutput:
    """Counts produced by one simulator run.

    ``y1``/``n1`` have shape ``(R, 18)``: cases by age group for each
    randomisation.  ``y2`` (4,) cases by type, ``y3`` (3,) obstructed cases
    for Duke's B, C and stage D, ``y4``/``n4`` (4,) undetected adenomas by
    age group at death.
    """

    y1: np.ndarray
    n1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    y4: np.ndarray
    n4: np.ndarray

    def __post_init__(self):
        self.y1 = np.atleast_2d(np.asarray(self.y1, dtype=np.int64))
        self.n1 = np.atleast_2d(np.asarray(self.n1, dtype=np.int64))
        for name in ("y2", "y3", "y4", "n4"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.validate()

    @property
    def n2(self) -> int:
        return int(self.y2.sum())

    @property
    def n3(self) -> int:
        return int(self.y3.sum())

    @property
    def n_randomizations(self) -> int:
        return self.y1.shape[0]

    def validate(self) -> SimulatorOutput:
        if self.y1.shape != self.n1.shape or self.y1.shape[1] != 18:
            raise ValueError(f"cases-by-age arrays must be (R, 18), got {self.y1.shape}")
        shapes = {"y2": 4, "y3": 3, "y4": 4, "n4": 4}
        for name, k in shapes.items():
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must have {k} entries")
        for y, n in ((self.y1, self.n1), (self.y4, self.n4)):
            if np.any(y < 0) or np.any(y > n):
                raise ValueError("counts must satisfy 0 <= y <= n")
        if np.any(self.y2 < 0) or np.any(self.y3 < 0):
            raise ValueError("counts must be non-negative")
        return self

    def to_dict(self) -> dict:
        return {
            "cases_by_age": {"y": self.y1.tolist(), "n": self.n1.tolist()},
            "cases_by_type": {"y": self.y2.tolist(), "n": self.n2},
            "obstructed_by_type": {"y": self.y3.tolist(), "n": self.n3},
            "undetected_adenomas": {"y": self.y4.tolist(), "n": self.n4.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> SimulatorOutput:
        out = cls(
            y1=data["cases_by_age"]["y"],
            n1=data["cases_by_age"]["n"],
            y2=data["cases_by_type"]["y"],
            y3=data["obstructed_by_type"]["y"],
            y4=data["undetected_adenomas"]["y"],
            n4=data["undetected_adenomas"]["n"],
        )
        if out.n2 != data["cases_by_type"]["n"] or out.n3 != data["obstructed_by_type"]["n"]:
            raise ValueError("multinomial totals do not match their counts")
        return out


def aggregate_outputs(
    records,
    age_group_edges=AGE_GROUP_EDGES,
    R: int = 1,
    population_age_proportions=POPULATION_AGE_PROPORTIONS,
    seed=0,
    window_years: float | None = None,
    adenoma_age_edges=ADENOMA_AGE_EDGES,
) -> SimulatorOutput:
    """Summarise a cohort into the four output types.

    Cases by age are made cross-sectional by allocating every person to an
    age group at random (``R`` independent times).  A person allocated to
    group ``k`` is at risk if alive at the group's lower edge and counts as a
    case if diagnosed inside the reference window, which is the group's age
    interval (the last group is open-ended) or, with ``window_years``, the
    first ``window_years`` of it.
    """
    cohort = Cohort.from_records(records)
    if cohort.size == 0:
        raise ValueError("cannot aggregate an empty cohort")
    edges = np.asarray(age_group_edges, dtype=float)
    props = np.asarray(population_age_proportions, dtype=float)
    K = props.size
    if edges.size != K or np.any(np.diff(edges) <= 0):
        raise ValueError("age_group_edges must be ascending with one edge per group")
    if K != 18:
        raise ValueError("cases by age use 18 age groups")
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-12:
        raise ValueError("population_age_proportions must be a probability vector")
    if int(R) < 1:
        raise ValueError("R must be >= 1")

    upper = np.append(edges[1:], np.inf)
    if window_years is not None:
        upper = np.minimum(upper, edges + window_years)

    streams = _seed_sequence(seed).spawn(int(R))
    y1 = np.zeros((R, K), dtype=np.int64)
    n1 = np.zeros((R, K), dtype=np.int64)
    for r, ss in enumerate(streams):
        group = np.random.default_rng(ss).choice(K, size=cohort.size, p=props)
        at_risk = cohort.death_age > edges[group]
        n1[r] = np.bincount(group[at_risk], minlength=K)
        g = group[cohort.diag_person]
        hit = (cohort.diag_age >= edges[g]) & (cohort.diag_age < upper[g])
        cases = np.unique(cohort.diag_person[hit])
        y1[r] = np.bincount(group[cases], minlength=K)

    stage = cohort.diag_stage - HealthState.DUKES_A
    y2 = np.bincount(stage, minlength=4)[:4]
    obs = stage[cohort.diag_obstructed] - 1
    y3 = np.bincount(obs[obs >= 0], minlength=3)[:3]

    dgroup = np.searchsorted(np.asarray(adenoma_age_edges), cohort.death_age, side="right")
    n4 = np.bincount(dgroup, minlength=4)[:4]
    y4 = np.bincount(dgroup[cohort.adenoma_undetected], minlength=4)[:4]
    return SimulatorOutput(y1=y1, n1=n1, y2=y2, y3=y3, y4=y4, n4=n4)


@dataclass
class NhmSimulator:
    """Stochastic simulator over an active subset of the inputs.

    Calling ``sim(x, seed)`` sets the active inputs to ``x``, keeps the rest
    at ``base``, runs a cohort and aggregates it.
    """

    active: tuple[str, ...] = ("onset_age", "scale_normal_to_low", "adenoma_prob")
    base: NhmInputs = field(default_factory=NhmInputs)
    cohort_size: int = 5000
    n_randomizations: int = 10
    age_group_edges: tuple[float, ...] = AGE_GROUP_EDGES
    population_age_proportions: tuple[float, ...] = POPULATION_AGE_PROPORTIONS
    window_years: float | None = None

    def __post_init__(self):
        self.active = tuple(self.active)
        unknown = [a for a in self.active if a not in INPUT_NAMES]
        if unknown:
            raise InputValidationError(f"unknown active inputs: {unknown}")

    @property
    def n_inputs(self) -> int:
        return len(self.active)

    def inputs_at(self, x) -> NhmInputs:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n_inputs:
            raise InputValidationError(f"expected {self.n_inputs} active inputs, got {x.size}")
        return self.base.replace(**dict(zip(self.active, x.tolist()))).validate()

    def __call__(self, x, seed, cohort_size: int | None = None) -> SimulatorOutput:
        run_seed, agg_seed = _seed_sequence(seed).spawn(2)
        cohort = simulate_cohort(self.inputs_at(x), cohort_size or self.cohort_size, run_seed)
        return aggregate_outputs(
            cohort,
            self.age_group_edges,
            self.n_randomizations,
            self.population_age_proportions,
            agg_seed,
            self.window_years,
        )
