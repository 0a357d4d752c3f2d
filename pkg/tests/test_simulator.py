import json

import numpy as np
import pytest
from scipy import stats

import oracles
from nhmcal.simulator import (
    INPUT_NAMES,
    CohortRecord,
    Diagnosis,
    Event,
    HealthState,
    InputValidationError,
    NhmInputs,
    NhmSimulator,
    SimulatorOutput,
    _race,
    aggregate_outputs,
    make_rng,
    simulate_cohort,
    weibull_draw,
    weibull_inverse_cdf,
)

ONE_HOT = tuple(1.0 if k == 10 else 0.0 for k in range(18))  # everyone allocated to 50-54


class TestWeibull:
    def test_quantile_matches_scipy(self):
        u = np.linspace(0.01, 0.99, 25)
        for shape, scale in [(0.7, 3.0), (1.5, 45.0), (7.5, 82.0)]:
            got = weibull_inverse_cdf(u, shape, scale)
            np.testing.assert_allclose(got, stats.weibull_min.ppf(1 - u, shape, scale=scale), rtol=1e-12)

    def test_moments(self):
        rng = make_rng(1)
        for shape, scale in [(1.5, 2.0), (7.5, 82.0), (1.0, 10.0)]:
            t = weibull_draw(shape, scale, rng, size=200_000)
            se = np.sqrt(oracles.weibull_variance(shape, scale) / t.size)
            assert abs(t.mean() - oracles.weibull_mean(shape, scale)) < 4 * se
            assert t.var() == pytest.approx(oracles.weibull_variance(shape, scale), rel=0.03)

    def test_infinite_scale_switches_clock_off(self):
        t = weibull_draw(np.array([1.5, 1.5]), np.array([np.inf, 2.0]), make_rng(0))
        assert np.isinf(t[0]) and np.isfinite(t[1])

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            weibull_draw(0.0, 1.0, make_rng(0))
        with pytest.raises(ValueError):
            weibull_draw(1.0, -1.0, make_rng(0))


class TestCompetingRisks:
    def test_exponential_race_fractions(self):
        rng = make_rng(2)
        rates = np.array([0.5, 0.2, 0.3])
        n = 100_000
        clocks = [weibull_draw(1.0, 1 / r, rng, size=n) for r in rates]
        which, t = _race(*clocks)
        freq = np.bincount(which, minlength=3) / n
        expected = oracles.exponential_race_probabilities(rates)
        se = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(freq - expected) < 4 * se)
        # the minimum of exponentials is exponential with the summed rate
        assert t.mean() == pytest.approx(1 / rates.sum(), rel=0.02)

    def test_infinite_clocks_never_win(self):
        which, _ = _race(np.array([np.inf, 1.0]), np.array([2.0, np.inf]), np.array([3.0, 0.5]))
        np.testing.assert_array_equal(which, [1, 2])


class TestInputs:
    def test_vector_roundtrip(self):
        x = NhmInputs().replace(onset_age=33.0, adenoma_prob=0.2)
        assert NhmInputs.from_vector(x.to_vector()) == x
        assert len(INPUT_NAMES) == 25

    @pytest.mark.parametrize("field,value", [("scale_a_to_b", 0.0), ("adenoma_prob", 1.5),
                                             ("onset_age", -1.0), ("prob_obstruction_c", np.nan)])
    def test_validation_names_field(self, field, value):
        with pytest.raises(InputValidationError, match=field):
            NhmInputs().replace(**{field: value}).validate()

    def test_unknown_field(self):
        with pytest.raises(InputValidationError):
            NhmInputs().replace(not_an_input=1.0)


class TestCohort:
    def test_deterministic(self):
        a = simulate_cohort(NhmInputs(), 500, seed=(3, 1))
        b = simulate_cohort(NhmInputs(), 500, seed=(3, 1))
        c = simulate_cohort(NhmInputs(), 500, seed=(3, 2))
        np.testing.assert_array_equal(a.death_age, b.death_age)
        np.testing.assert_array_equal(a.diag_age, b.diag_age)
        assert not np.array_equal(a.death_age, c.death_age)

    def test_histories_are_consistent(self):
        cohort = simulate_cohort(NhmInputs(adenoma_prob=0.9, scale_normal_to_low=20.0), 400, seed=7)
        for rec in cohort[:400]:
            ages = [e.age for e in rec.events]
            assert ages == sorted(ages)
            assert rec.events[-1].state == HealthState.DEAD
            assert sum(e.state == HealthState.DEAD for e in rec.events) == 1
            assert rec.events[-1].age == pytest.approx(rec.death_age)
            for d in rec.diagnoses:
                assert d.stage.is_cancer
                assert d.age <= rec.death_age
            for prev, nxt in zip(rec.events, rec.events[1:]):
                if nxt.state == HealthState.DEAD:
                    continue
                # either one step along the pathway or back to non-cancer after presentation
                assert nxt.state == prev.state + 1 or (nxt.state == HealthState.NON_CANCER and nxt.post_treatment)

    def test_no_adenomas_without_susceptibility(self):
        cohort = simulate_cohort(NhmInputs(adenoma_prob=0.0), 1000, seed=1)
        assert not cohort.adenoma_developed.any()
        assert cohort.diag_person.size == 0
        out = aggregate_outputs(cohort, R=2, seed=0)
        assert out.y1.sum() == 0 and out.y2.sum() == 0 and out.y3.sum() == 0 and out.y4.sum() == 0
        assert out.n4.sum() == 1000

    def test_no_adenoma_before_onset(self):
        cohort = simulate_cohort(NhmInputs(onset_age=40.0, adenoma_prob=1.0, scale_normal_to_low=5.0), 500, seed=4)
        first = cohort.event_age[(cohort.event_state == HealthState.LOW_ADENOMA)]
        assert first.size > 0 and first.min() >= 40.0

    def test_obstruction_only_for_later_stages(self):
        inputs = NhmInputs(adenoma_prob=1.0, scale_normal_to_low=15.0, prob_obstruction_b=1.0,
                           prob_obstruction_c=1.0, prob_obstruction_d=1.0)
        cohort = simulate_cohort(inputs, 2000, seed=5)
        stage_a = cohort.diag_stage == HealthState.DUKES_A
        assert not cohort.diag_obstructed[stage_a].any()
        assert cohort.diag_obstructed[~stage_a].all()

    def test_more_susceptibility_more_cancer(self):
        low = NhmSimulator(cohort_size=4000, n_randomizations=1)([20.0, 45.0, 0.1], seed=9)
        high = NhmSimulator(cohort_size=4000, n_randomizations=1)([20.0, 45.0, 0.8], seed=9)
        assert high.y2.sum() > 2 * low.y2.sum()
        assert high.y4.sum() > 2 * low.y4.sum()

    def test_record_roundtrip(self):
        cohort = simulate_cohort(NhmInputs(adenoma_prob=1.0), 50, seed=3)
        for rec in cohort[:50]:
            assert CohortRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec


def _person(death_age, diagnoses=(), final_state=HealthState.NON_CANCER):
    events = [Event(HealthState.NON_CANCER, 0.0, False)]
    if final_state != HealthState.NON_CANCER:
        events.append(Event(final_state, death_age - 1.0, False))
    events.append(Event(HealthState.DEAD, death_age, False))
    diags = [Diagnosis(HealthState(s), a, o) for s, a, o in diagnoses]
    return CohortRecord(events=events, death_age=death_age, diagnoses=diags)


class TestAggregation:
    def test_unit_counts(self):
        A, B, C, D = (HealthState.DUKES_A, HealthState.DUKES_B, HealthState.DUKES_C, HealthState.STAGE_D)
        people = [
            _person(80.0, [(A, 52.0, False)]),             # at risk, case
            _person(80.0, [(B, 57.0, True)]),              # at risk, diagnosed after the window
            _person(45.0),                                 # dead before 50: not at risk
            _person(51.0, [(C, 50.5, True), (D, 50.9, True)]),  # two diagnoses, one case
            _person(70.0, final_state=HealthState.LOW_ADENOMA),
            _person(60.0, final_state=HealthState.HIGH_ADENOMA),
        ]
        out = aggregate_outputs(people, R=2, population_age_proportions=ONE_HOT, seed=1)
        for r in range(2):
            assert out.n1[r, 10] == 5 and out.n1[r].sum() == 5
            assert out.y1[r, 10] == 2 and out.y1[r].sum() == 2
        np.testing.assert_array_equal(out.y2, [1, 1, 1, 1])
        np.testing.assert_array_equal(out.y3, [1, 1, 1])
        np.testing.assert_array_equal(out.n4, [2, 1, 1, 2])
        np.testing.assert_array_equal(out.y4, [0, 1, 1, 0])

    def test_window(self):
        people = [_person(80.0, [(HealthState.DUKES_A, 52.0, False)])]
        out = aggregate_outputs(people, population_age_proportions=ONE_HOT, window_years=1.0)
        assert out.y1.sum() == 0
        out = aggregate_outputs(people, population_age_proportions=ONE_HOT, window_years=3.0)
        assert out.y1.sum() == 1

    def test_randomizations_differ_and_conserve(self):
        cohort = simulate_cohort(NhmInputs(adenoma_prob=0.8), 3000, seed=2)
        out = aggregate_outputs(cohort, R=5, seed=3)
        assert len({tuple(row) for row in out.n1}) == 5
        assert np.all(out.n1.sum(axis=1) <= 3000)
        assert np.all(out.y1 <= out.n1)
        assert np.all(out.y3 <= out.y2[1:])
        assert out.n4.sum() == 3000
        # every diagnosed person is counted at most once per randomisation
        assert np.all(out.y1.sum(axis=1) <= np.unique(cohort.diag_person).size)

    def test_rejects_bad_proportions(self):
        with pytest.raises(ValueError):
            aggregate_outputs([_person(50.0)], population_age_proportions=(0.5,) * 18)

    def test_output_json_roundtrip(self):
        out = NhmSimulator(cohort_size=500, n_randomizations=3)([20.0, 45.0, 0.6], seed=0)
        back = SimulatorOutput.from_dict(json.loads(json.dumps(out.to_dict())))
        for name in ("y1", "n1", "y2", "y3", "y4", "n4"):
            np.testing.assert_array_equal(getattr(back, name), getattr(out, name))


class TestSimulator:
    def test_seeded_and_reproducible(self):
        sim = NhmSimulator(cohort_size=800)
        a, b = sim([25.0, 40.0, 0.5], (1, 2, 3)), sim([25.0, 40.0, 0.5], (1, 2, 3))
        assert a.to_dict() == b.to_dict()
        assert a.to_dict() != sim([25.0, 40.0, 0.5], (1, 2, 4)).to_dict()

    def test_hierarchical_keys_do_not_collide(self):
        draws = {make_rng(k).random() for k in [(5, 1), (5, 1, 0), (5, 1, 0, 0), 5]}
        assert len(draws) == 4

    def test_active_subset(self):
        sim = NhmSimulator(active=("adenoma_prob",), base=NhmInputs(onset_age=30.0))
        assert sim.inputs_at([0.3]) == NhmInputs(onset_age=30.0, adenoma_prob=0.3)
        with pytest.raises(InputValidationError):
            sim.inputs_at([0.3, 0.1])
        with pytest.raises(InputValidationError):
            NhmSimulator(active=("nope",))
