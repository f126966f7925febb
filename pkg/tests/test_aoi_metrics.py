import numpy as np
import pytest
from hypothesis import given, strategies as st

from race_wfl.aoi_metrics import (
    RoundLedger, csv_header, csv_row, objective_term, objective_value,
    reward, update_aoi, update_aoi_vector,
)


class TestUpdateAoi:
    def test_selection_resets_to_zero(self):
        assert update_aoi(123.4, True, 9.9) == 0.0

    def test_unselected_accumulates_delay(self):
        assert update_aoi(5.0, False, 2.0) == 7.0

    def test_never_selected_telescopes(self):
        delays = [0.3, 1.2, 0.0, 2.5]
        age = 0.0
        for d in delays:
            age = update_aoi(age, False, d)
        assert age == pytest.approx(sum(delays), rel=1e-15)

    @given(prev=st.floats(0, 1e6), delay=st.floats(0, 1e3),
           sel=st.booleans())
    def test_recursion_cases(self, prev, delay, sel):
        got = update_aoi(prev, sel, delay)
        assert got == (0.0 if sel else prev + delay)

    def test_vector_path_matches_scalar(self):
        rng = np.random.default_rng(0)
        prev = rng.uniform(0, 10, size=12)
        sel = rng.random(12) < 0.3
        delay = 0.7
        vec = update_aoi_vector(prev, sel, delay)
        scal = [update_aoi(p, s, delay) for p, s in zip(prev, sel)]
        assert vec == pytest.approx(scal, rel=0, abs=0)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            update_aoi(-1.0, False, 0.0)
        with pytest.raises(ValueError):
            update_aoi(0.0, False, -0.5)


class TestReward:
    def test_ideal_round_scores_zero(self):
        assert reward(np.zeros(5), np.zeros(5), 1.0, 10.0, 5, 4) == 0.0

    def test_arithmetic_case(self):
        aoi = np.array([4.0, 6.0])
        got = reward(aoi, np.zeros(2), 1.0, 0.0, 5, 2)
        assert got == pytest.approx(-1.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = rng.integers(1, 30)
            aoi = rng.uniform(0, 5, size=n)
            drift = rng.uniform(0, 1, size=n)
            alpha, beta = rng.uniform(0, 3, size=2)
            m, k = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            expected = 0.0
            for i in range(n):
                expected += alpha * aoi[i] + beta * drift[i] ** 2
            expected = -expected / (m * k)
            assert reward(aoi, drift, alpha, beta, m, k) == \
                pytest.approx(expected, rel=1e-12)

    def test_monotone_in_age_and_drift(self):
        base_aoi = np.array([1.0, 2.0])
        base_drift = np.array([0.1, 0.2])
        r0 = reward(base_aoi, base_drift, 1.0, 10.0, 5, 2)
        assert reward(base_aoi + 0.5, base_drift, 1.0, 10.0, 5, 2) < r0
        assert reward(base_aoi, base_drift + 0.1, 1.0, 10.0, 5, 2) < r0

    def test_dominating_trajectory_scores_higher(self):
        better = reward(np.array([1.0, 1.0]), np.array([0.1, 0.1]),
                        1.0, 10.0, 5, 2)
        worse = reward(np.array([2.0, 1.5]), np.array([0.3, 0.2]),
                       1.0, 10.0, 5, 2)
        assert better > worse


class TestObjective:
    def _ledger(self, t, aoi, drift, alpha=1.0, beta=10.0):
        n = len(aoi)
        return RoundLedger(
            round_index=t, aoi=np.asarray(aoi, dtype=float),
            drift=np.asarray(drift, dtype=float),
            assignment=np.zeros((2, n), dtype=int), round_delay=0.1,
            rewards=np.zeros(2),
            objective_term=objective_term(aoi, drift, alpha, beta),
        )

    def test_single_round(self):
        led = self._ledger(0, [1.0, 2.0], [0.5, 0.25])
        expected = 1.0 * 3.0 + 10.0 * 0.75
        assert objective_value([led]) == pytest.approx(expected)

    def test_beta_zero_reduces_to_sum_aoi(self):
        leds = [self._ledger(t, [t + 1.0, 2 * t], [0.3, 0.4]) for t in
                range(5)]
        got = objective_value(leds, alpha=1.0, beta=0.0)
        expected = sum((t + 1.0) + 2 * t for t in range(5))
        assert got == pytest.approx(expected)

    def test_recompute_matches_recorded_terms(self):
        rng = np.random.default_rng(7)
        leds = [self._ledger(t, rng.uniform(0, 5, 4), rng.uniform(0, 1, 4))
                for t in range(10)]
        assert objective_value(leds) == pytest.approx(
            objective_value(leds, alpha=1.0, beta=10.0), rel=1e-15)

    def test_linear_and_squared_drift_never_conflated(self):
        # the cumulative objective is linear in drift, the reward squares
        # it; on any drift not in {0, 1} the two weighting styles differ
        drift = np.array([0.5, 0.5])
        aoi = np.zeros(2)
        obj = objective_term(aoi, drift, 0.0, 1.0)
        rew_weight = -reward(aoi, drift, 0.0, 1.0, 1, 1)
        assert obj != rew_weight


class TestLedgerAndCsv:
    def make_ledger(self):
        assignment = np.zeros((2, 4), dtype=int)
        assignment[0, 1] = 1
        assignment[1, 3] = 1
        aoi = np.array([1.5, 0.0, 2.5, 0.0])
        drift = np.array([0.1, 0.2, 0.3, 0.4])
        return RoundLedger(
            round_index=3, aoi=aoi, drift=drift, assignment=assignment,
            round_delay=0.25, rewards=np.array([-1.0, -1.0]),
            objective_term=objective_term(aoi, drift, 1.0, 10.0),
        )

    def test_validate_passes_on_consistent_ledger(self):
        self.make_ledger().validate()

    def test_validate_rejects_selected_device_with_age(self):
        led = self.make_ledger()
        led.aoi[1] = 0.5
        with pytest.raises(ValueError):
            led.validate()

    def test_csv_row_matches_header_width(self):
        led = self.make_ledger()
        header = csv_header(4, 2)
        row = csv_row(0, led, 12.5)
        assert len(header.split(",")) == len(row.split(","))

    def test_csv_serializes_17_significant_digits(self):
        led = self.make_ledger()
        led.aoi[0] = 1.0 / 3.0
        row = csv_row(0, led, 0.0)
        assert "0.33333333333333331" in row

    def test_csv_reports_idle_agents(self):
        led = self.make_ledger()
        led.assignment[1, :] = 0
        row = csv_row(0, led, 0.0).split(",")
        header = csv_header(4, 2).split(",")
        assert row[header.index("device_of_agent_1")] == "-1"
