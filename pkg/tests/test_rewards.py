"""Reward algebra: closed-form values, monotonicity, and the mutual gate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpmlab.errors import DomainError
from fpmlab.rewards import (RewardMode, RewardWeights, Thresholds,
                            action_penalty, mutual_distance_reward, normalize,
                            sum_distance_reward, total_reward)

W = RewardWeights()
TH = Thresholds()
TOL = 1e-12

phis = st.floats(min_value=0.0, max_value=100.0, allow_nan=False)


class TestNormalize:
    def test_zero_distance(self):
        assert abs(normalize(0.0, 0.3) - 1.0) <= TOL

    def test_at_epsilon(self):
        assert abs(normalize(0.3, 0.3) - 0.5) <= TOL

    def test_three_epsilon(self):
        assert abs(normalize(0.9, 0.3) - 0.25) <= TOL

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            normalize(-0.1, 0.3)
        with pytest.raises(DomainError):
            normalize(0.1, 0.0)

    @given(phi1=phis, phi2=phis, eps=st.floats(min_value=1e-6, max_value=10))
    def test_strictly_decreasing_and_bounded(self, phi1, phi2, eps):
        lo, hi = sorted((phi1, phi2))
        r_lo, r_hi = normalize(lo, eps), normalize(hi, eps)
        assert 0.0 < r_hi <= r_lo <= 1.0
        if hi - lo > 1e-9 * (1.0 + hi):  # strict once distinguishable in float
            assert r_hi < r_lo


class TestMutualDistanceReward:
    def test_all_zero(self):
        assert abs(mutual_distance_reward(0, 0, 0, TH, W) - 9.0) <= TOL

    def test_all_at_epsilon(self):
        r = mutual_distance_reward(TH.pos, TH.ori, TH.fj, TH, W)
        assert abs(r - 2.25) <= TOL

    def test_orientation_lag_gates(self):
        r = mutual_distance_reward(0.0, 9 * TH.ori, 0.0, TH, W)
        assert abs(r - 0.63) <= TOL

    @given(p=phis, t=phis, j=phis)
    def test_monotone_in_each_distance(self, p, t, j):
        base = mutual_distance_reward(p, t, j, TH, W)
        for smaller in ((p * 0.5, t, j), (p, t * 0.5, j), (p, t, j * 0.5)):
            assert mutual_distance_reward(*smaller, TH, W) >= base - TOL

    @given(p=phis, j=phis,
           t=st.floats(min_value=0.9, max_value=100.0))
    def test_gating_bound(self, p, t, j):
        # φ_θ ≥ 9ε_ori caps the mutual reward at 10% of the weight mass.
        r = mutual_distance_reward(p, t, j, TH, W)
        assert r <= 0.1 * (W.w_p + W.w_theta + W.w_j) + TOL


class TestSumDistanceReward:
    def test_all_zero(self):
        assert abs(sum_distance_reward(0, 0, 0, TH, W) - 9.0) <= TOL

    def test_local_minimum_signature(self):
        r_sum = sum_distance_reward(0.0, 9 * TH.ori, 0.0, TH, W)
        r_mut = mutual_distance_reward(0.0, 9 * TH.ori, 0.0, TH, W)
        assert abs(r_sum - 6.3) <= TOL
        assert abs(r_mut - 0.63) <= TOL

    @given(p=phis, t=phis, j=phis)
    def test_sum_dominates_mutual(self, p, t, j):
        r_sum = sum_distance_reward(p, t, j, TH, W)
        r_mut = mutual_distance_reward(p, t, j, TH, W)
        assert 0.0 < r_mut <= r_sum + TOL
        assert r_sum <= W.w_p + W.w_theta + W.w_j + TOL


class TestActionPenalty:
    def test_zero(self):
        assert action_penalty(np.array([0.0, 0.0])) == 0.0

    def test_axis(self):
        assert abs(action_penalty(np.array([0.1, 0.0])) - 0.1) <= TOL

    def test_three_four_five(self):
        assert abs(action_penalty(np.array([0.06, 0.08])) - 0.1) <= TOL


class TestTotalReward:
    def test_success_at_goal(self):
        r = total_reward(RewardMode.MUTUAL, (0, 0, 0), np.zeros(2), True, TH, W)
        assert abs(r - 809.0) <= TOL

    def test_mutual_with_penalty(self):
        r = total_reward(RewardMode.MUTUAL, (TH.pos, TH.ori, TH.fj),
                         np.array([0.1, 0.0]), False, TH, W)
        assert abs(r - 2.249) <= TOL

    def test_sum_with_penalty(self):
        r = total_reward(RewardMode.SUM, (TH.pos, TH.ori, TH.fj),
                         np.array([0.1, 0.0]), False, TH, W)
        assert abs(r - 4.499) <= TOL

    @given(p=phis, t=phis, j=phis,
           ax=st.floats(-0.1, 0.1), az=st.floats(-0.1, 0.1),
           success=st.booleans())
    def test_pure_function(self, p, t, j, ax, az, success):
        args = (RewardMode.MUTUAL, (p, t, j), np.array([ax, az]), success, TH, W)
        assert total_reward(*args) == total_reward(*args)


class TestThresholds:
    def test_defaults(self):
        assert (TH.pos, TH.ori, TH.fj) == (0.05, 0.1, 0.2)

    def test_scaled(self):
        s = TH.scaled(2.0)
        assert (s.pos, s.ori, s.fj) == (0.1, 0.2, 0.4)

    def test_positive_required(self):
        with pytest.raises(Exception):
            Thresholds(pos=0.0)
