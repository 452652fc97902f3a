from __future__ import annotations

import math

import numpy as np
import pytest

from delayhedge.errors import CapacityError, ConfigError, PayoffError
from delayhedge.gexp import (
    GExpProblem,
    MarkovLift,
    PdeGrid,
    brute_force_control_oracle,
    bs_closed_form,
    bsb_pde_price,
    control_dp_price,
)
from delayhedge.model import ModelSpec, PayoffSpec

from oracles import bs_call, bs_call_atm, monte_carlo_max

CALL = PayoffSpec.call(1.0)
STOCK = PayoffSpec.custom_terminal([(0.0, 0.0), (1.0, 1.0)], asymptotic_slope=1.0)
SB = 0.2 * math.sqrt(2)


def test_bs_atm_example():
    assert bs_closed_form("call", 1.0, 1.0, SB) == pytest.approx(bs_call_atm(SB), abs=1e-14)
    assert bs_closed_form("call", 1.0, 1.0, SB) == pytest.approx(0.1125, abs=1e-4)


@pytest.mark.parametrize("s,K,vol", [(1.0, 0.8, 0.3), (1.0, 1.3, 0.5), (2.0, 1.0, 0.1)])
def test_bs_against_erf_oracle_and_parity(s, K, vol):
    c = bs_closed_form("call", s, K, vol)
    assert c == pytest.approx(bs_call(s, K, vol), abs=1e-13)
    assert c - bs_closed_form("put", s, K, vol) == pytest.approx(s - K, abs=1e-14)


def test_bs_degenerate_inputs():
    assert bs_closed_form("call", 1.2, 1.0, 0.0) == pytest.approx(0.2)
    assert bs_closed_form("call", 1.2, 0.0, 0.3) == pytest.approx(1.2)
    with pytest.raises(ConfigError):
        bs_closed_form("digital", 1.0, 1.0, 0.2)


def test_problem_from_model_uses_delay_volatility():
    prob = GExpProblem.from_model(ModelSpec(1.0, 0.2, 10, H=1), CALL)
    assert prob.sigma_bar == pytest.approx(SB)


def test_pde_call_matches_closed_form():
    res = bsb_pde_price(GExpProblem(1.0, SB, CALL))
    assert abs(res.value / bs_closed_form("call", 1.0, 1.0, SB) - 1) <= 1e-3
    assert 0 < res.cfl_margin < 1
    assert not res.degraded


def test_pde_concave_payoff_is_not_lifted():
    # min(x, 1): concave, so zero volatility is optimal
    capped = PayoffSpec.custom_terminal([(0.0, 0.0), (1.0, 1.0), (100.0, 1.0)], asymptotic_slope=0.0)
    res = bsb_pde_price(GExpProblem(1.0, SB, capped))
    assert abs(res.value - 1.0) <= 1e-3


def test_pde_peak_butterfly_keeps_peak_value():
    fly = PayoffSpec.butterfly(0.8, 1.0, 1.2)
    res = bsb_pde_price(GExpProblem(1.0, SB, fly))
    assert res.value == pytest.approx(0.2, abs=1e-6)


def test_pde_off_peak_butterfly_is_lifted():
    fly = PayoffSpec.butterfly(0.8, 1.0, 1.2)
    v = bsb_pde_price(GExpProblem(0.9, SB, fly)).value
    # above the intrinsic value and at least the constant full-volatility price
    assert 0.1 < v < 0.2
    assert v >= bs_closed_form("call", 0.9, 0.8, SB) - 2 * bs_closed_form("call", 0.9, 1.0, SB) + bs_closed_form(
        "call", 0.9, 1.2, SB
    ) - 1e-4


def test_pde_grid_refinement_converges():
    prob = GExpProblem(1.0, SB, CALL)
    exact = bs_closed_form("call", 1.0, 1.0, SB)
    coarse = abs(bsb_pde_price(prob, PdeGrid(n_y=201)).value - exact)
    fine = abs(bsb_pde_price(prob, PdeGrid(n_y=801)).value - exact)
    assert fine < coarse


def test_pde_rejects_unstable_grid():
    with pytest.raises(ConfigError, match="CFL"):
        bsb_pde_price(GExpProblem(1.0, SB, CALL), PdeGrid(n_t=10))


def test_pde_rejects_path_dependent_and_discontinuous():
    with pytest.raises(PayoffError, match="control_dp_price"):
        bsb_pde_price(GExpProblem(1.0, SB, PayoffSpec.lookback_max()))
    with pytest.raises(PayoffError):
        bsb_pde_price(GExpProblem(1.0, SB, PayoffSpec.digital_strict(1.0)))


def test_pde_monotone_in_volatility_bound():
    vals = [bsb_pde_price(GExpProblem(1.0, sb, PayoffSpec.put(1.1))).value for sb in (0.1, 0.2, 0.4)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[0] >= 0.1 - 1e-12


def test_grid_validation():
    with pytest.raises(ConfigError):
        PdeGrid(n_y=800)
    with pytest.raises(ConfigError):
        PdeGrid(scheme="implicit")


# -- control DP ---------------------------------------------------------------


def test_dp_terminal_price_is_martingale():
    res = control_dp_price(GExpProblem(1.3, SB, STOCK), m=16, L=4)
    assert res.value == pytest.approx(1.3, rel=1e-12)


def test_dp_call_close_to_pde():
    prob = GExpProblem(1.0, SB, CALL)
    dp = control_dp_price(prob, m=64, L=8).value
    pde = bsb_pde_price(prob).value
    assert abs(dp / pde - 1) <= 0.02


def test_dp_call_increases_toward_limit_with_m():
    prob = GExpProblem(1.0, SB, CALL)
    vals = [control_dp_price(prob, m=m, L=4).value for m in (8, 16, 32)]
    limit = bs_closed_form("call", 1.0, 1.0, SB)
    gaps = [limit - v for v in vals]
    assert all(g > 0 for g in gaps)
    assert gaps[0] > gaps[1] > gaps[2]


def test_dp_lookback_against_monte_carlo():
    # the max is convex in the path, so full volatility is the optimal control
    m = 32
    prob = GExpProblem(1.0, SB, PayoffSpec.lookback_max())
    dp = control_dp_price(prob, m=m, L=8).value
    mc, se = monte_carlo_max(1.0, SB, m, 1_000_000, seed=1)
    assert abs(dp / mc - 1) <= 0.03
    assert se < 1e-3


def test_dp_asian_reports_interpolation_tolerance():
    res = control_dp_price(GExpProblem(1.0, SB, PayoffSpec.asian_call(1.0)), m=8, L=2)
    assert res.interp_tol >= 0
    assert res.grid["lift"] == "running_trapezoid"
    assert 0 < res.value < bsb_pde_price(GExpProblem(1.0, SB, CALL)).value


def test_lift_name_must_match_payoff():
    with pytest.raises(ConfigError):
        control_dp_price(GExpProblem(1.0, SB, PayoffSpec.lookback_max()), lift=MarkovLift("terminal"), m=4, L=2)


@pytest.mark.parametrize("payoff", [PayoffSpec.lookback_max(), PayoffSpec.asian_call(0.9)])
def test_lift_path_evaluation_matches_payoff(payoff):
    rng = np.random.default_rng(4)
    lift = MarkovLift.for_payoff(payoff)
    for _ in range(20):
        prices = np.exp(np.cumsum(np.concatenate([[0.0], rng.normal(0, 0.1, 9)])))
        assert lift.evaluate_path(prices, payoff) == pytest.approx(payoff.evaluate_paths(prices[None])[0], abs=1e-13)


# -- brute force --------------------------------------------------------------


def test_brute_force_one_step():
    # one step, L = 1: max(f(s), p f(s e^d) + (1 - p) f(s e^-d)) with d = sigma_bar
    prob = GExpProblem(1.0, SB, CALL)
    u, d = math.exp(SB), math.exp(-SB)
    p = (1 - d) / (u - d)
    assert brute_force_control_oracle(prob, 1, 1) == pytest.approx(p * (u - 1), abs=1e-14)


def test_brute_force_terminal_price():
    assert brute_force_control_oracle(GExpProblem(1.1, SB, STOCK), 4, 2) == pytest.approx(1.1, rel=1e-12)


@pytest.mark.parametrize(
    "payoff", [CALL, PayoffSpec.butterfly(0.8, 1.0, 1.2), PayoffSpec.lookback_max(), PayoffSpec.asian_call(1.0)]
)
def test_brute_force_agrees_with_dp(payoff):
    prob = GExpProblem(1.0, SB, payoff)
    dp = control_dp_price(prob, m=4, L=2)
    bf = brute_force_control_oracle(prob, 4, 2)
    assert abs(dp.value - bf) <= dp.interp_tol + 1e-12


def test_brute_force_capacity_guard():
    with pytest.raises(CapacityError):
        brute_force_control_oracle(GExpProblem(1.0, SB, CALL), 9, 2)
    with pytest.raises(CapacityError):
        brute_force_control_oracle(GExpProblem(1.0, SB, CALL), 4, 4)
