from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayhedge.errors import CapacityError, ConfigError, PayoffError
from delayhedge.model import (
    InterpolatedPath,
    ModelSpec,
    PayoffSpec,
    all_stock_paths,
    crr_measure,
    crr_path_probabilities,
    crr_price,
    path_from_moves,
    payoff_eval,
    payoff_vector,
    prefix,
    stock_path,
)

from oracles import crr_backward


def test_single_up_step():
    spec = ModelSpec(1.0, 0.2, 1)
    assert stock_path(spec, path_from_moves([1])) == pytest.approx([1.0, math.exp(0.2)], abs=1e-15)


def test_up_down_returns_to_spot():
    spec = ModelSpec(1.0, 0.2, 2)
    path = stock_path(spec, path_from_moves([1, -1]))
    assert path[1] == pytest.approx(math.exp(0.2 / math.sqrt(2)), abs=1e-15)
    assert path[2] == pytest.approx(1.0, abs=1e-15)


def test_four_step_terminal():
    spec = ModelSpec(100.0, 0.3, 4)
    path = stock_path(spec, path_from_moves([1, 1, -1, 1]))
    assert path[-1] == pytest.approx(100.0 * math.exp(0.3), rel=1e-14)


def test_path_encoding_prefix():
    path = path_from_moves([1, -1, 1, 1])
    assert path == 0b1101
    assert prefix(path, 2) == 0b01
    assert prefix(path, 0) == 0


@pytest.mark.parametrize("kw", [dict(s=0, sigma=0.2, n=1), dict(s=1, sigma=0, n=1), dict(s=1, sigma=0.2, n=0), dict(s=1, sigma=0.2, n=2, H=-1)])
def test_model_rejects_bad_inputs(kw):
    with pytest.raises(ConfigError):
        ModelSpec(**kw)


def test_sigma_bar_is_derived():
    spec = ModelSpec(1.0, 0.2, 4, H=3)
    assert spec.sigma_bar == pytest.approx(0.4)


def test_payoff_examples():
    spec = ModelSpec(1.0, 0.2, 1)
    up = path_from_moves([1])
    assert payoff_eval(spec, PayoffSpec.call(1.0), up) == pytest.approx(math.exp(0.2) - 1, abs=1e-15)
    two = ModelSpec(1.0, 0.2, 2)
    ud = path_from_moves([1, -1])
    assert payoff_eval(two, PayoffSpec.lookback_max(), ud) == pytest.approx(math.exp(0.2 / math.sqrt(2)))
    assert PayoffSpec.asian_call(0.0).evaluate_paths([[1.0, 1.0, 1.0]])[0] == pytest.approx(1.0)


def test_asian_uses_trapezoid_of_interpolated_path():
    prices = np.array([[1.0, 2.0, 4.0]])
    # integral of the piecewise-linear path on [0, 1]: (1.5 + 3) / 2
    assert PayoffSpec.asian_call(0.0).evaluate_paths(prices)[0] == pytest.approx(2.25)
    assert InterpolatedPath(prices[0]).integral() == pytest.approx(2.25)


def test_crr_probability_examples():
    spec = ModelSpec(1.0, 0.2, 4)
    p = crr_measure(spec)
    assert p == pytest.approx(0.47502, abs=1e-5)
    a = spec.log_step
    assert p * math.exp(a) + (1 - p) * math.exp(-a) == pytest.approx(1.0, abs=1e-15)
    assert crr_measure(ModelSpec(1.0, 1e-6, 1)) == pytest.approx(0.5, abs=1e-6)


def test_log_increments_and_positivity():
    spec = ModelSpec(1.0, 0.3, 8)
    prices = all_stock_paths(spec)
    assert (prices > 0).all()
    steps = np.abs(np.diff(np.log(prices), axis=1))
    assert np.allclose(steps, spec.log_step, atol=1e-14)


def test_put_call_parity_on_every_path():
    spec = ModelSpec(1.0, 0.25, 8)
    K = 1.05
    c = payoff_vector(spec, PayoffSpec.call(K))
    p = payoff_vector(spec, PayoffSpec.put(K))
    ST = all_stock_paths(spec)[:, -1]
    assert np.abs(c - p + K - ST).max() < 1e-14


def test_interpolated_max_equals_node_max():
    for n in range(1, 11):
        prices = all_stock_paths(ModelSpec(1.0, 0.2, n))
        t = np.linspace(0, 1, 20 * n + 1)
        for row in prices[:: max(1, prices.shape[0] // 64)]:
            path = InterpolatedPath(row)
            assert path(t).max() == pytest.approx(path.max(), abs=1e-15)
            assert PayoffSpec.lookback_max().evaluate_paths(row[None])[0] == path.max()


@pytest.mark.parametrize("n", [1, 5, 12])
def test_crr_martingale(n):
    spec = ModelSpec(1.0, 0.2, n)
    q = crr_path_probabilities(spec)
    prices = all_stock_paths(spec)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.abs(q @ prices - 1.0).max() < 1e-12


@pytest.mark.parametrize(
    "payoff",
    [PayoffSpec.call(1.0), PayoffSpec.put(0.95), PayoffSpec.butterfly(0.8, 1.0, 1.2)],
)
def test_crr_price_matches_recursive_oracle(payoff):
    spec = ModelSpec(1.0, 0.2, 9)
    ref = crr_backward(1.0, 0.2, 9, lambda x: float(payoff.terminal(x)))
    assert crr_price(spec, payoff) == pytest.approx(ref, abs=1e-14)


def test_crr_price_path_dependent_matches_enumeration():
    spec = ModelSpec(1.0, 0.2, 8)
    payoff = PayoffSpec.lookback_max()
    ref = crr_path_probabilities(spec) @ payoff_vector(spec, payoff)
    assert crr_price(spec, payoff) == pytest.approx(ref, abs=1e-14)


def test_custom_terminal_extrapolation_flag():
    payoff = PayoffSpec.custom_terminal([(0.9, 0.0), (1.1, 0.2)], asymptotic_slope=1.0)
    assert payoff.terminal(1.3) == pytest.approx(0.4)
    assert payoff.terminal(0.5) == pytest.approx(0.0)
    assert payoff.extrapolated([0.5, 1.0])
    assert not payoff.extrapolated([1.0])


def test_payoff_validation():
    with pytest.raises(ConfigError):
        PayoffSpec("straddle", {"K": 1.0})
    with pytest.raises(ConfigError):
        PayoffSpec.butterfly(1.0, 0.9, 1.2)
    with pytest.raises(ConfigError):
        PayoffSpec("call", {"K": 1.0, "X": 2})
    with pytest.raises(ConfigError):
        PayoffSpec.custom_terminal([(0, 0), (1, 1)], asymptotic_slope=None)
    with pytest.raises(PayoffError):
        PayoffSpec.digital_strict(1.0).require_continuous()


def test_payoff_round_trip():
    for payoff in [
        PayoffSpec.call(1.0),
        PayoffSpec.butterfly(0.8, 1.0, 1.2),
        PayoffSpec.asian_call(1.0),
        PayoffSpec.custom_terminal([(0, 1.0), (2, 0.0)], 0.0),
    ]:
        assert PayoffSpec.from_dict(payoff.to_dict()) == payoff


def test_enumeration_budget():
    with pytest.raises(CapacityError):
        all_stock_paths(ModelSpec(1.0, 0.2, 25))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**10 - 1), st.floats(0.05, 1.0))
def test_stock_path_matches_enumeration(n, raw, sigma):
    spec = ModelSpec(1.0, sigma, n)
    path = raw % (1 << n)
    assert np.allclose(stock_path(spec, path), all_stock_paths(spec)[path], rtol=1e-14)
