from __future__ import annotations

import csv
import io
import json

import pytest

from delayhedge.cli import (
    CONVERGE_COLUMNS,
    ExperimentConfig,
    execute,
    main,
    parse_config,
    run_converge,
)
from delayhedge.errors import ConfigError
from delayhedge.model import PayoffSpec

CALL = {"kind": "call", "params": {"K": 1.0}}


def _cfg(**kw) -> str:
    base = {"command": "superhedge", "s": 1.0, "sigma": 0.2, "n": 4, "H": 1, "payoff": CALL}
    base.update(kw)
    return json.dumps(base)


def test_minimal_config_parses_with_defaults():
    cfg = parse_config(_cfg())
    assert cfg.model().n == 4 and cfg.model().H == 1
    assert cfg.payoff == PayoffSpec.call(1.0)
    assert cfg.seed == 0 and cfg.threads == 1 and cfg.method == "auto"


def test_round_trip():
    cfg = parse_config(
        _cfg(command="converge", sweep={"n": [4, 6], "H": [1]}, pde={"n_y": 401}, schedule={"partition": [0, 1], "rho": ["max"]})
    )
    assert parse_config(cfg.to_json()) == cfg
    assert parse_config(cfg.to_json()).config_hash == cfg.config_hash


def test_synonym_suggestion():
    text = json.dumps({"command": "gexp", "s": 1.0, "volatility": 0.2, "payoff": CALL})
    with pytest.raises(ConfigError, match="did you mean 'sigma'"):
        parse_config(text)


def test_close_misspelling_suggestion():
    with pytest.raises(ConfigError, match="did you mean 'payoff'"):
        parse_config(json.dumps({"command": "gexp", "s": 1.0, "sigma": 0.2, "payof": CALL}))


@pytest.mark.parametrize(
    "text,pattern",
    [
        ("{not json", "malformed JSON"),
        ("[1, 2]", "JSON object"),
        (json.dumps({"command": "gexp", "s": 1.0, "payoff": CALL}), "missing required field 'sigma'"),
        (_cfg(n=0), "n must be >= 1"),
        (_cfg(H=-1), "H must be >= 0"),
        (_cfg(s=-1.0), "s must be > 0"),
        (_cfg(n=2.5), "must be an integer"),
        (_cfg(sigma="0.2"), "must be a number"),
        (_cfg(command="solve"), "unknown command"),
        (_cfg(payoff={"kind": "straddle"}), "straddle"),
        (_cfg(pde={"ny": 11}), "did you mean 'n_y'"),
        (_cfg(command="converge"), "'sweep'"),
        (_cfg(command="converge", sweep={"n": [4, 30], "H": [0]}), "<= 14"),
        (_cfg(dp={"m": 0}), "dp.m"),
        (_cfg(method="mc"), "method"),
    ],
)
def test_diagnostics_are_distinct(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_n_required_for_superhedge_only():
    with pytest.raises(ConfigError, match="'n'"):
        parse_config(json.dumps({"command": "superhedge", "s": 1.0, "sigma": 0.2, "payoff": CALL}))
    parse_config(json.dumps({"command": "gexp", "s": 1.0, "sigma": 0.2, "payoff": CALL}))


def test_superhedge_output():
    out = json.loads(execute(parse_config(_cfg())))
    assert out["gap"] <= 1e-7
    assert len(out["config_sha256"]) == 64


def test_gexp_and_envelope_outputs():
    g = json.loads(execute(parse_config(_cfg(command="gexp"))))
    assert g["value"] == pytest.approx(0.11246, abs=1e-4)
    e = json.loads(execute(parse_config(_cfg(command="envelope", trials=1000))))
    assert e["V"] == pytest.approx(1.0) and e["gamma"] == pytest.approx(1.0)
    assert e["verification"]["max_shortfall"] <= 1e-10


def test_lookback_gexp_goes_through_dp():
    text = _cfg(command="gexp", payoff={"kind": "lookback_max"}, dp={"m": 8, "L": 2})
    out = json.loads(execute(parse_config(text)))
    assert out["scheme"] == "control_dp"


def test_construct_output():
    out = json.loads(execute(parse_config(_cfg(command="construct", n=36))))
    assert out["residual_max"] <= 1e-12
    assert 0 < out["expectation"] < 1


def _sweep(payoff=CALL, **kw):
    return parse_config(
        _cfg(command="converge", sweep={"n": [4, 6, 8], "H": [0, 1]}, payoff=payoff, **kw)
    )


def test_converge_is_byte_identical_across_threads():
    cfg = _sweep()
    a = run_converge(cfg, threads=1)
    b = run_converge(cfg, threads=2)
    assert a == b
    assert a.startswith(f"# config_sha256={cfg.config_hash}\n")


def test_converge_table_contents():
    rows = list(csv.DictReader(io.StringIO(run_converge(_sweep()).split("\n", 1)[1])))
    assert list(rows[0]) == CONVERGE_COLUMNS
    assert [(r["n"], r["H"]) for r in rows] == [(str(n), str(H)) for H in (0, 1) for n in (4, 6, 8)]
    for r in rows:
        assert float(r["duality_gap"]) <= 1e-7
        assert float(r["abs_gap"]) == pytest.approx(abs(float(r["V_n"]) - float(r["G_value"])))
        # n < 16 has no block plan at H = 1; at H = 0 the construction is the CRR measure
        if r["H"] == "0":
            assert float(r["lower_bound_from_construct"]) <= float(r["V_n"]) + 1e-8
        else:
            assert r["lower_bound_from_construct"] == ""
        assert r["errors"] == ""


def test_converge_terminal_price_rows():
    stock = {"kind": "custom_terminal", "params": {"points": [[0, 0], [1, 1]]}, "asymptotic_slope": 1.0}
    rows = list(csv.DictReader(io.StringIO(run_converge(_sweep(payoff=stock)).split("\n", 1)[1])))
    for r in rows:
        assert float(r["V_n"]) == pytest.approx(1.0, abs=1e-9)
        assert float(r["G_value"]) == pytest.approx(1.0, abs=1e-9)


def test_main_exit_codes(tmp_path, capsys):
    def run(text, command):
        p = tmp_path / "cfg.json"
        p.write_text(text)
        return main([command, "--config", str(p)])

    assert run(_cfg(), "superhedge") == 0
    assert json.loads(capsys.readouterr().out)["V_n"] > 0
    assert run(_cfg(volatility=0.2), "superhedge") == 2
    assert "did you mean 'sigma'" in capsys.readouterr().err
    assert run(_cfg(n=15), "superhedge") == 3
    assert run(_cfg(command="construct", n=16, sigma=1.5), "construct") == 4
    assert "numerical failure" in capsys.readouterr().err
    assert run(_cfg(), "gexp") == 2
    assert main(["gexp", "--config", str(tmp_path / "missing.json")]) == 2


def test_main_writes_out_file_and_seed_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(_cfg(command="envelope", trials=500))
    out = tmp_path / "res.json"
    assert main(["envelope", "--config", str(cfg), "--out", str(out), "--seed", "7"]) == 0
    data = json.loads(out.read_text())
    assert data["verification"]["seed"] == 7


def test_config_dataclass_is_frozen():
    cfg = parse_config(_cfg())
    with pytest.raises(Exception):
        cfg.n = 5  # type: ignore[misc]
    assert isinstance(cfg, ExperimentConfig)
