"""Command-line front end: ``delayhedge <command> --config cfg.json [--out PATH]``.

Exit codes: 0 success, 2 configuration error, 3 capacity error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .dualconstruct import VolSchedule, build_measure, construct_lower_bound, evaluate_expectation
from .envelope import DelayBsParams, PayoffCurve, concave_envelope, delay_bs_price, verify_buy_and_hold
from .errors import CapacityError, ConfigError, DelayHedgeError, NumericalError
from .gexp import GExpProblem, MarkovLift, PdeGrid, bsb_pde_price, control_dp_price
from .model import ModelSpec, PayoffSpec
from .superhedge import MAX_STEPS, super_replication_price

log = logging.getLogger(__name__)

COMMANDS = ("superhedge", "gexp", "envelope", "construct", "converge")

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_NUMERICAL = 0, 2, 3, 4

# common misspellings that difflib would not catch
SYNONYMS = {
    "volatility": "sigma",
    "vol": "sigma",
    "spot": "s",
    "s0": "s",
    "price": "s",
    "steps": "n",
    "delay": "H",
    "h_steps": "H",
    "drift": "mu",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed experiment. Defaults: H = 0, seed = 0, threads = 1, method = "auto".

    ``pde``: {width = 6, n_y = 801, n_t = null}; ``dp``: {m = 64, L = 8,
    n_stat = null}; ``schedule``: constant rho = "max"; ``sweep``:
    {n: [...], H: [...]}; ``mu`` = 0 and ``h`` = 0.1 (years) for the
    envelope verifier with ``trials`` = 100000 draws.
    """

    command: str
    s: float
    sigma: float
    payoff: PayoffSpec
    n: int | None = None
    H: int = 0
    method: str = "auto"
    pde: dict = field(default_factory=dict)
    dp: dict = field(default_factory=dict)
    schedule: dict | None = None
    sweep: dict | None = None
    mu: float = 0.0
    h: float = 0.1
    trials: int = 100_000
    seed: int = 0
    threads: int = 1
    out: str | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, PayoffSpec) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def config_hash(self) -> str:
        """sha256 of the result-determining fields; ``threads`` and ``out`` are left out."""
        data = {k: v for k, v in self.to_dict().items() if k not in ("threads", "out")}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def model(self, n: int | None = None, H: int | None = None) -> ModelSpec:
        n = self.n if n is None else n
        if n is None:
            raise ConfigError(f"command {self.command!r} needs 'n'")
        return ModelSpec(self.s, self.sigma, n, self.H if H is None else H)

    def pde_grid(self) -> PdeGrid:
        return PdeGrid(**self.pde)

    def dp_params(self) -> dict:
        return {"m": 64, "L": 8, "n_stat": None} | self.dp

    def vol_schedule(self) -> VolSchedule:
        if self.schedule is None:
            return VolSchedule.constant("max")
        return VolSchedule.from_dict(self.schedule)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_REQUIRED = ("command", "s", "sigma", "payoff")
_NESTED_KEYS = {
    "pde": {"width", "n_y", "n_t", "cfl_fraction"},
    "dp": {"m", "L", "n_stat"},
    "sweep": {"n", "H"},
}


def _suggest(key: str, options) -> str:
    if key.lower() in SYNONYMS:
        return f"; did you mean {SYNONYMS[key.lower()]!r}?"
    close = difflib.get_close_matches(key, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _check_keys(data: dict, allowed, where: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}{_suggest(key, allowed)}")


def _number(data: dict, key: str, kind=float):
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"field {key!r} must be a number, got {v!r}")
    if kind is int:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"field {key!r} must be an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(f"field {key!r} must be finite")
    return float(v)


def parse_config(text: str, command: str | None = None) -> ExperimentConfig:
    """Strict JSON parsing; every problem raises ConfigError with its own message."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    if command is not None:
        if data.setdefault("command", command) != command:
            raise ConfigError(f"config is for command {data['command']!r}, not {command!r}")
    _check_keys(data, _FIELDS, "config")
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required field {key!r}")
    if data["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {data['command']!r}; expected one of {COMMANDS}")
    cmd = data["command"]
    if cmd in ("superhedge", "construct") and "n" not in data:
        raise ConfigError(f"missing required field 'n' for command {cmd!r}")
    if cmd == "converge" and "sweep" not in data:
        raise ConfigError("missing required field 'sweep' for command 'converge'")
    kw: dict[str, Any] = {"command": cmd}
    kw["s"] = _number(data, "s")
    kw["sigma"] = _number(data, "sigma")
    if kw["s"] <= 0:
        raise ConfigError(f"s must be > 0, got {kw['s']}")
    if kw["sigma"] <= 0:
        raise ConfigError(f"sigma must be > 0, got {kw['sigma']}")
    if not isinstance(data["payoff"], dict):
        raise ConfigError("payoff must be an object")
    kw["payoff"] = PayoffSpec.from_dict(data["payoff"])
    for key, lo in (("n", 1), ("H", 0), ("trials", 1), ("threads", 1), ("seed", 0)):
        if key in data and data[key] is not None:
            v = _number(data, key, int)
            if v < lo:
                raise ConfigError(f"{key} must be >= {lo}, got {v}")
            kw[key] = v
    for key in ("mu", "h"):
        if key in data:
            kw[key] = _number(data, key)
    if "h" in kw and kw["h"] <= 0:
        raise ConfigError(f"h must be > 0, got {kw['h']}")
    if "method" in data:
        if data["method"] not in ("auto", "pde", "dp"):
            raise ConfigError(f"method must be 'auto', 'pde' or 'dp', got {data['method']!r}")
        kw["method"] = data["method"]
    for key, allowed in _NESTED_KEYS.items():
        if key in data and data[key] is not None:
            if not isinstance(data[key], dict):
                raise ConfigError(f"{key} must be an object")
            _check_keys(data[key], allowed, key)
            kw[key] = dict(data[key])
    if "sweep" in kw:
        for key in ("n", "H"):
            vals = kw["sweep"].get(key)
            if not isinstance(vals, list) or not vals or not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
                raise ConfigError(f"sweep.{key} must be a non-empty list of integers")
        if min(kw["sweep"]["n"]) < 1 or min(kw["sweep"]["H"]) < 0:
            raise ConfigError("sweep values out of range (n >= 1, H >= 0)")
        if max(kw["sweep"]["n"]) > MAX_STEPS:
            raise ConfigError(f"sweep n values must be <= {MAX_STEPS}")
    if data.get("schedule") is not None:
        if not isinstance(data["schedule"], dict):
            raise ConfigError("schedule must be an object")
        VolSchedule.from_dict(data["schedule"])
        kw["schedule"] = dict(data["schedule"])
    if data.get("out") is not None:
        kw["out"] = str(data["out"])
    for key in ("m", "L", "n_stat"):
        v = kw.get("dp", {}).get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
            raise ConfigError(f"dp.{key} must be a positive integer, got {v!r}")
    cfg = ExperimentConfig(**kw)
    cfg.pde_grid()
    return cfg


# -- commands -----------------------------------------------------------------


def g_value(cfg: ExperimentConfig, H: int) -> float:
    """Scaling-limit price at sigma sqrt(H + 1): PDE for terminal payoffs, DP otherwise."""
    problem = GExpProblem(cfg.s, cfg.sigma * math.sqrt(H + 1), cfg.payoff)
    return _gexp(cfg, problem)["value"]


def _gexp(cfg: ExperimentConfig, problem: GExpProblem) -> dict:
    method = cfg.method
    if method == "auto":
        method = "pde" if problem.payoff.is_terminal else "dp"
    if method == "pde":
        return bsb_pde_price(problem, cfg.pde_grid()).to_json()
    dp = cfg.dp_params()
    lift = MarkovLift.for_payoff(problem.payoff, dp["n_stat"])
    return control_dp_price(problem, lift, dp["m"], dp["L"]).to_json()


def run_superhedge(cfg: ExperimentConfig) -> dict:
    return super_replication_price(cfg.model(), cfg.payoff).to_json()


def run_gexp(cfg: ExperimentConfig) -> dict:
    return _gexp(cfg, GExpProblem(cfg.s, cfg.sigma * math.sqrt(cfg.H + 1), cfg.payoff))


def run_envelope(cfg: ExperimentConfig) -> dict:
    curve = PayoffCurve.from_payoff(cfg.payoff)
    params = DelayBsParams(cfg.s, cfg.sigma, cfg.mu, cfg.h)
    V, gamma = delay_bs_price(curve, params)
    env = concave_envelope(curve)
    out: dict[str, Any] = {
        "V": V if math.isfinite(V) else None,
        "gamma": gamma if math.isfinite(gamma) else None,
        "finite": env.finite,
        "hull_vertices": env.vertices(),
        "asymptotic_slope": env.slope if math.isfinite(env.slope) else None,
    }
    if env.finite:
        out["verification"] = verify_buy_and_hold(curve, params, cfg.trials, cfg.seed).to_json()
    return out


def run_construct(cfg: ExperimentConfig) -> dict:
    return construct_lower_bound(cfg.model(), cfg.vol_schedule(), cfg.payoff).to_json()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _converge_row(cfg: ExperimentConfig, n: int, H: int, g: float | None, g_err: str | None) -> list[str]:
    errors = [g_err] if g_err else []
    V = gap = lower = None
    spec = None
    try:
        spec = ModelSpec(cfg.s, cfg.sigma, n, H)
        res = super_replication_price(spec, cfg.payoff)
        V, gap = res.value, res.gap
    except DelayHedgeError as exc:
        errors.append(f"superhedge: {exc}")
    if spec is not None:
        try:
            measure = build_measure(spec, cfg.vol_schedule())
            lower = evaluate_expectation(spec, measure, cfg.payoff)
        except ConfigError:
            # n too small for a block plan: no bound in this row
            lower = None
        except DelayHedgeError as exc:
            errors.append(f"construct: {exc}")
    abs_gap = abs(V - g) if V is not None and g is not None else None
    return [str(n), str(H), _fmt(V), _fmt(gap), _fmt(g), _fmt(abs_gap), _fmt(lower), "; ".join(errors)]


CONVERGE_COLUMNS = ["n", "H", "V_n", "duality_gap", "G_value", "abs_gap", "lower_bound_from_construct", "errors"]


def run_converge(cfg: ExperimentConfig, threads: int | None = None) -> str:
    """CSV of V_n against the scaling limit; rows in config order."""
    if cfg.sweep is None:
        raise ConfigError("converge needs a sweep")
    Hs = list(dict.fromkeys(cfg.sweep["H"]))
    limits: dict[int, tuple[float | None, str | None]] = {}
    for H in Hs:
        try:
            limits[H] = (g_value(cfg, H), None)
        except DelayHedgeError as exc:
            limits[H] = (None, f"gexp: {exc}")
    jobs = [(n, H) for H in cfg.sweep["H"] for n in cfg.sweep["n"]]
    workers = threads or cfg.threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda job: _converge_row(cfg, job[0], job[1], *limits[job[1]]), jobs))
    buf = io.StringIO()
    buf.write(f"# config_sha256={cfg.config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CONVERGE_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


RUNNERS = {
    "superhedge": run_superhedge,
    "gexp": run_gexp,
    "envelope": run_envelope,
    "construct": run_construct,
}


def execute(cfg: ExperimentConfig) -> str:
    if cfg.command == "converge":
        return run_converge(cfg)
    result = RUNNERS[cfg.command](cfg)
    result["config_sha256"] = cfg.config_hash
    return json.dumps(result, indent=2, sort_keys=True) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delayhedge", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", help="output path (default: stdout)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, help="worker threads for sweeps")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, args.command)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            overrides["threads"] = args.threads
        if args.out is not None:
            overrides["out"] = args.out
        cfg = dataclasses.replace(cfg, **overrides)
        output = execute(cfg)
        if cfg.out:
            with open(cfg.out, "w", encoding="utf-8") as fh:
                fh.write(output)
        else:
            sys.stdout.write(output)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
