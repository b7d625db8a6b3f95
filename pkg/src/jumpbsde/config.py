"""Experiment configuration files.

The format is flat ``section.key = value`` lines. Values are JSON literals
(numbers, lists, quoted strings, true/false); anything that is not valid
JSON is taken as a bare string. ``#`` starts a comment. Example::

    model.s0 = [100, 100]
    model.sigma = [0.2, 0.3]
    model.rho = 0.5
    model.mu = [0.07, 0.04]
    model.r = 0.02
    contract.payoff = exchange
    contract.maturity = 1.0
    collateral.kind = none
    numerics.n_paths = 200000
    measures.list = ["Q", "numeraire:2"]

Asset indices in config files (``contract.asset``, ``numeraire:<i>``) are
1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bsde import SolverConfig
from .errors import ConfigError, JumpBsdeError
from .markets import COLLATERALS, PAYOFFS, CollateralSpec, ContractSpec, MarketSpec, make_contract

NUMBER = (int, float)

SCHEMA = {
    "model": {
        "s0": "vector", "mu": "vector", "sigma": "vector", "r": "number", "rho": "number",
        "corr_chol": "matrix", "r_repo": "vector", "k": "vector", "r_cl": "number", "r_cb": "number",
        "jump_size": "number", "jump_intensity": "number", "rate_bound": "number",
    },
    "contract": {
        "payoff": "string", "maturity": "number", "strike": "number", "asset": "integer",
        "long": "integer", "short": "integer", "value": "number",
    },
    "collateral": {"kind": "string", "kappa": "number"},
    "numerics": {
        "n_paths": "integer", "n_steps": "integer", "seed": "integer", "basis_degree": "integer",
        "picard_tol": "number", "picard_max": "integer",
    },
    "measures": {"list": "measures"},
}
REQUIRED_SECTIONS = ("model", "contract", "measures")
DEFAULTS = {"n_paths": 100_000, "n_steps": 100, "seed": 42, "basis_degree": 2, "picard_tol": 1e-6,
            "picard_max": 20}


@dataclass(frozen=True)
class ExperimentConfig:
    market: MarketSpec
    contract: ContractSpec
    collateral: CollateralSpec
    measures: tuple
    n_paths: int = DEFAULTS["n_paths"]
    n_steps: int = DEFAULTS["n_steps"]
    seed: int = DEFAULTS["seed"]
    basis_degree: int = DEFAULTS["basis_degree"]
    picard_tol: float = DEFAULTS["picard_tol"]
    picard_max: int = DEFAULTS["picard_max"]
    source: Optional[str] = None

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.basis_degree, self.picard_max, self.picard_tol)

    def with_overrides(self, n_paths=None, n_steps=None, seed=None, measures=None) -> "ExperimentConfig":
        changes = {k: v for k, v in dict(n_paths=n_paths, n_steps=n_steps, seed=seed).items() if v is not None}
        for key, v in changes.items():
            if v < (0 if key == "seed" else 1):
                raise ConfigError([f"{key}: must be {'nonnegative' if key == 'seed' else 'positive'}, got {v}"])
        if measures is not None:
            problems = []
            changes["measures"] = tuple(_check_measures(list(measures), self.market, problems, "--measure"))
            if problems:
                raise ConfigError(problems)
        return replace(self, **changes)


def internal_measure(label: str) -> str:
    """Config label (1-based numeraire index) to the 0-based library label."""
    if label.startswith("numeraire:"):
        return f"numeraire:{int(label.split(':', 1)[1]) - 1}"
    return label


def _coerce(kind: str, value):
    """Return the value converted to ``kind`` or raise TypeError."""
    if kind == "number":
        if isinstance(value, bool) or not isinstance(value, NUMBER):
            raise TypeError("expected a number")
        return float(value)
    if kind == "integer":
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise TypeError("expected an integer")
        return int(value)
    if kind == "string":
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if kind == "vector":
        arr = np.atleast_1d(np.asarray(value))
        if arr.ndim != 1 or arr.dtype.kind not in "if":
            raise TypeError("expected a number or a list of numbers")
        return arr.astype(float)
    if kind == "matrix":
        arr = np.asarray(value)
        if arr.ndim != 2 or arr.dtype.kind not in "if":
            raise TypeError("expected a list of lists of numbers")
        return arr.astype(float)
    if kind == "measures":
        items = value if isinstance(value, list) else [value]
        if not all(isinstance(v, str) for v in items) or not items:
            raise TypeError("expected a nonempty list of measure names")
        return items
    raise AssertionError(kind)


def read_entries(text: str, problems: list) -> dict:
    """``{(section, key): (value, line_no)}`` from the raw file text."""
    entries = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {no}: expected 'section.key = value'")
            continue
        name, rhs = (s.strip() for s in line.split("=", 1))
        if name.count(".") != 1:
            problems.append(f"line {no}: key {name!r} must look like section.key")
            continue
        section, key = name.split(".")
        try:
            value = json.loads(rhs)
        except json.JSONDecodeError:
            value = rhs
        if (section, key) in entries:
            problems.append(f"line {no}: duplicate key {name}")
        entries[(section, key)] = (value, no)
    return entries


def _check_measures(items, market: Optional[MarketSpec], problems: list, where: str) -> list:
    out = []
    for m in items:
        if m in ("P", "Q"):
            out.append(m)
            continue
        if m == "gop":
            if market is not None and market.is_pure_jump:
                problems.append(f"{where}: measure 'gop' is not available for a jump market")
            out.append(m)
            continue
        if m.startswith("numeraire:"):
            idx = m.split(":", 1)[1]
            if not idx.isdigit() or int(idx) < 1 or (market is not None and int(idx) > market.d):
                problems.append(f"{where}: numeraire index in {m!r} must be an asset number 1..d")
            elif market is not None and market.is_pure_jump:
                problems.append(f"{where}: numeraire measures are not available for a jump market")
            else:
                try:
                    if market is not None:
                        from .markets import numeraire_tilt

                        numeraire_tilt(market, int(idx) - 1)
                except JumpBsdeError as exc:
                    problems.append(f"{where}: {m}: {exc}")
            out.append(m)
            continue
        problems.append(f"{where}: unknown measure {m!r} (use P, Q, gop or numeraire:<i>)")
    return out


def parse_text(text: str, source: Optional[str] = None) -> ExperimentConfig:
    problems: list = []
    entries = read_entries(text, problems)
    values: dict = {s: {} for s in SCHEMA}
    lines: dict = {}
    for (section, key), (value, no) in entries.items():
        if section not in SCHEMA:
            problems.append(f"line {no}: unknown section {section!r}")
            continue
        kind = SCHEMA[section].get(key)
        if kind is None:
            problems.append(f"line {no}: unknown key {section}.{key}")
            continue
        try:
            values[section][key] = _coerce(kind, value)
            lines[(section, key)] = no
        except TypeError as exc:
            problems.append(f"line {no}: {section}.{key}: {exc}, got {value!r}")
    present = {s for (s, _) in entries}
    for s in REQUIRED_SECTIONS:
        if s not in present:
            problems.append(f"missing required section [{s}]")
    if problems and not (present >= set(REQUIRED_SECTIONS)):
        raise ConfigError(problems)

    def where(section, key):
        no = lines.get((section, key))
        return f"line {no}: {section}.{key}" if no else f"{section}.{key}"

    market = _build_market(values["model"], problems, where)
    contract = _build_contract(values["contract"], market, problems, where)
    collateral = _build_collateral(values["collateral"], problems, where)
    numerics = dict(DEFAULTS)
    numerics.update(values["numerics"])
    for key in ("n_paths", "n_steps", "picard_max", "picard_tol"):
        if not numerics[key] > 0:
            problems.append(f"{where('numerics', key)}: must be positive")
    for key in ("seed", "basis_degree"):
        if numerics[key] < 0:
            problems.append(f"{where('numerics', key)}: must be nonnegative")
    measures = _check_measures(values["measures"].get("list", []), market, problems, where("measures", "list"))
    if "list" not in values["measures"] and "measures" in present:
        problems.append("measures.list is required")
    if market is not None and market.is_pure_jump and "P" in measures:
        try:
            market.jump_kernel()
        except JumpBsdeError as exc:
            problems.append(f"model: {type(exc).__name__}: {exc}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(market, contract, collateral, tuple(measures), source=source, **numerics)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a config file; all problems are reported together."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    return parse_text(text, str(p))


def _build_market(model: dict, problems: list, where) -> Optional[MarketSpec]:
    missing = [k for k in ("s0", "r") if k not in model]
    if "mu" not in model:
        missing.append("mu")
    if missing:
        problems.extend(f"model.{k} is required" for k in missing)
        return None
    kw = dict(model)
    rho = kw.pop("rho", None)
    if "sigma" not in kw:
        kw["sigma"] = 0.0
    if rho is not None:
        if "corr_chol" in kw:
            problems.append(f"{where('model', 'rho')}: give either rho or corr_chol")
            return None
        d = np.atleast_1d(kw["s0"]).size
        if d != 2:
            problems.append(f"{where('model', 'rho')}: rho needs exactly two assets")
            return None
        if abs(rho) > 1:
            problems.append(f"{where('model', 'rho')}: |rho| must not exceed 1")
            return None
        kw["corr_chol"] = np.array([[1.0, 0.0], [rho, np.sqrt(max(1.0 - rho * rho, 0.0))]])
    try:
        return MarketSpec(**kw)
    except (JumpBsdeError, ValueError) as exc:
        problems.append(f"model: {type(exc).__name__}: {exc}")
        return None


def _build_contract(spec: dict, market, problems: list, where) -> Optional[ContractSpec]:
    kind = spec.get("payoff")
    if kind is None:
        problems.append("contract.payoff is required")
        return None
    if kind not in PAYOFFS:
        problems.append(f"{where('contract', 'payoff')}: unknown payoff {kind!r}; known: {', '.join(sorted(PAYOFFS))}")
        return None
    maturity = spec.get("maturity", 1.0)
    if not maturity > 0:
        problems.append(f"{where('contract', 'maturity')}: must be positive")
    d = market.d if market is not None else None
    params = {}
    allowed = {"call": ("strike", "asset"), "put": ("strike", "asset"), "exchange": ("long", "short"),
               "identity": ("asset",), "constant": ("value",)}[kind]
    for key, value in spec.items():
        if key in ("payoff", "maturity"):
            continue
        if key not in allowed:
            problems.append(f"{where('contract', key)}: not a parameter of payoff {kind!r}")
            continue
        if key in ("asset", "long", "short"):
            if d is not None and not 1 <= value <= d:
                problems.append(f"{where('contract', key)}: asset number must lie in 1..{d}")
            value = value - 1
        params[key] = value
    if kind in ("call", "put") and "strike" not in params:
        problems.append(f"contract.strike is required for payoff {kind!r}")
    if kind == "exchange" and d is not None and d < 2:
        problems.append("payoff 'exchange' needs two assets")
    try:
        return make_contract(kind, maturity, **params)
    except (TypeError, ValueError) as exc:
        problems.append(f"contract: {exc}")
        return None


def _build_collateral(spec: dict, problems: list, where) -> CollateralSpec:
    kind = spec.get("kind", "none")
    if kind not in COLLATERALS:
        problems.append(f"{where('collateral', 'kind')}: unknown collateral {kind!r}; known: "
                        f"{', '.join(sorted(COLLATERALS))}")
        return CollateralSpec.none()
    if kind == "fraction":
        if "kappa" not in spec:
            problems.append("collateral.kappa is required for kind 'fraction'")
            return CollateralSpec.none()
        return CollateralSpec.fraction(spec["kappa"])
    if "kappa" in spec:
        problems.append(f"{where('collateral', 'kappa')}: only used with kind 'fraction'")
    return COLLATERALS[kind]()
