"""Closed-form reference prices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr


def norm_cdf(x):
    """Standard normal distribution function."""
    out = ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class OracleResult:
    value: float
    formula_id: str
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.formula_id} produced a non-finite value for {self.inputs}")

    def __float__(self) -> float:
        return self.value


def margrabe(S1: float, S2: float, sigma1: float, sigma2: float, rho: float, T: float) -> float:
    """Price of the option to receive asset 1 in exchange for asset 2 at ``T``."""
    if sigma1 < 0 or sigma2 < 0 or abs(rho) > 1 or T <= 0:
        raise ValueError("need sigma >= 0, |rho| <= 1 and T > 0")
    if S1 <= 0:
        return 0.0
    if S2 <= 0:
        return float(S1)
    var = sigma1**2 + sigma2**2 - 2.0 * rho * sigma1 * sigma2
    if var <= 1e-300:
        return max(S1 - S2, 0.0)
    vol = math.sqrt(var * T)
    d1 = (math.log(S1 / S2) + 0.5 * var * T) / vol
    return S1 * norm_cdf(d1) - S2 * norm_cdf(d1 - vol)


def discount_bond(r: float, T: float) -> float:
    if T < 0:
        raise ValueError("T must be nonnegative")
    return math.exp(-r * T)


def black_scholes_call(S: float, K: float, r: float, sigma: float, T: float) -> float:
    if K <= 0:
        return float(S)
    df = math.exp(-r * T)
    if sigma <= 0 or T <= 0:
        return max(S - K * df, 0.0)
    vol = sigma * math.sqrt(T)
    d1 = (math.log(S / K) + (r + 0.5 * sigma**2) * T) / vol
    return S * norm_cdf(d1) - K * df * norm_cdf(d1 - vol)


def black_scholes_put(S: float, K: float, r: float, sigma: float, T: float) -> float:
    return black_scholes_call(S, K, r, sigma, T) - S + K * math.exp(-r * T)


def geometric_poisson_mean(S0: float, r: float, T: float) -> float:
    """Risk-neutral mean of an asset with drift ``r``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    return S0 * math.exp(r * T)


_FORMULAS = {
    "margrabe": margrabe,
    "discount_bond": discount_bond,
    "black_scholes_call": black_scholes_call,
    "black_scholes_put": black_scholes_put,
    "geometric_poisson_mean": geometric_poisson_mean,
}


def evaluate(formula_id: str, **inputs) -> OracleResult:
    """Evaluate a named formula and keep its inputs alongside the value."""
    try:
        fn = _FORMULAS[formula_id]
    except KeyError:
        raise KeyError(f"unknown oracle {formula_id!r}; known: {sorted(_FORMULAS)}") from None
    return OracleResult(float(fn(**inputs)), formula_id, dict(inputs))
