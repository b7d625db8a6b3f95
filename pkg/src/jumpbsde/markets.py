"""Collateralized multi-rate markets as BSDE problems.

Assets are simulated in log coordinates ``x = log S``. Prices are reported
from the buyer's side: with collateral level ``C = c(V)`` the value solves

    V_t = E[ B_t/B_T X + int_t^T B_t/B_u ((r - r_cb) C^+ - (r - r_cl) C^-) du ],

so that ``c(V) = V`` discounts at the collateral rate. The driver is not
evaluated at maturity, where all collateral has been returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .bsde import BsdeProblem, SolverConfig, ValueSurface, deflated_price, price_under_P, solve_backward
from .errors import InvalidMarket, InvalidNumeraire, SingularVolatility, UnsupportedConfiguration
from .girsanov import MeasureTilt, pure_jump_girsanov_kernel, stochastic_exponential, theta_kernel
from .paths import DiffusionSpec, JumpSpec, PathBundle, TimeGrid, simulate_paths

MEASURES = ("P", "Q", "gop")


def _vec(v, d: int, name: str) -> np.ndarray:
    a = np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
    if not np.all(np.isfinite(a)):
        raise InvalidMarket(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class MarketSpec:
    """Constant-coefficient market with ``d`` assets.

    A market is either a correlated geometric Brownian model or, with
    ``jump_intensity > 0`` and zero volatility, a single asset driven by a
    Poisson process with log-jump size ``jump_size``.
    ``r_repo``, ``r_cl`` and ``r_cb`` default to ``r``; ``rate_bound`` is the
    bound every rate must respect.
    """

    s0: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    r: float
    corr_chol: Optional[np.ndarray] = None
    r_repo: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    r_cl: Optional[float] = None
    r_cb: Optional[float] = None
    jump_size: float = 0.0
    jump_intensity: float = 0.0
    rate_bound: float = 1.0

    def __post_init__(self):
        s0 = np.atleast_1d(np.asarray(self.s0, dtype=float))
        d = s0.size
        if d < 1 or np.any(s0 <= 0) or not np.all(np.isfinite(s0)):
            raise InvalidMarket("initial prices must be positive and finite")
        sigma = _vec(self.sigma, d, "sigma")
        if np.any(sigma < 0):
            raise InvalidMarket("volatilities must be nonnegative")
        chol = np.eye(d) if self.corr_chol is None else np.asarray(self.corr_chol, dtype=float)
        if chol.shape != (d, d) or np.any(np.triu(chol, 1) != 0):
            raise InvalidMarket("corr_chol must be a lower-triangular d x d matrix")
        if not np.allclose(np.einsum("ij,ij->i", chol, chol), 1.0, atol=1e-12):
            raise InvalidMarket("rows of corr_chol must have unit norm")
        r = float(self.r)
        fields = {
            "s0": s0,
            "mu": _vec(self.mu, d, "mu"),
            "sigma": sigma,
            "corr_chol": chol,
            "r": r,
            "r_repo": _vec(r if self.r_repo is None else self.r_repo, d, "r_repo"),
            "k": _vec(0.0 if self.k is None else self.k, d, "k"),
            "r_cl": r if self.r_cl is None else float(self.r_cl),
            "r_cb": r if self.r_cb is None else float(self.r_cb),
        }
        for name, value in fields.items():
            object.__setattr__(self, name, value)
        rates = np.concatenate([[r, self.r_cl, self.r_cb], self.r_repo, self.k])
        if not np.all(np.abs(rates) <= self.rate_bound):
            raise InvalidMarket(f"rates and yields must be bounded by {self.rate_bound} in absolute value")
        if self.jump_intensity < 0:
            raise InvalidMarket("jump intensity must be nonnegative")
        if self.jump_intensity > 0:
            if d != 1 or np.any(sigma != 0):
                raise UnsupportedConfiguration("jump markets are single-asset and pure-jump")
            if self.jump_size == 0:
                raise InvalidMarket("jump size must be nonzero")

    @classmethod
    def two_asset(cls, s0, mu, sigma, rho: float, r: float, **kw) -> "MarketSpec":
        if abs(rho) > 1:
            raise InvalidMarket("|rho| must not exceed 1")
        chol = np.array([[1.0, 0.0], [rho, math.sqrt(max(1.0 - rho * rho, 0.0))]])
        return cls(s0=s0, mu=mu, sigma=sigma, r=r, corr_chol=chol, **kw)

    @property
    def d(self) -> int:
        return self.s0.size

    @property
    def is_pure_jump(self) -> bool:
        return self.jump_intensity > 0

    @property
    def jumps(self) -> JumpSpec:
        if not self.is_pure_jump:
            return JumpSpec.none()
        return JumpSpec.poisson(self.jump_intensity, self.jump_size)

    def sigma_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.sigma, x.shape)

    def excess_drift_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.mu - self.r_repo + self.k, x.shape)

    def bank(self, t) -> np.ndarray:
        return np.exp(self.r * np.asarray(t, dtype=float))

    def repo_account(self, t, i: int) -> np.ndarray:
        return np.exp(self.r_repo[i] * np.asarray(t, dtype=float))

    def diffusion(self, measure: str = "P") -> DiffusionSpec:
        """Log-price dynamics; jump compensation is added by the jump spec."""
        if measure == "P":
            drift = self.mu - 0.5 * self.sigma**2
            if self.is_pure_jump:
                a, lam = self.jump_size, self.jump_intensity
                drift = drift - (math.expm1(a) - a) * lam
        elif measure == "Q":
            if self.is_pure_jump:
                raise UnsupportedConfiguration("jump-market Q paths come from the tilted P model")
            drift = self.r_repo - self.k - 0.5 * self.sigma**2
        else:
            raise ValueError(f"unknown measure {measure!r}")
        return DiffusionSpec.constant(np.log(self.s0), drift, self.sigma, self.corr_chol)

    def jump_kernel(self) -> float:
        return pure_jump_girsanov_kernel(self.mu[0] + self.k[0], self.r_repo[0], self.jump_size,
                                         self.jump_intensity)

    def theta(self) -> np.ndarray:
        return theta_kernel(self, 0.0, self.s0)

    def simulate(self, measure: str, grid: TimeGrid, n_paths: int, seed: int, workers=None) -> PathBundle:
        """Shared-randomness bundle under ``P``, ``Q`` or ``numeraire:<i>`` (0-based)."""
        if measure in ("P", "gop"):
            return simulate_paths(self.diffusion("P"), self.jumps, grid, n_paths, seed, measure="P", workers=workers)
        if measure == "Q":
            if self.is_pure_jump:
                return simulate_paths(self.diffusion("P"), self.jumps, grid, n_paths, seed,
                                      tilt=market_tilt(self), measure="Q", workers=workers)
            return simulate_paths(self.diffusion("Q"), self.jumps, grid, n_paths, seed, measure="Q", workers=workers)
        if measure.startswith("numeraire:"):
            i = int(measure.split(":", 1)[1])
            tilt = numeraire_tilt(self, i)
            return simulate_paths(self.diffusion("Q"), self.jumps, grid, n_paths, seed, tilt=tilt,
                                  measure=measure, workers=workers)
        raise ValueError(f"unknown measure {measure!r}")


def market_tilt(market: MarketSpec) -> MeasureTilt:
    """Tilt from the physical measure to the risk-neutral one."""
    if market.is_pure_jump:
        return MeasureTilt.constant(delta=market.jump_kernel(), label="P->Q")
    if np.allclose(market.mu - market.r_repo + market.k, 0.0, atol=0.0):
        return MeasureTilt(label="P->Q")
    return MeasureTilt(lambda t, x: -theta_kernel(market, t, x), None, "P->Q")


def numeraire_tilt(market: MarketSpec, i: int) -> MeasureTilt:
    """Tilt from ``Q`` to the measure with asset ``i`` as numeraire."""
    _check_numeraire(market, i)
    b = market.sigma[i] * market.corr_chol[i]
    return MeasureTilt.constant(beta=b, label=f"Q->numeraire:{i}")


def _check_numeraire(market: MarketSpec, i) -> None:
    if not isinstance(i, (int, np.integer)) or not 0 <= i < market.d:
        raise InvalidNumeraire(f"numeraire must be 'bank' or an asset index in [0, {market.d}), got {i!r}")
    if market.is_pure_jump:
        raise UnsupportedConfiguration("numeraire change is implemented for diffusion markets")
    if market.k[i] != 0.0:
        raise InvalidNumeraire(f"asset {i} pays dividends, so its discounted price is not a martingale")
    if market.r_repo[i] != market.r:
        raise UnsupportedConfiguration(f"numeraire asset {i} needs its repo rate equal to r")


# --- contracts and collateral -------------------------------------------------


@dataclass(frozen=True)
class ContractSpec:
    """European claim paying ``payoff(S_T)`` to the buyer at ``maturity``."""

    payoff: Callable[[np.ndarray], np.ndarray]
    maturity: float = 1.0
    label: str = "custom"

    def terminal(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.payoff(np.exp(x)), dtype=float)


def _asset(s: np.ndarray, i: int) -> np.ndarray:
    return s[:, i]


PAYOFFS = {
    "call": lambda strike, asset=0: lambda s: np.maximum(_asset(s, asset) - strike, 0.0),
    "put": lambda strike, asset=0: lambda s: np.maximum(strike - _asset(s, asset), 0.0),
    "exchange": lambda long=0, short=1: lambda s: np.maximum(s[:, long] - s[:, short], 0.0),
    "identity": lambda asset=0: lambda s: _asset(s, asset).copy(),
    "constant": lambda value=1.0: lambda s: np.full(s.shape[0], float(value)),
}


def make_contract(kind: str, maturity: float = 1.0, **params) -> ContractSpec:
    try:
        factory = PAYOFFS[kind]
    except KeyError:
        raise ValueError(f"unknown payoff {kind!r}; known: {sorted(PAYOFFS)}") from None
    return ContractSpec(factory(**params), float(maturity), kind)


@dataclass(frozen=True)
class CollateralSpec:
    """Collateral level ``C = c(V)`` with Lipschitz constant ``lipschitz``."""

    c: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lipschitz: float = 0.0
    label: str = "none"

    @classmethod
    def none(cls) -> "CollateralSpec":
        return cls()

    @classmethod
    def full(cls) -> "CollateralSpec":
        return cls(lambda v: v, 1.0, "full")

    @classmethod
    def fraction(cls, kappa: float) -> "CollateralSpec":
        kappa = float(kappa)
        return cls(lambda v: kappa * v, abs(kappa), f"fraction:{kappa:g}")

    @property
    def is_zero(self) -> bool:
        return self.c is None

    def split(self, v: np.ndarray):
        """``(C^+, C^-)`` with ``C^+ - C^- = C`` and ``C^+ C^- = 0``."""
        c = np.zeros_like(v) if self.c is None else np.asarray(self.c(v), dtype=float)
        return np.maximum(c, 0.0), np.maximum(-c, 0.0)


COLLATERALS = {"none": CollateralSpec.none, "full": CollateralSpec.full, "fraction": CollateralSpec.fraction}


def collateral_driver(market: MarketSpec, coll: CollateralSpec):
    """``(r - r_cb) C^+ - (r - r_cl) C^-`` as a BSDE driver, or ``None``."""
    if coll.is_zero:
        return None
    a = market.r - market.r_cb
    b = market.r - market.r_cl
    if a == 0.0 and b == 0.0:
        return None

    def f(t, x, y, z, u):
        cp, cm = coll.split(y)
        return a * cp - b * cm

    return f


def build_collateral_bsde(market: MarketSpec, contract: ContractSpec, coll: CollateralSpec,
                          measure: str = "Q") -> BsdeProblem:
    """Value BSDE of a collateralized claim under ``P`` or ``Q``."""
    if measure not in ("P", "Q"):
        raise ValueError("measure must be 'P' or 'Q'")
    if not abs(market.r) <= market.rate_bound:
        raise InvalidMarket("funding rate exceeds its bound")
    tilt = market_tilt(market) if measure == "P" else MeasureTilt(label="Q->Q")
    return BsdeProblem(
        terminal=contract.terminal,
        driver=collateral_driver(market, coll),
        discount=market.r,
        tilt=tilt,
        label=f"{contract.label}/{coll.label}/{measure}",
    )


# --- quotes --------------------------------------------------------------------


@dataclass(frozen=True)
class Quote:
    """Price from one representation, with per-path contributions."""

    measure: str
    y0: float
    stderr: float
    contributions: np.ndarray
    gaps: tuple = ()
    surface: Optional[ValueSurface] = field(default=None, repr=False)

    @property
    def picard_iters(self) -> int:
        return len(self.gaps)

    def paired_stderr(self, other: "Quote") -> float:
        diff = self.contributions - other.contributions
        return float(np.std(diff) / math.sqrt(diff.size))


def _quote(measure: str, surface: ValueSurface, scale=1.0) -> Quote:
    return Quote(measure, scale * surface.y0, abs(scale) * surface.stderr, scale * surface.contributions,
                 surface.gaps, surface)


def _check_bundle(bundle: PathBundle, contract: ContractSpec, expected: str) -> None:
    if abs(bundle.grid.T - bundle.grid.t0 - contract.maturity) > 1e-12:
        raise ValueError("bundle horizon does not match the contract maturity")
    if bundle.measure != expected:
        raise ValueError(f"expected a bundle simulated under {expected}, got {bundle.measure}")


def price_P(market, contract, coll, bundle, cfg=SolverConfig()) -> Quote:
    """Density-weighted price on physical paths."""
    _check_bundle(bundle, contract, "P")
    problem = build_collateral_bsde(market, contract, coll, "P")
    density = stochastic_exponential(problem.tilt, bundle)
    return _quote("P", price_under_P(problem, bundle, density, cfg))


def price_P_bsde(market, contract, coll, bundle, cfg=SolverConfig()) -> Quote:
    """Backward solve of the physical-measure BSDE (linear tilt terms in the driver)."""
    _check_bundle(bundle, contract, "P")
    return _quote("P", solve_backward(build_collateral_bsde(market, contract, coll, "P"), bundle, cfg))


def price_Q(market, contract, coll, bundle, cfg=SolverConfig()) -> Quote:
    _check_bundle(bundle, contract, "Q")
    return _quote("Q", solve_backward(build_collateral_bsde(market, contract, coll, "Q"), bundle, cfg))


# --- hedges, dividends, GOP ------------------------------------------------------


@dataclass(frozen=True)
class Hedge:
    xi: np.ndarray   # (n, N, d) asset positions
    psi: np.ndarray  # (n, N, d) repo account units


def extract_hedge(surface: ValueSurface, market: MarketSpec, bundle: PathBundle) -> Hedge:
    """Asset positions from the controls and repo holdings ``psi = -xi S / B^i``."""
    N = bundle.grid.n_steps
    s = np.exp(bundle.states[:, :N])
    if market.is_pure_jump:
        xi = surface.U / (s * math.expm1(market.jump_size))
    else:
        if np.any(market.sigma == 0.0) or abs(np.linalg.det(market.corr_chol)) < 1e-12:
            raise SingularVolatility("diag(S) Sigma rho_bar is singular")
        # Z = xi diag(S) Sigma rho_bar  <=>  rho_bar^T (S sigma xi) = Z
        w = np.linalg.solve(market.corr_chol.T, surface.Z.reshape(-1, market.d).T).T
        xi = w.reshape(surface.Z.shape) / (s * market.sigma)
    times = bundle.grid.nodes[:N]
    repo = np.exp(np.outer(times, market.r_repo))
    psi = -xi * s / repo
    return Hedge(xi, psi)


def discounted_cum_dividend(market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """``S^i/B^i + int k^i S^i / B^i du`` per path and node (left-point rule)."""
    s = np.exp(bundle.states)
    repo = np.exp(np.outer(bundle.grid.nodes, market.r_repo))
    disc = s / repo
    out = disc.copy()
    out[:, 1:] += np.cumsum(market.k * disc[:, :-1] * bundle.dt, axis=1)
    return out


def _gop_log(market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    if market.is_pure_jump:
        raise UnsupportedConfiguration("the growth optimal portfolio is implemented for diffusion markets")
    times, dt = bundle.grid.nodes, bundle.dt
    inc = bundle.increments
    n, N = bundle.n_paths, bundle.grid.n_steps
    log_s = np.zeros((n, N + 1))
    for k in range(N):
        th = theta_kernel(market, times[k], bundle.states[:, k])
        step = (market.r + 0.5 * np.einsum("nj,nj->n", th, th)) * dt + np.einsum("nj,nj->n", th, inc[:, k])
        log_s[:, k + 1] = log_s[:, k] + step
    return log_s


def gop_path(market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """Growth optimal portfolio per path and node, started at one."""
    return np.exp(_gop_log(market, bundle))


def real_world_price(market, contract, coll, bundle, cfg=SolverConfig()) -> Quote:
    """Physical-measure price with the growth optimal portfolio as deflator."""
    _check_bundle(bundle, contract, "P")
    problem = build_collateral_bsde(market, contract, coll, "P")
    return _quote("gop", deflated_price(problem, bundle, -_gop_log(market, bundle), cfg))


# --- numeraire change ------------------------------------------------------------


def change_numeraire(problem: BsdeProblem, market: MarketSpec,
                     numeraire: Union[int, str, None] = "bank"):
    """Rewrite a risk-neutral problem relative to asset ``numeraire``.

    Returns the problem for ``Y / S^i`` under the new measure, together with
    the tilt from ``Q`` to that measure. With the bank account the problem is
    returned unchanged with a zero tilt. Prices follow as ``S^i_0 * y0``.
    """
    if numeraire in (None, "bank"):
        return problem, MeasureTilt(label="Q->Q")
    _check_numeraire(market, numeraire)
    if not problem.tilt.is_identity:
        raise UnsupportedConfiguration("numeraire change starts from a risk-neutral problem (zero tilt)")
    i = int(numeraire)
    r = market.r
    vol_row = market.sigma[i] * market.corr_chol[i]
    g, f, alpha = problem.terminal, problem.driver, problem.discount

    def terminal(x):
        return np.asarray(g(x), dtype=float) / np.exp(x[:, i])

    if callable(alpha):
        def discount(t, x):
            return np.asarray(alpha(t, x), dtype=float) - r
    else:
        discount = float(alpha) - r

    driver = None
    if f is not None:
        def driver(t, x, y, z, u):
            s = np.exp(x[:, i])
            return np.asarray(f(t, x, s * y, s[:, None] * (z + y[:, None] * vol_row), s * u), dtype=float) / s

    new = BsdeProblem(terminal, driver, discount, MeasureTilt(label=f"numeraire:{i}"), None,
                      f"{problem.label}/numeraire:{i}")
    return new, numeraire_tilt(market, i)


def price_numeraire(market, contract, coll, bundle, i: int, cfg=SolverConfig()) -> Quote:
    """Price via asset ``i`` as numeraire on a bundle from ``market.simulate``."""
    _check_bundle(bundle, contract, f"numeraire:{i}")
    problem, _ = change_numeraire(build_collateral_bsde(market, contract, coll, "Q"), market, i)
    return _quote(f"numeraire:{i}", solve_backward(problem, bundle, cfg), scale=float(market.s0[i]))


def exchange_option_numeraire_price(market: MarketSpec, coll: CollateralSpec, bundle: PathBundle,
                                    cfg=SolverConfig()) -> Quote:
    """Option to exchange asset 1 for asset 0 at the bundle horizon, priced with asset 1 as numeraire."""
    if market.d != 2:
        raise UnsupportedConfiguration("the exchange option needs exactly two assets")
    if market.r_repo[1] != market.r:
        raise UnsupportedConfiguration("the numeraire formula needs the second asset's repo rate equal to r")
    contract = make_contract("exchange", bundle.grid.T - bundle.grid.t0)
    return price_numeraire(market, contract, coll, bundle, 1, cfg)


def pure_jump_market_price(market, contract, coll, bundle, cfg=SolverConfig(), measure: str = "Q") -> Quote:
    """Pure-jump market price; ``P`` uses the density-weighted representation."""
    if not market.is_pure_jump:
        raise UnsupportedConfiguration("market has no jumps")
    market.jump_kernel()
    if measure == "P":
        return price_P(market, contract, coll, bundle, cfg)
    if measure == "Q":
        return price_Q(market, contract, coll, bundle, cfg)
    raise ValueError("measure must be 'P' or 'Q'")


def price(market, contract, coll, measure: str, bundle, cfg=SolverConfig()) -> Quote:
    """Dispatch on ``P``, ``Q``, ``gop`` or ``numeraire:<i>`` (0-based)."""
    if measure == "P":
        return price_P(market, contract, coll, bundle, cfg)
    if measure == "Q":
        return price_Q(market, contract, coll, bundle, cfg)
    if measure == "gop":
        return real_world_price(market, contract, coll, bundle, cfg)
    if measure.startswith("numeraire:"):
        return price_numeraire(market, contract, coll, bundle, int(measure.split(":", 1)[1]), cfg)
    raise ValueError(f"unknown measure {measure!r}")
