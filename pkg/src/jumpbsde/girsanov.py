"""Girsanov kernels, Doleans-Dade densities and tilted randomness.

Sign convention: a tilt with diffusion kernel ``beta`` and jump kernel
``delta`` defines the new measure through the density

    log H = int beta dW - 1/2 int |beta|^2 dt
            + int ln(1 + delta) dN - int delta nu(dz) dt,

so that ``W_new = W - int beta dt`` and ``nu_new = (1 + delta) nu``.
The physical-to-risk-neutral tilt of a diffusion market therefore carries
``beta = -theta`` with theta the market price of risk.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import DegenerateJumpModel, DensityOverflow, InvalidJumpKernel, SingularVolatility
from .paths import JumpSpec, PathBundle, _frozen

if TYPE_CHECKING:
    from .markets import MarketSpec


@dataclass(frozen=True)
class MeasureTilt:
    """Girsanov kernels of a change of measure.

    ``beta(t, x)`` maps a time and states ``(n, d)`` to ``(n, d)``;
    ``delta(z)`` maps jump sizes to kernel values. ``None`` means zero.
    """

    beta: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    delta: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = "P->P2"

    @classmethod
    def constant(cls, beta=None, delta=None, label: str = "P->P2") -> "MeasureTilt":
        beta_fn = None
        if beta is not None:
            b = np.atleast_1d(np.asarray(beta, dtype=float)).copy()
            beta_fn = lambda t, x: np.broadcast_to(b, x.shape)  # noqa: E731
            beta_fn.constant = b
        delta_fn = None
        if delta is not None:
            dv = float(delta)
            delta_fn = lambda z: np.full(np.shape(z), dv)  # noqa: E731
            delta_fn.constant = dv
        return cls(beta_fn, delta_fn, label)

    @property
    def is_zero_beta(self) -> bool:
        return self.beta is None

    @property
    def is_identity(self) -> bool:
        return self.beta is None and self.delta is None

    def beta_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.beta is None:
            return np.zeros_like(x)
        return np.broadcast_to(np.asarray(self.beta(t, x), dtype=float), x.shape)

    def delta_at(self, sizes: np.ndarray) -> np.ndarray:
        sizes = np.asarray(sizes, dtype=float)
        if self.delta is None:
            return np.zeros_like(sizes)
        return np.broadcast_to(np.asarray(self.delta(sizes), dtype=float), sizes.shape)

    def negated(self) -> "MeasureTilt":
        """Tilt with the diffusion kernel sign-flipped (jump kernel dropped)."""
        if self.beta is None:
            return replace(self, delta=None)
        beta = self.beta
        neg = lambda t, x: -np.asarray(beta(t, x), dtype=float)  # noqa: E731
        return MeasureTilt(neg, None, f"inverse({self.label})")

    def check_bounds(self, states: np.ndarray, times, sizes, rates, bound: float) -> None:
        """Sampled validation of the boundedness and positivity requirements."""
        delta = self.delta_at(sizes)
        if np.any(delta <= -1.0):
            raise InvalidJumpKernel(f"jump kernel must exceed -1 at every atom, got {delta}")
        if float(np.sum(delta**2 * np.asarray(rates))) > bound:
            raise InvalidJumpKernel("jump kernel second moment exceeds the configured bound")
        for t in np.atleast_1d(times):
            b = self.beta_at(float(t), states)
            if np.max(np.linalg.norm(b, axis=-1), initial=0.0) > bound:
                raise ValueError(f"|beta| exceeds the configured bound {bound} at t={t}")


@dataclass(frozen=True)
class DensityPath:
    values: np.ndarray
    log_values: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


def theta_kernel(market: "MarketSpec", t: float, state: np.ndarray) -> np.ndarray:
    """Market price of risk ``(Sigma rho_bar)^{-1} (mu - r_repo + k)``.

    ``state`` may be one state ``(d,)`` or a batch ``(n, d)``; the result has
    the same shape.
    """
    state = np.asarray(state, dtype=float)
    batch = np.atleast_2d(state)
    sigma = np.broadcast_to(market.sigma_at(t, batch), batch.shape)
    excess = np.broadcast_to(market.excess_drift_at(t, batch), batch.shape)
    if np.any(sigma == 0.0):
        raise SingularVolatility("zero volatility makes Sigma rho_bar singular")
    # (Sigma rho)^{-1} e solves rho * theta = e / sigma (lower-triangular rho)
    chol = market.corr_chol
    if abs(np.linalg.det(chol)) < 1e-12:
        raise SingularVolatility("correlation factor is singular")
    theta = np.linalg.solve(chol, (excess / sigma).T).T
    return theta.reshape(state.shape)


def stochastic_exponential(
    tilt: MeasureTilt,
    bundle: PathBundle,
    start: Optional[float] = None,
    end: Optional[float] = None,
) -> DensityPath:
    """Discrete Doleans-Dade exponential of ``tilt`` along ``bundle``.

    The density equals one at every node up to ``start`` and is frozen after
    ``end``. Uses the same increments and jump counts as the bundle.
    """
    grid = bundle.grid
    k0 = 0 if start is None else grid.index_of(start)
    k1 = grid.n_steps if end is None else grid.index_of(end)
    if k1 < k0:
        raise ValueError("end precedes start")
    dt = grid.dt
    times = grid.nodes
    n, N = bundle.n_paths, grid.n_steps
    steps = np.zeros((n, N))
    if not tilt.is_zero_beta:
        inc = bundle.increments
        states = bundle.states
        for k in range(k0, k1):
            b = tilt.beta_at(times[k], states[:, k])
            steps[:, k] = np.einsum("nj,nj->n", b, inc[:, k]) - 0.5 * np.einsum("nj,nj->n", b, b) * dt
    if tilt.delta is not None and bundle.n_atoms:
        delta = tilt.delta_at(bundle.jump_sizes)
        if np.any(delta <= -1.0):
            raise InvalidJumpKernel(f"jump kernel must exceed -1 at every atom, got {delta}")
        log1p = np.log1p(delta)
        # ln(1+d) dN - d lambda dt  ==  (ln(1+d) - d) lambda dt + ln(1+d) (dN - lambda dt)
        per_step = np.einsum("nkj,j->nk", bundle.jump_counts[:, k0:k1], log1p) - float(np.dot(delta, bundle.jump_rates)) * dt
        steps[:, k0:k1] += per_step
    log_h = np.zeros((n, N + 1))
    np.cumsum(steps, axis=1, out=log_h[:, 1:])
    if not np.isfinite(log_h).all():
        raise DensityOverflow("log density is not finite")
    with np.errstate(over="raise"):
        try:
            values = np.exp(log_h)
        except FloatingPointError as exc:
            raise DensityOverflow("density overflows float64") from exc
    return DensityPath(values=_frozen(values), log_values=_frozen(log_h))


def tilt_brownian(tilt: MeasureTilt, bundle: PathBundle) -> PathBundle:
    """Bundle whose increments are ``dW - beta(t_k, X_k) dt``.

    The shift is accumulated separately from the raw draws, so tilting by
    ``beta`` and then by ``-beta`` restores the original increments exactly.
    States are left untouched.
    """
    if tilt.is_zero_beta:
        return bundle
    dt = bundle.dt
    times = bundle.grid.nodes
    shift = np.empty(bundle.dW_raw.shape)
    for k in range(bundle.grid.n_steps):
        shift[:, k] = tilt.beta_at(times[k], bundle.states[:, k]) * dt
    total = -shift if bundle.drift_shift is None else bundle.drift_shift - shift
    return replace(bundle, drift_shift=_frozen(total), measure=tilt.label.split("->")[-1])


def tilt_compensator(tilt: MeasureTilt, jumps: JumpSpec) -> JumpSpec:
    """Jump spec with each atom's rate multiplied by ``1 + delta(z)``."""
    if tilt.delta is None or jumps.n_atoms == 0:
        return jumps
    delta = tilt.delta_at(jumps.sizes)
    if np.any(delta <= -1.0):
        raise InvalidJumpKernel(f"jump kernel must exceed -1 at every atom, got {delta}")
    return jumps.with_rates((1.0 + delta) * jumps.rates)


def pure_jump_girsanov_kernel(mu: float, r: float, alpha: float, lam: float) -> float:
    """Constant jump kernel making ``S/B`` a martingale for a Poisson asset

    with log-jump size ``alpha`` and intensity ``lam``.
    """
    if alpha == 0.0 or lam == 0.0:
        raise DegenerateJumpModel("jump size and intensity must be nonzero")
    delta = -(mu - r) / (np.expm1(alpha) * lam)
    if delta <= -1.0:
        raise InvalidJumpKernel(
            f"kernel {delta:.6f} <= -1: no equivalent martingale measure for mu={mu}, r={r}, "
            f"alpha={alpha}, lambda={lam}"
        )
    return float(delta)
