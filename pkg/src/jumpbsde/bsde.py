"""Backward solver for BSDEs with jumps: regression Monte Carlo plus Picard.

A problem is written relative to the measure its bundle was sampled under::

    -dY = (f(t, X, Y, Z, <U, w>) - alpha Y + beta.Z + sum_j U_j delta_j lambda_j) dt
          - Z dW - sum_j U_j dN~_j,          Y_T = g(X_T).

``Z`` is taken against the independent Brownian increments of the bundle
(before correlation), ``U`` holds one value per jump atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import PicardDiverged
from .girsanov import DensityPath, MeasureTilt
from .paths import PathBundle
from .regression import Projection

Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BsdeProblem:
    """Terminal condition, driver, discount rate and Girsanov kernels.

    Parameters
    ----------
    terminal : callable
        ``g(x)`` for states ``(n, d)``, returns ``(n,)``.
    driver : callable, optional
        ``f(t, x, y, z, u)`` per year with ``y`` shape ``(n,)``, ``z`` shape
        ``(n, d)`` and ``u`` the weighted jump control ``(n,)``.
        ``None`` means ``f = 0``.
    discount : float or callable
        ``alpha``; a callable takes ``(t, x)`` and returns ``(n,)``.
    tilt : MeasureTilt
        Kernels ``beta`` and ``delta`` of the linear terms.
    u_weights : array, optional
        Per-atom weights forming the driver's fourth argument. Defaults to
        ``delta(z_j) lambda_j`` with the bundle's rates.
    """

    terminal: Callable[[np.ndarray], np.ndarray]
    driver: Optional[Driver] = None
    discount: Union[float, Callable[[float, np.ndarray], np.ndarray]] = 0.0
    tilt: MeasureTilt = field(default_factory=lambda: MeasureTilt(label="P->P"))
    u_weights: Optional[np.ndarray] = None
    label: str = ""

    def without_tilt(self) -> "BsdeProblem":
        return replace(self, tilt=MeasureTilt(label="P->P"))

    def alpha_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if callable(self.discount):
            return np.broadcast_to(np.asarray(self.discount(t, x), dtype=float), (x.shape[0],))
        return np.full(x.shape[0], float(self.discount))


@dataclass(frozen=True)
class SolverConfig:
    basis_degree: int = 2
    picard_max: int = 20
    picard_tol: float = 1e-6
    clip: Optional[tuple] = None

    def __post_init__(self):
        if self.basis_degree < 0:
            raise ValueError("basis_degree must be >= 0")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be >= 1")


@dataclass(frozen=True)
class ValueSurface:
    """Solution estimates on every path and node.

    ``contributions`` are per-path pathwise targets whose mean is ``y0``;
    ``stderr`` is their standard error.
    """

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    y0: float
    stderr: float
    contributions: np.ndarray
    gaps: tuple = ()

    @property
    def picard_iters(self) -> int:
        return len(self.gaps)


@dataclass(frozen=True)
class ContractionReport(Sequence):
    """Gap sequence ``|y0^(n) - y0^(n-1)|`` of a Picard run."""

    gaps: tuple
    converged: bool

    def __len__(self):
        return len(self.gaps)

    def __getitem__(self, i):
        return self.gaps[i]

    def contracting_after(self, start: int = 2) -> bool:
        """Whether gaps strictly decrease from 1-based iteration ``start`` on."""
        tail = self.gaps[max(start - 1, 0):]
        return all(b < a for a, b in zip(tail, tail[1:]))


def _check_grid(bundle: PathBundle, extra) -> None:
    if extra is not None and extra.shape[:2] != (bundle.n_paths, bundle.grid.n_steps + 1):
        raise ValueError("deflator does not match the bundle grid")


def _sweep(problem, bundle, cfg, ratio_at, with_tilt_terms, y_prev):
    """One backward pass. ``ratio_at(k, x)`` is the one-step deflator ``(n,)``."""
    grid = bundle.grid
    n, N, d, m = bundle.n_paths, grid.n_steps, bundle.dim, bundle.n_atoms
    dt = grid.dt
    times = grid.nodes
    states = bundle.states
    inc = bundle.increments
    rates = bundle.jump_rates
    comp = bundle.compensated_jumps if m else None
    delta = problem.tilt.delta_at(bundle.jump_sizes) if m else np.zeros(0)
    jump_w = delta * rates
    u_w = jump_w if problem.u_weights is None else np.asarray(problem.u_weights, dtype=float)
    active = rates > 0

    Y = np.empty((n, N + 1))
    Z = np.zeros((n, N, d))
    U = np.zeros((n, N, m))
    Y[:, N] = np.asarray(problem.terminal(states[:, N]), dtype=float)
    T = Y[:, N].copy()
    for k in range(N - 1, -1, -1):
        x = states[:, k]
        proj = Projection(x, cfg.basis_degree)
        ratio = ratio_at(k, x)
        target = ratio * T
        fitted = proj.fit(np.stack([target, Y[:, k + 1]], axis=1))
        cont = fitted[:, 0]
        resid = Y[:, k + 1] - fitted[:, 1]
        cols = [resid[:, None] * inc[:, k]]
        if m:
            cols.append(resid[:, None] * comp[:, k])
        second = proj.fit(np.concatenate(cols, axis=1))
        z = second[:, :d] / dt
        u = np.zeros((n, m))
        if m:
            u[:, active] = second[:, d:][:, active] / (rates[active] * dt)
        Z[:, k] = z
        U[:, k] = u

        drive = np.zeros(n)
        if problem.driver is not None:
            y_arg = cont if y_prev is None else y_prev[:, k]
            drive = drive + np.asarray(problem.driver(times[k], x, y_arg, z, u @ u_w), dtype=float)
        if with_tilt_terms:
            if not problem.tilt.is_zero_beta:
                drive = drive + np.einsum("nj,nj->n", problem.tilt.beta_at(times[k], x), z)
            if m and np.any(jump_w):
                drive = drive + u @ jump_w
        y = cont + drive * dt
        if cfg.clip is not None:
            y = np.clip(y, *cfg.clip)
        Y[:, k] = y
        T = target + drive * dt
    y0 = float(np.mean(T))
    stderr = float(np.std(T) / math.sqrt(n))
    return Y, Z, U, y0, stderr, T


def _picard(problem, bundle, cfg, ratio_at, with_tilt_terms, raise_on_fail=True):
    with np.errstate(over="ignore", invalid="ignore"):
        Y, Z, U, y0, se, T = _sweep(problem, bundle, cfg, ratio_at, with_tilt_terms, None)
    if problem.driver is None:
        # nothing depends on the previous iterate: the next sweep is identical
        return ValueSurface(Y, Z, U, y0, se, T, (0.0,)), True
    gaps = []
    converged = False
    for _ in range(cfg.picard_max):
        with np.errstate(over="ignore", invalid="ignore"):
            Y, Z, U, y_new, se, T = _sweep(problem, bundle, cfg, ratio_at, with_tilt_terms, Y)
        gap = abs(y_new - y0)
        gaps.append(gap if math.isfinite(gap) else math.inf)
        y0 = y_new
        if not math.isfinite(gap):
            break
        if gap < cfg.picard_tol:
            converged = True
            break
    if not converged and raise_on_fail:
        raise PicardDiverged(gaps)
    return ValueSurface(Y, Z, U, y0, se, T, tuple(gaps)), converged


def _discount_ratio(problem, bundle):
    times, dt = bundle.grid.nodes, bundle.dt

    def ratio(k, x):
        return np.exp(-problem.alpha_at(times[k], x) * dt)

    return ratio


def solve_backward(problem: BsdeProblem, bundle: PathBundle, cfg: SolverConfig = SolverConfig()) -> ValueSurface:
    """Backward regression solve of ``problem`` on ``bundle``.

    Discounting uses the exact one-step factor ``exp(-alpha dt)``. Driver
    terms in ``Y`` use the previous Picard iterate; the first sweep uses the
    continuation value instead.
    """
    surface, _ = _picard(problem, bundle, cfg, _discount_ratio(problem, bundle), True)
    return surface


def picard_contraction_report(problem: BsdeProblem, bundle: PathBundle,
                              cfg: SolverConfig = SolverConfig()) -> ContractionReport:
    """Gap history of :func:`solve_backward`; never raises on non-convergence."""
    surface, converged = _picard(problem, bundle, cfg, _discount_ratio(problem, bundle), True,
                                 raise_on_fail=False)
    return ContractionReport(surface.gaps, converged)


def deflated_price(problem: BsdeProblem, bundle: PathBundle, log_deflator: np.ndarray,
                   cfg: SolverConfig = SolverConfig()) -> ValueSurface:
    """Solve with a path-dependent deflator and only the driver ``f``.

    ``log_deflator[:, k]`` is the log of the deflator at node ``k`` relative
    to node 0; value at node ``k`` is the conditional mean of deflated cash
    flows divided by the deflator at ``k``.
    """
    _check_grid(bundle, log_deflator)
    step = np.diff(log_deflator, axis=1)

    def ratio(k, x):
        return np.exp(step[:, k])

    surface, _ = _picard(problem, bundle, cfg, ratio, False)
    return surface


def price_under_P(problem: BsdeProblem, bundle: PathBundle, density: DensityPath,
                  cfg: SolverConfig = SolverConfig()) -> ValueSurface:
    """Weighted representation: discount and density factors inside the mean.

    ``problem.tilt`` enters only through ``density``; the linear terms in
    ``beta`` and ``delta`` are absorbed by the weights.
    """
    times, dt = bundle.grid.nodes, bundle.dt
    N = bundle.grid.n_steps
    if density.log_values.shape != (bundle.n_paths, N + 1):
        raise ValueError("density does not match the bundle")
    log_disc = np.zeros((bundle.n_paths, N + 1))
    for k in range(N):
        log_disc[:, k + 1] = log_disc[:, k] - problem.alpha_at(times[k], bundle.states[:, k]) * dt
    return deflated_price(problem, bundle, log_disc + density.log_values, cfg)


def paired_stderr(a: ValueSurface, b: ValueSurface) -> float:
    """Standard error of ``a.y0 - b.y0`` for solves on shared draws."""
    diff = a.contributions - b.contributions
    return float(np.std(diff) / math.sqrt(diff.size))
