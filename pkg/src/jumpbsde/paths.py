"""Forward jump-diffusion simulation on a uniform grid.

Randomness is drawn from counter-based Philox streams keyed by
``(seed, channel, block)`` where a block is a fixed run of
``BLOCK_SIZE`` consecutive paths. Output therefore does not depend on how
many worker threads process the blocks, and the first ``n`` paths of a run
are the same for any larger ``n_paths`` with the same seed and grid.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidGrid, SimulationDiverged

BLOCK_SIZE = 4096
BROWNIAN_CHANNEL = 0
JUMP_CHANNEL = 1
THREADS_ENV = "JUMPBSDE_THREADS"

Coefficient = Callable[[np.ndarray], np.ndarray]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must sit on a node."""
        k = (t - self.t0) / self.dt
        i = int(round(k))
        if i < 0 or i > self.n_steps or abs(k - i) > 1e-9:
            raise InvalidGrid(f"time {t} is not a node of {self}")
        return i


def build_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    if not (np.isfinite(t0) and np.isfinite(T)) or not t0 < T:
        raise InvalidGrid(f"need t0 < T, got t0={t0}, T={T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidGrid(f"n_steps must be a positive integer, got {n_steps}")
    return TimeGrid(float(t0), float(T), int(n_steps))


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift and per-coordinate volatility of the continuous part.

    ``mu`` and ``sigma`` map states of shape ``(n, d)`` to arrays of the same
    shape. Coordinate ``i`` moves by ``mu_i dt + sigma_i (corr_chol @ dW)_i``
    with ``dW`` a standard ``d``-dimensional Brownian increment.
    """

    dim: int
    mu: Coefficient
    sigma: Coefficient
    initial_state: np.ndarray
    corr_chol: np.ndarray = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.shape != (self.dim,):
            raise ValueError(f"initial_state must have shape ({self.dim},), got {x0.shape}")
        chol = np.eye(self.dim) if self.corr_chol is None else np.asarray(self.corr_chol, dtype=float)
        if chol.shape != (self.dim, self.dim):
            raise ValueError("corr_chol must be d x d")
        if np.any(np.triu(chol, 1) != 0.0):
            raise ValueError("corr_chol must be lower triangular")
        if not np.allclose(np.einsum("ij,ij->i", chol, chol), 1.0, atol=1e-12):
            raise ValueError("rows of corr_chol must have unit norm")
        object.__setattr__(self, "initial_state", _frozen(x0))
        object.__setattr__(self, "corr_chol", _frozen(chol))

    @classmethod
    def constant(cls, x0, mu, sigma, corr_chol=None) -> "DiffusionSpec":
        """Arithmetic Brownian motion with constant coefficients."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        d = x0.size
        mu_v = np.broadcast_to(np.asarray(mu, dtype=float), (d,)).copy()
        sig_v = np.broadcast_to(np.asarray(sigma, dtype=float), (d,)).copy()
        return cls(
            dim=d,
            mu=lambda x: np.broadcast_to(mu_v, x.shape),
            sigma=lambda x: np.broadcast_to(sig_v, x.shape),
            initial_state=x0,
            corr_chol=corr_chol,
        )

    @classmethod
    def geometric(cls, s0, mu, sigma, corr_chol=None) -> "DiffusionSpec":
        """dS/S = mu dt + sigma dW, simulated in price coordinates."""
        s0 = np.atleast_1d(np.asarray(s0, dtype=float))
        d = s0.size
        mu_v = np.broadcast_to(np.asarray(mu, dtype=float), (d,)).copy()
        sig_v = np.broadcast_to(np.asarray(sigma, dtype=float), (d,)).copy()
        return cls(
            dim=d,
            mu=lambda x: x * mu_v,
            sigma=lambda x: x * sig_v,
            initial_state=s0,
            corr_chol=corr_chol,
        )


def _default_gamma(x: np.ndarray, z: float) -> np.ndarray:
    return np.full_like(x, z)


@dataclass(frozen=True)
class JumpSpec:
    """Finite-activity jump measure as a list of atoms ``(size, rate)``.

    ``gamma(x, z)`` gives the jump impact on each coordinate for a jump of
    size ``z`` at pre-jump state ``x`` (shape ``(n, d)``).
    """

    kind: str = "none"
    sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: Callable[[np.ndarray, float], np.ndarray] = _default_gamma

    def __post_init__(self):
        if self.kind not in ("none", "fixed_size_poisson", "finite_activity_levy"):
            raise ValueError(f"unknown jump kind {self.kind!r}")
        sizes = np.atleast_1d(np.asarray(self.sizes, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if sizes.shape != rates.shape:
            raise ValueError("sizes and rates must have equal length")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise ValueError("jump rates must be finite and nonnegative")
        if self.kind == "none" and sizes.size:
            raise ValueError("kind 'none' takes no atoms")
        if self.kind == "fixed_size_poisson" and sizes.size != 1:
            raise ValueError("fixed_size_poisson has exactly one atom")
        object.__setattr__(self, "sizes", _frozen(sizes))
        object.__setattr__(self, "rates", _frozen(rates))

    @classmethod
    def none(cls) -> "JumpSpec":
        return cls()

    @classmethod
    def poisson(cls, intensity: float, size: float, gamma=None) -> "JumpSpec":
        return cls("fixed_size_poisson", [size], [intensity], gamma or _default_gamma)

    @classmethod
    def levy(cls, atoms: Sequence[tuple], gamma=None) -> "JumpSpec":
        sizes = [z for z, _ in atoms]
        rates = [lam for _, lam in atoms]
        return cls("finite_activity_levy", sizes, rates, gamma or _default_gamma)

    @property
    def n_atoms(self) -> int:
        return int(self.sizes.size)

    @property
    def intensity(self) -> float:
        return float(self.rates.sum())

    def with_rates(self, rates) -> "JumpSpec":
        return replace(self, rates=np.asarray(rates, dtype=float))


@dataclass(frozen=True)
class PathBundle:
    """Simulated increments and states; immutable after construction.

    ``dW_raw`` holds the independent standard normal increments (scaled by
    sqrt(dt)) that drive the sampling measure. ``drift_shift`` is an
    accumulated Girsanov shift added on read through :attr:`increments`;
    ``states`` are not re-simulated when it changes.
    """

    grid: TimeGrid
    n_paths: int
    seed: int
    dW_raw: np.ndarray
    jump_counts: np.ndarray
    states: np.ndarray
    corr_chol: np.ndarray
    jump_sizes: np.ndarray
    jump_rates: np.ndarray
    measure: str = "P"
    drift_shift: Optional[np.ndarray] = None

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def n_atoms(self) -> int:
        return self.jump_counts.shape[2]

    @property
    def increments(self) -> np.ndarray:
        if self.drift_shift is None:
            return self.dW_raw
        return self.dW_raw + self.drift_shift

    @property
    def dW(self) -> np.ndarray:
        """Correlated increments ``corr_chol @ increments`` per path and step."""
        return np.einsum("ij,nkj->nki", self.corr_chol, self.increments)

    @property
    def compensated_jumps(self) -> np.ndarray:
        return self.jump_counts - self.jump_rates * self.dt


def _poisson_inverse(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Inverse-CDF Poisson sampling; common uniforms give monotone coupling."""
    mean = np.broadcast_to(mean, u.shape)
    k = np.zeros(u.shape, dtype=np.int64)
    p = np.exp(-mean)
    cdf = p.copy()
    cap = int(np.max(mean, initial=0.0) + 12.0 * math.sqrt(np.max(mean, initial=0.0)) + 30)
    for j in range(1, cap):
        more = u > cdf
        if not more.any():
            break
        k += more
        p = p * mean / j
        cdf = cdf + p
    return k


def _block_generator(seed: int, channel: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, channel, block])))


def draw_block(seed: int, block: int, n_steps: int, dim: int, n_atoms: int):
    """Raw draws for one path block: normals and uniforms, full block size."""
    normals = _block_generator(seed, BROWNIAN_CHANNEL, block).standard_normal((BLOCK_SIZE, n_steps, dim))
    uniforms = _block_generator(seed, JUMP_CHANNEL, block).random((BLOCK_SIZE, n_steps, n_atoms))
    return normals, uniforms


def euler_scheme(
    diff: DiffusionSpec,
    jumps: JumpSpec,
    grid: TimeGrid,
    dW_raw: np.ndarray,
    jump_counts: np.ndarray,
    tilt=None,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Euler-Maruyama states from given increments.

    With ``tilt`` the increments are treated as Brownian under the tilted
    measure and the model is driven by ``dW_raw + beta(t, x) dt``; jump
    compensation always uses the rates of ``jumps``.
    """
    n, N, d = dW_raw.shape
    dt = grid.dt
    times = grid.nodes
    chol = diff.corr_chol
    x = np.array(np.broadcast_to(diff.initial_state, (n, d)), dtype=float)
    states = np.empty((n, N + 1, d)) if out is None else out
    states[:, 0] = x
    comp = jumps.rates * dt
    for k in range(N):
        dw = dW_raw[:, k]
        if tilt is not None and not tilt.is_zero_beta:
            dw = dw + tilt.beta_at(times[k], x) * dt
        dw_c = np.einsum("ij,nj->ni", chol, dw)
        x_new = x + diff.mu(x) * dt + diff.sigma(x) * dw_c
        for j in range(jumps.n_atoms):
            x_new = x_new + jumps.gamma(x, jumps.sizes[j]) * (jump_counts[:, k, j:j + 1] - comp[j])
        x = x_new
        states[:, k + 1] = x
    return states


def _worker_count(workers: Optional[int]) -> int:
    if workers is None:
        env = os.environ.get(THREADS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def simulate_paths(
    diff: DiffusionSpec,
    jumps: JumpSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    tilt=None,
    measure: Optional[str] = None,
    workers: Optional[int] = None,
) -> PathBundle:
    """Simulate ``n_paths`` Euler trajectories of the forward SDE.

    Parameters
    ----------
    tilt : MeasureTilt, optional
        Simulate under the measure obtained from ``(diff, jumps)`` by this
        Girsanov tilt: the Brownian draws become the new measure's Brownian
        increments and jump counts are sampled at the tilted rates.
    workers : int, optional
        Thread cap; defaults to ``$JUMPBSDE_THREADS`` or the CPU count.
        Results are bit-identical for any value.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    N, d, m = grid.n_steps, diff.dim, jumps.n_atoms
    sample_jumps = jumps
    if tilt is not None and m:
        from .girsanov import tilt_compensator

        sample_jumps = tilt_compensator(tilt, jumps)
    sample_mean = sample_jumps.rates * grid.dt
    sqdt = math.sqrt(grid.dt)

    dW_raw = np.empty((n_paths, N, d))
    counts = np.zeros((n_paths, N, m), dtype=np.int64)
    states = np.empty((n_paths, N + 1, d))
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def run(block: int) -> None:
        lo = block * BLOCK_SIZE
        hi = min(n_paths, lo + BLOCK_SIZE)
        z, u = draw_block(seed, block, N, d, m)
        dW_raw[lo:hi] = z[: hi - lo] * sqdt
        if m:
            counts[lo:hi] = _poisson_inverse(u[: hi - lo], sample_mean)
        with np.errstate(over="ignore", invalid="ignore"):
            euler_scheme(diff, jumps, grid, dW_raw[lo:hi], counts[lo:hi], tilt=tilt, out=states[lo:hi])

    n_workers = min(_worker_count(workers), n_blocks)
    if n_workers == 1:
        for b in range(n_blocks):
            run(b)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run, range(n_blocks)))

    finite = np.isfinite(states).all(axis=2)
    if not finite.all():
        bad_path, bad_step = np.argwhere(~finite)[0]
        raise SimulationDiverged(int(bad_path), int(bad_step))

    label = measure or ("P" if tilt is None else tilt.label.split("->")[-1])
    return PathBundle(
        grid=grid,
        n_paths=n_paths,
        seed=seed,
        dW_raw=_frozen(dW_raw),
        jump_counts=_frozen(counts),
        states=_frozen(states),
        corr_chol=diff.corr_chol,
        jump_sizes=jumps.sizes,
        jump_rates=sample_jumps.rates,
        measure=label,
    )


def resimulate(bundle: PathBundle, diff: DiffusionSpec, jumps: JumpSpec, tilt=None, measure=None) -> PathBundle:
    """Re-run the Euler scheme on the draws of ``bundle`` under ``tilt``.

    Brownian draws are reused as-is. Jump counts are reused when the tilt
    leaves the jump rates unchanged; otherwise the caller must simulate afresh.
    """
    if tilt is not None and bundle.n_atoms:
        from .girsanov import tilt_compensator

        if not np.array_equal(tilt_compensator(tilt, jumps).rates, bundle.jump_rates):
            raise ValueError("tilt changes jump rates; use simulate_paths with the same seed")
    with np.errstate(over="ignore", invalid="ignore"):
        states = euler_scheme(diff, jumps, bundle.grid, bundle.increments, bundle.jump_counts, tilt=tilt)
    finite = np.isfinite(states).all(axis=2)
    if not finite.all():
        bad_path, bad_step = np.argwhere(~finite)[0]
        raise SimulationDiverged(int(bad_path), int(bad_step))
    label = measure or (bundle.measure if tilt is None else tilt.label.split("->")[-1])
    return replace(bundle, dW_raw=bundle.increments, drift_shift=None, states=_frozen(states),
                   corr_chol=diff.corr_chol, measure=label)


def brownian_terminal(bundle: PathBundle, coord: int) -> np.ndarray:
    """W_T - W_t0 per path for Brownian coordinate ``coord``."""
    if not 0 <= coord < bundle.dim:
        raise IndexError(f"coordinate {coord} out of range for d={bundle.dim}")
    return bundle.increments[:, :, coord].sum(axis=1)


def lipschitz_estimate(fn: Callable[[np.ndarray], np.ndarray], lower, upper, n_samples: int = 2000,
                       seed: int = 0) -> float:
    """Largest finite-difference slope of ``fn`` over random pairs in a box.

    Advisory only: opaque coefficients cannot be proven Lipschitz.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    rng = np.random.default_rng(seed)
    a = rng.uniform(lower, upper, size=(n_samples, lower.size))
    b = rng.uniform(lower, upper, size=(n_samples, lower.size))
    fa = np.asarray(fn(a), dtype=float).reshape(n_samples, -1)
    fb = np.asarray(fn(b), dtype=float).reshape(n_samples, -1)
    num = np.linalg.norm(fa - fb, axis=1)
    den = np.linalg.norm(a - b, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok], initial=0.0))
