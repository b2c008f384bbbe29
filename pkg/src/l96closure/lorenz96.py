"""Two-timescale Lorenz '96 truth model and observation generation.

The truth system couples K slow variables X_k to J fast variables per slow
site. It is integrated with classical RK4 and provides the slow-variable
coupling term alongside the trajectory, so closure errors can be evaluated
without re-simulation. Observations are strided, noise-corrupted slices of
the slow variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, IntegrationBlowup

BLOWUP_LIMIT = 1.0e6


@dataclass(frozen=True)
class TruthConfig:
    K: int = 8
    J: int = 32
    F: float = 15.0
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0
    dt: float = 0.005
    t_end: float = 100.0
    seed: int = 0
    spinup: float = 2.0

    def __post_init__(self):
        if self.K < 4:
            raise ConfigurationError("K must be >= 4 (cyclic stencil needs k-2..k+1 distinct)")
        if self.J < 3:
            raise ConfigurationError("J must be >= 3")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.t_end <= 0:
            raise ConfigurationError("t_end must be positive")
        if self.spinup < 0:
            raise ConfigurationError("spinup must be non-negative")


@dataclass
class FullState:
    """Slow variables X (K,) and fast variables Y (J*K,)."""

    X: np.ndarray
    Y: np.ndarray

    def packed(self) -> np.ndarray:
        return np.concatenate([self.X, self.Y])

    @classmethod
    def unpack(cls, z: np.ndarray, K: int) -> "FullState":
        return cls(X=np.asarray(z[:K]), Y=np.asarray(z[K:]))


@dataclass
class SlowState:
    X: np.ndarray
    t: float


@dataclass
class TruthTrajectory:
    """Full-resolution truth run: times, slow/fast states, exact coupling term."""

    times: np.ndarray          # (n,)
    X: np.ndarray              # (n, K)
    Y: np.ndarray              # (n, J*K)
    coupling: np.ndarray       # (n, K): -(hc/b) * sum_j Y_j per slow site
    config: TruthConfig


@dataclass
class ObservationSet:
    times: np.ndarray          # (m,), uniform spacing delta_t
    states: np.ndarray         # (m, K)
    noise_fraction: float
    per_var_std: np.ndarray    # (K,)
    seed: int

    @property
    def delta_t(self) -> float:
        return float(self.times[1] - self.times[0])

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape[0] != self.times.shape[0]:
            raise ConfigurationError("states row count must equal times length")
        diffs = np.diff(self.times)
        if len(diffs) and not np.allclose(diffs, diffs[0], rtol=1e-12, atol=0.0):
            raise ConfigurationError("observation times must be uniformly spaced")
        if self.noise_fraction > 0 and np.any(self.per_var_std <= 0):
            raise ConfigurationError("per_var_std must be positive when noise is added")


def coupling_term(Y: np.ndarray, cfg: TruthConfig) -> np.ndarray:
    """-(hc/b) * sum of each slow site's fast block; works on (..., J*K)."""
    blocks = Y.reshape(Y.shape[:-1] + (cfg.K, cfg.J))
    return -(cfg.h * cfg.c / cfg.b) * blocks.sum(axis=-1)


def truth_rhs(state: FullState, cfg: TruthConfig) -> FullState:
    """Time derivative of the full system, cyclic in both index spaces."""
    X, Y = state.X, state.Y
    if X.shape[-1] != cfg.K or Y.shape[-1] != cfg.J * cfg.K:
        raise ConfigurationError(
            f"state dims {X.shape[-1]}/{Y.shape[-1]} do not match config {cfg.K}/{cfg.J * cfg.K}"
        )
    dX = (
        -np.roll(X, 1, axis=-1) * (np.roll(X, 2, axis=-1) - np.roll(X, -1, axis=-1))
        - X
        + cfg.F
        + coupling_term(Y, cfg)
    )
    dY = (
        -cfg.c * cfg.b * np.roll(Y, -1, axis=-1) * (np.roll(Y, -2, axis=-1) - np.roll(Y, 1, axis=-1))
        - cfg.c * Y
        + (cfg.h * cfg.c / cfg.b) * np.repeat(X, cfg.J, axis=-1)
    )
    return FullState(X=dX, Y=dY)


def _rhs_packed(z: np.ndarray, cfg: TruthConfig) -> np.ndarray:
    d = truth_rhs(FullState.unpack(z, cfg.K), cfg)
    return d.packed()


def rk4_step(rhs, state: np.ndarray, step: float) -> np.ndarray:
    """One classical RK4 update of a pure right-hand side."""
    r1 = step * rhs(state)
    r2 = step * rhs(state + 0.5 * r1)
    r3 = step * rhs(state + 0.5 * r2)
    r4 = step * rhs(state + r3)
    return state + (r1 + 2.0 * r2 + 2.0 * r3 + r4) / 6.0


def _check_finite(z: np.ndarray, t: float, i: int):
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP_LIMIT:
        raise IntegrationBlowup(time=t, step_index=i)


def default_initial_state(cfg: TruthConfig) -> FullState:
    """Seeded random start spun up onto the attractor for `cfg.spinup` MTU."""
    rng = np.random.default_rng(cfg.seed)
    X = rng.normal(0.0, 1.0, size=cfg.K)
    Y = rng.normal(0.0, 0.1, size=cfg.J * cfg.K)
    z = np.concatenate([X, Y])
    n_spin = int(round(cfg.spinup / cfg.dt))
    for i in range(n_spin):
        z = rk4_step(lambda s: _rhs_packed(s, cfg), z, cfg.dt)
        _check_finite(z, (i + 1) * cfg.dt, i + 1)
    return FullState.unpack(z, cfg.K)


def simulate_truth(cfg: TruthConfig, x0: FullState | None = None) -> TruthTrajectory:
    """Integrate the truth model over [0, t_end] with step dt.

    Raises IntegrationBlowup with the first offending time if the state
    leaves the finite trust region (expected for coarse steps).
    """
    if x0 is None:
        x0 = default_initial_state(cfg)
    n_steps = int(round(cfg.t_end / cfg.dt))
    K, JK = cfg.K, cfg.J * cfg.K
    times = cfg.dt * np.arange(n_steps + 1)
    X = np.empty((n_steps + 1, K))
    Y = np.empty((n_steps + 1, JK))
    z = x0.packed().astype(np.float64)
    _check_finite(z, 0.0, 0)
    X[0], Y[0] = z[:K], z[K:]
    rhs = lambda s: _rhs_packed(s, cfg)
    for i in range(1, n_steps + 1):
        z = rk4_step(rhs, z, cfg.dt)
        _check_finite(z, times[i], i)
        X[i], Y[i] = z[:K], z[K:]
    coup = coupling_term(Y, cfg)
    return TruthTrajectory(times=times, X=X, Y=Y, coupling=coup, config=cfg)


def make_observations(
    traj: TruthTrajectory, stride: int, noise_fraction: float, seed: int
) -> ObservationSet:
    """Subsample the slow variables and add per-variable Gaussian noise.

    Noise std is noise_fraction times the std of the clean subsampled
    series, computed per variable.
    """
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if noise_fraction < 0:
        raise ConfigurationError("noise_fraction must be >= 0")
    times = traj.times[::stride]
    clean = traj.X[::stride].copy()
    per_var_std = clean.std(axis=0)
    rng = np.random.default_rng(seed)
    if noise_fraction > 0:
        noisy = clean + rng.normal(0.0, noise_fraction * per_var_std, size=clean.shape)
    else:
        noisy = clean
    return ObservationSet(
        times=times,
        states=noisy,
        noise_fraction=float(noise_fraction),
        per_var_std=per_var_std,
        seed=seed,
    )


def estimate_max_lyapunov(
    cfg: TruthConfig,
    t_total: float = 50.0,
    t_transient: float = 5.0,
    renorm_interval: float = 0.05,
    d0: float = 1e-8,
) -> float:
    """Largest Lyapunov exponent (1/MTU) via renormalized perturbation growth.

    Two full-system trajectories are integrated side by side; the separation
    is rescaled to d0 every `renorm_interval` and the average log growth rate
    after the transient gives the exponent.
    """
    rhs = lambda s: _rhs_packed(s, cfg)
    z = default_initial_state(cfg).packed()
    rng = np.random.default_rng(cfg.seed + 1)
    pert = rng.normal(size=z.shape)
    zp = z + d0 * pert / np.linalg.norm(pert)

    steps_per_interval = max(1, int(round(renorm_interval / cfg.dt)))
    interval = steps_per_interval * cfg.dt
    n_intervals = int(round(t_total / interval))
    n_transient = int(round(t_transient / interval))
    log_growth = []
    t = 0.0
    for k in range(n_intervals):
        for i in range(steps_per_interval):
            z = rk4_step(rhs, z, cfg.dt)
            zp = rk4_step(rhs, zp, cfg.dt)
            t += cfg.dt
        _check_finite(z, t, k)
        delta = zp - z
        dist = np.linalg.norm(delta)
        if dist == 0.0:
            dist = np.finfo(float).tiny
        log_growth.append(np.log(dist / d0))
        zp = z + (d0 / dist) * delta
    growth = np.asarray(log_growth[n_transient:])
    return float(growth.mean() / interval)
