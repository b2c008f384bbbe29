"""Parameterized slow-system dynamics and differentiable time stepping.

Two closure variants are stepped here:

* instantaneous: the closure sees only the current state; classical RK4
  with step delta_t.
* history: the closure sees the current state plus lagged states at
  tau_i = 2*i*delta_t; RK4 with step 2*delta_t on a fixed lag stencil, so
  no interpolation is ever needed. The stage lags are:
  stage 1 -> even offsets {0, 2dt, ..., 2*n_h*dt},
  stages 2,3 -> odd (midpoint) offsets {dt, 3dt, ..., (2*n_h-1)*dt},
  stage 4 -> even offsets shifted by one step {0, 2dt, ..., (2*n_h-2)*dt}.

A single 2*delta_t chain never produces states at the odd offsets its own
midpoint stages need, so online rollouts advance two interleaved chains
(anchored on even and odd multiples of delta_t) that supply each other's
midpoint lags. The initial window of 2*n_h+2 data points seeds both chains.

All steppers accept either plain numpy arrays or tape Tensors, which is how
losses and the HMC potential get exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, IntegrationBlowup
from .lorenz96 import BLOWUP_LIMIT
from .network import ClosureParams, MlpArchitecture, mlp_forward, mlp_forward_members, mlp_forward_t

VARIANTS = ("history", "instantaneous")


@dataclass(frozen=True)
class HistoryConfig:
    n_h: int = 2
    delta_t: float = 0.01

    def __post_init__(self):
        if self.n_h < 1:
            raise ConfigurationError("n_h must be >= 1")
        if self.delta_t <= 0:
            raise ConfigurationError("delta_t must be positive")

    @property
    def lags(self) -> np.ndarray:
        return 2.0 * self.delta_t * np.arange(1, self.n_h + 1)

    @property
    def window_len(self) -> int:
        return 2 * self.n_h + 2


@dataclass(frozen=True)
class ClosureModel:
    """Everything needed to step a parameterized system except the weights."""

    arch: MlpArchitecture
    hist: HistoryConfig
    F: float
    variant: str = "history"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")


@dataclass
class HistoryWindow:
    """States at t, t-dt, ..., t-(2n_h+1)dt, newest first: shape (2n_h+2, K)."""

    states: np.ndarray
    t: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if not np.all(np.isfinite(self.states)):
            raise ConfigurationError("history window contains non-finite entries")


@dataclass
class RolloutResult:
    times: np.ndarray      # (steps,)
    states: np.ndarray     # (steps, K) or (steps, M, K) for ensembles
    closures: np.ndarray   # same shape as states


def _values(x):
    return x.value if isinstance(x, ad.Tensor) else x


def _check_rollout_finite(x, t, i):
    v = _values(x)
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP_LIMIT:
        raise IntegrationBlowup(time=t, step_index=i)


def arch_for_variant(variant: str, n_h: int, hidden_layers: int, hidden_width: int,
                     activation: str = "tanh") -> MlpArchitecture:
    """Site-local closure net: one shared scalar-output network per slow site."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    input_dim = n_h + 1 if variant == "history" else 1
    return MlpArchitecture(
        input_dim=input_dim,
        hidden_layers=hidden_layers,
        hidden_width=hidden_width,
        output_dim=1,
        activation=activation,
    )


# -- closure evaluators ----------------------------------------------------
# A closure evaluator maps a list of lag arrays (newest first, each
# (..., K)) to the per-site closure values (..., K). The shared network is
# applied independently at each site.

def closure_eval_numpy(params: ClosureParams):
    def evaluate(lags):
        x = np.stack(lags, axis=-1)              # (..., K, n_lags)
        return mlp_forward(params, x)[..., 0]
    return evaluate


def closure_eval_tape(theta: ad.Tensor, arch: MlpArchitecture):
    def evaluate(lags):
        x = ad.stack(lags, axis=-1)
        out = mlp_forward_t(theta, x, arch)
        return out[..., 0]
    return evaluate


def closure_eval_members(thetas: np.ndarray, arch: MlpArchitecture):
    """Vectorized over ensemble members; lag arrays have shape (..., M, K)."""
    def evaluate(lags):
        x = np.stack(lags, axis=-1)              # (..., M, K, L)
        lead = x.shape[:-3]
        M, K, L = x.shape[-3:]
        xm = np.moveaxis(x, -3, 0).reshape(M, -1, L)
        out = mlp_forward_members(thetas, xm, arch)[..., 0]  # (M, lead*K)
        out = out.reshape((M,) + lead + (K,))
        return np.moveaxis(out, 0, -2)
    return evaluate


# -- right-hand sides ------------------------------------------------------

def advection(X):
    """Cyclic advection term -X_{k-1}(X_{k-2} - X_{k+1}) on the last axis."""
    return -(ad.roll(X, 1) * (ad.roll(X, 2) - ad.roll(X, -1)))


def closure_rhs_hist(lags, closure_eval, F: float):
    """Slow tendency with the history closure; lags[0] is the current state."""
    X = lags[0]
    return advection(X) - X + F + closure_eval(lags)


def closure_rhs_inst(X, closure_eval, F: float):
    return advection(X) - X + F + closure_eval([X])


# -- steppers --------------------------------------------------------------

def dde_rk4_step(window, closure_eval, F: float, hist: HistoryConfig):
    """One RK4 step of the history DDE from t to t + 2*delta_t.

    `window` is a sequence of states newest first (at least 2n_h+1 entries;
    the oldest slot of a full 2n_h+2 window is not touched).
    """
    n_h = hist.n_h
    w = [window[i] for i in range(2 * n_h + 1)]
    two_dt = 2.0 * hist.delta_t

    even = [w[2 * i] for i in range(1, n_h + 1)]          # 2dt, 4dt, ...
    odd = [w[2 * i - 1] for i in range(1, n_h + 1)]       # dt, 3dt, ...
    shifted = [w[2 * i - 2] for i in range(1, n_h + 1)]   # 0, 2dt, ...

    def f(current, plags):
        return closure_rhs_hist([current] + plags, closure_eval, F)

    r1 = two_dt * f(w[0], even)
    r2 = two_dt * f(w[0] + 0.5 * r1, odd)
    r3 = two_dt * f(w[0] + 0.5 * r2, odd)
    r4 = two_dt * f(w[0] + r3, shifted)
    return w[0] + (r1 + 2.0 * r2 + 2.0 * r3 + r4) * (1.0 / 6.0)


def ode_rk4_step(state, closure_eval, F: float, delta_t: float):
    """One RK4 step of the instantaneous closure ODE from t to t + delta_t."""
    def f(X):
        return closure_rhs_inst(X, closure_eval, F)

    r1 = delta_t * f(state)
    r2 = delta_t * f(state + 0.5 * r1)
    r3 = delta_t * f(state + 0.5 * r2)
    r4 = delta_t * f(state + r3)
    return state + (r1 + 2.0 * r2 + 2.0 * r3 + r4) * (1.0 / 6.0)


def dual_chain_steps(window_states, closure_eval, F: float, hist: HistoryConfig,
                     n_macro: int, check_finite: bool = True, t0: float = 0.0):
    """Advance the interleaved even/odd chains n_macro steps of 2*delta_t.

    `window_states` is a newest-first sequence of 2n_h+2 states. Emits the
    merged delta_t-resolution sequence (chronological, 2*n_macro entries)
    and the final window. Generic over numpy arrays and tape Tensors.
    """
    W = list(window_states)
    if len(W) != hist.window_len:
        raise ConfigurationError(
            f"window must have {hist.window_len} entries, got {len(W)}"
        )
    emitted = []
    t = t0
    for m in range(n_macro):
        even_new = dde_rk4_step(W, closure_eval, F, hist)       # t + 2dt
        odd_new = dde_rk4_step(W[1:], closure_eval, F, hist)    # t + dt
        if check_finite:
            _check_rollout_finite(odd_new, t + hist.delta_t, 2 * m + 1)
            _check_rollout_finite(even_new, t + 2.0 * hist.delta_t, 2 * m + 2)
        emitted.append(odd_new)
        emitted.append(even_new)
        W = [even_new, odd_new] + W[:-2]
        t += 2.0 * hist.delta_t
    return emitted, W


def _closures_along(states_merged: np.ndarray, n_emitted: int, closure_eval,
                    hist: HistoryConfig) -> np.ndarray:
    """Closure values at the emitted points, using the stage-1 lag set."""
    T = states_merged.shape[0]
    start = T - n_emitted
    idx = np.arange(start, T)
    lags = [states_merged[idx - 2 * i] for i in range(hist.n_h + 1)]
    return closure_eval(lags)


def rollout(init: HistoryWindow, params: ClosureParams, F: float,
            hist: HistoryConfig, horizon: int) -> RolloutResult:
    """Online dual-chain forecast for `horizon` delta_t ticks past the window."""
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    closure = closure_eval_numpy(params)
    n_macro = (horizon + 1) // 2
    emitted, _ = dual_chain_steps(
        list(init.states), closure, F, hist, n_macro, t0=init.t
    )
    emitted = emitted[:horizon]
    states = np.stack(emitted, axis=0)
    times = init.t + hist.delta_t * np.arange(1, horizon + 1)
    merged = np.concatenate([init.states[::-1], states], axis=0)
    closures = _closures_along(merged, horizon, closure, hist)
    return RolloutResult(times=times, states=states, closures=closures)


def rollout_instantaneous(init_state: np.ndarray, t0: float, params: ClosureParams,
                          F: float, hist: HistoryConfig, horizon: int) -> RolloutResult:
    """Online single-chain forecast of the instantaneous closure ODE."""
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    closure = closure_eval_numpy(params)
    x = np.asarray(init_state, dtype=np.float64)
    states = []
    for i in range(horizon):
        x = ode_rk4_step(x, closure, F, hist.delta_t)
        _check_rollout_finite(x, t0 + (i + 1) * hist.delta_t, i + 1)
        states.append(x)
    states = np.stack(states, axis=0)
    times = t0 + hist.delta_t * np.arange(1, horizon + 1)
    closures = closure([states])
    return RolloutResult(times=times, states=states, closures=closures)


def rollout_members(init: HistoryWindow, thetas: np.ndarray, arch: MlpArchitecture,
                    F: float, hist: HistoryConfig, horizon: int) -> RolloutResult:
    """Dual-chain forecast vectorized over M parameter samples.

    Returns states/closures of shape (horizon, M, K). Raises on the first
    step where any member goes non-finite; callers wanting per-member
    fallback should catch IntegrationBlowup and run members singly.
    """
    closure = closure_eval_members(thetas, arch)
    M = thetas.shape[0]
    window = np.broadcast_to(
        init.states[:, None, :], (init.states.shape[0], M, init.states.shape[1])
    ).copy()
    n_macro = (horizon + 1) // 2
    emitted, _ = dual_chain_steps(
        [window[i] for i in range(window.shape[0])], closure, F, hist, n_macro, t0=init.t
    )
    emitted = emitted[:horizon]
    states = np.stack(emitted, axis=0)                       # (horizon, M, K)
    times = init.t + hist.delta_t * np.arange(1, horizon + 1)
    merged = np.concatenate([window[::-1], states], axis=0)
    closures = _closures_along(merged, horizon, closure, hist)
    return RolloutResult(times=times, states=states, closures=closures)


def rollout_members_instantaneous(init_state: np.ndarray, t0: float, thetas: np.ndarray,
                                  arch: MlpArchitecture, F: float, hist: HistoryConfig,
                                  horizon: int) -> RolloutResult:
    closure = closure_eval_members(thetas, arch)
    M = thetas.shape[0]
    x = np.broadcast_to(init_state[None, :], (M, init_state.shape[0])).copy()
    states = []
    for i in range(horizon):
        x = ode_rk4_step(x, closure, F, hist.delta_t)
        _check_rollout_finite(x, t0 + (i + 1) * hist.delta_t, i + 1)
        states.append(x)
    states = np.stack(states, axis=0)                        # (horizon, M, K)
    times = t0 + hist.delta_t * np.arange(1, horizon + 1)
    closures = closure([states])
    return RolloutResult(times=times, states=states, closures=closures)
