"""Deterministic closure training: rollout losses and Adam.

Training fits multi-step rollouts started from observation windows against
the observed slow states. The history variant rolls the dual 2*delta_t
chains and every emitted delta_t point is a target; the instantaneous
variant rolls a single delta_t chain. Two phases: a depth-1 warmup, then
deeper rollouts for online accuracy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import grad_through
from .dynamics import (
    HistoryConfig,
    closure_eval_numpy,
    closure_eval_tape,
    dde_rk4_step,
    dual_chain_steps,
    ode_rk4_step,
)
from .errors import ConfigurationError, GradientFailure, IntegrationBlowup, TrainingDiverged
from .lorenz96 import ObservationSet
from .network import ClosureParams, MlpArchitecture, init_params

log = logging.getLogger(__name__)

LOSS_SENTINEL = 1.0e12
DIVERGENCE_THRESHOLD = 1.0e6
DIVERGENCE_PATIENCE = 100


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 512
    n_f: int = 5
    phase1_iters: int = 15_000
    phase2_iters: int = 30_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.n_f < 1:
            raise ConfigurationError("n_f must be >= 1")


@dataclass
class TrainReport:
    loss_curve: np.ndarray
    final_params: ClosureParams
    residual_variance: float


# -- index arithmetic ------------------------------------------------------

def history_rollout_indices(n_obs: int, n_h: int, n_f: int) -> np.ndarray:
    """Anchors j whose window (j-(2n_h+1)..j) and targets (j+1..j+2n_f) fit."""
    lo = 2 * n_h + 1
    hi = n_obs - 1 - 2 * n_f
    return np.arange(lo, hi + 1)


def history_onestep_indices(n_obs: int, n_h: int) -> np.ndarray:
    """Anchors j for teacher-forced single 2*delta_t steps (j-2n_h..j -> j+2)."""
    return np.arange(2 * n_h, n_obs - 2)


def instantaneous_rollout_indices(n_obs: int, n_f: int) -> np.ndarray:
    return np.arange(0, n_obs - n_f)


# -- losses ----------------------------------------------------------------

def _history_window_arrays(states: np.ndarray, batch: np.ndarray, n_h: int):
    """Newest-first list of (B, K) arrays for the batch anchors."""
    return [states[batch - d] for d in range(2 * n_h + 2)]


def _history_loss_tensor(theta: ad.Tensor, obs: ObservationSet, batch: np.ndarray,
                         n_f: int, arch: MlpArchitecture, hist: HistoryConfig, F: float):
    closure = closure_eval_tape(theta, arch)
    window = _history_window_arrays(obs.states, batch, hist.n_h)
    emitted, _ = dual_chain_steps(window, closure, F, hist, n_f)
    total = None
    for m, pred in enumerate(emitted):
        target = obs.states[batch + m + 1]
        sq = ad.tensor_sum(ad.square(pred - target))
        total = sq if total is None else total + sq
    count = len(batch) * len(emitted) * obs.states.shape[1]
    return total * (1.0 / count)


def _inst_loss_tensor(theta: ad.Tensor, obs: ObservationSet, batch: np.ndarray,
                      n_f: int, arch: MlpArchitecture, hist: HistoryConfig, F: float):
    closure = closure_eval_tape(theta, arch)
    x = obs.states[batch]
    total = None
    for m in range(n_f):
        x = ode_rk4_step(x, closure, F, hist.delta_t)
        target = obs.states[batch + m + 1]
        sq = ad.tensor_sum(ad.square(x - target))
        total = sq if total is None else total + sq
    count = len(batch) * n_f * obs.states.shape[1]
    return total * (1.0 / count)


def _loss_tensor(variant: str, theta, obs, batch, n_f, arch, hist, F):
    if variant == "history":
        return _history_loss_tensor(theta, obs, batch, n_f, arch, hist, F)
    return _inst_loss_tensor(theta, obs, batch, n_f, arch, hist, F)


def loss_history(params: ClosureParams, obs: ObservationSet, batch: np.ndarray,
                 n_f: int, hist: HistoryConfig, F: float) -> float:
    """Mean-squared rollout error of the history variant over the batch."""
    try:
        t = _history_loss_tensor(ad.constant(params.flat), obs, batch, n_f,
                                 params.arch, hist, F)
    except IntegrationBlowup as exc:
        log.warning("history rollout blew up during loss evaluation: %s", exc)
        return LOSS_SENTINEL
    val = float(t.value if isinstance(t, ad.Tensor) else t)
    return val if np.isfinite(val) else LOSS_SENTINEL


def loss_instantaneous(params: ClosureParams, obs: ObservationSet, batch: np.ndarray,
                       n_f: int, hist: HistoryConfig, F: float) -> float:
    try:
        t = _inst_loss_tensor(ad.constant(params.flat), obs, batch, n_f,
                              params.arch, hist, F)
    except IntegrationBlowup as exc:
        log.warning("instantaneous rollout blew up during loss evaluation: %s", exc)
        return LOSS_SENTINEL
    val = float(t.value if isinstance(t, ad.Tensor) else t)
    return val if np.isfinite(val) else LOSS_SENTINEL


# -- teacher-forced one-step residuals ------------------------------------

def one_step_residuals(params: ClosureParams, obs: ObservationSet,
                       hist: HistoryConfig, F: float, variant: str) -> np.ndarray:
    """Residuals of single teacher-forced steps over the full dataset, (B, K)."""
    n = obs.states.shape[0]
    closure = closure_eval_numpy(params)
    if variant == "history":
        batch = history_onestep_indices(n, hist.n_h)
        window = [obs.states[batch - d] for d in range(2 * hist.n_h + 1)]
        pred = dde_rk4_step(window, closure, F, hist)
        target = obs.states[batch + 2]
    else:
        batch = np.arange(0, n - 1)
        pred = ode_rk4_step(obs.states[batch], closure, F, hist.delta_t)
        target = obs.states[batch + 1]
    return pred - target


def residual_variance(params: ClosureParams, obs: ObservationSet,
                      hist: HistoryConfig, F: float, variant: str) -> float:
    r = one_step_residuals(params, obs, hist, F, variant)
    return float(np.mean(r * r))


# -- Adam ------------------------------------------------------------------

class _BatchSampler:
    """Without-replacement epochs over the valid anchor set, reshuffled."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = rng
        self._perm = self.rng.permutation(self.indices)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def adam_train(obs: ObservationSet, arch: MlpArchitecture, hist: HistoryConfig,
               cfg: TrainConfig, variant: str, F: float,
               init: ClosureParams | None = None) -> TrainReport:
    """Two-phase Adam minimization of the rollout loss."""
    if variant not in ("history", "instantaneous"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    if not np.isclose(obs.delta_t, hist.delta_t, rtol=1e-9):
        raise ConfigurationError(
            f"observation spacing {obs.delta_t} does not match closure delta_t {hist.delta_t}"
        )
    params = init if init is not None else init_params(arch, cfg.seed)
    theta = params.flat.copy()
    n = obs.states.shape[0]
    rng = np.random.default_rng(cfg.seed)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t_step = 0
    losses = []
    bad_streak = 0

    phases = [(cfg.phase1_iters, 1), (cfg.phase2_iters, cfg.n_f)]
    for n_iters, n_f in phases:
        if n_iters == 0:
            continue
        if variant == "history":
            valid = history_rollout_indices(n, hist.n_h, n_f)
        else:
            valid = instantaneous_rollout_indices(n, n_f)
        if len(valid) == 0:
            raise ConfigurationError("no valid training anchors for the given n_f")
        sampler = _BatchSampler(valid, cfg.batch_size, rng)
        for _ in range(n_iters):
            batch = sampler.next_batch()
            try:
                loss, grad = grad_through(
                    lambda th: _loss_tensor(variant, th, obs, batch, n_f, arch, hist, F),
                    theta,
                )
            except (IntegrationBlowup, GradientFailure) as exc:
                log.warning("iteration %d: %s; recording loss sentinel", t_step, exc)
                loss, grad = LOSS_SENTINEL, None
            losses.append(loss)
            if loss > DIVERGENCE_THRESHOLD:
                bad_streak += 1
                if bad_streak >= DIVERGENCE_PATIENCE:
                    raise TrainingDiverged(
                        f"loss above {DIVERGENCE_THRESHOLD:g} for {bad_streak} "
                        f"consecutive iterations (last={loss:g}, iter={t_step})"
                    )
            else:
                bad_streak = 0
            if grad is not None:
                t_step += 1
                m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
                v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
                m_hat = m / (1.0 - cfg.adam_beta1 ** t_step)
                v_hat = v / (1.0 - cfg.adam_beta2 ** t_step)
                theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    final = ClosureParams(flat=theta, arch=arch)
    res_var = residual_variance(final, obs, hist, F, variant)
    return TrainReport(
        loss_curve=np.asarray(losses),
        final_params=final,
        residual_variance=res_var,
    )
