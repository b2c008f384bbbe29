"""Hamiltonian Monte Carlo over closure weights and precision hyperparameters.

The sampled vector is Theta = [theta, log gamma, log lambda] where gamma is
the observation precision and lambda the Laplace prior precision. The
likelihood scores teacher-forced single-step predictions (data-supplied
windows), the prior is Laplace on theta with Gamma priors on the
log-precisions, and the potential is U = -(log likelihood + log prior).
Theta-gradients of the residual term come off the autodiff tape; the
precision coordinates have closed-form derivatives chained on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import (
    ClosureModel,
    closure_eval_tape,
    dde_rk4_step,
    ode_rk4_step,
)
from .errors import ConfigurationError, GradientFailure, IntegrationBlowup
from .lorenz96 import ObservationSet
from .network import ClosureParams
from .training import TrainReport, history_onestep_indices

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PrecisionParams:
    log_gamma: float
    log_lambda: float


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 1e-4
    leapfrog_steps: int = 10
    chain_length: int = 4000
    alpha1: float = 1.0
    beta1: float = 1.0
    alpha2: float = 1.0
    beta2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ConfigurationError("leapfrog_steps must be >= 1")
        if self.chain_length < 1:
            raise ConfigurationError("chain_length must be >= 1")
        for name in ("alpha1", "beta1", "alpha2", "beta2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class HmcSample:
    theta: np.ndarray
    prec: PrecisionParams
    log_posterior: float
    accepted: bool


@dataclass
class Chain:
    samples: np.ndarray        # (N_s, n_theta + 2); last two cols log_gamma, log_lambda
    log_posteriors: np.ndarray
    accepted: np.ndarray       # bool flags
    config: HmcConfig

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted))

    def __len__(self):
        return self.samples.shape[0]

    def sample(self, i: int) -> HmcSample:
        row = self.samples[i]
        return HmcSample(
            theta=row[:-2].copy(),
            prec=PrecisionParams(log_gamma=float(row[-2]), log_lambda=float(row[-1])),
            log_posterior=float(self.log_posteriors[i]),
            accepted=bool(self.accepted[i]),
        )

    def retained_indices(self, burn_in: float = 0.25, thinning: int = 1) -> np.ndarray:
        start = int(round(burn_in * len(self)))
        return np.arange(start, len(self))[::thinning]

    def retained(self, burn_in: float = 0.25, thinning: int = 1):
        idx = self.retained_indices(burn_in, thinning)
        return self.samples[idx], self.log_posteriors[idx]


# -- densities -------------------------------------------------------------

def log_gamma_density(x: float, alpha: float, beta: float) -> float:
    """log Gam(x; alpha, beta) on x > 0 (x = 0 allowed when alpha <= 1)."""
    if x < 0.0:
        return -math.inf
    if x == 0.0:
        if alpha > 1.0:
            return -math.inf
        if alpha == 1.0:
            return math.log(beta)
        return math.inf
    return alpha * math.log(beta) - math.lgamma(alpha) + (alpha - 1.0) * math.log(x) - beta * x


def _dlog_gamma_density(x: float, alpha: float, beta: float) -> float:
    if x <= 0.0:
        return -beta if alpha == 1.0 else 0.0
    return (alpha - 1.0) / x - beta


def _residual_stats(theta: np.ndarray, obs: ObservationSet, model: ClosureModel,
                    with_grad: bool):
    """Sum of squared teacher-forced one-step residuals, count, and theta-grad."""
    n = obs.states.shape[0]
    hist = model.hist

    def build(theta_node):
        closure = closure_eval_tape(theta_node, model.arch)
        if model.variant == "history":
            batch = history_onestep_indices(n, hist.n_h)
            window = [obs.states[batch - d] for d in range(2 * hist.n_h + 1)]
            pred = dde_rk4_step(window, closure, model.F, hist)
            target = obs.states[batch + 2]
        else:
            batch = np.arange(0, n - 1)
            pred = ode_rk4_step(obs.states[batch], closure, model.F, hist.delta_t)
            target = obs.states[batch + 1]
        return ad.tensor_sum(ad.square(pred - target)), len(batch) * obs.states.shape[1]

    if with_grad:
        count_box = {}

        def objective(theta_node):
            ssr, count_box["d"] = build(theta_node)
            return ssr

        ssr_val, grad = ad.grad_through(objective, theta)
        return ssr_val, count_box["d"], grad
    ssr, count = build(ad.constant(theta))
    return float(ssr.value), count, None


def log_likelihood(theta: np.ndarray, log_gamma: float, obs: ObservationSet,
                   model: ClosureModel) -> float:
    """Gaussian likelihood of all teacher-forced single-step targets."""
    try:
        ssr, count, _ = _residual_stats(theta, obs, model, with_grad=False)
    except IntegrationBlowup:
        return -math.inf
    if not math.isfinite(ssr):
        return -math.inf
    gamma = math.exp(log_gamma)
    return 0.5 * count * log_gamma - 0.5 * gamma * ssr - 0.5 * count * LOG_2PI


def log_prior(theta: np.ndarray, log_gamma: float, log_lambda: float,
              cfg: HmcConfig) -> float:
    """Laplace(theta | 0, 1/lambda) plus Gamma priors on the log-precisions."""
    lam = math.exp(log_lambda)
    n = theta.size
    laplace = n * math.log(lam / 2.0) - lam * float(np.sum(np.abs(theta)))
    return (
        laplace
        + log_gamma_density(log_lambda, cfg.alpha1, cfg.beta1)
        + log_gamma_density(log_gamma, cfg.alpha2, cfg.beta2)
    )


def potential_energy(Theta: np.ndarray, obs: ObservationSet, model: ClosureModel,
                     cfg: HmcConfig):
    """U = -(log likelihood + log prior) and its gradient over Theta."""
    theta = Theta[:-2]
    log_gamma = float(Theta[-2])
    log_lambda = float(Theta[-1])
    n_params = theta.size
    grad = np.zeros_like(Theta)

    prior = log_prior(theta, log_gamma, log_lambda, cfg)
    if not math.isfinite(prior):
        return math.inf, grad

    try:
        ssr, count, dssr = _residual_stats(theta, obs, model, with_grad=True)
    except (IntegrationBlowup, GradientFailure):
        return math.inf, grad
    gamma = math.exp(log_gamma)
    lam = math.exp(log_lambda)
    loglik = 0.5 * count * log_gamma - 0.5 * gamma * ssr - 0.5 * count * LOG_2PI
    if not math.isfinite(loglik):
        return math.inf, grad

    # d/dtheta
    grad[:-2] = 0.5 * gamma * dssr + lam * np.sign(theta)
    # d/dlog gamma: likelihood part plus its Gamma prior
    grad[-2] = -(
        0.5 * count - 0.5 * gamma * ssr + _dlog_gamma_density(log_gamma, cfg.alpha2, cfg.beta2)
    )
    # d/dlog lambda: Laplace normalization + |theta| term plus its Gamma prior
    grad[-1] = -(
        n_params - lam * float(np.sum(np.abs(theta)))
        + _dlog_gamma_density(log_lambda, cfg.alpha1, cfg.beta1)
    )
    return -(loglik + prior), grad


# -- leapfrog and chain ----------------------------------------------------

def leapfrog(Theta: np.ndarray, vel: np.ndarray, eps: float, n_steps: int,
             potential):
    """Half-kick / full-drift / half-kick with unit mass.

    Returns (Theta', vel', U', gradU'). n_steps = 0 is the identity map.
    """
    U, grad = potential(Theta)
    if n_steps == 0:
        return Theta.copy(), vel.copy(), U, grad
    q = Theta.copy()
    v = vel.copy()
    v = v - 0.5 * eps * grad
    for i in range(n_steps):
        q = q + eps * v
        U, grad = potential(q)
        if not math.isfinite(U):
            # Diverged trajectory: surface an infinite-energy proposal.
            return q, v, math.inf, grad
        if i < n_steps - 1:
            v = v - eps * grad
    v = v - 0.5 * eps * grad
    return q, v, U, grad


def sample_chain(potential, Theta0: np.ndarray, cfg: HmcConfig,
                 rng: np.random.Generator | None = None) -> Chain:
    """Metropolis-corrected HMC chain for an arbitrary potential."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dim = Theta0.size
    q = np.asarray(Theta0, dtype=np.float64).copy()
    U, _ = potential(q)
    if not math.isfinite(U):
        raise ConfigurationError("initial point has infinite potential energy")

    samples = np.empty((cfg.chain_length, dim))
    log_posts = np.empty(cfg.chain_length)
    accepted = np.zeros(cfg.chain_length, dtype=bool)
    recent: list[bool] = []

    for step in range(cfg.chain_length):
        v = rng.standard_normal(dim)
        H = U + 0.5 * float(v @ v)
        q_new, v_new, U_new, _ = leapfrog(q, v, cfg.step_size, cfg.leapfrog_steps, potential)
        H_new = U_new + 0.5 * float(v_new @ v_new) if math.isfinite(U_new) else math.inf
        accept = math.log(rng.uniform()) < (H - H_new)
        if accept:
            q, U = q_new, U_new
        samples[step] = q
        log_posts[step] = -U
        accepted[step] = accept
        recent.append(bool(accept))
        if len(recent) == 200:
            if sum(recent) < 2:
                log.warning(
                    "HMC acceptance below 1%% over the last 200 steps "
                    "(step %d); consider reducing step_size", step
                )
            recent.clear()
    return Chain(samples=samples, log_posteriors=log_posts, accepted=accepted, config=cfg)


def run_chain(init: TrainReport, obs: ObservationSet, model: ClosureModel,
              cfg: HmcConfig) -> Chain:
    """Posterior chain warm-started from the deterministic optimum.

    gamma starts at the reciprocal deterministic residual variance, lambda
    at 1.
    """
    theta0 = init.final_params.flat
    if not np.all(np.isfinite(theta0)):
        raise ConfigurationError("initial parameters are not finite")
    if init.residual_variance <= 0:
        raise ConfigurationError("residual variance must be positive to seed gamma")
    log_gamma0 = math.log(1.0 / init.residual_variance)
    log_lambda0 = 0.0
    Theta0 = np.concatenate([theta0, [log_gamma0, log_lambda0]])

    def potential(Theta):
        return potential_energy(Theta, obs, model, cfg)

    return sample_chain(potential, Theta0, cfg)
