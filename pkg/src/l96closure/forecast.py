"""Online forecasting and quantitative forecast metrics.

Deterministic forecasts wrap the closure rollouts; ensemble forecasts run
one rollout per retained posterior sample (vectorized over members) and
summarize them with population mean/variance. Metrics: cumulative
normalized RMSE, fraction of truth points outside the mean +/- 2 sigma
band, and the mean relative standard deviation sigma_r.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ClosureModel,
    HistoryWindow,
    RolloutResult,
    rollout,
    rollout_instantaneous,
    rollout_members,
    rollout_members_instantaneous,
)
from .errors import ConfigurationError, IntegrationBlowup
from .hmc import Chain, HmcSample
from .lorenz96 import TruthConfig, simulate_truth
from .network import ClosureParams

log = logging.getLogger(__name__)

SIGMA_R_FLOOR = 1e-8


@dataclass
class DeterministicForecast:
    result: RolloutResult
    blowup_time: float | None = None


@dataclass
class ForecastEnsemble:
    times: np.ndarray            # (steps,)
    member_states: np.ndarray    # (N_s, steps, K)
    member_closures: np.ndarray  # (N_s, steps, K)
    mean: np.ndarray             # (steps, K)
    variance: np.ndarray         # (steps, K), population convention
    map_track: np.ndarray        # (steps, K)
    map_closures: np.ndarray     # (steps, K)
    n_failed: int = 0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def closure_mean(self) -> np.ndarray:
        return self.member_closures.mean(axis=0)

    @property
    def closure_variance(self) -> np.ndarray:
        return self.member_closures.var(axis=0)


@dataclass
class MetricsReport:
    rmse_states: float
    rmse_states_series: np.ndarray
    rmse_closure: float
    rmse_closure_series: np.ndarray
    frac_out_2sigma_states: float | None = None
    frac_out_2sigma_closure: float | None = None
    sigma_r: float | None = None
    sigma_r_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "rmse_states": self.rmse_states,
            "rmse_closure": self.rmse_closure,
            "frac_out_2sigma_states": self.frac_out_2sigma_states,
            "frac_out_2sigma_closure": self.frac_out_2sigma_closure,
            "sigma_r": self.sigma_r,
            "sigma_r_excluded": self.sigma_r_excluded,
        }


# -- forecasting -----------------------------------------------------------

def forecast_deterministic(params: ClosureParams, init: HistoryWindow, horizon: int,
                           model: ClosureModel) -> DeterministicForecast:
    """Online rollout of a single parameter vector; partial result on blowup."""
    def run(h):
        if model.variant == "history":
            return rollout(init, params, model.F, model.hist, h)
        return rollout_instantaneous(init.states[0], init.t, params, model.F, model.hist, h)

    try:
        return DeterministicForecast(result=run(horizon))
    except IntegrationBlowup as exc:
        n_ok = max(exc.step_index - 1, 1)
        partial = run(n_ok) if exc.step_index > 1 else RolloutResult(
            times=np.empty(0), states=np.empty((0, init.states.shape[1])),
            closures=np.empty((0, init.states.shape[1])),
        )
        return DeterministicForecast(result=partial, blowup_time=exc.time)


def _member_rollout(thetas, init, horizon, model):
    if model.variant == "history":
        return rollout_members(init, thetas, model.arch, model.F, model.hist, horizon)
    return rollout_members_instantaneous(
        init.states[0], init.t, thetas, model.arch, model.F, model.hist, horizon
    )


def forecast_ensemble(chain: Chain, init: HistoryWindow, horizon: int,
                      model: ClosureModel, burn_in: float = 0.25,
                      thinning: int = 4) -> ForecastEnsemble:
    """One rollout per retained chain sample; members that blow up are
    excluded from the moments and counted."""
    samples, _ = chain.retained(burn_in=burn_in, thinning=thinning)
    if samples.shape[0] == 0:
        raise ConfigurationError("no chain samples retained after burn-in/thinning")
    thetas = samples[:, :-2]

    try:
        res = _member_rollout(thetas, init, horizon, model)
        states = np.moveaxis(res.states, 1, 0)     # (M, steps, K)
        closures = np.moveaxis(res.closures, 1, 0)
        times = res.times
        n_failed = 0
    except IntegrationBlowup:
        # Some member diverged: run members singly and drop the bad ones.
        kept_states, kept_closures, times = [], [], None
        n_failed = 0
        for m in range(thetas.shape[0]):
            try:
                r = _member_rollout(thetas[m : m + 1], init, horizon, model)
                kept_states.append(r.states[:, 0, :])
                kept_closures.append(r.closures[:, 0, :])
                times = r.times
            except IntegrationBlowup:
                n_failed += 1
        if not kept_states:
            raise IntegrationBlowup(time=init.t, step_index=0,
                                    message="every ensemble member blew up")
        log.warning("%d/%d ensemble members blew up and were excluded",
                    n_failed, thetas.shape[0])
        states = np.stack(kept_states, axis=0)
        closures = np.stack(kept_closures, axis=0)

    mean = states.mean(axis=0)
    variance = states.var(axis=0)   # population: divide by N_s

    map_sample = map_estimate(chain, burn_in=burn_in, thinning=thinning)
    map_params = ClosureParams(flat=map_sample.theta, arch=model.arch)
    map_fc = forecast_deterministic(map_params, init, horizon, model)
    if map_fc.blowup_time is None:
        map_track, map_closures = map_fc.result.states, map_fc.result.closures
    else:
        map_track = np.full_like(mean, np.nan)
        map_closures = np.full_like(mean, np.nan)
        n_steps = map_fc.result.states.shape[0]
        map_track[:n_steps] = map_fc.result.states
        map_closures[:n_steps] = map_fc.result.closures

    return ForecastEnsemble(
        times=times,
        member_states=states,
        member_closures=closures,
        mean=mean,
        variance=variance,
        map_track=map_track,
        map_closures=map_closures,
        n_failed=n_failed,
    )


def predictive_draws(ensemble: ForecastEnsemble, log_gammas: np.ndarray,
                     seed: int = 0) -> np.ndarray:
    """Member trajectories with observation noise eps ~ N(0, 1/gamma) added."""
    if log_gammas.shape[0] != ensemble.member_states.shape[0]:
        raise ConfigurationError("need one log_gamma per ensemble member")
    rng = np.random.default_rng(seed)
    sigma = np.exp(-0.5 * log_gammas)[:, None, None]
    noise = rng.standard_normal(ensemble.member_states.shape)
    return ensemble.member_states + sigma * noise


def map_estimate(chain: Chain, burn_in: float = 0.0, thinning: int = 1) -> HmcSample:
    """The retained sample with maximal stored log posterior."""
    if len(chain) == 0:
        raise ConfigurationError("chain is empty")
    idx = chain.retained_indices(burn_in=burn_in, thinning=thinning)
    if len(idx) == 0:
        raise ConfigurationError("no samples retained")
    best = idx[int(np.argmax(chain.log_posteriors[idx]))]
    return chain.sample(int(best))


# -- metrics ---------------------------------------------------------------

def rmse(truth: np.ndarray, pred: np.ndarray):
    """Cumulative normalized RMSE: sqrt(sum ||X - X*||^2) / sqrt(sum ||X||^2).

    Returns (final value, per-prefix series).
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ConfigurationError(f"grid mismatch: truth {truth.shape} vs pred {pred.shape}")
    err = np.cumsum(np.sum((truth - pred) ** 2, axis=-1))
    ref = np.cumsum(np.sum(truth ** 2, axis=-1))
    series = np.sqrt(err) / np.sqrt(ref)
    return float(series[-1]), series


def frac_out_2sigma(truth: np.ndarray, mean: np.ndarray, std: np.ndarray) -> float:
    """Fraction of truth points outside [mean - 2 std, mean + 2 std]."""
    truth = np.asarray(truth)
    if truth.shape != mean.shape or truth.shape != std.shape:
        raise ConfigurationError("grids of truth, mean and std must match")
    out = (truth < mean - 2.0 * std) | (truth > mean + 2.0 * std)
    return float(np.mean(out))


def sigma_r(truth: np.ndarray, std: np.ndarray):
    """Mean relative standard deviation: average of std / truth (signed).

    Terms with |truth| < 1e-8 are excluded; returns (value, excluded count).
    """
    truth = np.asarray(truth, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if truth.shape != std.shape:
        raise ConfigurationError("grids of truth and std must match")
    keep = np.abs(truth) >= SIGMA_R_FLOOR
    n_excluded = int(truth.size - keep.sum())
    if keep.sum() == 0:
        raise ConfigurationError("all sigma_r terms excluded by the near-zero guard")
    value = float(np.mean(std[keep] / truth[keep]))
    return value, n_excluded


def metrics_report(truth_states: np.ndarray, truth_closure: np.ndarray,
                   forecast_states: np.ndarray, forecast_closure: np.ndarray,
                   ensemble: ForecastEnsemble | None = None) -> MetricsReport:
    r_states, r_states_series = rmse(truth_states, forecast_states)
    r_clo, r_clo_series = rmse(truth_closure, forecast_closure)
    report = MetricsReport(
        rmse_states=r_states,
        rmse_states_series=r_states_series,
        rmse_closure=r_clo,
        rmse_closure_series=r_clo_series,
    )
    if ensemble is not None:
        report.frac_out_2sigma_states = frac_out_2sigma(
            truth_states, ensemble.mean, ensemble.std
        )
        report.frac_out_2sigma_closure = frac_out_2sigma(
            truth_closure, ensemble.closure_mean, np.sqrt(ensemble.closure_variance)
        )
        report.sigma_r, report.sigma_r_excluded = sigma_r(truth_states, ensemble.std)
    return report


# -- coarse-step stability experiment -------------------------------------

def coarse_step_stability_experiment(truth_cfg: TruthConfig, params: ClosureParams,
                                     init: HistoryWindow, model: ClosureModel,
                                     truth_states_fine: np.ndarray,
                                     horizon: int) -> dict:
    """Truth model at step 2*delta_t vs the trained history model at the
    same step, from the same starting point.

    `truth_states_fine` must hold the reference slow states on the forecast
    delta_t grid (horizon rows past the init window).
    """
    from dataclasses import replace

    from .lorenz96 import default_initial_state

    coarse_step = 2.0 * model.hist.delta_t
    coarse_cfg = replace(truth_cfg, dt=coarse_step)
    # Start from an attractor state reached at the fine step, so the coarse
    # run probes step-size stability rather than transient growth.
    x0 = default_initial_state(truth_cfg)
    try:
        simulate_truth(coarse_cfg, x0=x0)
        truth_divergence_time = None
    except IntegrationBlowup as exc:
        truth_divergence_time = exc.time

    fc = forecast_deterministic(params, init, horizon, model)
    model_finite = fc.blowup_time is None
    if model_finite:
        model_rmse, _ = rmse(truth_states_fine, fc.result.states)
    else:
        model_rmse = None
    return {
        "coarse_step": coarse_step,
        "truth_divergence_time": truth_divergence_time,
        "model_finite": model_finite,
        "model_blowup_time": fc.blowup_time,
        "model_rmse": model_rmse,
    }
