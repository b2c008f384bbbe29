"""Shared fixtures. The desk-scale pipeline is expensive and session-scoped."""

from dataclasses import replace

import numpy as np
import pytest

from l96closure.experiment import (
    build_dataset,
    initial_window,
    load_preset,
    run_forecast_stage,
    run_hmc_stage,
    run_training,
    truth_on_forecast_grid,
    uq_sweep,
)
from l96closure.forecast import (
    coarse_step_stability_experiment,
    forecast_deterministic,
    rmse,
)
from l96closure.network import ClosureParams

# n_f per variant: deeper rollouts pay off for the lagged model, the
# instantaneous model trains on slightly shallower ones
TRAIN_DEPTH = {"history": 5, "instantaneous": 4}

# Sampler settings tuned per posterior to an acceptance rate near 0.9.
# The lagged posterior is much sharper: its step size hits an integrator
# stability wall just above 1.25e-3, so it takes longer trajectories at a
# small step, while the flatter instantaneous posterior tolerates a step
# four times larger at the default trajectory length.
HMC_TUNING = {
    "history": {"step_size": 1e-3, "leapfrog_steps": 30},
    "instantaneous": {"step_size": 4e-3, "leapfrog_steps": 10},
}


@pytest.fixture(scope="session")
def desk_pipeline():
    """Both closure variants trained, sampled and scored at desk scale.

    Runs once per session (tens of minutes); every desk-scale acceptance
    check reads from the returned dictionary.
    """
    base = load_preset("desk")
    traj, obs = build_dataset(base)
    out = {"config": base, "traj": traj, "obs": obs}

    for variant in ("history", "instantaneous"):
        cfg = replace(
            base,
            closure=replace(base.closure, variant=variant),
            train=replace(base.train, n_f=TRAIN_DEPTH[variant]),
            hmc=replace(base.hmc, **HMC_TUNING[variant]),
        )
        report = run_training(obs, cfg)
        chain = run_hmc_stage(report, obs, cfg)
        det, ens, metrics, (truth_states, truth_closure) = run_forecast_stage(
            cfg, traj, obs, report.final_params, chain
        )
        bayes_rmse = None
        if ens is not None and det.blowup_time is None:
            bayes_rmse, _ = rmse(truth_states, ens.mean)
        out[variant] = {
            "config": cfg,
            "report": report,
            "chain": chain,
            "det": det,
            "ens": ens,
            "metrics": metrics,
            "truth_states": truth_states,
            "truth_closure": truth_closure,
            "bayes_rmse": bayes_rmse,
        }

    # zero-closure reference forecasts, one per stepping scheme
    window = initial_window(obs, base.hist, base.forecast.init_point)
    truth_states, _ = truth_on_forecast_grid(traj, base, base.forecast.init_point, obs)
    zeros = {}
    for variant in ("history", "instantaneous"):
        cfg = out[variant]["config"]
        params = ClosureParams(
            flat=np.zeros(cfg.model.arch.param_count), arch=cfg.model.arch
        )
        fc = forecast_deterministic(params, window, base.horizon_ticks, cfg.model)
        if fc.blowup_time is None:
            val, _ = rmse(truth_states, fc.result.states)
        else:
            n_ok = fc.result.states.shape[0]
            val = rmse(truth_states[:n_ok], fc.result.states)[0] if n_ok else np.inf
        zeros[variant] = {"rmse": val, "blowup": fc.blowup_time}
    out["zero"] = zeros

    out["stability"] = coarse_step_stability_experiment(
        base.truth, out["history"]["report"].final_params, window,
        out["history"]["config"].model, truth_states, base.horizon_ticks,
    )
    return out


@pytest.fixture(scope="session")
def uq_table():
    """Reduced forcing x noise sweep of the history variant's sigma_r."""
    base = load_preset("desk")
    small = replace(
        base,
        truth=replace(base.truth, t_end=10.0),
        train=replace(base.train, phase1_iters=1000, phase2_iters=1500),
        hmc=replace(base.hmc, chain_length=300, leapfrog_steps=10),
    )
    return uq_sweep(small, F_values=[5.0, 15.0], noise_values=[0.03, 0.10])
