"""Experiment configuration and the end-to-end pipeline.

An ExperimentConfig binds every module's settings; the pipeline stages are
data generation, deterministic training, HMC sampling and online
forecasting with metrics. The truth run is extended past the training
horizon so forecasts launched from the last training point can be scored
against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import ClosureModel, HistoryConfig, HistoryWindow, arch_for_variant
from .errors import ConfigurationError, IntegrationBlowup
from .forecast import (
    ForecastEnsemble,
    MetricsReport,
    forecast_deterministic,
    forecast_ensemble,
    metrics_report,
    sigma_r,
)
from .hmc import Chain, HmcConfig, run_chain
from .lorenz96 import ObservationSet, TruthConfig, TruthTrajectory, make_observations, simulate_truth
from .network import ClosureParams
from .training import TrainConfig, TrainReport, adam_train


@dataclass(frozen=True)
class ObservationConfig:
    stride: int = 2
    noise_fraction: float = 0.03
    seed: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError("observation.stride must be >= 1")
        if self.noise_fraction < 0:
            raise ConfigurationError("observation.noise_fraction must be >= 0")


@dataclass(frozen=True)
class ClosureConfig:
    variant: str = "history"
    n_h: int = 2
    hidden_layers: int = 6
    hidden_width: int = 128
    activation: str = "tanh"
    seed: int = 2


@dataclass(frozen=True)
class ForecastConfig:
    horizon_mtu: float = 10.0
    init_point: str = "last"    # "first" or "last"
    burn_in: float = 0.25
    thinning: int = 4

    def __post_init__(self):
        if self.init_point not in ("first", "last"):
            raise ConfigurationError("forecast.init_point must be 'first' or 'last'")
        if not (0.0 <= self.burn_in < 1.0):
            raise ConfigurationError("forecast.burn_in must be in [0, 1)")
        if self.thinning < 1:
            raise ConfigurationError("forecast.thinning must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    truth: TruthConfig = field(default_factory=TruthConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    closure: ClosureConfig = field(default_factory=ClosureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hmc: HmcConfig = field(default_factory=HmcConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    output_dir: str = "runs/experiment"
    threads: int = 1

    @property
    def delta_t(self) -> float:
        return self.observation.stride * self.truth.dt

    @property
    def hist(self) -> HistoryConfig:
        return HistoryConfig(n_h=self.closure.n_h, delta_t=self.delta_t)

    @property
    def model(self) -> ClosureModel:
        arch = arch_for_variant(
            self.closure.variant, self.closure.n_h,
            self.closure.hidden_layers, self.closure.hidden_width,
            self.closure.activation,
        )
        return ClosureModel(arch=arch, hist=self.hist, F=self.truth.F,
                            variant=self.closure.variant)

    @property
    def horizon_ticks(self) -> int:
        ticks = self.forecast.horizon_mtu / self.delta_t
        if abs(ticks - round(ticks)) > 1e-9:
            raise ConfigurationError(
                "forecast.horizon_mtu must be a multiple of stride*dt"
            )
        return int(round(ticks))

    def to_dict(self) -> dict:
        return {
            "truth": dict(self.truth.__dict__),
            "observation": dict(self.observation.__dict__),
            "closure": dict(self.closure.__dict__),
            "train": dict(self.train.__dict__),
            "hmc": dict(self.hmc.__dict__),
            "forecast": dict(self.forecast.__dict__),
            "output_dir": self.output_dir,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def sub(section, klass):
            raw = d.get(section, {})
            try:
                return klass(**raw)
            except TypeError as exc:
                raise ConfigurationError(f"{section}: {exc}") from exc

        return cls(
            truth=sub("truth", TruthConfig),
            observation=sub("observation", ObservationConfig),
            closure=sub("closure", ClosureConfig),
            train=sub("train", TrainConfig),
            hmc=sub("hmc", HmcConfig),
            forecast=sub("forecast", ForecastConfig),
            output_dir=d.get("output_dir", "runs/experiment"),
            threads=d.get("threads", 1),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def seeds(self) -> dict:
        return {
            "truth": self.truth.seed,
            "observation": self.observation.seed,
            "closure": self.closure.seed,
            "train": self.train.seed,
            "hmc": self.hmc.seed,
        }


def load_preset(name: str) -> ExperimentConfig:
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise ConfigurationError(f"unknown preset {name!r}")
    return ExperimentConfig.from_file(path)


# -- pipeline stages -------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> tuple[TruthTrajectory, ObservationSet]:
    """Truth run over [0, t_end + forecast horizon]; observations over [0, t_end]."""
    sim_cfg = replace(cfg.truth, t_end=cfg.truth.t_end + cfg.forecast.horizon_mtu)
    traj = simulate_truth(sim_cfg)
    n_train = int(round(cfg.truth.t_end / cfg.truth.dt)) + 1
    train_traj = TruthTrajectory(
        times=traj.times[:n_train], X=traj.X[:n_train], Y=traj.Y[:n_train],
        coupling=traj.coupling[:n_train], config=cfg.truth,
    )
    obs = make_observations(
        train_traj, cfg.observation.stride, cfg.observation.noise_fraction,
        cfg.observation.seed,
    )
    return traj, obs


def initial_window(obs: ObservationSet, hist: HistoryConfig,
                   which: str = "last") -> HistoryWindow:
    """History window anchored at the first usable or the last observation."""
    n = obs.states.shape[0]
    w = hist.window_len
    if n < w:
        raise ConfigurationError("not enough observations for a history window")
    anchor = w - 1 if which == "first" else n - 1
    states = obs.states[anchor - w + 1 : anchor + 1][::-1]
    return HistoryWindow(states=np.array(states), t=float(obs.times[anchor]))


def window_anchor_index(obs: ObservationSet, hist: HistoryConfig, which: str) -> int:
    return hist.window_len - 1 if which == "first" else obs.states.shape[0] - 1


def truth_on_forecast_grid(traj: TruthTrajectory, cfg: ExperimentConfig,
                           which: str, obs: ObservationSet):
    """Truth slow states and coupling at the forecast delta_t grid."""
    anchor_obs = window_anchor_index(obs, cfg.hist, which)
    anchor_fine = anchor_obs * cfg.observation.stride
    horizon = cfg.horizon_ticks
    idx = anchor_fine + cfg.observation.stride * np.arange(1, horizon + 1)
    if idx[-1] >= traj.X.shape[0]:
        raise ConfigurationError("truth trajectory too short for the forecast horizon")
    return traj.X[idx], traj.coupling[idx]


def run_training(obs: ObservationSet, cfg: ExperimentConfig) -> TrainReport:
    model = cfg.model
    return adam_train(obs, model.arch, model.hist, cfg.train, model.variant, model.F)


def run_hmc_stage(report: TrainReport, obs: ObservationSet,
                  cfg: ExperimentConfig) -> Chain:
    return run_chain(report, obs, cfg.model, cfg.hmc)


def run_forecast_stage(cfg: ExperimentConfig, traj: TruthTrajectory,
                       obs: ObservationSet, params: ClosureParams,
                       chain: Chain | None = None):
    """Deterministic (and optionally ensemble) forecast plus metrics."""
    model = cfg.model
    which = cfg.forecast.init_point
    window = initial_window(obs, model.hist, which)
    truth_states, truth_closure = truth_on_forecast_grid(traj, cfg, which, obs)
    horizon = cfg.horizon_ticks

    det = forecast_deterministic(params, window, horizon, model)
    ens = None
    if chain is not None:
        ens = forecast_ensemble(
            chain, window, horizon, model,
            burn_in=cfg.forecast.burn_in, thinning=cfg.forecast.thinning,
        )
    if det.blowup_time is not None:
        n_ok = det.result.states.shape[0]
        report = metrics_report(
            truth_states[:n_ok], truth_closure[:n_ok],
            det.result.states, det.result.closures,
        ) if n_ok else None
    else:
        report = metrics_report(
            truth_states, truth_closure, det.result.states, det.result.closures,
            ensemble=ens,
        )
    return det, ens, report, (truth_states, truth_closure)


# -- UQ sweep --------------------------------------------------------------

def uq_sweep(base: ExperimentConfig, F_values, noise_values) -> dict:
    """sigma_r over the forcing x noise grid for the configured variant.

    Each cell runs the full pipeline. Failed cells are recorded as None.
    """
    table = {}
    failures = {}
    for F in F_values:
        for noise in noise_values:
            cfg = replace(
                base,
                truth=replace(base.truth, F=float(F)),
                observation=replace(base.observation, noise_fraction=float(noise)),
            )
            try:
                traj, obs = build_dataset(cfg)
                report = run_training(obs, cfg)
                chain = run_hmc_stage(report, obs, cfg)
                which = cfg.forecast.init_point
                window = initial_window(obs, cfg.hist, which)
                truth_states, _ = truth_on_forecast_grid(traj, cfg, which, obs)
                ens = forecast_ensemble(
                    chain, window, cfg.horizon_ticks, cfg.model,
                    burn_in=cfg.forecast.burn_in, thinning=cfg.forecast.thinning,
                )
                value, _ = sigma_r(truth_states, ens.std)
                table[(float(F), float(noise))] = value
            except (IntegrationBlowup, ConfigurationError) as exc:
                table[(float(F), float(noise))] = None
                failures[(float(F), float(noise))] = str(exc)
    return {"sigma_r": table, "failures": failures}
