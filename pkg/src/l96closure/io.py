"""CSV/JSON serialization for trajectories, observations and chains.

Numbers are written with 17 significant digits so rereads and reruns are
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dynamics import RolloutResult
from .hmc import Chain, HmcConfig
from .lorenz96 import ObservationSet, TruthTrajectory

FLOAT_FMT = "%.17g"


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]):
    mat = np.column_stack(columns)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, mat, delimiter=",", fmt=FLOAT_FMT)


def write_trajectory_csv(path: str | Path, traj: TruthTrajectory,
                         include_coupling: bool = True):
    K = traj.X.shape[1]
    header = ["t"] + [f"X{k+1}" for k in range(K)]
    cols = [traj.times] + [traj.X[:, k] for k in range(K)]
    if include_coupling:
        header += [f"C{k+1}" for k in range(K)]
        cols += [traj.coupling[:, k] for k in range(K)]
    _write_csv(Path(path), header, cols)


def write_rollout_csv(path: str | Path, result: RolloutResult):
    K = result.states.shape[-1]
    header = ["t"] + [f"X{k+1}" for k in range(K)] + [f"P{k+1}" for k in range(K)]
    cols = [result.times] + [result.states[:, k] for k in range(K)] \
        + [result.closures[:, k] for k in range(K)]
    _write_csv(Path(path), header, cols)


def write_band_csv(path: str | Path, times: np.ndarray, mean: np.ndarray,
                   std: np.ndarray):
    """Ensemble mean and +/- 2 sigma band, one block of columns per variable."""
    K = mean.shape[1]
    header = ["t"]
    cols = [times]
    for k in range(K):
        header += [f"mu{k+1}", f"lo{k+1}", f"hi{k+1}"]
        cols += [mean[:, k], mean[:, k] - 2.0 * std[:, k], mean[:, k] + 2.0 * std[:, k]]
    _write_csv(Path(path), header, cols)


def save_observations(directory: str | Path, obs: ObservationSet,
                      basename: str = "observations"):
    directory = Path(directory)
    meta = {
        "noise_fraction": obs.noise_fraction,
        "per_var_std": obs.per_var_std.tolist(),
        "seed": obs.seed,
        "n_points": int(obs.times.shape[0]),
        "delta_t": obs.delta_t,
    }
    (directory / f"{basename}.json").write_text(json.dumps(meta, indent=2))
    K = obs.states.shape[1]
    header = ["t"] + [f"X{k+1}" for k in range(K)]
    cols = [obs.times] + [obs.states[:, k] for k in range(K)]
    _write_csv(directory / f"{basename}.csv", header, cols)


def load_observations(directory: str | Path,
                      basename: str = "observations") -> ObservationSet:
    directory = Path(directory)
    meta = json.loads((directory / f"{basename}.json").read_text())
    mat = np.loadtxt(directory / f"{basename}.csv", delimiter=",", skiprows=1)
    return ObservationSet(
        times=mat[:, 0],
        states=mat[:, 1:],
        noise_fraction=meta["noise_fraction"],
        per_var_std=np.asarray(meta["per_var_std"]),
        seed=meta["seed"],
    )


def save_chain(directory: str | Path, chain: Chain, basename: str = "chain"):
    directory = Path(directory)
    manifest = {
        "config": chain.config.__dict__,
        "acceptance_rate": chain.acceptance_rate,
        "n_samples": len(chain),
    }
    (directory / f"{basename}.json").write_text(json.dumps(manifest, indent=2))
    np.save(directory / f"{basename}_samples.npy", chain.samples)
    np.save(directory / f"{basename}_accepted.npy", chain.accepted)
    _write_csv(directory / f"{basename}_logpost.csv", ["log_posterior"],
               [chain.log_posteriors])


def load_chain(directory: str | Path, basename: str = "chain") -> Chain:
    directory = Path(directory)
    manifest = json.loads((directory / f"{basename}.json").read_text())
    samples = np.load(directory / f"{basename}_samples.npy")
    accepted = np.load(directory / f"{basename}_accepted.npy")
    log_posts = np.loadtxt(directory / f"{basename}_logpost.csv",
                           delimiter=",", skiprows=1)
    return Chain(
        samples=samples,
        log_posteriors=np.atleast_1d(log_posts),
        accepted=accepted,
        config=HmcConfig(**manifest["config"]),
    )


def write_loss_curve_csv(path: str | Path, losses: np.ndarray):
    _write_csv(Path(path), ["iteration", "loss"],
               [np.arange(len(losses), dtype=float), np.asarray(losses)])


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(directory: str | Path, config: dict, seeds: dict):
    from . import __version__

    manifest = {
        "config_hash": config_hash(config),
        "config": config,
        "seeds": seeds,
        "version": __version__,
    }
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
