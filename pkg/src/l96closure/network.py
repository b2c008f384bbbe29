"""Fully-connected closure network with flat parameter storage.

Parameters live in a single flat vector so the same vector can be fed to
Adam, to the HMC chain, and to the tape-based gradient machinery. Layer
order in the flat vector: for each layer in input->output order, the weight
matrix (row-major, fan_in x fan_out) followed by the bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ConfigurationError("hidden_layers must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(**d)


@dataclass
class ClosureParams:
    flat: np.ndarray
    arch: MlpArchitecture

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.param_count,):
            raise ConfigurationError(
                f"flat length {self.flat.shape} does not match architecture "
                f"parameter count {self.arch.param_count}"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.flat, self.arch)


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def unflatten(flat: np.ndarray, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    i = 0
    for fi, fo in arch.layer_dims:
        W = flat[i : i + fi * fo].reshape(fi, fo)
        i += fi * fo
        b = flat[i : i + fo]
        i += fo
        layers.append((W, b))
    return layers


def init_params(arch: MlpArchitecture, seed: int) -> ClosureParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo in arch.layer_dims:
        limit = np.sqrt(6.0 / (fi + fo))
        W = rng.uniform(-limit, limit, size=(fi, fo))
        b = np.zeros(fo)
        layers.append((W, b))
    return ClosureParams(flat=flatten(layers), arch=arch)


def _activation_fn(arch: MlpArchitecture, on_tape: bool):
    if arch.activation == "tanh":
        return ad.tanh if on_tape else np.tanh
    return ad.relu if on_tape else (lambda x: np.maximum(x, 0.0))


def mlp_forward(params: ClosureParams, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass; x has shape (..., input_dim)."""
    arch = params.arch
    if x.shape[-1] != arch.input_dim:
        raise ConfigurationError(
            f"input dim {x.shape[-1]} does not match architecture {arch.input_dim}"
        )
    act = _activation_fn(arch, on_tape=False)
    lead = x.shape[:-1]
    h = x.reshape(-1, arch.input_dim)
    layers = params.layers()
    for W, b in layers[:-1]:
        h = act(h @ W + b)
    W, b = layers[-1]
    h = h @ W + b
    return h.reshape(lead + (arch.output_dim,))


def mlp_forward_t(theta: ad.Tensor, x, arch: MlpArchitecture) -> ad.Tensor:
    """Tape forward pass with a flat parameter Tensor; x is (..., input_dim)."""
    act = _activation_fn(arch, on_tape=True)
    lead = x.shape[:-1]
    h = ad.reshape(x, (-1, arch.input_dim))
    i = 0
    n_layers = len(arch.layer_dims)
    for li, (fi, fo) in enumerate(arch.layer_dims):
        W = ad.reshape(theta[i : i + fi * fo], (fi, fo))
        i += fi * fo
        b = theta[i : i + fo]
        i += fo
        h = ad.matmul(h, W) + b
        if li < n_layers - 1:
            h = act(h)
    return ad.reshape(h, lead + (arch.output_dim,))


def mlp_forward_members(thetas: np.ndarray, x: np.ndarray, arch: MlpArchitecture) -> np.ndarray:
    """Forward pass batched over ensemble members.

    thetas: (M, param_count); x: (M, B, input_dim) -> (M, B, output_dim).
    """
    act = _activation_fn(arch, on_tape=False)
    M = thetas.shape[0]
    h = x
    i = 0
    n_layers = len(arch.layer_dims)
    for li, (fi, fo) in enumerate(arch.layer_dims):
        W = thetas[:, i : i + fi * fo].reshape(M, fi, fo)
        i += fi * fo
        b = thetas[:, i : i + fo].reshape(M, 1, fo)
        i += fo
        h = np.einsum("mbi,mio->mbo", h, W) + b
        if li < n_layers - 1:
            h = act(h)
    return h


def save_checkpoint(path: str | Path, params: ClosureParams, meta: dict | None = None):
    """JSON checkpoint: architecture + metadata header, flat parameter list."""
    payload = {
        "architecture": params.arch.to_dict(),
        "meta": meta or {},
        "flat": params.flat.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[ClosureParams, dict]:
    payload = json.loads(Path(path).read_text())
    arch = MlpArchitecture.from_dict(payload["architecture"])
    params = ClosureParams(flat=np.asarray(payload["flat"], dtype=np.float64), arch=arch)
    return params, payload.get("meta", {})
