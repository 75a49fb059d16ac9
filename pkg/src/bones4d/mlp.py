"""Small coordinate MLPs built on the autodiff tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import ParamStore
from .tensor import Tensor, dense

_ACTIVATIONS = ("softplus", "tanh", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    hidden: tuple = (128, 128, 128, 128, 128)
    activation: str = "tanh"
    out_dim: int = 1

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if any(w <= 0 for w in self.hidden) or self.out_dim <= 0:
            raise ValueError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Fully connected net; parameters live in a shared ParamStore under `prefix`."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, spec: MlpSpec,
                 rng: np.random.Generator, zero_init_last: bool = False,
                 input_scale: np.ndarray | None = None):
        self.spec = spec
        self.weights = []
        self.biases = []
        dims = [in_dim, *spec.hidden, spec.out_dim]
        last = len(dims) - 2
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            if zero_init_last and i == last:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
                if i == 0 and input_scale is not None:
                    w *= np.asarray(input_scale)[:, None]
            self.weights.append(store.add(f"{prefix}.w{i}", w))
            self.biases.append(store.add(f"{prefix}.b{i}", np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        act = self.spec.activation
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1]) if len(lead) != 1 else x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dense(h, w, b, activation=act if i < last else None)
        return h.reshape(lead + (self.spec.out_dim,)) if len(lead) != 1 else h

    def param_names(self):
        return [w.name for w in self.weights] + [b.name for b in self.biases]
