"""Canonical shape and appearance fields.

A time-invariant SDF/feature MLP defines geometry in canonical space; a color
MLP conditioned on per-frame appearance codes defines radiance; a learnable
Laplace scale converts signed distance to volume-rendering density. Signed
distance is negative inside, positive outside.
"""

from __future__ import annotations

import logging

import numpy as np

from .encoding import TIME_ENCODING, XYZ_ENCODING, PositionalEncoding
from .mlp import Mlp, MlpSpec
from .optim import AdamConfig, ParamStore, adam_step
from .tensor import Tensor, as_tensor, backward, concat, where

log = logging.getLogger(__name__)

CANONICAL_HALF_EXTENT = 0.5  # axis-aligned canonical cube, meters
SPHERE_INIT_RADIUS = 0.1  # meters
FEATURE_DIM = 16
APPEARANCE_DIM = 32
NORMAL_STEP = 1e-3  # 1 mm central-difference step for SDF gradients

SDF_TRUNK_SPEC = MlpSpec(hidden=(128,) * 5, activation="tanh", out_dim=1 + FEATURE_DIM)
COLOR_SPEC = MlpSpec(hidden=(64, 64), activation="tanh", out_dim=3)


class CanonicalSdf:
    """MLP mapping canonical 3D points to (signed distance, 16-dim feature)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 spec: MlpSpec = SDF_TRUNK_SPEC,
                 encoding: PositionalEncoding = XYZ_ENCODING):
        if spec.out_dim != 1 + FEATURE_DIM:
            raise ValueError("SDF trunk must emit distance plus 16 feature dims")
        self.encoding = encoding
        self.mlp = Mlp(store, "sdf", encoding.output_dim(3), spec, rng,
                       input_scale=encoding.frequency_damping(3))
        self._warned_oob = False

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        """x: [.., 3] points (Tensor or ndarray) -> (d [..], phi [.., 16])."""
        if isinstance(x, np.ndarray):
            if not self._warned_oob and np.abs(x).max() > CANONICAL_HALF_EXTENT * 1.5:
                log.debug("SDF queried outside the canonical bounding volume")
                self._warned_oob = True
            enc = Tensor(self.encoding.encode_np(x))
        else:
            enc = self.encoding.encode(x)
        out = self.mlp(enc)
        return out[..., 0], out[..., 1:]

    def distance(self, x) -> Tensor:
        return self(x)[0]


class AppearanceField:
    """Color MLP conditioned on a 32-dim per-frame appearance code."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, n_frames: int,
                 spec: MlpSpec = COLOR_SPEC,
                 encoding: PositionalEncoding = XYZ_ENCODING):
        self.encoding = encoding
        self.n_frames = n_frames
        scale = np.concatenate([encoding.frequency_damping(3), np.ones(APPEARANCE_DIM)])
        self.mlp = Mlp(store, "color", encoding.output_dim(3) + APPEARANCE_DIM, spec, rng,
                       input_scale=scale)
        self.codes = store.add("omega", rng.normal(0.0, 0.1, size=(n_frames, APPEARANCE_DIM)))

    def code_for(self, t: np.ndarray) -> Tensor:
        t = np.asarray(t)
        if (t < 0).any() or (t >= self.n_frames).any():
            raise IndexError(f"frame index out of range 0..{self.n_frames - 1}")
        return self.codes[t.astype(int)]

    def __call__(self, x, omega: Tensor) -> Tensor:
        """x: [P, 3], omega: [P, 32] or [32] -> colors in [0, 1], shape [P, 3]."""
        enc = Tensor(self.encoding.encode_np(x)) if isinstance(x, np.ndarray) \
            else self.encoding.encode(x)
        omega = as_tensor(omega)
        if omega.ndim == 1:
            omega = omega.reshape(1, -1).broadcast_to((enc.shape[0], APPEARANCE_DIM))
        return self.mlp(concat([enc, omega], axis=-1)).sigmoid()


class DensityParams:
    """Positive Laplace scale beta, stored as exp of a free scalar."""

    def __init__(self, store: ParamStore, beta_init: float = 0.1):
        if beta_init <= 0:
            raise ValueError("beta must be positive")
        self.log_beta = store.add("log_beta", np.log(beta_init))

    def beta(self) -> Tensor:
        return self.log_beta.exp()


def sdf_to_density(d, beta) -> Tensor:
    """Laplace CDF of -d with scale beta: 0.5 at the surface, ->1 inside, ->0 outside."""
    d = as_tensor(d)
    beta = as_tensor(beta)
    tail = 0.5 * (-(d.abs() / beta)).exp()
    return where(d.data > 0.0, tail, 1.0 - tail)


def numerical_gradient(distance_fn, x: np.ndarray, h: float = NORMAL_STEP) -> Tensor:
    """Central-difference spatial gradient of a distance field at fixed points.

    distance_fn maps an [M, 3] ndarray of query positions to an [M] Tensor;
    the queries here are constants, so the composed field (e.g. d after a
    backward warp) stays differentiable w.r.t. its parameters only.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[0]
    offsets = np.zeros((6, p, 3))
    for axis in range(3):
        offsets[2 * axis, :, axis] = h
        offsets[2 * axis + 1, :, axis] = -h
    queries = (x[None, :, :] + offsets).reshape(6 * p, 3)
    d = distance_fn(queries).reshape(6, p)
    comps = [(d[2 * axis] - d[2 * axis + 1]) / (2.0 * h) for axis in range(3)]
    from .tensor import stack

    return stack(comps, axis=-1)


def sphere_sdf(x: np.ndarray, radius: float = SPHERE_INIT_RADIUS) -> np.ndarray:
    return np.linalg.norm(x, axis=-1) - radius


def pretrain_sdf_to_sphere(sdf: CanonicalSdf, store: ParamStore,
                           rng: np.random.Generator, steps: int = 1500,
                           batch: int = 512, radius: float = SPHERE_INIT_RADIUS,
                           lr: float = 1e-3) -> float:
    """Fit the SDF trunk to an analytic sphere over the canonical box.

    Mixes uniform box samples with near-surface shell samples so the zero
    level set is tight. Returns the final fit RMSE in meters. Only the SDF
    parameters receive updates.
    """
    cfg = AdamConfig(lr=lr)
    sdf_names = set(sdf.mlp.param_names())
    step_count_before = store.step_count
    final = np.inf
    for _ in range(steps):
        box = rng.uniform(-CANONICAL_HALF_EXTENT, CANONICAL_HALF_EXTENT, size=(batch // 2, 3))
        dirs = rng.normal(size=(batch // 2, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        shell = dirs * (radius + rng.normal(0.0, 0.05, size=(batch // 2, 1)))
        core = rng.uniform(-1.2 * radius, 1.2 * radius, size=(64, 3))
        d_box, _ = sdf(box)
        d_shell, _ = sdf(shell)
        d_core, _ = sdf(core)
        loss = ((d_box - sphere_sdf(box, radius)) ** 2).mean() \
            + 4.0 * ((d_shell - sphere_sdf(shell, radius)) ** 2).mean() \
            + 8.0 * ((d_core - sphere_sdf(core, radius)) ** 2).mean()
        # keep the fitted field well-behaved at the 1 mm finite-difference scale
        probe = np.concatenate([box[:12], shell[:12], core[:8]], axis=0)
        g = numerical_gradient(lambda q: sdf(q)[0], probe)
        gnorm = ((g * g).sum(axis=-1) + 1e-12).sqrt()
        loss = loss + 0.03 * ((gnorm - 1.0) ** 2).mean()
        grads = backward(loss)
        grads = {k: v for k, v in grads.items() if k in sdf_names}
        adam_step(store, grads, cfg)
        final = float(np.sqrt(((d_shell.data - sphere_sdf(shell, radius)) ** 2).mean()))
    # leave no optimizer history behind: the main fit starts from a clean state
    store.step_count = step_count_before
    for name in sdf_names:
        store._m[name].fill(0.0)
        store._v[name].fill(0.0)
    return final
