"""The full canonical model: shape/appearance fields plus two-layer motion."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .deformation import (
    BONE_INIT_SCALE,
    BoneSet,
    TwoLayerDeformation,
    WarpContext,
    farthest_point_sample,
)
from .fields import (
    APPEARANCE_DIM,
    CANONICAL_HALF_EXTENT,
    AppearanceField,
    CanonicalSdf,
    DensityParams,
    numerical_gradient,
    pretrain_sdf_to_sphere,
)
from .mlp import MlpSpec
from .optim import ParamStore, load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    n_frames: int
    body_bones: int = 25
    cloth_bones: int = 25
    sdf_hidden: tuple = (128, 128, 128, 128, 128)
    color_hidden: tuple = (64, 64)
    delta_hidden: tuple = (32, 32)
    beta_init: float = 0.1
    seed: int = 0

    def to_metadata(self) -> dict:
        return asdict(self)

    @classmethod
    def from_metadata(cls, meta: dict) -> "ModelConfig":
        meta = dict(meta)
        for key in ("sdf_hidden", "color_hidden", "delta_hidden"):
            meta[key] = tuple(meta[key])
        return cls(**meta)


class CanonicalModel:
    """Canonical SDF + color fields warped by body and clothing bone layers."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.sdf = CanonicalSdf(
            self.store, rng, spec=MlpSpec(hidden=tuple(cfg.sdf_hidden),
                                          activation="tanh", out_dim=17))
        self.appearance = AppearanceField(
            self.store, rng, cfg.n_frames,
            spec=MlpSpec(hidden=tuple(cfg.color_hidden), activation="tanh",
                         out_dim=3))
        self.density = DensityParams(self.store, cfg.beta_init)
        body = BoneSet.identity(self.store, "body", np.zeros((cfg.body_bones, 3)),
                                cfg.n_frames)
        cloth = BoneSet.identity(self.store, "cloth", np.zeros((cfg.cloth_bones, 3)),
                                 cfg.n_frames)
        delta_spec = MlpSpec(hidden=tuple(cfg.delta_hidden), activation="tanh",
                             out_dim=max(cfg.body_bones, cfg.cloth_bones))
        self.deform = TwoLayerDeformation(self.store, rng, body, cloth, delta_spec)

    # -- initialization -----------------------------------------------------------

    def initialize(self, rng: np.random.Generator, joints: np.ndarray | None = None,
                   pretrain_steps: int = 1500):
        """Sphere-fit the SDF, then place bones (joints for body, surface for cloth).

        Without joints the body layer falls back to the cloth scheme: bones
        spread over the canonical surface.
        """
        pretrain_sdf_to_sphere(self.sdf, self.store, rng, steps=pretrain_steps)
        surface = self.sample_surface_points(
            max(4 * max(self.cfg.body_bones, self.cfg.cloth_bones), 512), rng)
        body = self.deform.body.bones
        if joints is not None:
            mu_c, mu_t = joint_bone_centers(np.asarray(joints, dtype=np.float64),
                                            self.cfg.body_bones)
            if mu_t.shape[0] != self.cfg.n_frames:
                raise ValueError("joint trajectory frame count mismatch")
            body.mu_c.data[:] = mu_c
            body.mu_t.data[:] = mu_t
        else:
            centers = farthest_point_sample(surface, self.cfg.body_bones)
            body.mu_c.data[:] = centers
            body.mu_t.data[:] = centers[None]
        cloth_centers = farthest_point_sample(surface, self.cfg.cloth_bones)
        cloth = self.deform.cloth.bones
        cloth.mu_c.data[:] = cloth_centers
        cloth.mu_t.data[:] = cloth_centers[None]

    # -- queries ------------------------------------------------------------------

    def context(self) -> WarpContext:
        return self.deform.context()

    def beta_value(self) -> float:
        return float(np.exp(self.store["log_beta"].data))

    def distance_np(self, pts: np.ndarray) -> np.ndarray:
        return self.sdf(np.asarray(pts, dtype=np.float64))[0].data

    def sample_surface_points(self, n: int, rng: np.random.Generator,
                              tol: float = 2e-3, max_rounds: int = 12) -> np.ndarray:
        """Points on the SDF zero level set (detached).

        Rejection-samples the canonical box near the surface, then takes Newton
        steps along the numerical gradient until |d| < tol.
        """
        out = []
        for _ in range(max_rounds):
            pts = rng.uniform(-CANONICAL_HALF_EXTENT, CANONICAL_HALF_EXTENT,
                              size=(8192, 3))
            d = self.distance_np(pts)
            cand = pts[np.abs(d) < 0.05]
            if len(cand) == 0:
                continue
            for _ in range(3):
                d = self.distance_np(cand)
                g = numerical_gradient(lambda q: self.sdf(q)[0], cand).data
                gn2 = np.maximum((g * g).sum(-1, keepdims=True), 1e-12)
                cand = cand - d[:, None] * g / gn2
            d = self.distance_np(cand)
            keep = cand[np.abs(d) < tol]
            if len(keep):
                out.append(keep)
            if sum(len(o) for o in out) >= n:
                break
        if not out:
            raise RuntimeError("empty zero level set: surface sampling failed")
        pts = np.concatenate(out, axis=0)
        if len(pts) < n:
            reps = int(np.ceil(n / len(pts)))
            pts = np.tile(pts, (reps, 1))
        return pts[:n]

    # -- persistence --------------------------------------------------------------

    def save(self, path, extra_metadata: dict | None = None):
        meta = {"config": self.cfg.to_metadata()}
        if extra_metadata:
            meta.update(extra_metadata)
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path) -> tuple["CanonicalModel", dict]:
        loaded, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_metadata(meta["config"]))
        for name, p in model.store.items():
            if name not in loaded:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if loaded[name].data.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            p.data[...] = loaded[name].data
            model.store._m[name][...] = loaded._m[name]
            model.store._v[name][...] = loaded._v[name]
        model.store.step_count = loaded.step_count
        return model, meta


def joint_bone_centers(joints: np.ndarray, n_bones: int,
                       rest_frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Canonical and per-frame bone centers from a [T, J, 3] joint trajectory.

    One bone per joint; surplus bones sit at the per-frame joint centroid.
    """
    t_frames, n_joints = joints.shape[0], joints.shape[1]
    k = min(n_joints, n_bones)
    centroid = joints.mean(axis=1, keepdims=True)
    mu_t = np.concatenate([joints[:, :k]] + [centroid] * (n_bones - k), axis=1)
    return mu_t[rest_frame].copy(), mu_t


def interpolate_heldout_frames(model: CanonicalModel, holdout: list[int],
                               train_frames: list[int]):
    """Fill held-out frames' motion and appearance by interpolating neighbors.

    Held-out frames receive no gradient during optimization; for evaluation
    their bone trajectories are linearly interpolated (quaternions nlerp) from
    the nearest trained frames and their appearance code is the neighbor mean.
    Mutates the model in place.
    """
    train = np.asarray(sorted(train_frames))
    omega = model.store["omega"].data
    for t in holdout:
        lo = train[train < t].max() if (train < t).any() else None
        hi = train[train > t].min() if (train > t).any() else None
        if lo is None and hi is None:
            continue
        if lo is None or hi is None:
            src = int(hi if lo is None else lo)
            frac, lo, hi = 0.0, src, src
        else:
            frac = (t - lo) / (hi - lo)
        for layer in (model.deform.body.bones, model.deform.cloth.bones):
            layer.mu_t.data[t] = (1 - frac) * layer.mu_t.data[lo] \
                + frac * layer.mu_t.data[hi]
            q_lo, q_hi = layer.quat_t.data[lo], layer.quat_t.data[hi]
            sign = np.where((q_lo * q_hi).sum(-1, keepdims=True) < 0, -1.0, 1.0)
            q = (1 - frac) * q_lo + frac * sign * q_hi
            layer.quat_t.data[t] = q / np.linalg.norm(q, axis=-1, keepdims=True)
        omega[t] = 0.5 * (omega[lo] + omega[hi])
