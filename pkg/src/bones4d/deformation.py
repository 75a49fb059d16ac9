"""Hierarchical bag-of-bones motion model.

Each deformation layer is a set of B Gaussian bones: canonical centers and
orientations, a per-frame trajectory of centers/orientations, and
time-invariant axis scales. Dense warps blend per-bone rigid transforms with
skinning weights softmax(-mahalanobis - mlp_delta). The full model stacks a
clothing layer under a body layer: forward warps apply cloth then body,
backward warps invert in the opposite order.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .encoding import TIME_ENCODING, XYZ_ENCODING
from .mlp import Mlp, MlpSpec
from .optim import ParamStore
from .tensor import Tensor, as_tensor, concat, matmul, softmax, stack


def _mahalanobis_sq(x, u: Tensor, v: Tensor) -> Tensor:
    """Fused per-bone squared Mahalanobis distance (single tape node).

    x: [F, S, 3] (ndarray or Tensor); u: [F|1, B, 3, 3] packed inverse-scale
    rotations; v: [F|1, B, 3] = u @ mu. Returns [F, S, B].
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    f = xt.data.shape[0]
    ud = np.ascontiguousarray(np.broadcast_to(u.data, (f,) + u.data.shape[1:]))
    vd = np.ascontiguousarray(np.broadcast_to(v.data, (f,) + v.data.shape[1:]))
    xd = np.ascontiguousarray(xt.data)
    out = _kernels.mahal_forward(xd, ud, vd)

    def bwd(g, acc):
        g = np.ascontiguousarray(g)
        if xt.requires_grad:
            acc(xt, _kernels.mahal_backward_x(g, xd, ud, vd))
        if u.requires_grad or v.requires_grad:
            gu, gv = _kernels.mahal_backward_uv(g, xd, ud, vd)
            if u.requires_grad:
                acc(u, gu if u.data.shape[0] == f else gu.sum(axis=0, keepdims=True))
            if v.requires_grad:
                acc(v, gv if v.data.shape[0] == f else gv.sum(axis=0, keepdims=True))

    return Tensor._result(out, (xt, u, v), bwd)


def _blend_rigid(w: Tensor, a: Tensor, t: Tensor, x) -> Tensor:
    """Fused weighted rigid blend sum_b w_b (A_b x + t_b) (single tape node).

    w: [F, S, B]; a: [F, B, 3, 3]; t: [F, B, 3]; x: [F, S, 3]. Returns [F, S, 3].
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    wd = np.ascontiguousarray(w.data)
    ad = np.ascontiguousarray(a.data)
    td = np.ascontiguousarray(t.data)
    xd = np.ascontiguousarray(xt.data)
    out = _kernels.blend_forward(wd, ad, td, xd)

    def bwd(g, acc):
        g = np.ascontiguousarray(g)
        if w.requires_grad or xt.requires_grad:
            gw, gx = _kernels.blend_backward_wx(g, wd, ad, td, xd)
            if w.requires_grad:
                acc(w, gw)
            if xt.requires_grad:
                acc(xt, gx)
        if a.requires_grad or t.requires_grad:
            ga, gt = _kernels.blend_backward_at(g, wd, xd)
            if a.requires_grad:
                acc(a, ga)
            if t.requires_grad:
                acc(t, gt)

    return Tensor._result(out, (w, a, t, xt), bwd)

DEFAULT_BONE_COUNT = 25
BONE_INIT_SCALE = 0.05  # meters, isotropic
DELTA_SPEC = MlpSpec(hidden=(32, 32), activation="tanh", out_dim=DEFAULT_BONE_COUNT)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """[.., 4] quaternions (wxyz, any norm) -> [.., 3, 3] rotation matrices."""
    norm = ((q * q).sum(axis=-1, keepdims=True) + 1e-30).sqrt()
    q = q / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ]
    return stack(rows, axis=-2)


def _identity_quats(*lead) -> np.ndarray:
    q = np.zeros(lead + (4,))
    q[..., 0] = 1.0
    return q


class BoneSet:
    """One layer's bones: canonical pose, per-frame trajectory, shared scales."""

    def __init__(self, store: ParamStore, prefix: str, mu_c, quat_c, mu_t, quat_t,
                 scale):
        mu_c = np.asarray(mu_c, dtype=np.float64)
        mu_t = np.asarray(mu_t, dtype=np.float64)
        self.B = mu_c.shape[0]
        self.T = mu_t.shape[0]
        if mu_t.shape != (self.T, self.B, 3):
            raise ValueError("per-frame centers must be [T, B, 3]")
        self.prefix = prefix
        self.mu_c = store.add(f"{prefix}.mu_c", mu_c)
        self.quat_c = store.add(f"{prefix}.quat_c", quat_c)
        self.mu_t = store.add(f"{prefix}.mu_t", mu_t)
        self.quat_t = store.add(f"{prefix}.quat_t", quat_t)
        self.log_scale = store.add(f"{prefix}.log_scale", np.log(np.broadcast_to(
            np.asarray(scale, dtype=np.float64), (self.B, 3)).copy()))

    @classmethod
    def identity(cls, store, prefix, centers, n_frames, scale=BONE_INIT_SCALE):
        """Bones at rest: per-frame pose equals the canonical pose."""
        centers = np.asarray(centers, dtype=np.float64)
        b = centers.shape[0]
        return cls(store, prefix,
                   mu_c=centers,
                   quat_c=_identity_quats(b),
                   mu_t=np.tile(centers[None], (n_frames, 1, 1)),
                   quat_t=_identity_quats(n_frames, b),
                   scale=scale)

    def scales(self) -> Tensor:
        return self.log_scale.exp()

    def canonical_rotmats(self) -> Tensor:
        return quat_to_rotmat(self.quat_c)

    def frame_rotmats(self) -> Tensor:
        return quat_to_rotmat(self.quat_t)


class SkinningDelta:
    """Coordinate MLPs refining coarse skinning logits, one per warp direction.

    Inputs are the positional encodings of the query point and the normalized
    timestamp; outputs are B logits added to the negative Mahalanobis term.
    Final layers start at zero so coarse weights dominate initially.
    """

    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator,
                 n_bones: int, spec: MlpSpec = DELTA_SPEC):
        if spec.out_dim != n_bones:
            spec = MlpSpec(hidden=spec.hidden, activation=spec.activation, out_dim=n_bones)
        in_dim = XYZ_ENCODING.output_dim(3) + TIME_ENCODING.output_dim(1)
        scale = np.concatenate([XYZ_ENCODING.frequency_damping(3),
                                TIME_ENCODING.frequency_damping(1)])
        self.fwd = Mlp(store, f"{prefix}.delta_fwd", in_dim, spec, rng,
                       zero_init_last=True, input_scale=scale)
        self.bwd = Mlp(store, f"{prefix}.delta_bwd", in_dim, spec, rng,
                       zero_init_last=True, input_scale=scale)


def coarse_weights(x, mu, rot, scales) -> Tensor:
    """Squared Mahalanobis distance from points to each bone.

    x: [P, 3]; mu: [B, 3] or [P, B, 3]; rot: matching [.., B, 3, 3] bone
    orientations (bone-to-world); scales: [B, 3] positive axis lengths.
    Distance is ||diag(1/scales) . R^T (x - mu)||^2, i.e. precision
    Q = R diag(scales)^-2 R^T.
    """
    x = as_tensor(x)
    mu = as_tensor(mu)
    diff = x.reshape(x.shape[0], 1, 3) - (mu if mu.ndim == 3 else mu.reshape(1, -1, 3))
    local = matmul(rot.swap_last(), diff.reshape(diff.shape + (1,)))
    local = local.reshape(diff.shape)
    scaled = local / scales.reshape(1, -1, 3)
    return (scaled * scaled).sum(axis=-1)


def skinning_weights(coarse: Tensor, delta: Tensor | None = None) -> Tensor:
    """Convex bone weights: softmax of negative (Mahalanobis + delta) logits."""
    logits = -coarse
    if delta is not None:
        logits = logits - delta
    return softmax(logits, axis=-1)


def blend_transforms(weights: Tensor, rot, trans, x: Tensor) -> Tensor:
    """Apply the weight-blended affine map sum_b w_b (R_b x + t_b).

    weights: [P, B]; rot: [B, 3, 3] or [P, B, 3, 3]; trans matching [.., B, 3];
    x: [P, 3]. Equivalent to blending 4x4 homogeneous matrices since the
    weights sum to one.
    """
    x = as_tensor(x)
    p = x.shape[0]
    xr = matmul(rot, x.reshape(p, 1, 3, 1)).reshape(
        (p, rot.shape[-3], 3)) + (trans if trans.ndim == 3 else trans.reshape(1, -1, 3))
    return (weights.reshape(p, -1, 1) * xr).sum(axis=1)


def _time_features(t, n_frames) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    t_norm = t / max(n_frames - 1, 1)
    return TIME_ENCODING.encode_np(t_norm[:, None])


class DeformationLayer:
    """BoneSet plus its skinning-delta MLPs; computes dense fwd/bwd warps."""

    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator,
                 bones: BoneSet, delta_spec: MlpSpec = DELTA_SPEC):
        self.bones = bones
        self.delta = SkinningDelta(store, prefix, rng, bones.B, delta_spec)


class WarpContext:
    """Per-tape cache of bone rotations and rigid transforms for both layers.

    Build once per optimization step (the tape is rebuilt each step); all warp
    queries during the step share these tensors.
    """

    def __init__(self, layers: dict[str, DeformationLayer]):
        self.layers = layers
        self._cache = {}
        for name, layer in layers.items():
            bones = layer.bones
            rot_c = bones.canonical_rotmats()  # [B,3,3]
            rot_t = bones.frame_rotmats()  # [T,B,3,3]
            rot_c_inv = rot_c.swap_last()
            # forward: G_t G^-1; backward: G G_t^-1
            a_fwd = matmul(rot_t, rot_c_inv.reshape((1,) + rot_c_inv.shape))
            b_fwd = bones.mu_t - matmul(
                a_fwd, bones.mu_c.reshape(1, bones.B, 3, 1)).reshape(bones.T, bones.B, 3)
            rot_t_inv = rot_t.swap_last()
            a_bwd = matmul(rot_c.reshape((1,) + rot_c.shape), rot_t_inv)
            b_bwd = bones.mu_c.reshape(1, bones.B, 3) - matmul(
                a_bwd, bones.mu_t.reshape(bones.T, bones.B, 3, 1)).reshape(
                bones.T, bones.B, 3)
            self._cache[name] = dict(rot_c=rot_c, rot_t=rot_t, a_fwd=a_fwd,
                                     b_fwd=b_fwd, a_bwd=a_bwd, b_bwd=b_bwd,
                                     scales=bones.scales())

    def _delta_logits(self, layer: DeformationLayer, direction: str, x, t) -> Tensor:
        feats_t = _time_features(t, layer.bones.T)
        if np.ndim(t) == 0 or len(feats_t) == 1:
            feats_t = np.broadcast_to(feats_t, (x.shape[0], feats_t.shape[-1]))
        enc_x = Tensor(XYZ_ENCODING.encode_np(x)) if isinstance(x, np.ndarray) \
            else XYZ_ENCODING.encode(x)
        inp = concat([enc_x, Tensor(feats_t.copy())], axis=-1)
        mlp = layer.delta.fwd if direction == "fwd" else layer.delta.bwd
        return mlp(inp)

    def weights(self, name: str, x, t, direction: str) -> Tensor:
        """Skinning weights on the B-simplex for one layer.

        Forward weights measure against canonical bones, backward weights
        against the bones at frame t.
        """
        layer = self.layers[name]
        c = self._cache[name]
        if direction == "fwd":
            coarse = coarse_weights(x, layer.bones.mu_c, c["rot_c"], c["scales"])
        else:
            t_idx = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=int)),
                                    (x.shape[0],))
            coarse = coarse_weights(x, layer.bones.mu_t[t_idx], c["rot_t"][t_idx],
                                    c["scales"])
        return skinning_weights(coarse, self._delta_logits(layer, direction, x, t))

    def warp_forward(self, name: str, x, t) -> Tensor:
        c = self._cache[name]
        w = self.weights(name, x, t, "fwd")
        t_idx = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=int)),
                                (x.shape[0],))
        return blend_transforms(w, c["a_fwd"][t_idx], c["b_fwd"][t_idx], x)

    def warp_backward(self, name: str, x_t, t) -> Tensor:
        c = self._cache[name]
        w = self.weights(name, x_t, t, "bwd")
        t_idx = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=int)),
                                (x_t.shape[0],))
        return blend_transforms(w, c["a_bwd"][t_idx], c["b_bwd"][t_idx], x_t)

    def compose_forward(self, x, t) -> Tensor:
        """Canonical -> time t: clothing warp first, then body warp."""
        return self.warp_forward("body", self.warp_forward("cloth", x, t), t)

    def compose_backward(self, x_t, t) -> Tensor:
        """Time t -> canonical: undo body warp, then clothing warp."""
        return self.warp_backward("cloth", self.warp_backward("body", x_t, t), t)

    def cloth_forward(self, x, t) -> Tensor:
        return self.warp_forward("cloth", x, t)

    # -- frame-grouped fast path -------------------------------------------------
    #
    # The training batch is regular: F frames x S points per frame. Keeping the
    # frame axis explicit means per-frame bone data stays [F, B, ...] instead of
    # being gathered per point, which is what makes desk-scale CPU training fit
    # its time budget. Results match the per-point methods exactly.

    def _delta_logits_grouped(self, layer, direction, x, frames, s) -> Tensor:
        feats_t = np.repeat(_time_features(frames, layer.bones.T), s, axis=0)
        mlp = layer.delta.fwd if direction == "fwd" else layer.delta.bwd
        if isinstance(x, np.ndarray):
            flat = x.reshape(-1, 3)
            inp = Tensor(np.concatenate([XYZ_ENCODING.encode_np(flat), feats_t], axis=-1))
        else:
            flat = x.reshape(-1, 3)
            inp = concat([XYZ_ENCODING.encode(flat), Tensor(feats_t)], axis=-1)
        return mlp(inp).reshape(len(frames), s, layer.bones.B)

    def weights_grouped(self, name: str, x, frames: np.ndarray, direction: str) -> Tensor:
        """x: [F, S, 3] -> weights [F, S, B].

        The Mahalanobis term is evaluated as |U x - U mu|^2 with
        U = diag(1/scales) R^T packed into one [3, 3B] operand per frame, so
        the contraction over large point counts runs as a batched dgemm.
        """
        layer = self.layers[name]
        c = self._cache[name]
        b = layer.bones.B
        frames = np.asarray(frames, dtype=int)
        delta = self._delta_logits_grouped(layer, direction, x, frames, x.shape[1])
        inv_scales = 1.0 / c["scales"]
        if direction == "fwd":
            rot = c["rot_c"].reshape(1, b, 3, 3)
            mu = layer.bones.mu_c.reshape(1, b, 3)
        else:
            rot = c["rot_t"][frames]
            mu = layer.bones.mu_t[frames]
        u = rot.swap_last() * inv_scales.reshape(1, b, 3, 1)  # [F|1, B, 3, 3]
        v = (u * mu.reshape(mu.shape[0], b, 1, 3)).sum(axis=-1)  # u @ mu
        coarse = _mahalanobis_sq(x, u, v)
        return softmax(-coarse - delta, axis=-1)

    def _blend_grouped(self, w: Tensor, a: Tensor, b: Tensor, x) -> Tensor:
        return _blend_rigid(w, a, b, x)

    def warp_forward_grouped(self, name: str, x, frames) -> Tensor:
        frames = np.asarray(frames, dtype=int)
        c = self._cache[name]
        w = self.weights_grouped(name, x, frames, "fwd")
        return self._blend_grouped(w, c["a_fwd"][frames], c["b_fwd"][frames], x)

    def warp_backward_grouped(self, name: str, x_t, frames) -> Tensor:
        frames = np.asarray(frames, dtype=int)
        c = self._cache[name]
        w = self.weights_grouped(name, x_t, frames, "bwd")
        return self._blend_grouped(w, c["a_bwd"][frames], c["b_bwd"][frames], x_t)

    def compose_forward_grouped(self, x, frames) -> Tensor:
        return self.warp_forward_grouped(
            "body", self.warp_forward_grouped("cloth", x, frames), frames)

    def compose_backward_grouped(self, x_t, frames) -> Tensor:
        return self.warp_backward_grouped(
            "cloth", self.warp_backward_grouped("body", x_t, frames), frames)


class TwoLayerDeformation:
    """Body layer over a clothing layer, independently parameterized."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 body: BoneSet, cloth: BoneSet, delta_spec: MlpSpec = DELTA_SPEC):
        if body.T != cloth.T:
            raise ValueError("layers must share the frame count")
        self.body = DeformationLayer(store, "body", rng, body, delta_spec)
        self.cloth = DeformationLayer(store, "cloth", rng, cloth, delta_spec)
        self.T = body.T

    def context(self) -> WarpContext:
        return WarpContext({"body": self.body, "cloth": self.cloth})

    # convenience one-shot wrappers (tests, mesh warping); training code builds
    # a single context per step instead
    def compose_forward(self, x, t) -> Tensor:
        return self.context().compose_forward(x, t)

    def compose_backward(self, x_t, t) -> Tensor:
        return self.context().compose_backward(x_t, t)

    def compose_forward_np(self, x: np.ndarray, t) -> np.ndarray:
        return self.context().compose_forward(x, t).data

    def compose_backward_np(self, x_t: np.ndarray, t) -> np.ndarray:
        return self.context().compose_backward(x_t, t).data


# -- initialization ----------------------------------------------------------------


def init_body_bones(store: ParamStore, joints: np.ndarray, n_bones: int,
                    n_frames: int | None = None, rest_frame: int = 0,
                    prefix: str = "body") -> BoneSet:
    """Bones from per-frame 3D joints: one per joint, extras at the torso centroid.

    Canonical centers come from the rest frame (frame 0 by default); per-frame
    centers follow the joints. Orientations start at identity, scales isotropic.
    """
    joints = np.asarray(joints, dtype=np.float64)
    t_frames, n_joints = joints.shape[0], joints.shape[1]
    if n_frames is not None and t_frames != n_frames:
        raise ValueError(f"joints cover {t_frames} frames, dataset has {n_frames}")
    k = min(n_joints, n_bones)
    centroid = joints.mean(axis=1, keepdims=True)  # [T,1,3]
    mu_t = np.concatenate(
        [joints[:, :k]] + [centroid] * (n_bones - k), axis=1)
    mu_c = mu_t[rest_frame].copy()
    return BoneSet(store, prefix,
                   mu_c=mu_c,
                   quat_c=_identity_quats(n_bones),
                   mu_t=mu_t,
                   quat_t=_identity_quats(t_frames, n_bones),
                   scale=BONE_INIT_SCALE)


def farthest_point_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point subset; starts from the point farthest from the mean."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        raise ValueError(f"need at least {k} candidate points, got {len(points)}")
    start = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=-1)))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=-1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=-1))
    return points[chosen].copy()


def init_cloth_bones(store: ParamStore, surface_points: np.ndarray, n_bones: int,
                     n_frames: int, prefix: str = "cloth") -> BoneSet:
    """Bones spread over the canonical surface by farthest-point sampling.

    Per-frame trajectories start at the canonical pose, so the cloth layer's
    warp is the identity at initialization.
    """
    if len(surface_points) == 0:
        raise ValueError("empty canonical surface sample")
    centers = farthest_point_sample(surface_points, n_bones)
    return BoneSet.identity(store, prefix, centers, n_frames)


def export_bone_table(bones: BoneSet, path):
    """Line-oriented trajectory dump: frame bone cx cy cz qw qx qy qz sx sy sz."""
    scales = np.exp(bones.log_scale.data)
    with open(path, "w") as f:
        f.write("# frame bone cx cy cz qw qx qy qz sx sy sz\n")
        for t in range(bones.T):
            for b in range(bones.B):
                q = bones.quat_t.data[t, b]
                q = q / np.linalg.norm(q)
                vals = [*bones.mu_t.data[t, b], *q, *scales[b]]
                f.write(f"{t} {b} " + " ".join(f"{v:.9g}" for v in vals) + "\n")
