"""Differentiable volume rendering along camera rays.

Rays at time t are sampled in deformed space, warped back to canonical space
for field queries, converted to density, and alpha-composited. Besides color
and silhouette the renderer composites 16-dim features, eikonal-filtered
surface normals from 1 mm numerical gradients of the composed distance field,
and 2D flow from backward-then-forward warped sample endpoints.

Batches are frame-grouped ([F frames, P pixels each]) so per-frame bone data
never gets gathered per sample; mixed-frame ray lists are handled by a
per-frame adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deformation import WarpContext, quat_to_rotmat
from .fields import CANONICAL_HALF_EXTENT, NORMAL_STEP, sdf_to_density
from .model import CanonicalModel
from .optim import ParamStore
from .tensor import Tensor, concat, einsum2, stack, where

GRAD_FILTER_THRESHOLD = 10.0  # |grad d| above this zeroes the normal


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray  # [3, 4]
    width: int
    height: int

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64).reshape(3, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.w2c[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")

    def center(self) -> np.ndarray:
        r, t = self.w2c[:, :3], self.w2c[:, 3]
        return -r.T @ t

    def rays(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel centers [R, 2] -> (origins [R, 3], unit directions [R, 3])."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        r = self.w2c[:, :3]
        cam_dirs = np.stack([
            (pixels[:, 0] + 0.5 - self.cx) / self.fx,
            (pixels[:, 1] + 0.5 - self.cy) / self.fy,
            np.ones(len(pixels)),
        ], axis=-1)
        world = cam_dirs @ r  # rows become r.T @ dir
        world /= np.linalg.norm(world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center(), world.shape).copy()
        return origins, world

    def project_np(self, points: np.ndarray) -> np.ndarray:
        cam = points @ self.w2c[:, :3].T + self.w2c[:, 3]
        z = np.maximum(cam[:, 2], 1e-9)
        return np.stack([self.fx * cam[:, 0] / z + self.cx - 0.5,
                         self.fy * cam[:, 1] / z + self.cy - 0.5], axis=-1)

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy],
                               self.w2c.reshape(-1)])

    @classmethod
    def from_array(cls, arr, width, height) -> "Camera":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(fx=float(arr[0]), fy=float(arr[1]), cx=float(arr[2]),
                   cy=float(arr[3]), w2c=arr[4:16].reshape(3, 4),
                   width=width, height=height)


def project_batch(points: Tensor, cams, idx: np.ndarray) -> Tensor:
    """Project per-point world points through per-point cameras (on tape)."""
    rot = np.stack([cams[i].w2c[:, :3] for i in idx])
    trans = np.stack([cams[i].w2c[:, 3] for i in idx])
    intr = np.stack([[cams[i].fx, cams[i].fy, cams[i].cx, cams[i].cy] for i in idx])
    cam_pts = einsum2("pij,pj->pi", Tensor(rot), points.reshape(-1, 3)) + Tensor(trans)
    z = cam_pts[:, 2].clamp(lo=1e-9)
    u = cam_pts[:, 0] / z * Tensor(intr[:, 0]) + Tensor(intr[:, 2] - 0.5)
    v = cam_pts[:, 1] / z * Tensor(intr[:, 1]) + Tensor(intr[:, 3] - 0.5)
    return stack([u, v], axis=-1)


class CameraCorrections:
    """Optional learnable per-frame rigid refinements of the camera poses.

    Frame t's effective extrinsic becomes w2c_t composed with a world-space
    rigid motion D_t (identity at init). Sample points from the original rays
    map into the true world as D_t^-1(Y); points projected through frame t'
    first map through D_t'.
    """

    def __init__(self, store: ParamStore, n_frames: int):
        quat = np.zeros((n_frames, 4))
        quat[:, 0] = 1.0
        self.quat = store.add("cam.quat", quat)
        self.trans = store.add("cam.trans", np.zeros((n_frames, 3)))

    def apply(self, pts, t: np.ndarray) -> Tensor:
        t = np.asarray(t, dtype=int)
        rot = quat_to_rotmat(self.quat)[t]
        pts = pts if isinstance(pts, Tensor) else Tensor(pts)
        shifted = pts.reshape(-1, 3) - self.trans[t]
        return einsum2("pji,pj->pi", rot, shifted)

    def unapply(self, pts, t: np.ndarray) -> Tensor:
        t = np.asarray(t, dtype=int)
        rot = quat_to_rotmat(self.quat)[t]
        pts = pts if isinstance(pts, Tensor) else Tensor(pts)
        return einsum2("pij,pj->pi", rot, pts.reshape(-1, 3)) + self.trans[t]


@dataclass
class RaySamples:
    """Stratified depth samples along a batch of rays (all constants)."""

    origins: np.ndarray  # [R, 3]
    dirs: np.ndarray  # [R, 3] unit
    near: np.ndarray  # [R]
    far: np.ndarray  # [R]
    t: np.ndarray  # [R] frame indices
    depths: np.ndarray  # [R, N] strictly increasing
    points: np.ndarray  # [R, N, 3] deformed-space positions

    @property
    def n_rays(self):
        return len(self.origins)

    @property
    def n_samples(self):
        return self.depths.shape[1]

    def delta(self) -> np.ndarray:
        """Per-ray quadrature bin width."""
        return (self.far - self.near) / self.n_samples


def make_ray_samples(origins, dirs, near, far, t, n_samples, rng=None) -> RaySamples:
    """Stratified (or midpoint, when rng is None) depths in [near, far]."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    t = np.broadcast_to(np.atleast_1d(t), (len(origins),)).astype(int)
    if (near >= far).any():
        raise ValueError("need near < far")
    r = len(origins)
    if rng is None:
        jitter = np.full((r, n_samples), 0.5)
    else:
        jitter = rng.random((r, n_samples))
    grid = (np.arange(n_samples)[None, :] + jitter) / n_samples
    depths = near[:, None] + (far - near)[:, None] * grid
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    return RaySamples(origins, dirs, near, far, t, depths, points)


def sample_ray(camera: Camera, pixel, t: int, n_samples: int, near: float,
               far: float, rng=None) -> RaySamples:
    """Samples for a single pixel's ray."""
    pixel = np.asarray(pixel, dtype=np.float64)
    if not (0 <= pixel[0] < camera.width and 0 <= pixel[1] < camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    o, d = camera.rays(pixel[None])
    return make_ray_samples(o, d, [near], [far], [t], n_samples, rng)


@dataclass
class RenderSettings:
    n_samples: int = 64
    normal_samples: int = 4  # highest-weight samples per ray that get normals
    warp_samples: int = 12  # highest-weight samples fed to cycle/flow warps
    grad_step: float = NORMAL_STEP
    grad_filter: float = GRAD_FILTER_THRESHOLD
    compute_normals: bool = True
    compute_cycle: bool = True


@dataclass
class RenderOutput:
    """Per-ray composited quantities (Tensors unless noted), flattened [R, ..]."""

    rgb: Tensor  # [R, 3]
    silhouette: Tensor  # [R]
    feat: Tensor  # [R, 16]
    depth: Tensor  # [R]
    normal: Tensor | None = None  # [R, 3], unit or zero
    normal_valid: np.ndarray | None = None  # [R] bool
    flow: Tensor | None = None  # [R, 2] pixels
    weights: Tensor | None = None  # [R, N]
    aux: dict = field(default_factory=dict)


def composite_weights(tau: Tensor) -> tuple[Tensor, Tensor]:
    """Quadrature weights from per-sample optical depth tau >= 0.

    Returns (weights, alpha) with w_i = T_i * alpha_i along the last axis,
    T_i = exp(-sum_{j<i} tau_j), alpha_i = 1 - exp(-tau_i).
    """
    cum = tau.cumsum(axis=-1)
    trans = (tau - cum).exp()  # exp(-exclusive cumsum)
    alpha = 1.0 - (-tau).exp()
    return trans * alpha, alpha


def alpha_composite_np(alpha: np.ndarray) -> np.ndarray:
    """Reference transmittance recurrence w_i = alpha_i * prod_{j<i} (1 - alpha_j)."""
    alpha = np.atleast_2d(alpha)
    keep = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((len(alpha), 1)), keep[:, :-1]], axis=1)
    return trans * alpha


@dataclass
class GroupedRays:
    """Regular ray batch: F frames x P pixels per frame, N samples per ray."""

    frames: np.ndarray  # [F]
    pixels: np.ndarray  # [F, P, 2]
    origins: np.ndarray  # [F, P, 3]
    dirs: np.ndarray  # [F, P, 3]
    near: np.ndarray  # [F]
    far: np.ndarray  # [F]
    depths: np.ndarray  # [F, P, N]
    points: np.ndarray  # [F, P, N, 3]
    flow_to: np.ndarray | None = None  # [F] target frames for flow

    @property
    def shape(self):
        return self.points.shape[:3]

    def delta(self) -> np.ndarray:
        return (self.far - self.near) / self.points.shape[2]


def make_grouped_rays(cameras, frames, pixels, near, far, n_samples,
                      rng=None, flow_to=None) -> GroupedRays:
    """Build a regular [F, P] ray grid from per-frame cameras and pixel lists."""
    frames = np.asarray(frames, dtype=int)
    pixels = np.asarray(pixels, dtype=np.float64)
    f, p = pixels.shape[0], pixels.shape[1]
    origins = np.empty((f, p, 3))
    dirs = np.empty((f, p, 3))
    for i, t in enumerate(frames):
        origins[i], dirs[i] = cameras[t].rays(pixels[i])
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if rng is None:
        jitter = np.full((f, p, n_samples), 0.5)
    else:
        jitter = rng.random((f, p, n_samples))
    grid = (np.arange(n_samples)[None, None, :] + jitter) / n_samples
    depths = near[:, None, None] + (far - near)[:, None, None] * grid
    points = origins[:, :, None, :] + depths[..., None] * dirs[:, :, None, :]
    return GroupedRays(frames, pixels, origins, dirs, near, far, depths, points,
                       flow_to=None if flow_to is None else np.asarray(flow_to, int))


def render_grouped(model: CanonicalModel, ctx: WarpContext, rays: GroupedRays,
                   settings: RenderSettings = RenderSettings(),
                   flow_cams=None, corrections: CameraCorrections | None = None
                   ) -> RenderOutput:
    """Volume-render a regular frame-grouped batch; outputs flattened to [F*P].

    One backward-warp + SDF pipeline evaluates the ray samples and the
    6-offset numerical-gradient queries together; cycle and flow share one
    forward-warp call over the highest-weight samples per ray.
    """
    f, p, n = rays.shape
    s = p * n
    pts = rays.points.reshape(f, s, 3)
    k = min(settings.normal_samples, n) if settings.compute_normals else 0
    m = min(settings.warp_samples, n)
    h = settings.grad_step

    if corrections is not None:
        pts_in = corrections.apply(pts, np.repeat(rays.frames, s)).reshape(f, s, 3)
    else:
        pts_in = pts

    x_can = ctx.compose_backward_grouped(pts_in, rays.frames)
    d, phi = model.sdf(x_can.reshape(f * s, 3))
    beta = model.density.beta()
    sigma = sdf_to_density(d, beta)
    lam = (sigma / beta).reshape(f, p, n)
    tau = lam * Tensor(rays.delta().reshape(f, 1, 1))
    weights, _ = composite_weights(tau)

    sil = weights.sum(axis=-1)  # [F, P]
    depth = (weights * Tensor(rays.depths)).sum(axis=-1)

    omega = model.appearance.code_for(np.repeat(rays.frames, s))
    rgb_samples = model.appearance(x_can.reshape(f * s, 3), omega)
    rgb = (weights.reshape(f, p, n, 1) * rgb_samples.reshape(f, p, n, 3)).sum(axis=2)
    feat = (weights.reshape(f, p, n, 1) * phi.reshape(f, p, n, -1)).sum(axis=2)

    out = RenderOutput(rgb=rgb.reshape(f * p, 3), silhouette=sil.reshape(f * p),
                       feat=feat.reshape(f * p, -1), depth=depth.reshape(f * p),
                       weights=weights.reshape(f * p, n))

    fi = np.arange(f)[:, None, None]
    pi = np.arange(p)[None, :, None]
    order = np.argsort(-weights.data, axis=-1, kind="stable")

    want_flow = rays.flow_to is not None
    if settings.compute_cycle or want_flow:
        sel_m = order[..., :m]
        w_m = weights[(fi, pi, sel_m)]  # [F, P, m] on tape
        x_can_m = x_can.reshape(f, p, n, 3)[(fi, pi, sel_m)]  # [F, P, m, 3]
        frames_cat, x_cat, halves = [], [], 0
        if settings.compute_cycle:
            frames_cat.append(rays.frames)
            halves += 1
        if want_flow:
            frames_cat.append(np.asarray(rays.flow_to, dtype=int))
            halves += 1
        x_one = x_can_m.reshape(f, p * m, 3)
        x_cat = concat([x_one] * halves, axis=0) if halves > 1 else x_one
        fwd = ctx.compose_forward_grouped(x_cat, np.concatenate(frames_cat))
        parts = [fwd[:f], fwd[f:]] if halves > 1 else [fwd]
        idx_part = 0
        if settings.compute_cycle:
            x_cyc = parts[idx_part].reshape(f, p, m, 3)
            idx_part += 1
            pts_m = rays.points.reshape(f, p, n, 3)[
                np.arange(f)[:, None, None], pi, sel_m]
            if corrections is not None:
                pts_m = pts_in.reshape(f, p, n, 3)[(fi, pi, sel_m)]
                target = pts_m
            else:
                target = Tensor(pts_m)
            cyc = ((x_cyc - target) ** 2).sum(axis=-1)
            out.aux["cycle_sq"] = cyc.reshape(f * p, m)
            out.aux["cycle_weights"] = w_m.reshape(f * p, m)
        if want_flow:
            if flow_cams is None:
                raise ValueError("flow rendering needs the camera list")
            endpoints = parts[idx_part].reshape(f, p, m, 3)
            denom = w_m.sum(axis=-1).reshape(f, p, 1) + 1e-12
            expected = (w_m.reshape(f, p, m, 1) * endpoints).sum(axis=2) / denom
            expected = expected.reshape(f * p, 3)
            idx = np.repeat(rays.flow_to, p)
            if corrections is not None:
                expected = corrections.unapply(expected, idx)
            proj = project_batch(expected, flow_cams, idx)
            out.flow = proj - Tensor(rays.pixels.reshape(f * p, 2))

    if settings.compute_normals:
        sel_k = order[..., :k]
        w_sel = weights[(fi, pi, sel_k)]  # [F, P, k]
        pts_sel = rays.points.reshape(f, p, n, 3)[
            np.arange(f)[:, None, None], pi, sel_k]
        offsets = np.zeros((6, 3))
        for axis in range(3):
            offsets[2 * axis, axis] = h
            offsets[2 * axis + 1, axis] = -h
        queries = pts_sel.reshape(f, 1, p * k, 3) + offsets[None, :, None, :]
        q_grouped = queries.reshape(f, 6 * p * k, 3)
        if corrections is not None:
            q_in = corrections.apply(
                q_grouped, np.repeat(rays.frames, 6 * p * k)).reshape(f, 6 * p * k, 3)
        else:
            q_in = q_grouped
        d_off = model.sdf(
            ctx.compose_backward_grouped(q_in, rays.frames).reshape(-1, 3)
        )[0].reshape(f, 6, p * k)
        comps = [(d_off[:, 2 * a] - d_off[:, 2 * a + 1]) / (2.0 * h) for a in range(3)]
        g = stack(comps, axis=-1).reshape(f * p * k, 3)
        gnorm = ((g * g).sum(axis=-1) + 1e-24).sqrt()
        keep = gnorm.data <= settings.grad_filter
        n_samples_t = where(keep[:, None], g / gnorm.reshape(-1, 1), 0.0)
        n_bar = (w_sel.reshape(f, p, k, 1) * n_samples_t.reshape(f, p, k, 3)).sum(axis=2)
        n_bar = n_bar.reshape(f * p, 3)
        nb_norm = ((n_bar * n_bar).sum(axis=-1) + 1e-24).sqrt()
        valid = nb_norm.data > 1e-6
        out.normal = where(valid[:, None], n_bar / nb_norm.reshape(-1, 1), 0.0)
        out.normal_valid = valid
        out.aux["grad_norms"] = gnorm
        out.aux["grad_keep"] = keep
        out.aux["weights_sel"] = w_sel.reshape(f * p, k)

    return out


def render_rays(model: CanonicalModel, ctx: WarpContext, samples: RaySamples,
                settings: RenderSettings = RenderSettings(),
                flow_to: np.ndarray | None = None, flow_cams=None,
                source_pixels: np.ndarray | None = None,
                corrections: CameraCorrections | None = None) -> RenderOutput:
    """Adapter for mixed-frame ray lists: renders one frame group at a time.

    Rays sharing a frame must share near/far and (when flow is requested)
    the flow target. Without source_pixels, flow is reported relative to
    pixel (0, 0).
    """
    r, n = samples.n_rays, samples.n_samples
    if source_pixels is None:
        source_pixels = np.zeros((r, 2))
    uniq = np.unique(samples.t)
    parts = []
    for t in uniq:
        sel = np.nonzero(samples.t == t)[0]
        flow_target = None
        if flow_to is not None:
            targets = np.unique(np.asarray(flow_to)[sel])
            if len(targets) != 1:
                raise ValueError("rays of one frame must share a flow target")
            flow_target = targets
        grays = GroupedRays(
            frames=np.array([t]),
            pixels=np.asarray(source_pixels, dtype=np.float64)[sel][None],
            origins=samples.origins[sel][None],
            dirs=samples.dirs[sel][None],
            near=np.array([samples.near[sel[0]]]),
            far=np.array([samples.far[sel[0]]]),
            depths=samples.depths[sel][None],
            points=samples.points[sel][None],
            flow_to=flow_target,
        )
        parts.append((sel, render_grouped(model, ctx, grays, settings,
                                          flow_cams=flow_cams,
                                          corrections=corrections)))
    return _merge_outputs(parts, r, n)


def _merge_outputs(parts, r, n) -> RenderOutput:
    if len(parts) == 1 and len(parts[0][0]) == r:
        return parts[0][1]
    from .tensor import concat

    order = np.concatenate([sel for sel, _ in parts])
    inv = np.argsort(order, kind="stable")

    def gather(field_name, attr=True):
        vals = [getattr(o, field_name) if attr else o.aux[field_name]
                for _, o in parts]
        if any(v is None for v in vals):
            return None
        if isinstance(vals[0], np.ndarray):
            return np.concatenate(vals, axis=0)[inv]
        return concat(vals, axis=0)[inv]

    out = RenderOutput(
        rgb=gather("rgb"), silhouette=gather("silhouette"), feat=gather("feat"),
        depth=gather("depth"), normal=gather("normal"),
        normal_valid=gather("normal_valid"), flow=gather("flow"),
        weights=gather("weights"))
    aux_keys = parts[0][1].aux.keys()
    for key in aux_keys:
        vals = [o.aux[key] for _, o in parts]
        if key in ("grad_norms",):
            # per-selected-sample arrays: concatenate in ray order
            k = vals[0].shape[0] // len(parts[0][0])
            inv_k = (inv[:, None] * k + np.arange(k)[None]).reshape(-1)
            out.aux[key] = concat(vals, axis=0)[inv_k]
        elif key == "grad_keep":
            k = vals[0].shape[0] // len(parts[0][0])
            inv_k = (inv[:, None] * k + np.arange(k)[None]).reshape(-1)
            out.aux[key] = np.concatenate(vals, axis=0)[inv_k]
        else:
            stacked = concat(vals, axis=0) if isinstance(vals[0], Tensor) \
                else np.concatenate(vals, axis=0)
            out.aux[key] = stacked[inv]
    return out


def box_lattice(half_extent: float = CANONICAL_HALF_EXTENT) -> np.ndarray:
    """3x3x3 lattice spanning the canonical cube (bounding-sphere probes)."""
    g = np.array([-half_extent, 0.0, half_extent])
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def frame_bounds(model: CanonicalModel, cameras, frames: np.ndarray,
                 pad: float = 1.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame near/far from the forward-warped canonical box, padded.

    Uses detached warps; bounds are quadrature limits, not differentiable.
    """
    frames = np.asarray(frames, dtype=int)
    lattice = box_lattice()
    m = len(lattice)
    pts = np.tile(lattice, (len(frames), 1)).reshape(len(frames), m, 3)
    warped = model.context().compose_forward_grouped(pts, frames).data
    center = warped.mean(axis=1)
    radius = np.linalg.norm(warped - center[:, None], axis=-1).max(axis=1) * pad
    near, far = np.empty(len(frames)), np.empty(len(frames))
    for i, t in enumerate(frames):
        dist = np.linalg.norm(cameras[t].center() - center[i])
        near[i] = max(0.05, dist - radius[i])
        far[i] = dist + radius[i]
    return near, far


def render_frame(model: CanonicalModel, camera: Camera, t: int,
                 settings: RenderSettings = RenderSettings(),
                 chunk: int = 1024, flow_to: int | None = None,
                 cameras=None, near=None, far=None,
                 corrections: CameraCorrections | None = None) -> dict:
    """Full-image render (detached numpy outputs) for evaluation and the CLI."""
    ctx = model.context()
    cams = cameras if cameras is not None else {t: camera}
    if near is None or far is None:
        nf_near, nf_far = frame_bounds(model, cams, np.array([t]))
        near = nf_near[0] if near is None else near
        far = nf_far[0] if far is None else far
    h, w = camera.height, camera.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1).astype(np.float64)
    out = {
        "rgb": np.zeros((h * w, 3)),
        "mask": np.zeros(h * w),
        "normal": np.zeros((h * w, 3)),
        "depth": np.zeros(h * w),
        "feat": np.zeros((h * w, 16)),
    }
    if flow_to is not None:
        out["flow"] = np.zeros((h * w, 2))
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        grays = make_grouped_rays(
            cams, [t], pixels[lo:hi][None], np.array([near]), np.array([far]),
            settings.n_samples,
            flow_to=None if flow_to is None else [flow_to])
        r = render_grouped(model, ctx, grays, settings,
                           flow_cams=cams if flow_to is not None else None,
                           corrections=corrections)
        out["rgb"][lo:hi] = r.rgb.data
        out["mask"][lo:hi] = r.silhouette.data
        if r.normal is not None:
            out["normal"][lo:hi] = r.normal.data
        out["depth"][lo:hi] = r.depth.data
        out["feat"][lo:hi] = r.feat.data
        if flow_to is not None:
            out["flow"][lo:hi] = r.flow.data
    out = {k: v.reshape((h, w) + v.shape[1:]) for k, v in out.items()}
    return out
