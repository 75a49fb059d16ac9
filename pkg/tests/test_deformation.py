"""Bag-of-bones warps: weights on the simplex, rigid exactness, composition."""

import numpy as np
import pytest

from bones4d.deformation import (
    BoneSet,
    TwoLayerDeformation,
    WarpContext,
    coarse_weights,
    export_bone_table,
    farthest_point_sample,
    init_body_bones,
    init_cloth_bones,
    quat_to_rotmat,
    skinning_weights,
)
from bones4d.optim import ParamStore
from bones4d.tensor import Tensor, backward


def make_two_layer(body_centers, cloth_centers, n_frames, seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    body = BoneSet.identity(store, "body", body_centers, n_frames)
    cloth = BoneSet.identity(store, "cloth", cloth_centers, n_frames)
    return store, TwoLayerDeformation(store, rng, body, cloth)


def set_translation(bones: BoneSet, t, tau):
    bones.mu_t.data[t] = bones.mu_c.data + np.asarray(tau)


def test_coarse_weight_zero_at_center():
    x = Tensor(np.array([[0.1, 0.2, 0.3]]))
    mu = Tensor(np.array([[0.1, 0.2, 0.3]]))
    rot = quat_to_rotmat(Tensor(np.array([[1.0, 0, 0, 0]])))
    w = coarse_weights(x, mu, rot, Tensor(np.ones((1, 3))))
    assert abs(float(w.data.reshape(-1)[0])) < 1e-24


def test_coarse_weight_unit_euclidean():
    x = Tensor(np.array([[1.0, 0.0, 0.0]]))
    mu = Tensor(np.zeros((1, 3)))
    rot = quat_to_rotmat(Tensor(np.array([[1.0, 0, 0, 0]])))
    w = coarse_weights(x, mu, rot, Tensor(np.ones((1, 3))))
    assert abs(float(w.data.reshape(-1)[0]) - 1.0) < 1e-12


def test_coarse_weight_anisotropic():
    # scales (2,1,1), offset (2,0,0) -> quadratic form with diag(1/4,1,1) gives 1
    x = Tensor(np.array([[2.0, 0.0, 0.0]]))
    mu = Tensor(np.zeros((1, 3)))
    rot = quat_to_rotmat(Tensor(np.array([[1.0, 0, 0, 0]])))
    w = coarse_weights(x, mu, rot, Tensor(np.array([[2.0, 1.0, 1.0]])))
    assert abs(float(w.data.reshape(-1)[0]) - 1.0) < 1e-12


def test_skinning_weights_singleton_and_symmetry():
    w1 = skinning_weights(Tensor(np.array([[3.7]])))
    assert np.allclose(w1.data, [[1.0]])
    w2 = skinning_weights(Tensor(np.array([[1.3, 1.3]])))
    assert np.allclose(w2.data, [[0.5, 0.5]])


def test_skinning_weights_softmax_closed_form():
    w = skinning_weights(Tensor(np.array([[0.0, np.log(3.0)]])))
    assert np.allclose(w.data, [[0.75, 0.25]], atol=1e-12)


def test_skinning_weights_monotone_in_distance():
    base = np.array([[1.0, 2.0, 0.5]])
    w0 = skinning_weights(Tensor(base)).data[0]
    bumped = base.copy()
    bumped[0, 1] += 0.3
    w1 = skinning_weights(Tensor(bumped)).data[0]
    assert w1[1] < w0[1]


def test_skinning_weights_simplex_on_random_points():
    store, deform = make_two_layer(np.random.default_rng(1).normal(size=(5, 3)) * 0.1,
                                   np.random.default_rng(2).normal(size=(4, 3)) * 0.1,
                                   n_frames=3)
    ctx = deform.context()
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(10000, 3))
    w = ctx.weights("body", pts, np.zeros(len(pts), dtype=int), "bwd").data
    assert (w >= 0).all()
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9


def test_identity_bones_warp_is_identity():
    store, deform = make_two_layer(np.zeros((2, 3)), np.zeros((1, 3)), n_frames=2)
    pts = np.random.default_rng(0).uniform(-0.3, 0.3, size=(50, 3))
    out = deform.compose_forward_np(pts, 1)
    assert np.abs(out - pts).max() < 1e-12


def test_single_bone_translation():
    store, deform = make_two_layer(np.zeros((1, 3)), np.zeros((1, 3)), n_frames=2)
    tau = np.array([0.05, -0.02, 0.07])
    set_translation(deform.body.bones, 1, tau)
    pts = np.random.default_rng(0).uniform(-0.3, 0.3, size=(20, 3))
    ctx = deform.context()
    fwd = ctx.warp_forward("body", pts, 1).data
    assert np.abs(fwd - (pts + tau)).max() < 1e-12
    back = ctx.warp_backward("body", fwd, 1).data
    assert np.abs(back - pts).max() < 1e-12


def test_single_bone_rigid_roundtrip_machine_precision():
    # B=1 rigid motion with rotation: forward then backward is exact
    store, deform = make_two_layer(np.zeros((1, 3)), np.zeros((1, 3)), n_frames=2)
    q = np.array([np.cos(0.4), 0.0, np.sin(0.4), 0.0])
    deform.body.bones.quat_t.data[1, 0] = q
    deform.body.bones.mu_t.data[1, 0] = [0.1, 0.05, -0.03]
    q2 = np.array([np.cos(0.2), np.sin(0.2), 0.0, 0.0])
    deform.cloth.bones.quat_t.data[1, 0] = q2
    deform.cloth.bones.mu_t.data[1, 0] = [-0.02, 0.01, 0.04]
    pts = np.random.default_rng(1).uniform(-0.3, 0.3, size=(40, 3))
    ctx = deform.context()
    cycle = ctx.compose_forward(ctx.compose_backward(pts, 1), 1).data
    assert np.abs(cycle - pts).max() < 1e-12


def test_two_bone_translation_blend():
    store, deform = make_two_layer(np.array([[0.2, 0, 0], [-0.2, 0, 0]]),
                                   np.zeros((1, 3)), n_frames=2)
    tau1, tau2 = np.array([0.1, 0, 0]), np.array([0, 0.1, 0])
    deform.body.bones.mu_t.data[1, 0] += tau1
    deform.body.bones.mu_t.data[1, 1] += tau2
    x = np.array([[0.05, 0.02, -0.01]])
    ctx = deform.context()
    w = ctx.weights("body", x, 1, "fwd").data[0]
    out = ctx.warp_forward("body", x, 1).data[0]
    expected = x[0] + w[0] * tau1 + w[1] * tau2
    assert np.abs(out - expected).max() < 1e-12


def test_compose_order_cloth_then_body():
    store, deform = make_two_layer(np.zeros((1, 3)), np.zeros((1, 3)), n_frames=2)
    tau_b, tau_c = np.array([0.1, 0.0, 0.0]), np.array([0.0, 0.05, 0.0])
    set_translation(deform.body.bones, 1, tau_b)
    set_translation(deform.cloth.bones, 1, tau_c)
    pts = np.random.default_rng(2).uniform(-0.2, 0.2, size=(10, 3))
    ctx = deform.context()
    fwd = ctx.compose_forward(pts, 1).data
    assert np.abs(fwd - (pts + tau_c + tau_b)).max() < 1e-12
    back = ctx.compose_backward(fwd, 1).data
    assert np.abs(back - pts).max() < 1e-12


def test_compose_identity_layers_reduce_to_single_layer():
    store, deform = make_two_layer(np.zeros((1, 3)), np.zeros((1, 3)), n_frames=2)
    set_translation(deform.body.bones, 1, [0.07, 0, 0])
    pts = np.random.default_rng(3).uniform(-0.2, 0.2, size=(10, 3))
    ctx = deform.context()
    assert np.allclose(ctx.compose_forward(pts, 1).data,
                       ctx.warp_forward("body", pts, 1).data)


def test_warp_of_concentrated_bone_center():
    # weights forced onto bone b via a huge delta elsewhere: center maps exactly
    centers = np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]])
    store, deform = make_two_layer(centers, np.zeros((1, 3)), n_frames=2)
    deform.body.bones.mu_t.data[1] = centers + np.array([[0.05, 0, 0], [0, 0.05, 0]])
    ctx = deform.context()
    x = centers[0:1]
    coarse = coarse_weights(Tensor(x), deform.body.bones.mu_c,
                            ctx._cache["body"]["rot_c"], ctx._cache["body"]["scales"])
    delta = Tensor(np.array([[0.0, 1e9]]))  # suppress the other bone
    w = skinning_weights(coarse, delta)
    from bones4d.deformation import blend_transforms

    out = blend_transforms(w, ctx._cache["body"]["a_fwd"][np.array([1])],
                           ctx._cache["body"]["b_fwd"][np.array([1])], Tensor(x))
    assert np.abs(out.data[0] - deform.body.bones.mu_t.data[1, 0]).max() < 1e-12


def test_quaternion_sign_flip_invariance():
    store, deform = make_two_layer(np.zeros((1, 3)), np.zeros((1, 3)), n_frames=2)
    deform.body.bones.quat_t.data[1, 0] = [np.cos(0.3), 0, 0, np.sin(0.3)]
    pts = np.random.default_rng(4).uniform(-0.2, 0.2, size=(10, 3))
    out1 = deform.compose_forward_np(pts, 1)
    deform.body.bones.quat_t.data[1, 0] *= -1.0
    out2 = deform.compose_forward_np(pts, 1)
    assert np.abs(out1 - out2).max() < 1e-12


def test_unnormalized_quaternion_same_rotation():
    q = Tensor(np.array([[2.0, 0.0, 0.0, 0.0]]))
    r = quat_to_rotmat(q)
    assert np.allclose(r.data[0], np.eye(3))


def test_warp_gradients_flow_to_all_bone_params():
    store, deform = make_two_layer(np.array([[0.1, 0, 0], [-0.1, 0, 0]]),
                                   np.array([[0.0, 0.1, 0]]), n_frames=3, seed=5)
    deform.body.bones.mu_t.data[1] += 0.03
    pts = np.random.default_rng(6).uniform(-0.2, 0.2, size=(8, 3))
    ctx = deform.context()
    out = ctx.compose_forward(ctx.compose_backward(pts, 1), 1)
    loss = ((out - pts) ** 2).sum()
    grads = backward(loss, params=store)
    assert any(np.abs(grads[k]).max() > 0 for k in grads if k.startswith("body.mu_t"))


def test_init_body_bones_bijection_and_centroid():
    rng = np.random.default_rng(0)
    joints = rng.normal(size=(5, 4, 3)) * 0.1
    store = ParamStore()
    bones = init_body_bones(store, joints, n_bones=6)
    assert bones.B == 6 and bones.T == 5
    assert np.allclose(bones.mu_c.data[:4], joints[0])
    assert np.allclose(bones.mu_t.data[:, :4], joints)
    centroid = joints.mean(axis=1)
    assert np.allclose(bones.mu_t.data[:, 4], centroid)
    assert np.allclose(bones.mu_t.data[:, 5], centroid)
    assert np.allclose(np.exp(bones.log_scale.data), 0.05)


def test_init_body_bones_static_joints_constant_trajectory():
    joints = np.tile(np.array([[[0.1, 0, 0], [0, 0.1, 0]]]), (4, 1, 1))
    store = ParamStore()
    bones = init_body_bones(store, joints, n_bones=2)
    assert np.allclose(bones.mu_t.data, bones.mu_t.data[0])


def test_init_body_bones_frame_mismatch_raises():
    store = ParamStore()
    with pytest.raises(ValueError):
        init_body_bones(store, np.zeros((4, 2, 3)), n_bones=3, n_frames=7)


def test_init_cloth_bones_identity_warp():
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(500, 3))
    surface = 0.1 * dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    store = ParamStore()
    cloth = init_cloth_bones(store, surface, n_bones=8, n_frames=4)
    body = BoneSet.identity(store, "body", np.zeros((1, 3)), 4)
    deform = TwoLayerDeformation(store, rng, body, cloth)
    pts = rng.uniform(-0.2, 0.2, size=(20, 3))
    for t in range(4):
        assert np.abs(deform.context().cloth_forward(pts, t).data - pts).max() < 1e-12


def test_fps_spreads_better_than_random():
    rng = np.random.default_rng(2)
    dirs = rng.normal(size=(2000, 3))
    surface = 0.1 * dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def min_pairwise(pts):
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        return d[~np.eye(len(pts), dtype=bool)].min()

    fps = farthest_point_sample(surface, 25)
    random_pick = surface[rng.choice(len(surface), 25, replace=False)]
    assert min_pairwise(fps) > min_pairwise(random_pick)


def test_init_cloth_bones_empty_surface_raises():
    store = ParamStore()
    with pytest.raises(ValueError):
        init_cloth_bones(store, np.zeros((0, 3)), n_bones=4, n_frames=2)


def test_export_bone_table(tmp_path):
    store = ParamStore()
    bones = BoneSet.identity(store, "body", np.array([[0.1, 0.2, 0.3]]), 2)
    path = tmp_path / "bones.txt"
    export_bone_table(bones, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) == 1 + 2 * 1
    fields = lines[1].split()
    assert fields[0] == "0" and fields[1] == "0"
    assert len(fields) == 2 + 3 + 4 + 3
