import math

import numpy as np
import pytest

from lumisplat import autodiff as ad
from lumisplat import geometry as geo
from lumisplat import lights
from lumisplat.errors import DegenerateFalloff, LayoutMismatch, ZeroDirection


def make_rig(channels=3, rid=None, tau=0.05, ambient=None, pose=None):
    if rid is None:
        rid = lights.GaussianLobeRid(np.full(channels, 1.0), 0.5)
    if ambient is None:
        ambient = np.full(channels, 0.02)
    if pose is None:
        pose = geo.RigidPose(geo.so3_exp([0.0, -0.17, 0.0]), [0.32, 0.0, 0.0])
    return lights.LightRig(
        pose_light_to_cam=pose,
        rid=rid,
        falloff=lights.FalloffModel(tau),
        ambient=lights.AmbientLight(ambient),
    )


# -- light origin / axis --------------------------------------------------------


def test_center_axis_identity():
    rig = make_rig(pose=geo.RigidPose.identity())
    o, w = lights.light_center_and_axis(rig, geo.RigidPose.identity())
    assert np.allclose(o, 0)
    assert np.allclose(w, [0, 0, 1])


def test_center_axis_baseline():
    rig = make_rig(pose=geo.RigidPose(geo.Rotation.identity(), [0.32, 0.0, 0.0]))
    o, _ = lights.light_center_and_axis(rig, geo.RigidPose.identity())
    assert np.allclose(o, [0.32, 0, 0])


def test_center_axis_camera_rotated():
    rig = make_rig(pose=geo.RigidPose.identity())
    cam = geo.RigidPose(geo.so3_exp([0.0, math.pi, 0.0]), np.zeros(3))
    _, w = lights.light_center_and_axis(rig, cam)
    assert np.abs(w - [0, 0, -1]).max() < 1e-9


def test_axis_is_unit_for_random_poses():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rig = make_rig(
            pose=geo.RigidPose(geo.so3_exp(rng.normal(size=3)), rng.normal(size=3))
        )
        cam = geo.RigidPose(geo.so3_exp(rng.normal(size=3)), rng.normal(size=3))
        _, w = lights.light_center_and_axis(rig, cam)
        assert abs(np.linalg.norm(w) - 1.0) < 1e-9


# -- RID variants ---------------------------------------------------------------


def test_constant_rid():
    rid = lights.ConstantRid([2.0, 2.0, 2.0])
    for angle in (0.0, 0.3, math.pi):
        assert np.allclose(lights.rid_eval(rid, angle), 2.0)


def test_gaussian_lobe_peak_and_falloff():
    rid = lights.GaussianLobeRid([1.0], 0.5)
    assert np.allclose(lights.rid_eval(rid, 0.0), 1.0)
    assert abs(float(lights.rid_eval(rid, 0.5)[0]) - math.exp(-0.5)) < 1e-12


def test_rid_nonnegative_all_variants_randomized():
    rng = np.random.default_rng(1)
    angles = rng.uniform(0.0, math.pi, size=64)
    for _ in range(10):
        variants = [
            lights.ConstantRid(rng.uniform(0, 3, size=3)),
            lights.GaussianLobeRid(rng.uniform(0, 3, size=3), rng.uniform(0.05, 2.0)),
            lights.MlpRid.init_random(3, rng),
            lights.LobeSumRid(
                rng.uniform(0, 2, size=(2, 3)),
                rng.uniform(0.1, 1.0, size=2),
                rng.uniform(0.0, 1.0, size=2),
            ),
        ]
        for rid in variants:
            out = lights.rid_eval(rid, angles)
            assert out.shape == (64, 3)
            assert np.all(out >= 0)


def test_mlp_rid_scalar_angle_shape():
    rid = lights.MlpRid.init_random(1, np.random.default_rng(2))
    out = lights.rid_eval(rid, 0.25)
    assert np.shape(out) == (1,)


# -- falloff -------------------------------------------------------------------


def test_falloff_values():
    assert lights.falloff_eval(lights.FalloffModel(0.0), 2.0) == pytest.approx(0.25)
    assert lights.falloff_eval(lights.FalloffModel(1.0), 1.0) == pytest.approx(0.5)


def test_falloff_degenerate():
    with pytest.raises(DegenerateFalloff):
        lights.falloff_eval(lights.FalloffModel(0.0), 0.0)


def test_falloff_strictly_decreasing():
    d = np.linspace(0.05, 5.0, 200)
    for tau in (0.0, 0.05, 1.0):
        psi = lights.falloff_eval(lights.FalloffModel(tau), d)
        assert np.all(np.diff(psi) < 0)


def test_lorentzian_vs_inverse_square():
    tau = 0.3
    # far field: psi * d^2 -> 1
    assert abs(lights.falloff_eval(lights.FalloffModel(tau), 1e4) * 1e8 - 1.0) < 1e-6
    # at d^2 = tau the inverse-square law predicts exactly twice the radiance
    d = math.sqrt(tau)
    assert (1.0 / d**2) / lights.falloff_eval(lights.FalloffModel(tau), d) == pytest.approx(2.0)


# -- incident radiance / BRDF ----------------------------------------------------


def test_incident_ambient_only():
    rig = make_rig(rid=lights.ConstantRid(np.zeros(3)), tau=0.0, ambient=np.full(3, 0.1))
    out = lights.incident_radiance(rig, geo.RigidPose.identity(), [0.4, -0.2, 1.3])
    assert np.allclose(out, 0.1)


def test_incident_constant_on_centerline():
    rig = make_rig(
        rid=lights.ConstantRid(np.ones(3)),
        tau=0.0,
        ambient=np.zeros(3),
        pose=geo.RigidPose.identity(),
    )
    out = lights.incident_radiance(rig, geo.RigidPose.identity(), [0.0, 0.0, 2.0])
    assert np.abs(out - 0.25).max() < 1e-9


def test_incident_lobe_angle():
    rig = make_rig(
        rid=lights.GaussianLobeRid([1.0], 0.5),
        tau=0.0,
        ambient=np.zeros(1),
        pose=geo.RigidPose.identity(),
    )
    x = np.array([math.sin(0.5), 0.0, math.cos(0.5)])  # distance 1, angle 0.5
    out = lights.incident_radiance(rig, geo.RigidPose.identity(), x)
    assert abs(float(out[0]) - math.exp(-0.5)) < 1e-9


def test_incident_batched_matches_single():
    rig = make_rig()
    cam = geo.RigidPose(geo.so3_exp([0.1, 0.2, -0.3]), [0.5, -0.1, -1.0])
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(5, 3)) + [0, 0, 2.0]
    batched = lights.incident_radiance(rig, cam, xs)
    for x, row in zip(xs, batched):
        assert np.abs(lights.incident_radiance(rig, cam, x) - row).max() < 1e-12


def test_incident_world_frame_invariance():
    rig = make_rig()
    rng = np.random.default_rng(4)
    cam = geo.RigidPose(geo.so3_exp(rng.normal(size=3)), rng.normal(size=3))
    x = rng.normal(size=3) + [0, 0, 3.0]
    base = lights.incident_radiance(rig, cam, x)
    for _ in range(10):
        g = geo.RigidPose(geo.so3_exp(rng.normal(size=3)), rng.normal(size=3))
        moved = lights.incident_radiance(rig, g.compose(cam), g.transform(x))
        assert np.abs(moved - base).max() < 1e-9


def test_incident_no_nan_for_extreme_points():
    rig = make_rig(pose=geo.RigidPose.identity())
    # exactly on the centerline and almost exactly behind the light
    for x in ([0.0, 0.0, 5.0], [0.0, 0.0, -5.0], [1e-9, 0.0, 1.0]):
        out = lights.incident_radiance(rig, geo.RigidPose.identity(), x)
        assert np.all(np.isfinite(out))


def test_brdf_head_on():
    out = lights.lambertian_brdf([0, 0, 1.0], [0, 0, -1.0], np.full(3, 0.5))
    assert np.allclose(out, 0.5)


def test_brdf_backfacing():
    out = lights.lambertian_brdf([0, 0, 1.0], [0, 0, 1.0], np.full(3, 0.7))
    assert np.allclose(out, 0.0)


def test_brdf_45_degrees():
    w = np.array([1.0, 0.0, 1.0]) / math.sqrt(2)
    out = lights.lambertian_brdf(w, [0, 0, -1.0], np.full(3, 1.0))
    assert np.abs(out - math.cos(math.pi / 4)).max() < 1e-12


def test_brdf_zero_direction():
    with pytest.raises(ZeroDirection):
        lights.lambertian_brdf([0.0, 0.0, 0.0], [0, 0, 1.0], np.ones(3))


# -- flatten / unflatten -----------------------------------------------------


def test_flatten_round_trip():
    rig = make_rig()
    vec, layout = lights.params_flatten(rig)
    rig2 = lights.params_unflatten(layout, vec)
    assert np.abs(rig2.pose_light_to_cam.rotation.matrix - rig.pose_light_to_cam.rotation.matrix).max() < 1e-12
    assert np.abs(rig2.pose_light_to_cam.translation - rig.pose_light_to_cam.translation).max() < 1e-12
    assert abs(rig2.falloff.tau - rig.falloff.tau) < 1e-12
    assert np.abs(rig2.ambient.value - rig.ambient.value).max() < 1e-12
    assert np.abs(rig2.rid.peak - rig.rid.peak).max() < 1e-12
    assert abs(rig2.rid.sigma - rig.rid.sigma) < 1e-12


def test_flatten_round_trip_mlp():
    rig = make_rig(rid=lights.MlpRid.init_random(3, np.random.default_rng(5)))
    vec, layout = lights.params_flatten(rig)
    rig2 = lights.params_unflatten(layout, vec)
    for w1, w2 in zip(rig.rid.weights, rig2.rid.weights):
        assert np.array_equal(np.asarray(w1), np.asarray(w2))


def test_zero_rot_delta_keeps_rotation():
    rig = make_rig()
    vec, layout = lights.params_flatten(rig)
    e = layout.entry("pose", "rot_delta")
    assert np.array_equal(vec[e.offset : e.offset + 3], np.zeros(3))
    rig2 = lights.params_unflatten(layout, vec)
    assert np.abs(
        rig2.pose_light_to_cam.rotation.matrix - rig.pose_light_to_cam.rotation.matrix
    ).max() < 1e-15


def test_freeze_mask_shortens_vector():
    rig = make_rig()
    full, _ = lights.params_flatten(rig)
    no_pose, layout = lights.params_flatten(rig, frozen={"pose"})
    assert no_pose.size == full.size - 6
    assert "pose" not in layout.live_groups()
    rig2 = lights.params_unflatten(layout, no_pose)
    assert np.array_equal(
        rig2.pose_light_to_cam.rotation.matrix, rig.pose_light_to_cam.rotation.matrix
    )


def test_unflatten_wrong_length():
    rig = make_rig()
    vec, layout = lights.params_flatten(rig)
    with pytest.raises(LayoutMismatch):
        lights.params_unflatten(layout, vec[:-1])


def test_serialization_round_trip(tmp_path):
    for rid in (
        lights.ConstantRid([0.5, 1.0, 1.5]),
        lights.GaussianLobeRid([1.2, 1.1, 1.0], 0.4),
        lights.MlpRid.init_random(3, np.random.default_rng(6)),
        lights.LobeSumRid([[1.0, 0.9, 0.8], [0.3, 0.3, 0.3]], [0.3, 0.2], [0.0, 0.5]),
    ):
        rig = make_rig(rid=rid)
        path = tmp_path / "rig.json"
        lights.save_rig(rig, path)
        rig2 = lights.load_rig(path)
        angles = np.linspace(0, math.pi, 17)
        assert np.abs(
            lights.rid_eval(rig.rid, angles) - lights.rid_eval(rig2.rid, angles)
        ).max() < 1e-12
        assert np.abs(
            rig2.pose_light_to_cam.rotation.matrix - rig.pose_light_to_cam.rotation.matrix
        ).max() < 1e-12
        assert abs(rig2.falloff.tau - rig.falloff.tau) < 1e-12


def test_incident_radiance_gradient_wrt_tau():
    # Eq.-level check: radiance derivative w.r.t. the full rig vector
    rig = make_rig()
    vec, layout = lights.params_flatten(rig)
    cam = geo.RigidPose(geo.so3_exp([0.05, -0.1, 0.02]), [0.2, 0.1, -1.5])
    x = np.array([[0.1, -0.05, 0.4], [0.3, 0.2, 0.1]])

    def f(v):
        params = layout.decode(v)
        return ad.sum_(lights.incident_radiance_at(params, cam.rotation.matrix, cam.translation, x))

    assert ad.gradient_relative_error(f, vec) < 1e-4
