import math

import numpy as np
import pytest

from lumisplat import autodiff as ad
from lumisplat import geometry as geo
from lumisplat import lights
from lumisplat import scene as sc
from lumisplat.errors import BehindCamera

from oracles import bruteforce_render, random_test_scene


def flat_rig(channels=3, tau=0.0, ambient=0.0):
    return lights.LightRig(
        pose_light_to_cam=geo.RigidPose.identity(),
        rid=lights.ConstantRid(np.ones(channels)),
        falloff=lights.FalloffModel(tau),
        ambient=lights.AmbientLight(np.full(channels, ambient)),
    )


def single_gaussian_scene(opacity=0.95, extra=None):
    intr = geo.CameraIntrinsics(fx=100, fy=100, cx=16, cy=12, width=32, height=24)
    cams = [(geo.RigidPose.identity(), intr)]
    positions = [[0.0, 0.0, 1.0]]
    opac = [opacity]
    if extra:
        positions.append(extra["position"])
        opac.append(extra["opacity"])
    n = len(positions)
    cloud = sc.GaussianCloud(
        positions=np.asarray(positions, dtype=float),
        scales=np.full((n, 3), 0.5),
        quats=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacities=np.asarray(opac),
        albedos=np.full((n, 3), 0.8),
        normals=np.tile([0.0, 0.0, -1.0], (n, 1)),
    )
    return sc.Scene(
        cloud=cloud,
        scale=1.0,
        ambient=lights.AmbientLight(np.zeros(3)),
        cameras=cams,
        rig=flat_rig(),
    )


# -- warm-up -------------------------------------------------------------------


def test_warmup_factor():
    assert sc.WarmupSchedule(k=0, m=0).factor == 1.0
    assert sc.WarmupSchedule(k=10, m=0).factor == 0.0
    assert sc.WarmupSchedule(k=10, m=5).factor == 0.5
    assert sc.WarmupSchedule(k=10, m=25).factor == 1.0


def test_warmup_pose_endpoints_exact():
    pose = geo.RigidPose(geo.so3_exp([0.2, -0.1, 0.4]), [0.32, 0.01, -0.02])
    start = sc.warmup_pose(pose, sc.WarmupSchedule(k=100, m=0))
    assert np.array_equal(start.rotation.matrix, np.eye(3))
    assert np.array_equal(start.translation, np.zeros(3))
    end = sc.warmup_pose(pose, sc.WarmupSchedule(k=100, m=100))
    assert end is pose  # bit-level identity


def test_warmup_pose_halfway():
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    pose = geo.RigidPose(geo.so3_exp(axis * math.radians(60.0)), [0.32, 0.0, 0.0])
    mid = sc.warmup_pose(pose, sc.WarmupSchedule(k=300, m=150))
    assert abs(mid.rotation.angle() - math.radians(30.0)) < 1e-12
    assert np.abs(mid.translation - [0.16, 0.0, 0.0]).max() < 1e-15


# -- scaling -------------------------------------------------------------------


def test_scaled_positions():
    scene = single_gaussian_scene()
    assert np.array_equal(sc.scaled_positions(scene), scene.cloud.positions)
    scene.scale = 2.0
    assert np.allclose(sc.scaled_positions(scene), 2.0 * scene.cloud.positions)


def test_scaled_camera_translation():
    scene = single_gaussian_scene()
    scene.cameras[0] = (
        geo.RigidPose(geo.Rotation.identity(), [0.0, 0.0, -3.0]),
        scene.cameras[0][1],
    )
    scene.scale = 2.0
    pose, _ = sc.scaled_camera(scene, 0)
    assert np.allclose(pose.translation, [0.0, 0.0, -6.0])


def test_scale_gauge_invariance():
    # multiplying s by k while dividing positions/cameras/scales by k
    # leaves the rendered image unchanged
    rng = np.random.default_rng(0)
    scene = random_test_scene(rng, 25)
    base = sc.render(scene, 0)
    k = 1.7
    scaled = sc.Scene(
        cloud=sc.GaussianCloud(
            positions=scene.cloud.positions / k,
            scales=scene.cloud.scales / k,
            quats=scene.cloud.quats.copy(),
            opacities=scene.cloud.opacities.copy(),
            albedos=scene.cloud.albedos.copy(),
            normals=scene.cloud.normals.copy(),
        ),
        scale=scene.scale * k,
        ambient=scene.ambient,
        cameras=[
            (geo.RigidPose(p.rotation, p.translation / k), i) for p, i in scene.cameras
        ],
        rig=scene.rig,
    )
    other = sc.render(scaled, 0)
    assert np.abs(other - base).max() < 1e-6


# -- projection -----------------------------------------------------------------


def test_project_gaussian_on_axis():
    scene = single_gaussian_scene()
    g = scene.cloud.gaussian(0)
    mean2d, cov2d, depth = sc.project_gaussian(g, scene.cameras[0])
    assert np.allclose(mean2d, [16.0, 12.0])
    assert depth == 1.0
    assert np.all(np.linalg.eigvalsh(cov2d) > 0)


def test_project_gaussian_sigma_scaling():
    intr = geo.CameraIntrinsics(fx=100, fy=100, cx=16, cy=12, width=32, height=24)
    for d in (1.0, 2.0, 4.0):
        g = sc.Gaussian(
            position=[0, 0, d],
            scale=[0.03, 0.03, 0.03],
            orientation=geo.Rotation.identity(),
            opacity=0.5,
            albedo=[0.5, 0.5, 0.5],
            normal=[0, 0, -1.0],
        )
        _, cov2d, _ = sc.project_gaussian(g, (geo.RigidPose.identity(), intr))
        sigma2d = math.sqrt(cov2d[0, 0] - 0.3)
        assert abs(sigma2d - 100 * 0.03 / d) < 1e-9


def test_project_gaussian_behind_camera():
    scene = single_gaussian_scene()
    g = scene.cloud.gaussian(0)
    bad = sc.Gaussian(
        position=[0, 0, -1.0],
        scale=g.scale,
        orientation=g.orientation,
        opacity=g.opacity,
        albedo=g.albedo,
        normal=g.normal,
    )
    with pytest.raises(BehindCamera):
        sc.project_gaussian(bad, scene.cameras[0])


# -- rendering ------------------------------------------------------------------


def test_render_single_gaussian_closed_form():
    scene = single_gaussian_scene(opacity=0.95)
    img = sc.render(scene, 0)
    # shade = (1/d^2) * cos(0) * albedo at d=1, alpha at center = 0.95
    assert np.abs(img[12, 16] - 0.95 * 0.8).max() < 1e-9


def test_render_two_gaussian_weights():
    scene = single_gaussian_scene(
        opacity=0.5, extra={"position": [0.0, 0.0, 2.0], "opacity": 0.5}
    )
    img = sc.render(scene, 0)
    # front weight 0.5 at shade 0.8; back weight 0.25 at shade 0.8/4
    expected = 0.5 * 0.8 + 0.25 * 0.8 / 4.0
    assert np.abs(img[12, 16] - expected).max() < 1e-9


def test_render_empty_scene_zero():
    scene = single_gaussian_scene()
    empty = sc.Scene(
        cloud=sc.GaussianCloud(
            positions=np.zeros((0, 3)),
            scales=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            opacities=np.zeros(0),
            albedos=np.zeros((0, 3)),
            normals=np.zeros((0, 3)),
        ),
        scale=1.0,
        ambient=lights.AmbientLight(np.full(3, 0.5)),  # ambient alone must not paint pixels
        cameras=scene.cameras,
        rig=scene.rig,
    )
    assert sc.render(empty, 0).max() == 0.0


def test_render_matches_bruteforce_small():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        scene = random_test_scene(rng, 30)
        tiled = sc.render(scene, 0)
        direct = bruteforce_render(scene, 0)
        assert np.abs(tiled - direct).max() < 1e-4


def test_render_weight_sums_bounded():
    rng = np.random.default_rng(7)
    scene = random_test_scene(rng, 40)
    _, aux = sc.render(scene, 0, want_aux=True)
    assert aux["weight_sum"].max() <= 1.0 + 1e-9


def test_warmup_endpoint_render_continuity():
    rng = np.random.default_rng(8)
    scene = random_test_scene(rng, 20)
    pose = sc.warmup_pose(scene.rig.pose_light_to_cam, sc.WarmupSchedule(k=300, m=300))
    a = sc.render(scene, 0, rig_pose_override=pose)
    b = sc.render(scene, 0)
    assert np.array_equal(a, b)


# -- relighting -----------------------------------------------------------------


def test_relight_identity_is_bit_equal():
    rng = np.random.default_rng(9)
    scene = random_test_scene(rng, 25)
    base = sc.render(scene, 0)
    same = sc.relight(scene, scene.rig.rid, scene.rig.falloff, scene.ambient, 0)
    assert np.array_equal(base, same)


def test_relight_does_not_mutate_scene():
    rng = np.random.default_rng(10)
    scene = random_test_scene(rng, 25)
    fp = sc.scene_fingerprint(scene)
    sc.relight(scene, lights.ConstantRid(np.full(3, 0.8)), None, lights.AmbientLight(np.zeros(3)), 0)
    sc.relight(scene, scene.rig.rid, lights.FalloffModel(0.2), np.array([0.1, 0.1, 0.1]), 0)
    assert sc.scene_fingerprint(scene) == fp


def test_relight_parallel_light_no_distance_attenuation():
    # one on-axis Gaussian seen from two ranges; with falloff=none and a
    # constant RID the pixel values differ only by the cosine factor
    intr = geo.CameraIntrinsics(fx=100, fy=100, cx=16, cy=12, width=32, height=24)
    cams = [
        (geo.RigidPose(geo.Rotation.identity(), [0.0, 0.0, -1.0]), intr),
        (geo.RigidPose(geo.Rotation.identity(), [0.0, 0.0, -2.5]), intr),
    ]
    rig = lights.LightRig(
        pose_light_to_cam=geo.RigidPose(geo.Rotation.identity(), [0.32, 0.0, 0.0]),
        rid=lights.GaussianLobeRid(np.ones(3), 0.4),
        falloff=lights.FalloffModel(0.05),
        ambient=lights.AmbientLight(np.zeros(3)),
    )
    cloud = sc.GaussianCloud(
        positions=np.array([[0.0, 0.0, 0.5]]),
        scales=np.full((1, 3), 2.0),
        quats=np.array([[1.0, 0, 0, 0]]),
        opacities=np.array([0.9]),
        albedos=np.full((1, 3), 0.7),
        normals=np.array([[0.0, 0.0, -1.0]]),
    )
    scene = sc.Scene(
        cloud=cloud, scale=1.0, ambient=lights.AmbientLight(np.zeros(3)), cameras=cams, rig=rig
    )
    vals = []
    coss = []
    for i, (pose, _) in enumerate(cams):
        img = sc.relight(scene, lights.ConstantRid(np.full(3, 0.8)), None, lights.AmbientLight(np.zeros(3)), i)
        vals.append(img[12, 16, 0])
        o_l = pose.rotation.matrix @ rig.pose_light_to_cam.translation + pose.translation
        omega = cloud.positions[0] - o_l
        coss.append(max(-(omega / np.linalg.norm(omega)) @ cloud.normals[0], 0.0))
    ratio = (vals[0] / coss[0]) / (vals[1] / coss[1])
    assert abs(ratio - 1.0) < 1e-6


def test_white_balance():
    img = np.full((4, 4, 3), 0.25)
    assert np.array_equal(sc.white_balance(img, [1, 1, 1]), img)
    doubled = sc.white_balance(img, [2, 1, 1])
    assert np.allclose(doubled[..., 0], 0.5)
    assert np.allclose(doubled[..., 1:], 0.25)
    rng = np.random.default_rng(11)
    img = rng.uniform(0.1, 1.0, (8, 8, 3))
    means = img.reshape(-1, 3).mean(axis=0)
    gains = means.mean() / means
    balanced = sc.white_balance(img, gains)
    bm = balanced.reshape(-1, 3).mean(axis=0)
    assert np.abs(bm - bm.mean()).max() < 1e-12
    clamped = sc.white_balance(img, [100.0, 1, 1], max_value=1.0)
    assert clamped.max() <= 1.0


# -- serialization ---------------------------------------------------------------


def test_scene_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    scene = random_test_scene(rng, 15)
    sc.save_scene(scene, tmp_path / "scene.json")
    loaded = sc.load_scene(tmp_path / "scene.json")
    assert len(loaded.cloud) == len(scene.cloud)
    assert abs(loaded.scale - scene.scale) < 1e-12
    a = sc.render(scene, 0)
    b = sc.render(loaded, 0)
    # parameters pass through float32; images agree to that precision
    assert np.abs(a - b).max() < 1e-4


def test_scene_save_deterministic(tmp_path):
    rng = np.random.default_rng(13)
    scene = random_test_scene(rng, 10)
    sc.save_scene(scene, tmp_path / "a.json")
    sc.save_scene(scene, tmp_path / "b.json")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_text().replace('"a.bin"', '"b.bin"') == (
        tmp_path / "b.json"
    ).read_text()


# -- gradients -------------------------------------------------------------------


def test_render_gradients_match_fd():
    rng = np.random.default_rng(14)
    scene = random_test_scene(rng, 5, width=24, height=18)
    images = [np.asarray(sc.render(scene, 0)) * 0.0 + 0.1]
    sched = sc.SceneSchedule.default(seed=0, warmup_k=0, iterations=1)
    sched.options = sc.RenderOptions(radius_mult=10.0, term_threshold=0.0)
    prob = sc.SceneProblem(scene, images, sched, [0])
    vec, layout = prob.flatten(frozenset())
    err = ad.gradient_relative_error(lambda v: prob.loss_var(v, layout), vec, h=1e-5)
    assert err < 1e-3


def test_train_scene_smoke_reduces_loss():
    rng = np.random.default_rng(15)
    gt = random_test_scene(rng, 12, width=32, height=24)
    images = [sc.render(gt, 0)]
    # perturb albedos, keep geometry
    start = sc.Scene(
        cloud=sc.GaussianCloud(
            positions=gt.cloud.positions.copy(),
            scales=gt.cloud.scales.copy(),
            quats=gt.cloud.quats.copy(),
            opacities=gt.cloud.opacities.copy(),
            albedos=np.clip(gt.cloud.albedos + rng.normal(0, 0.2, gt.cloud.albedos.shape), 0.05, 0.95),
            normals=gt.cloud.normals.copy(),
        ),
        scale=gt.scale,
        ambient=gt.ambient,
        cameras=gt.cameras,
        rig=gt.rig,
    )
    sched = sc.SceneSchedule(
        seed=0,
        warmup_k=0,
        stages=[sc.SceneStage(name="fit", iterations=60, learning_rates={"scene-gaussians": 1e-2, "scene-scale": 0.0, "ambient": 0.0})],
    )
    res = sc.train_scene(start, images, sched, [0])
    losses = res.stage_reports[0].losses
    assert losses[-1] < 0.5 * losses[0]


def test_gt_fixed_point_stays():
    rng = np.random.default_rng(16)
    gt = random_test_scene(rng, 10, width=32, height=24)
    images = [sc.render(gt, 0, options=sc.RenderOptions(radius_mult=3.5))]
    sched = sc.SceneSchedule.default(seed=0, warmup_k=0, iterations=10)
    res = sc.train_scene(gt, images, sched, [0])
    assert max(res.stage_reports[0].losses) < 1e-6
