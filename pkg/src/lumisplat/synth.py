"""Ground-truth fixture generation.

Every recovery experiment in the test suite runs against data produced
here: images are rendered through the library's own forward models from
a known rig / scene, so each fit has an exact answer to compare with.
Identical specs and seeds yield bit-identical fixtures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .calibration import (
    CalibrationDataset,
    CalibrationFrame,
    CalibrationTarget,
    build_pixel_table,
    dataset_fingerprint,
    intrinsics_to_dict,
    predict_pixels,
    split_indices,
)
from .errors import SchemaError
from .geometry import CameraIntrinsics, RigidPose, Rotation, look_at_pose, so3_exp
from .lights import (
    AmbientLight,
    FalloffModel,
    GaussianLobeRid,
    LightRig,
    RigParams,
    rid_from_dict,
)

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def default_rig(channels: int = 3) -> LightRig:
    """Synthetic stand-in for the physical rig: 32 cm baseline, light
    yawed 10 degrees toward the camera axis, Lorentzian falloff."""
    return LightRig(
        pose_light_to_cam=RigidPose(so3_exp([0.0, -math.radians(10.0), 0.0]), [0.32, 0.0, 0.0]),
        rid=GaussianLobeRid(np.linspace(1.3, 1.0, channels), 0.35),
        falloff=FalloffModel(0.05),
        ambient=AmbientLight(np.full(channels, 0.02)),
    )


@dataclass
class CalibFixtureSpec:
    """Recipe for a synthetic calibration capture.

    `noise_sigma` is the additive Gaussian noise level as a fraction of
    the fixture's peak radiance (0 = noiseless).  Camera ranges must span
    at least 2x so ambient and RID offset stay separable.
    """

    seed: int = 0
    n_frames: int = 40
    width: int = 160
    height: int = 120
    channels: int = 3
    rig: LightRig | None = None
    albedo: np.ndarray | None = None
    target_extent: tuple[float, float] = (0.42, 0.32)
    roi_margin: float = 0.06
    range_min: float = 0.4
    range_max: float = 1.0
    max_elevation_deg: float = 28.0
    focal: float = 130.0
    noise_sigma: float = 0.0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.range_max < 2.0 * self.range_min - 1e-9:
            raise SchemaError("camera ranges must span at least 2x")
        if self.noise_sigma < 0:
            raise SchemaError("noise level must be >= 0")
        if self.rig is None:
            self.rig = default_rig(self.channels)
        if self.albedo is None:
            self.albedo = np.linspace(0.62, 0.58, self.channels)
        self.albedo = np.asarray(self.albedo, dtype=float)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibFixtureSpec":
        d = dict(d)
        d.pop("kind", None)
        if "rig" in d and isinstance(d["rig"], dict):
            d["rig"] = LightRig.from_dict(d["rig"])
        if "target_extent" in d:
            d["target_extent"] = tuple(d["target_extent"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"bad calibration fixture spec: {exc}") from exc


def _fixture_cameras(spec: CalibFixtureSpec, center: np.ndarray, normal: np.ndarray):
    """Spiral of look-at poses over the target, distances spanning the
    configured range."""
    rng = np.random.default_rng(spec.seed)
    distances = np.linspace(spec.range_min, spec.range_max, spec.n_frames)
    poses = []
    for i in range(spec.n_frames):
        azim = i * _GOLDEN_ANGLE
        elev = math.radians(rng.uniform(4.0, spec.max_elevation_deg))
        radial = math.sin(elev) * np.array([math.cos(azim), math.sin(azim), 0.0])
        # cameras sit on the side the plane normal points into
        direction = normal * math.cos(elev) + radial
        eye = center + distances[i] * direction
        poses.append(look_at_pose(eye, center))
    return poses


def _project(intr: CameraIntrinsics, pose: RigidPose, pts: np.ndarray) -> np.ndarray:
    cam = (pts - pose.translation) @ pose.rotation.matrix
    return np.stack(
        [intr.fx * cam[:, 0] / cam[:, 2] + intr.cx, intr.fy * cam[:, 1] / cam[:, 2] + intr.cy],
        axis=1,
    )


def render_frame(
    rig: LightRig,
    albedo: np.ndarray,
    target: CalibrationTarget,
    pose: RigidPose,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """Render the full target plane seen by one camera.

    Uses the same predict_pixels forward path as the fitting loss, so a
    fixture is exactly reproducible by the library's own model.  Pixels
    whose ray misses the plane (parallel / behind camera) stay zero.
    """
    from .calibration import PixelTable
    from .geometry import pixel_rays

    uu, vv = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    uu, vv = uu.reshape(-1), vv.reshape(-1)
    origin, dirs = pixel_rays(intr, pose, np.stack([uu, vv], axis=1).astype(float))
    denom = dirs @ target.normal
    t = ((target.origin - origin) @ target.normal) / np.where(np.abs(denom) > 1e-9, denom, np.nan)
    ok = np.isfinite(t) & (t > 0)
    pts = origin[None, :] + t[ok, None] * dirs[ok]
    table = PixelTable(
        points=pts,
        captured=np.zeros((len(pts), albedo.size)),
        frame_idx=np.zeros(len(pts), dtype=np.int64),
        rot_cw=pose.rotation.matrix[None],
        t_cw=pose.translation[None],
        normal=target.normal.copy(),
        valid_per_frame=np.array([int(ok.sum())]),
        excluded_per_frame=np.array([int((~ok).sum())]),
        roi_per_frame=np.array([len(uu)]),
    )
    values = np.asarray(predict_pixels(RigParams.from_rig(rig), albedo, table))
    img = np.zeros((intr.height, intr.width, albedo.size))
    img[vv[ok], uu[ok], :] = values
    return img


def gen_calib_fixture(
    spec: CalibFixtureSpec, out_dir: str | Path | None = None
) -> tuple[CalibrationDataset, LightRig, dict]:
    """Render a calibration dataset from a known rig.

    Returns (dataset, ground-truth rig, manifest dict).  With `out_dir`
    the frames (PFM), manifest, and a ground-truth sidecar are written
    and the dataset is reloaded from disk, exactly as the CLI consumes it.
    """
    rig = spec.rig
    we, he = spec.target_extent
    target = CalibrationTarget(
        origin=np.zeros(3),
        normal=np.array([0.0, 0.0, -1.0]),
        albedo=spec.albedo,
        extent=(we, he),
    )
    center = np.array([we / 2.0, he / 2.0, 0.0])
    intr = CameraIntrinsics(
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
        width=spec.width,
        height=spec.height,
    )
    poses = _fixture_cameras(spec, center, target.normal)

    m = spec.roi_margin
    inner = np.array([[m, m, 0], [we - m, m, 0], [we - m, he - m, 0], [m, he - m, 0]])
    images, rois = [], []
    for pose in poses:
        roi = _project(intr, pose, inner)
        if (
            roi[:, 0].min() < 1
            or roi[:, 0].max() > spec.width - 2
            or roi[:, 1].min() < 1
            or roi[:, 1].max() > spec.height - 2
        ):
            raise SchemaError(
                "fixture spec projects the ROI outside image bounds; "
                "reduce target extent / elevation or increase range_min"
            )
        images.append(render_frame(rig, spec.albedo, target, pose, intr))
        rois.append(roi)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed + 1)
        sigma = spec.noise_sigma * max(img.max() for img in images)
        images = [np.maximum(img + rng.normal(0.0, sigma, img.shape), 0.0) for img in images]

    manifest = {
        "kind": "calibration",
        "channels": spec.channels,
        "target": {
            "origin": target.origin.tolist(),
            "normal": target.normal.tolist(),
            "albedo": target.albedo.tolist(),
            "extent": [we, he],
        },
        "split": {"seed": spec.seed, "test_fraction": spec.test_fraction},
        "frames": [
            {
                "image": f"frames/frame_{i:03d}.pfm",
                "pose_cam_to_world": pose.as_matrix().tolist(),
                "intrinsics": intrinsics_to_dict(intr),
                "roi": roi.tolist(),
            }
            for i, (pose, roi) in enumerate(zip(poses, rois))
        ],
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            imageio.write_pfm(out_dir / "frames" / f"frame_{i:03d}.pfm", img)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
        sidecar = {
            "rig": rig.to_dict(),
            "albedo": spec.albedo.tolist(),
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        }
        (out_dir / "ground_truth.json").write_text(json.dumps(sidecar, indent=1))
        from .calibration import load_dataset

        return load_dataset(out_dir / "manifest.json"), rig, manifest

    frames = [
        CalibrationFrame(image=img, cam_pose_world=pose, intrinsics=intr, roi=roi)
        for img, pose, roi in zip(images, poses, rois)
    ]
    fp = dataset_fingerprint(manifest)
    train, test = split_indices(len(frames), fp, spec.seed, spec.test_fraction)
    dataset = CalibrationDataset(
        frames=frames, target=target, train_indices=train, test_indices=test, fingerprint=fp
    )
    return dataset, rig, manifest


# -- scene fixtures -----------------------------------------------------------


@dataclass
class SceneFixtureSpec:
    """Recipe for a synthetic relightable-scene capture.

    The ground-truth scene lives in metric units; the emitted manifest
    divides point cloud and camera translations by `s_star` to mimic an
    up-to-scale monocular reconstruction whose true metric scale must be
    recovered during training.
    """

    seed: int = 0
    n_gaussians: int = 350
    n_images: int = 50
    width: int = 160
    height: int = 120
    channels: int = 3
    s_star: float = 1.7
    rig: LightRig | None = None
    focal: float = 130.0
    wall_extent: tuple[float, float] = (1.0, 0.75)  # meters at ~1 m range
    wall_depth: float = 0.97
    relief: float = 0.1
    gaussian_size: float = 0.011
    range_min: float = 0.5
    range_max: float = 1.05
    scene_ambient: float = 0.015
    point_noise: float = 0.002
    noise_sigma: float = 0.0
    test_fraction: float = 0.2
    emit_colors: bool = False  # SfM colors carry baked-in illumination; off by default

    def __post_init__(self):
        if self.n_gaussians > 5000:
            raise SchemaError("desk-scale fixtures are capped at 5000 Gaussians")
        if self.s_star <= 0:
            raise SchemaError("s_star must be positive")
        if self.rig is None:
            self.rig = default_rig(self.channels)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneFixtureSpec":
        d = dict(d)
        d.pop("kind", None)
        if "rig" in d and isinstance(d["rig"], dict):
            d["rig"] = LightRig.from_dict(d["rig"])
        for key in ("wall_extent",):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"bad scene fixture spec: {exc}") from exc


@dataclass
class SceneFixture:
    gt_scene: "object"
    images: list
    manifest: dict
    rig: LightRig
    spec: SceneFixtureSpec
    train_indices: np.ndarray = None
    test_indices: np.ndarray = None

    def init_scene(self):
        from .scene import init_scene_from_manifest

        return init_scene_from_manifest(self.manifest, self.rig)


def gen_scene_fixture(
    spec: SceneFixtureSpec, out_dir: str | Path | None = None
) -> SceneFixture:
    """Render a scene dataset from known Gaussians under the metric rig.

    Returns the ground-truth scene (metric), the rendered images, and an
    up-to-scale manifest (poses and points divided by s_star, with a
    little point noise) ready for scale-recovery training.
    """
    import hashlib

    from . import scene as sc
    from .calibration import split_indices

    rng = np.random.default_rng(spec.seed)
    wx, wy = spec.wall_extent
    n = spec.n_gaussians
    positions = np.stack(
        [
            rng.uniform(-wx / 2, wx / 2, n),
            rng.uniform(-wy / 2, wy / 2, n),
            spec.wall_depth + rng.uniform(0.0, spec.relief, n),
        ],
        axis=1,
    )
    normals = np.stack(
        [rng.normal(0, 0.18, n), rng.normal(0, 0.18, n), -np.ones(n)], axis=1
    )
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0, math.pi, n)
    quats = np.concatenate(
        [np.cos(angles / 2)[:, None], axes * np.sin(angles / 2)[:, None]], axis=1
    )
    scales = spec.gaussian_size * np.exp(rng.normal(0, 0.25, (n, 3)))
    cloud = sc.GaussianCloud(
        positions=positions,
        scales=scales,
        quats=quats,
        opacities=rng.uniform(0.55, 0.95, n),
        albedos=rng.uniform(0.25, 0.9, (n, spec.channels)),
        normals=normals,
    )

    intr = CameraIntrinsics(
        fx=spec.focal, fy=spec.focal, cx=spec.width / 2.0, cy=spec.height / 2.0,
        width=spec.width, height=spec.height,
    )
    center = np.array([0.0, 0.0, spec.wall_depth + spec.relief / 2])
    distances = np.linspace(spec.range_min, spec.range_max, spec.n_images)
    cameras = []
    for i in range(spec.n_images):
        azim = i * _GOLDEN_ANGLE
        elev = math.radians(rng.uniform(2.0, 18.0))
        offset = math.sin(elev) * np.array([math.cos(azim), math.sin(azim), 0.0])
        eye = center - np.array([0.0, 0.0, distances[i]]) + distances[i] * offset
        target = center + np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0])
        cameras.append((look_at_pose(eye, target), intr))

    gt_scene = sc.Scene(
        cloud=cloud,
        scale=1.0,
        ambient=AmbientLight(np.full(spec.channels, spec.scene_ambient)),
        cameras=cameras,
        rig=spec.rig,
    )
    images = [sc.render(gt_scene, i) for i in range(spec.n_images)]
    if spec.noise_sigma > 0:
        nrng = np.random.default_rng(spec.seed + 1)
        sigma = spec.noise_sigma * max(im.max() for im in images)
        images = [np.maximum(im + nrng.normal(0, sigma, im.shape), 0.0) for im in images]

    prng = np.random.default_rng(spec.seed + 2)
    points_emitted = positions / spec.s_star + prng.normal(
        0, spec.point_noise / spec.s_star, positions.shape
    )
    color_guess = (
        np.clip(cloud.albedos + prng.normal(0, 0.05, cloud.albedos.shape), 0.02, 0.98)
        if spec.emit_colors
        else None
    )
    manifest = {
        "kind": "scene",
        "channels": spec.channels,
        "rig": "rig.json",
        "split": {"seed": spec.seed, "test_fraction": spec.test_fraction},
        "points": points_emitted.tolist(),
        "colors": color_guess.tolist() if color_guess is not None else None,
        "cameras": [
            {
                "image": f"frames/frame_{i:03d}.pfm",
                "pose_cam_to_world": RigidPose(
                    pose.rotation, pose.translation / spec.s_star
                ).as_matrix().tolist(),
                "intrinsics": intrinsics_to_dict(intr),
            }
            for i, (pose, intr) in enumerate(cameras)
        ],
    }

    if out_dir is not None:
        from . import scene as scmod
        from .lights import save_rig

        out_dir = Path(out_dir)
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(images):
            imageio.write_pfm(out_dir / "frames" / f"frame_{i:03d}.pfm", im)
        save_rig(spec.rig, out_dir / "rig.json")
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
        scmod.save_scene(gt_scene, out_dir / "ground_truth_scene.json")
        (out_dir / "ground_truth.json").write_text(
            json.dumps({"s_star": spec.s_star, "seed": spec.seed,
                        "scene": "ground_truth_scene.json"}, indent=1)
        )

    payload = {k: v for k, v in manifest.items() if k != "split"}
    fp = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    train, test = split_indices(spec.n_images, fp, spec.seed, spec.test_fraction)
    return SceneFixture(
        gt_scene=gt_scene, images=images, manifest=manifest, rig=spec.rig, spec=spec,
        train_indices=train, test_indices=test,
    )


def perturbed_init(
    rig: LightRig,
    seed: int = 0,
    translation_m: float = 0.05,
    rotation_deg: float = 5.0,
    tau_factor: float = 2.0,
) -> LightRig:
    """Ground-truth rig with pose and tau perturbed (the calibration
    starting point for recovery experiments)."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dr = so3_exp(axis * math.radians(rotation_deg))
    dt = rng.normal(size=3)
    dt = dt / np.linalg.norm(dt) * translation_m
    pose = RigidPose(
        Rotation(dr.matrix @ rig.pose_light_to_cam.rotation.matrix),
        rig.pose_light_to_cam.translation + dt,
    )
    return LightRig(
        pose_light_to_cam=pose,
        rid=rig.rid,
        falloff=FalloffModel(rig.falloff.tau * tau_factor),
        ambient=rig.ambient,
    )
