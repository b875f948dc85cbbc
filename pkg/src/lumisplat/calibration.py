"""Planar-target photometric calibration of a camera-mounted light.

Given captured images of a uniform-albedo Lambertian plane with known
camera poses, fit the light rig (pose, RID, falloff tau, ambient) plus
the plane albedo by minimizing the mean per-pixel L1 error between the
captured radiance and the model prediction inside each frame's ROI.

Fitting is staged: a Gaussian-lobe RID is fit jointly first, then the
RID is swapped for an MLP (pre-trained to reproduce the lobe) and fit
with pose and albedo frozen, and finally everything is unfrozen for a
joint refinement.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import imageio
from .autodiff import value_of
from .errors import EmptyROI, FitFailed, NonFiniteLoss, SchemaError
from .geometry import CameraIntrinsics, RigidPose, Rotation, pixel_ray, pixel_rays, ray_plane_intersect
from .lights import (
    GaussianLobeRid,
    LightRig,
    MlpRid,
    RigParams,
    lambertian_brdf,
    light_origin_axis,
    params_flatten,
    rid_eval,
)
from .optim import LossReport, StageConfig, StageReport, run_stage

logger = logging.getLogger(__name__)

RIG_GROUP_NAMES = {"pose", "rid", "tau", "ambient"}


# -- dataset types ---------------------------------------------------------


@dataclass
class CalibrationTarget:
    """Uniform Lambertian plane; world origin sits at its top-left corner."""

    origin: np.ndarray  # point on the plane
    normal: np.ndarray  # unit normal, toward the camera half-space
    albedo: np.ndarray  # (channels,), in [0, 1]
    extent: tuple[float, float] = (0.4, 0.3)  # meters, (width, height)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        nn = np.linalg.norm(n)
        if abs(nn - 1.0) > 1e-6:
            raise ValueError("plane normal must be unit length")
        self.normal = n / nn
        self.albedo = np.asarray(self.albedo, dtype=float).reshape(-1)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")


@dataclass
class CalibrationFrame:
    """One capture: image, camera pose, intrinsics, and ROI polygon."""

    image: np.ndarray  # (H, W, channels) linear radiance
    cam_pose_world: RigidPose
    intrinsics: CameraIntrinsics
    roi: np.ndarray  # (k >= 3, 2) polygon in pixel coordinates

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim == 2:
            img = img[:, :, None]
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise ValueError("image must be finite and nonnegative")
        self.image = img
        roi = np.asarray(self.roi, dtype=float)
        if roi.ndim != 2 or roi.shape[0] < 3 or roi.shape[1] != 2:
            raise ValueError("ROI must be a polygon of >= 3 pixel vertices")
        w, h = self.intrinsics.width, self.intrinsics.height
        if np.any(roi[:, 0] < 0) or np.any(roi[:, 0] >= w) or np.any(roi[:, 1] < 0) or np.any(roi[:, 1] >= h):
            raise ValueError("ROI polygon must lie inside image bounds")
        self.roi = roi


def polygon_mask(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean (H, W) mask of integer pixel centers inside a convex polygon."""
    poly = np.asarray(poly, dtype=float)
    uu, vv = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    inside_pos = np.ones((height, width), dtype=bool)
    inside_neg = np.ones((height, width), dtype=bool)
    k = len(poly)
    for i in range(k):
        a = poly[i]
        b = poly[(i + 1) % k]
        cross = (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


@dataclass
class PixelTable:
    """Flattened per-pixel geometry for a set of frames.

    Plane intersections depend only on camera poses and the target, so
    they are precomputed once; only the light-dependent shading terms
    are re-evaluated during optimization.
    """

    points: np.ndarray  # (P, 3) world intersections
    captured: np.ndarray  # (P, channels)
    frame_idx: np.ndarray  # (P,) into the stacked poses below
    rot_cw: np.ndarray  # (F, 3, 3)
    t_cw: np.ndarray  # (F, 3)
    normal: np.ndarray  # (3,)
    valid_per_frame: np.ndarray  # (F,)
    excluded_per_frame: np.ndarray  # (F,)
    roi_per_frame: np.ndarray  # (F,)


def build_pixel_table(
    frames: list[CalibrationFrame], target: CalibrationTarget
) -> PixelTable:
    points, captured, frame_idx = [], [], []
    valid_counts, excluded_counts, roi_counts = [], [], []
    for fi, frame in enumerate(frames):
        intr = frame.intrinsics
        mask = polygon_mask(frame.roi, intr.width, intr.height)
        vs, us = np.nonzero(mask)
        roi_counts.append(len(us))
        if len(us) == 0:
            valid_counts.append(0)
            excluded_counts.append(0)
            continue
        origin, dirs = pixel_rays(intr, frame.cam_pose_world, np.stack([us, vs], axis=1).astype(float))
        denom = dirs @ target.normal
        t = ((target.origin - origin) @ target.normal) / np.where(np.abs(denom) > 1e-9, denom, np.nan)
        ok = np.isfinite(t) & (t > 0)
        n_ok = int(ok.sum())
        valid_counts.append(n_ok)
        excluded_counts.append(len(us) - n_ok)
        if len(us) - n_ok:
            logger.info("frame %d: excluded %d of %d ROI pixels", fi, len(us) - n_ok, len(us))
        pts = origin[None, :] + t[ok, None] * dirs[ok]
        points.append(pts)
        captured.append(frame.image[vs[ok], us[ok], :])
        frame_idx.append(np.full(n_ok, fi, dtype=np.int64))
    if not points:
        raise EmptyROI("no valid ROI pixel in any frame")
    return PixelTable(
        points=np.concatenate(points),
        captured=np.concatenate(captured),
        frame_idx=np.concatenate(frame_idx),
        rot_cw=np.stack([f.cam_pose_world.rotation.matrix for f in frames]),
        t_cw=np.stack([f.cam_pose_world.translation for f in frames]),
        normal=target.normal.copy(),
        valid_per_frame=np.asarray(valid_counts),
        excluded_per_frame=np.asarray(excluded_counts),
        roi_per_frame=np.asarray(roi_counts),
    )


@dataclass
class CalibrationDataset:
    frames: list[CalibrationFrame]
    target: CalibrationTarget
    train_indices: np.ndarray
    test_indices: np.ndarray
    fingerprint: str = ""
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def channels(self) -> int:
        return self.frames[0].image.shape[2]

    def subset_frames(self, subset: str) -> list[CalibrationFrame]:
        if subset == "train":
            idx = self.train_indices
        elif subset == "test":
            idx = self.test_indices
        elif subset == "all":
            idx = np.arange(len(self.frames))
        else:
            raise ValueError(f"unknown subset {subset!r}")
        return [self.frames[i] for i in idx]

    def table(self, subset: str) -> PixelTable:
        if subset not in self._tables:
            frames = self.subset_frames(subset)
            if not frames:
                raise EmptyROI(f"subset {subset!r} has no frames")
            self._tables[subset] = build_pixel_table(frames, self.target)
        return self._tables[subset]


def split_indices(n_frames: int, fingerprint: str, seed: int, test_fraction: float):
    """Deterministic disjoint train/test split covering all frames."""
    digest = hashlib.sha256(f"{fingerprint}:{seed}".encode()).digest()
    rng = np.random.default_rng(np.frombuffer(digest[:8], dtype=np.uint64))
    perm = rng.permutation(n_frames)
    n_test = max(1, int(round(test_fraction * n_frames))) if n_frames > 1 else 0
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return train, test


# -- manifest I/O ---------------------------------------------------------


def dataset_fingerprint(manifest: dict) -> str:
    payload = {k: v for k, v in manifest.items() if k != "split"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _intrinsics_from_dict(d: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )
    except KeyError as exc:
        raise SchemaError(f"intrinsics missing field {exc}") from exc


def intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
    }


def load_dataset(manifest_path: str | Path) -> CalibrationDataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for key in ("target", "frames"):
        if key not in manifest:
            raise SchemaError(f"manifest missing key {key!r}")
    tgt = manifest["target"]
    target = CalibrationTarget(
        origin=np.asarray(tgt["origin"], dtype=float),
        normal=np.asarray(tgt["normal"], dtype=float),
        albedo=np.asarray(tgt["albedo"], dtype=float),
        extent=tuple(tgt.get("extent", (0.4, 0.3))),
    )
    base = manifest_path.parent
    frames = []
    for i, fd in enumerate(manifest["frames"]):
        try:
            image = imageio.read_image(base / fd["image"])
            pose = RigidPose.from_matrix(np.asarray(fd["pose_cam_to_world"], dtype=float))
            intr = _intrinsics_from_dict(fd["intrinsics"])
            roi = np.asarray(fd["roi"], dtype=float)
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"frame {i}: {exc}") from exc
        frames.append(CalibrationFrame(image=image, cam_pose_world=pose, intrinsics=intr, roi=roi))
    split = manifest.get("split", {})
    fp = dataset_fingerprint(manifest)
    train, test = split_indices(
        len(frames), fp, int(split.get("seed", 0)), float(split.get("test_fraction", 0.25))
    )
    return CalibrationDataset(
        frames=frames, target=target, train_indices=train, test_indices=test, fingerprint=fp
    )


# -- forward model ----------------------------------------------------------


def render_target_pixel(
    rig: LightRig,
    frame: CalibrationFrame,
    target: CalibrationTarget,
    u: float,
    v: float,
) -> np.ndarray:
    """Predicted radiance at one target pixel: incident * Lambertian.

    Geometry errors (parallel ray, intersection behind camera) propagate
    to the caller; batch code catches them and excludes such pixels.
    """
    ray = pixel_ray(frame.intrinsics, frame.cam_pose_world, u, v)
    x = ray_plane_intersect(ray, target.origin, target.normal)
    o_l, _ = light_origin_axis(
        RigParams.from_rig(rig),
        frame.cam_pose_world.rotation.matrix,
        frame.cam_pose_world.translation,
    )
    from .lights import incident_radiance

    incident = incident_radiance(rig, frame.cam_pose_world, x)
    response = lambertian_brdf(x - np.asarray(o_l), target.normal, target.albedo)
    return np.asarray(incident) * np.asarray(response)


def pixel_geometry(params: RigParams, table: PixelTable) -> dict:
    """Light-pose-dependent per-pixel terms; all plain arrays when the
    pose is, which lets pose-frozen stages cache them."""
    o, axis = light_origin_axis(params, table.rot_cw, table.t_cw)
    o_pix = ad.take(o, table.frame_idx)
    axis_pix = ad.take(axis, table.frame_idx)
    omega = ad.sub(table.points, o_pix)
    d2 = ad.sum_(ad.mul(omega, omega), axis=1)
    if np.min(value_of(d2)) < 1e-12:
        raise NonFiniteLoss("light coincides with a target point")
    d = ad.sqrt(d2)
    omega_hat = ad.div(omega, ad.reshape(d, (-1, 1)))
    cosang = ad.sum_(ad.mul(omega_hat, axis_pix), axis=1)
    angle = ad.arccos(ad.clip(cosang, -(1.0 - 1e-9), 1.0 - 1e-9))
    cosi = ad.relu(ad.neg(ad.sum_(ad.mul(omega_hat, table.normal), axis=1)))
    return {"d2": d2, "angle": angle, "cosi": cosi}


def shade_geometry(geom: dict, params: RigParams, albedo):
    phi = rid_eval(params.rid, geom["angle"])
    psi = ad.div(1.0, ad.add(params.tau, geom["d2"]))
    incident = ad.add(ad.mul(ad.reshape(psi, (-1, 1)), phi), params.ambient)
    return ad.mul(incident, ad.mul(ad.reshape(geom["cosi"], (-1, 1)), albedo))


def predict_pixels(params: RigParams, albedo, table: PixelTable):
    """Model radiance for every pixel of a table; differentiable."""
    return shade_geometry(pixel_geometry(params, table), params, albedo)


def _loss_terms(params: RigParams, albedo, table: PixelTable):
    pred = predict_pixels(params, albedo, table)
    diff = ad.sub(pred, table.captured)
    l1 = ad.mean(ad.sum_(ad.absolute(diff, deadband=1e-12), axis=1))
    return l1, diff


def calib_loss(
    rig: LightRig, dataset: CalibrationDataset, subset: str = "train", albedo=None
) -> LossReport:
    """Mean per-pixel L1 over the subset's valid ROI pixels (+ MSE term).

    The mean (rather than a sum) keeps the objective independent of image
    resolution.  MSE is reported alongside for held-out comparisons.
    """
    table = dataset.table(subset)
    if table.points.shape[0] == 0:
        raise EmptyROI(f"subset {subset!r} has no valid pixels")
    if albedo is None:
        albedo = dataset.target.albedo
    l1, diff = _loss_terms(RigParams.from_rig(rig), np.asarray(albedo, dtype=float), table)
    d = value_of(diff)
    return LossReport(
        value=float(value_of(l1)),
        terms={
            "l1": float(value_of(l1)),
            "mse": float(np.mean(d * d)),
            "valid_pixels": int(table.points.shape[0]),
            "excluded_pixels": int(table.excluded_per_frame.sum()),
        },
    )


# -- optimization problem ------------------------------------------------


class _CalibLayout:
    """Rig layout plus an optional sigmoid-coded albedo block."""

    def __init__(self, rig_layout, albedo_slice, base_albedo):
        self.rig_layout = rig_layout
        self.albedo_slice = albedo_slice
        self.base_albedo = base_albedo
        self.total = rig_layout.total + (
            albedo_slice.stop - albedo_slice.start if albedo_slice else 0
        )

    def group_slices(self):
        out = dict(self.rig_layout.group_slices())
        if self.albedo_slice:
            out["albedo"] = self.albedo_slice
        return out

    def live_groups(self):
        groups = self.rig_layout.live_groups()
        if self.albedo_slice:
            groups.append("albedo")
        return groups

    def decode(self, vec):
        params = self.rig_layout.decode(vec[: self.rig_layout.total])
        if self.albedo_slice:
            albedo = ad.sigmoid(vec[self.albedo_slice])
        else:
            albedo = self.base_albedo
        return params, albedo


def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), 1e-6, 1.0 - 1e-6)
    return np.log(x) - np.log1p(-x)


class CalibrationProblem:
    """Adapter exposing (rig, albedo) to the staged optimizer.

    While the pose group is frozen the per-pixel geometry (distances,
    beam angles, incidence cosines) is constant, so it is computed once
    and reused across the stage's iterations.
    """

    def __init__(self, dataset: CalibrationDataset, rig: LightRig, albedo=None, subset="train"):
        self.dataset = dataset
        self.rig = rig
        self.albedo = np.asarray(
            dataset.target.albedo if albedo is None else albedo, dtype=float
        )
        self._full_table = dataset.table(subset)
        self._stride = 1
        self._strided: dict[int, PixelTable] = {1: self._full_table}
        self._geom_cache: tuple | None = None

    def set_pixel_stride(self, stride: int) -> None:
        stride = max(1, int(stride))
        if stride not in self._strided:
            t = self._full_table
            self._strided[stride] = PixelTable(
                points=t.points[::stride],
                captured=t.captured[::stride],
                frame_idx=t.frame_idx[::stride],
                rot_cw=t.rot_cw,
                t_cw=t.t_cw,
                normal=t.normal,
                valid_per_frame=t.valid_per_frame,
                excluded_per_frame=t.excluded_per_frame,
                roi_per_frame=t.roi_per_frame,
            )
        self._stride = stride

    @property
    def table(self) -> PixelTable:
        return self._strided[self._stride]

    def flatten(self, frozen):
        frozen = frozenset(frozen)
        rig_vec, rig_layout = params_flatten(self.rig, frozen & RIG_GROUP_NAMES)
        if "albedo" in frozen:
            layout = _CalibLayout(rig_layout, None, self.albedo)
            return rig_vec, layout
        sl = slice(rig_layout.total, rig_layout.total + self.albedo.size)
        layout = _CalibLayout(rig_layout, sl, self.albedo)
        return np.concatenate([rig_vec, _logit(self.albedo)]), layout

    def _geometry(self, params: RigParams, frozen_pose: bool):
        if not frozen_pose:
            return pixel_geometry(params, self.table)
        pose = self.rig.pose_light_to_cam
        key = (
            self._stride,
            pose.rotation.matrix.tobytes(),
            pose.translation.tobytes(),
        )
        if self._geom_cache is None or self._geom_cache[0] != key:
            self._geom_cache = (key, pixel_geometry(params, self.table))
        return self._geom_cache[1]

    def loss_var(self, vec, layout):
        params, albedo = layout.decode(vec)
        geom = self._geometry(params, "pose" in layout.rig_layout.frozen)
        pred = shade_geometry(geom, params, albedo)
        diff = ad.sub(pred, self.table.captured)
        return ad.mean(ad.sum_(ad.absolute(diff, deadband=1e-12), axis=1))

    def apply(self, vec, layout):
        self.rig = layout.rig_layout.to_rig(np.asarray(vec)[: layout.rig_layout.total])
        if layout.albedo_slice:
            self.albedo = np.asarray(value_of(ad.sigmoid(np.asarray(vec)[layout.albedo_slice])))


# -- staged schedule ----------------------------------------------------------


@dataclass
class CalibStage(StageConfig):
    swap_rid_to_mlp: bool = False
    pixel_stride: int = 1


@dataclass
class CalibrationSchedule:
    stages: list
    seed: int = 0

    @classmethod
    def default(cls, seed: int = 0) -> "CalibrationSchedule":
        """Staged fit: joint Gaussian-lobe warm start, MLP RID with pose
        and albedo frozen, then a gentle joint refinement.

        Stage-1 rates are deliberately asymmetric: the pose and tau move
        fast while the photometric parameters (RID shape, ambient,
        albedo) crawl.  Letting the photometric side co-adapt at full
        speed buries the pose in a compensating local minimum before it
        can align.
        """
        return cls(
            seed=seed,
            stages=[
                CalibStage(
                    name="lobe-joint",
                    iterations=2000,
                    learning_rates={
                        "pose": 3e-3,
                        "tau": 1e-2,
                        "rid": 1e-4,
                        "ambient": 1e-4,
                        "albedo": 1e-4,
                    },
                    lr_decay=0.01,
                    pixel_stride=2,
                ),
                CalibStage(
                    name="mlp-rid",
                    iterations=500,
                    frozen=frozenset({"pose", "albedo"}),
                    learning_rates={"rid": 3e-3, "tau": 1e-4, "ambient": 3e-4},
                    lr_decay=0.01,
                    swap_rid_to_mlp=True,
                    pixel_stride=3,
                ),
                CalibStage(
                    name="joint-refine",
                    iterations=300,
                    learning_rates={
                        "pose": 3e-4,
                        "rid": 1e-3,
                        "tau": 3e-4,
                        "ambient": 3e-4,
                        "albedo": 3e-4,
                    },
                    lr_decay=0.03,
                    pixel_stride=3,
                ),
            ],
        )

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationSchedule":
        stages = []
        for sd in d.get("stages", []):
            stages.append(
                CalibStage(
                    name=sd.get("name", f"stage{len(stages)}"),
                    iterations=int(sd.get("iterations", 100)),
                    frozen=frozenset(sd.get("frozen", [])),
                    learning_rates={k: float(v) for k, v in sd.get("learning_rates", {}).items()},
                    swap_rid_to_mlp=bool(sd.get("swap_rid_to_mlp", False)),
                    pixel_stride=int(sd.get("pixel_stride", 1)),
                    lr_decay=float(sd.get("lr_decay", 1.0)),
                    early_stop_window=sd.get("early_stop_window"),
                    early_stop_rel=float(sd.get("early_stop_rel", 1e-5)),
                )
            )
        if not stages:
            raise SchemaError("schedule has no stages")
        return cls(stages=stages, seed=int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stages": [
                {
                    "name": s.name,
                    "iterations": s.iterations,
                    "frozen": sorted(s.frozen),
                    "learning_rates": s.learning_rates,
                    "swap_rid_to_mlp": s.swap_rid_to_mlp,
                    "pixel_stride": s.pixel_stride,
                    "lr_decay": s.lr_decay,
                    "early_stop_window": s.early_stop_window,
                    "early_stop_rel": s.early_stop_rel,
                }
                for s in self.stages
            ],
        }


def load_schedule(path: str | Path) -> CalibrationSchedule:
    try:
        return CalibrationSchedule.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read schedule {path}: {exc}") from exc


def rid_swap_gauss_to_mlp(
    lobe: GaussianLobeRid,
    rng: np.random.Generator,
    n_samples: int = 256,
    budget: int = 12000,
    lr: float = 1e-2,
    max_abs_err: float = 1e-2,
    target_abs_err: float | None = None,
    hidden: tuple[int, ...] = (32, 32, 32),
) -> MlpRid:
    """Pre-train an MLP RID to reproduce a Gaussian lobe.

    Least-squares regression on angles sampled over [0, pi]; the fit must
    reach max abs error < `max_abs_err` on [0, pi/2] within the budget,
    otherwise FitFailed is raised.  `target_abs_err` (defaults to
    max_abs_err / 3) sets the tighter goal the regression keeps chasing
    before it stops early; residual shape error gets absorbed by tau and
    ambient downstream, so the closer the bridge, the less they drift.
    """
    from .optim import AdamState, adam_step

    if target_abs_err is None:
        target_abs_err = max_abs_err / 3.0
    angles = np.linspace(0.0, math.pi, n_samples)
    target = np.asarray(rid_eval(lobe, angles))
    check = angles <= math.pi / 2 + 1e-12
    mlp = MlpRid.init_random(lobe.channels, rng, hidden=hidden)
    spec = [(w.shape, b.shape) for w, b in zip(mlp.weights, mlp.biases)]
    vec = np.concatenate(
        [np.asarray(w).reshape(-1) for w in mlp.weights]
        + [np.asarray(b).reshape(-1) for b in mlp.biases]
    )

    def unpack(v):
        weights, biases = [], []
        off = 0
        for ws, _ in spec:
            n = int(np.prod(ws))
            weights.append(ad.reshape(v[off : off + n], ws))
            off += n
        for _, bs in spec:
            n = int(np.prod(bs))
            biases.append(ad.reshape(v[off : off + n], bs))
            off += n
        return MlpRid(weights=weights, biases=biases, hidden=mlp.hidden)

    def loss(v):
        pred = rid_eval(unpack(v), angles)
        d = ad.sub(pred, target)
        return ad.mean(ad.mul(d, d))

    state = AdamState.for_size(vec.size)
    best = None
    for it in range(budget):
        _, g = ad.grad(loss, vec)
        vec = adam_step(state, vec, g, lr)
        if (it + 1) % 100 == 0:
            fitted = unpack(vec)
            err = np.abs(np.asarray(rid_eval(fitted, angles))[check] - target[check]).max()
            if best is None or err < best[0]:
                best = (err, vec.copy())
            if err < target_abs_err:
                break
    fitted = unpack(best[1] if best is not None else vec)
    fitted = MlpRid(
        weights=[np.asarray(value_of(w)) for w in fitted.weights],
        biases=[np.asarray(value_of(b)) for b in fitted.biases],
        hidden=mlp.hidden,
    )
    err = np.abs(np.asarray(rid_eval(fitted, angles))[check] - target[check]).max()
    if err > max_abs_err:
        raise FitFailed(f"MLP pre-fit residual {err:.4g} > {max_abs_err}")
    return fitted


@dataclass
class CalibrationResult:
    rig: LightRig
    albedo: np.ndarray
    stage_reports: list
    train: LossReport | None = None
    test: LossReport | None = None


def execute_schedule(
    problem: CalibrationProblem,
    schedule: CalibrationSchedule,
    callback=None,
) -> list[StageReport]:
    """Run the schedule's stages on an existing problem (shared by the
    CLI batch path and the interactive service, so both produce the same
    result for the same inputs and seed)."""
    if not schedule.stages:
        raise SchemaError("schedule has no stages")
    rng = np.random.default_rng(schedule.seed)
    reports: list[StageReport] = []
    for stage in schedule.stages:
        if getattr(stage, "swap_rid_to_mlp", False):
            if isinstance(problem.rig.rid, GaussianLobeRid):
                mlp = rid_swap_gauss_to_mlp(problem.rig.rid, rng)
                problem.rig = LightRig(
                    pose_light_to_cam=problem.rig.pose_light_to_cam,
                    rid=mlp,
                    falloff=problem.rig.falloff,
                    ambient=problem.rig.ambient,
                )
            elif not isinstance(problem.rig.rid, MlpRid):
                raise SchemaError(
                    f"cannot swap RID variant {type(problem.rig.rid).__name__} to MLP"
                )
        problem.set_pixel_stride(getattr(stage, "pixel_stride", 1))
        reports.append(run_stage(problem, stage, callback=callback))
        if reports[-1].aborted:
            break
    return reports


def run_calibration(
    dataset: CalibrationDataset,
    init: LightRig,
    schedule: CalibrationSchedule | None = None,
    albedo_init=None,
    callback=None,
) -> CalibrationResult:
    """Execute the staged schedule and return the fitted rig + histories."""
    if schedule is None:
        schedule = CalibrationSchedule.default()
    problem = CalibrationProblem(dataset, init, albedo=albedo_init)
    reports = execute_schedule(problem, schedule, callback=callback)
    result = CalibrationResult(
        rig=problem.rig, albedo=problem.albedo, stage_reports=reports
    )
    if not reports[-1].aborted:
        result.train = calib_loss(problem.rig, dataset, "train", albedo=problem.albedo)
        result.test = calib_loss(problem.rig, dataset, "test", albedo=problem.albedo)
    return result
