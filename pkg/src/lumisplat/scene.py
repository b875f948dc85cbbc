"""Relightable Gaussian scene model and CPU splat renderer.

A scene is a cloud of anisotropic 3D Gaussians, each carrying an albedo
and a surface normal instead of a view-dependent color.  Rendering
composites depth-sorted Gaussians front to back; each one is shaded by
the calibrated light rig (incident radiance times a Lambertian cosine
response) evaluated at its metric 3D position, so moving the camera
moves the light with it.

Because monocular reconstruction is only defined up to scale while the
light rig is metric, the scene carries a learnable global scale factor
applied to Gaussian positions, covariance extents, and camera
translations alike.  Training optionally warms up the light pose from a
camera-co-centered configuration to the calibrated one over the first k
iterations, which keeps a badly scaled initialization from diverging.

The renderer is written against the autodiff op set: with plain numpy
inputs it is the production forward path, with tape variables it yields
the gradients used for scene fitting.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import BehindCamera, NonFiniteLoss, SchemaError, ShapeMismatch
from .geometry import CameraIntrinsics, RigidPose, Rotation, so3_exp, so3_log
from .lights import AmbientLight, FalloffModel, LightRig, RigParams, rid_eval
from .optim import StageConfig, StageReport, run_stage

# sentinel: "keep the scene's own component" in relighting calls
KEEP = object()

GAUSSIAN_FIELDS = (
    "px", "py", "pz",
    "sx", "sy", "sz",
    "qw", "qx", "qy", "qz",
    "opacity",
)  # followed by albedo channels, then nx, ny, nz


@dataclass
class Gaussian:
    """One scene primitive (the per-index view of a cloud)."""

    position: np.ndarray
    scale: np.ndarray  # (3,) > 0
    orientation: Rotation
    opacity: float  # in [0, 1]
    albedo: np.ndarray  # (channels,) in [0, 1]
    normal: np.ndarray  # unit

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        self.albedo = np.asarray(self.albedo, dtype=float).reshape(-1)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        n = np.asarray(self.normal, dtype=float).reshape(3)
        nn = np.linalg.norm(n)
        if abs(nn - 1.0) > 1e-6:
            raise ValueError("normal must be unit length")
        self.normal = n / nn


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


@dataclass
class GaussianCloud:
    """Structure-of-arrays storage for the primitives."""

    positions: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3) > 0
    quats: np.ndarray  # (N, 4) unit, (w, x, y, z)
    opacities: np.ndarray  # (N,) in [0, 1]
    albedos: np.ndarray  # (N, channels) in [0, 1]
    normals: np.ndarray  # (N, 3) unit

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.scales = np.asarray(self.scales, dtype=float)
        self.quats = np.asarray(self.quats, dtype=float)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(-1)
        self.albedos = np.atleast_2d(np.asarray(self.albedos, dtype=float))
        self.normals = np.asarray(self.normals, dtype=float)
        n = len(self.positions)
        for name in ("scales", "quats", "opacities", "albedos", "normals"):
            if len(getattr(self, name)) != n:
                raise ShapeMismatch(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n:
            if np.any(self.scales <= 0):
                raise ValueError("scales must be positive")
            if np.any(self.opacities < 0) or np.any(self.opacities > 1):
                raise ValueError("opacities must lie in [0, 1]")
            if np.any(self.albedos < 0) or np.any(self.albedos > 1):
                raise ValueError("albedos must lie in [0, 1]")
            self.quats = _unit_rows(self.quats)
            self.normals = _unit_rows(self.normals)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def channels(self) -> int:
        return self.albedos.shape[1]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            scale=self.scales[i],
            orientation=Rotation(_quat_to_matrix(self.quats[i])),
            opacity=float(self.opacities[i]),
            albedo=self.albedos[i],
            normal=self.normals[i],
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "GaussianCloud":
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            quats=np.stack([_matrix_to_quat(g.orientation.matrix) for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            albedos=np.stack([g.albedo for g in gaussians]),
            normals=np.stack([g.normal for g in gaussians]),
        )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(m)))
    if i == 0:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        return np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    if i == 1:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        return np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
    return np.array(
        [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    )


@dataclass
class WarmupSchedule:
    """Light-pose warm-up: factor grows linearly from 0 to 1 over k
    iterations (factor 1 when k = 0)."""

    k: int
    m: int = 0

    def __post_init__(self):
        if self.k < 0 or self.m < 0:
            raise ValueError("warm-up counters must be nonnegative")

    @property
    def factor(self) -> float:
        if self.k == 0:
            return 1.0
        return min(self.m / self.k, 1.0)


def warmup_pose(rig_pose: RigidPose, sched: WarmupSchedule) -> RigidPose:
    """Geodesic interpolation from the camera-co-centered pose (factor 0)
    to the calibrated pose (factor 1).

    The endpoints are exact: factor 0 returns the identity pose and
    factor >= 1 returns the input object itself, bit for bit.
    """
    f = sched.factor
    if f >= 1.0:
        return rig_pose
    if f <= 0.0:
        return RigidPose.identity()
    v = so3_log(rig_pose.rotation)
    return RigidPose(so3_exp(f * v), f * rig_pose.translation)


@dataclass
class Scene:
    """Gaussian cloud + global scale + ambient + cameras + light rig."""

    cloud: GaussianCloud
    scale: float
    ambient: AmbientLight
    cameras: list  # [(RigidPose, CameraIntrinsics)]
    rig: LightRig

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scene scale must be positive")
        if not self.cameras:
            raise ValueError("camera list must be nonempty")

    @property
    def channels(self) -> int:
        return self.rig.channels

    def view(self) -> dict:
        """Raw-parameter view consumed by the renderer (all numpy)."""
        return {
            "positions": self.cloud.positions,
            "scales": self.cloud.scales,
            "quats": self.cloud.quats,
            "opacities": self.cloud.opacities,
            "albedos": self.cloud.albedos,
            "normals": self.cloud.normals,
            "s": np.float64(self.scale),
            "ambient": self.ambient.value,
        }


def scene_fingerprint(scene: Scene) -> str:
    """Hash of every learnable scene parameter (relighting must not
    change it)."""
    h = hashlib.sha256()
    for a in (
        scene.cloud.positions,
        scene.cloud.scales,
        scene.cloud.quats,
        scene.cloud.opacities,
        scene.cloud.albedos,
        scene.cloud.normals,
        np.float64(scene.scale),
        scene.ambient.value,
    ):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def scaled_positions(scene: Scene) -> np.ndarray:
    """Metric Gaussian positions: scale * positions."""
    return scene.scale * scene.cloud.positions


def scaled_camera(scene: Scene, index: int) -> tuple[RigidPose, CameraIntrinsics]:
    """Camera with its translation brought to metric scale.

    The scale factor applies to the whole up-to-scale reconstruction
    (points and camera centers), which keeps every camera ray through
    the scene unchanged.
    """
    pose, intr = scene.cameras[index]
    return RigidPose(pose.rotation, scene.scale * pose.translation), intr


@dataclass
class RenderOptions:
    """Splat renderer knobs.

    radius_mult is the footprint cutoff in units of the largest 2D
    standard deviation; 6 keeps truncation error below 1e-7 per
    Gaussian.  term_threshold stops compositing once transmittance
    drops below it (0 disables).  blur_floor is the screen-space
    low-pass variance added to every projected covariance.
    """

    radius_mult: float = 6.0
    term_threshold: float = 1e-4
    near: float = 0.01
    blur_floor: float = 0.3


def project_gaussian(
    g: Gaussian, cam: tuple[RigidPose, CameraIntrinsics], options: RenderOptions | None = None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Perspective projection of one Gaussian: (mean2d, cov2d, depth).

    cov2d = J W Sigma W^T J^T + blur_floor * I with J the projection
    Jacobian at the mean.  Raises BehindCamera when depth <= near.
    """
    opts = options or RenderOptions()
    pose, intr = cam
    xc = pose.rotation.matrix.T @ (g.position - pose.translation)
    if xc[2] <= opts.near:
        raise BehindCamera(f"depth {xc[2]:.4g} <= near plane {opts.near}")
    z = xc[2]
    mean2d = np.array([intr.fx * xc[0] / z + intr.cx, intr.fy * xc[1] / z + intr.cy])
    R = _quat_to_matrix(_matrix_to_quat(g.orientation.matrix))
    M = R * g.scale[None, :]
    cov3d = M @ M.T
    W = pose.rotation.matrix.T
    cov_cam = W @ cov3d @ W.T
    J = np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * xc[0] / (z * z)],
            [0.0, intr.fy / z, -intr.fy * xc[1] / (z * z)],
        ]
    )
    cov2d = J @ cov_cam @ J.T + opts.blur_floor * np.eye(2)
    return mean2d, cov2d, float(z)


def _quats_to_matrices(quats):
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices (tape-capable)."""
    q = ad.normalize(quats, axis=-1)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    one = ad.add(ad.mul(w, 0.0), 1.0)
    rows = [
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w),
        2.0 * (x * y + z * w), one - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w),
        2.0 * (x * z - y * w), 2.0 * (y * z + x * w), one - 2.0 * (x * x + y * y),
    ]
    flat = ad.stack(rows, axis=1)  # (N, 9)
    return ad.reshape(flat, (-1, 3, 3))


def _render_forward(
    view: dict,
    cam_pose: RigidPose,
    intr: CameraIntrinsics,
    rig_params: RigParams,
    light_pose_rot: np.ndarray,
    light_pose_t: np.ndarray,
    opts: RenderOptions,
    want_aux: bool = False,
):
    """Differentiable splat rendering of one camera view.

    `view` holds the scene parameters (numpy or tape Vars); the camera
    and the effective light-to-camera pose are constants.  Returns the
    (H, W, channels) image, optionally with per-pixel compositing-weight
    sums and pair diagnostics.
    """
    H, W = intr.height, intr.width
    channels = value_of(view["albedos"]).shape[1]
    n = len(value_of(view["positions"]))
    if n == 0:
        img = np.zeros((H, W, channels))
        return (img, {"weight_sum": np.zeros((H, W))}) if want_aux else img

    s = view["s"]
    p = ad.mul(view["positions"], s)
    cam_t = ad.mul(cam_pose.translation, s)
    Rcw = cam_pose.rotation.matrix

    # camera-frame coordinates and projection
    xc = ad.matmul(ad.sub(p, ad.reshape(cam_t, (1, 3))), Rcw)
    zs = xc[:, 2]
    z_vals = value_of(zs)
    visible = z_vals > opts.near
    mean_u = ad.add(ad.div(ad.mul(xc[:, 0], intr.fx), zs), intr.cx)
    mean_v = ad.add(ad.div(ad.mul(xc[:, 1], intr.fy), zs), intr.cy)

    # 3D covariance in camera frame
    Rq = _quats_to_matrices(view["quats"])
    sc = ad.mul(view["scales"], s)
    M = ad.mul(Rq, ad.reshape(sc, (-1, 1, 3)))
    cov3d = ad.matmul(M, ad.swapaxes(M, 1, 2))
    cov_cam = ad.matmul(ad.matmul(Rcw.T, cov3d), Rcw)

    # projection Jacobian rows
    inv_z = ad.div(1.0, zs)
    zero = ad.mul(zs, 0.0)
    j_flat = ad.stack(
        [
            ad.mul(inv_z, intr.fx), zero, ad.mul(ad.mul(ad.mul(xc[:, 0], inv_z), inv_z), -intr.fx),
            zero, ad.mul(inv_z, intr.fy), ad.mul(ad.mul(ad.mul(xc[:, 1], inv_z), inv_z), -intr.fy),
        ],
        axis=1,
    )
    J = ad.reshape(j_flat, (-1, 2, 3))
    cov2d = ad.matmul(ad.matmul(J, cov_cam), ad.swapaxes(J, 1, 2))
    ca = ad.add(cov2d[:, 0, 0], opts.blur_floor)
    cb = cov2d[:, 0, 1]
    cc = ad.add(cov2d[:, 1, 1], opts.blur_floor)
    det = ad.sub(ad.mul(ca, cc), ad.mul(cb, cb))
    conic_a = ad.div(cc, det)
    conic_b = ad.div(ad.neg(cb), det)
    conic_c = ad.div(ca, det)

    # shading at the metric Gaussian centers
    o_l = ad.add(ad.reshape(ad.matmul(Rcw, ad.reshape(light_pose_t, (3, 1))), (3,)), cam_t)
    axis_cam = ad.matmul(light_pose_rot, np.array([[0.0], [0.0], [1.0]]))
    axis_w = ad.reshape(ad.matmul(Rcw, axis_cam), (3,))
    omega = ad.sub(p, ad.reshape(o_l, (1, 3)))
    d2 = ad.sum_(ad.mul(omega, omega), axis=1)
    if np.min(value_of(d2)) < 1e-12:
        raise NonFiniteLoss("light source coincides with a Gaussian center")
    dist = ad.sqrt(d2)
    omega_hat = ad.div(omega, ad.reshape(dist, (-1, 1)))
    nrm = ad.normalize(view["normals"], axis=-1)
    cosi = ad.relu(ad.neg(ad.sum_(ad.mul(omega_hat, nrm), axis=1)))
    cosang = ad.sum_(ad.mul(omega_hat, ad.reshape(axis_w, (1, 3))), axis=1)
    angle = ad.arccos(ad.clip(cosang, -(1.0 - 1e-9), 1.0 - 1e-9))
    phi = rid_eval(rig_params.rid, angle)
    if rig_params.tau is None:  # parallel-light mode: falloff replaced by 1
        psi_col = 1.0
        incident = ad.add(phi, rig_params.ambient)
    else:
        psi = ad.div(1.0, ad.add(rig_params.tau, d2))
        psi_col = ad.reshape(psi, (-1, 1))
        incident = ad.add(ad.mul(psi_col, phi), rig_params.ambient)
    shade = ad.mul(incident, ad.mul(ad.reshape(cosi, (-1, 1)), view["albedos"]))

    # footprint determination and global front-to-back order (values only)
    mu = np.stack([value_of(mean_u), value_of(mean_v)], axis=1)
    a_v, c_v = value_of(ca), value_of(cc)
    mid = 0.5 * (a_v + c_v)
    eig = mid + np.sqrt(np.maximum(mid * mid - value_of(det), 0.0))
    radius = opts.radius_mult * np.sqrt(np.maximum(eig, 0.0))
    ok = (
        visible
        & np.isfinite(radius)
        & (mu[:, 0] + radius >= 0)
        & (mu[:, 0] - radius <= W - 1)
        & (mu[:, 1] + radius >= 0)
        & (mu[:, 1] - radius <= H - 1)
    )
    idx_ok = np.flatnonzero(ok)
    if idx_ok.size == 0:
        img = ad.reshape(ad.segment_sum(ad.mul(shade, 0.0), np.zeros(n, dtype=np.int64), H * W), (H, W, channels))
        return (img, {"weight_sum": np.zeros((H, W))}) if want_aux else img
    order = idx_ok[np.argsort(z_vals[idx_ok], kind="stable")]

    x0 = np.clip(np.floor(mu[order, 0] - radius[order]).astype(np.int64), 0, W - 1)
    x1 = np.clip(np.ceil(mu[order, 0] + radius[order]).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(mu[order, 1] - radius[order]).astype(np.int64), 0, H - 1)
    y1 = np.clip(np.ceil(mu[order, 1] + radius[order]).astype(np.int64), 0, H - 1)
    counts = (x1 - x0 + 1) * (y1 - y0 + 1)
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(order)), counts)  # rank in depth order
    offs = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(offs, counts)
    wbox = (x1 - x0 + 1)[rep]
    px = x0[rep] + local % wbox
    py = y0[rep] + local // wbox
    pix = py * W + px

    sort_idx = np.lexsort((rep, pix))
    pix_s = pix[sort_idx]
    rank_s = rep[sort_idx]
    gauss_s = order[rank_s]
    starts = np.flatnonzero(np.diff(pix_s, prepend=-1))
    lengths = np.diff(np.append(starts, len(pix_s)))
    seg_start_of_pair = np.repeat(starts, lengths)

    # per-pair opacity, transmittance, weights (differentiable)
    du = ad.sub(px.astype(float)[sort_idx], ad.take(mean_u, gauss_s))
    dv = ad.sub(py.astype(float)[sort_idx], ad.take(mean_v, gauss_s))
    qa = ad.take(conic_a, gauss_s)
    qb = ad.take(conic_b, gauss_s)
    qc = ad.take(conic_c, gauss_s)
    quad = ad.minimum(
        ad.mul(
            ad.add(ad.add(ad.mul(qa, ad.mul(du, du)), ad.mul(qc, ad.mul(dv, dv))),
                   ad.mul(ad.mul(qb, ad.mul(du, dv)), 2.0)),
            -0.5,
        ),
        0.0,
    )
    alpha = ad.minimum(ad.mul(ad.take(view["opacities"], gauss_s), ad.exp(quad)), 1.0 - 1e-7)
    lg = ad.log1p(ad.neg(alpha))
    cl = ad.cumsum(lg)
    cl_shift = ad.concat([np.zeros(1), cl[:-1]])
    trans = ad.exp(ad.sub(cl_shift, ad.take(cl_shift, seg_start_of_pair)))
    if opts.term_threshold > 0:
        live = value_of(trans) >= opts.term_threshold
        weight = ad.mul(ad.mul(alpha, trans), live.astype(float))
    else:
        weight = ad.mul(alpha, trans)

    contrib = ad.mul(ad.reshape(weight, (-1, 1)), ad.take(shade, gauss_s))
    img = ad.reshape(ad.segment_sum(contrib, pix_s, H * W), (H, W, channels))
    if not want_aux:
        return img
    wsum = np.zeros(H * W)
    np.add.at(wsum, pix_s, value_of(weight))
    return img, {"weight_sum": wsum.reshape(H, W), "pairs": len(pix_s)}


def render(
    scene: Scene,
    cam_index: int,
    rig_pose_override: RigidPose | None = None,
    rid=KEEP,
    falloff=KEEP,
    ambient=KEEP,
    options: RenderOptions | None = None,
    want_aux: bool = False,
):
    """Render one camera view of the scene under its (possibly
    overridden) light components.

    `rig_pose_override` substitutes the light-to-camera pose (used by
    the training warm-up).  `rid` / `falloff` / `ambient` default to the
    scene's own components; passing `falloff=None` replaces the range
    falloff with 1 (parallel-light mode).
    """
    if not 0 <= cam_index < len(scene.cameras):
        raise IndexError(f"camera index {cam_index} out of range")
    pose, intr = scene.cameras[cam_index]
    opts = options or RenderOptions()
    light_pose = scene.rig.pose_light_to_cam if rig_pose_override is None else rig_pose_override
    use_rid = scene.rig.rid if rid is KEEP else rid
    use_ambient = scene.ambient.value if ambient is KEEP else (
        ambient.value if isinstance(ambient, AmbientLight) else np.asarray(ambient, dtype=float)
    )
    if falloff is KEEP:
        tau = scene.rig.falloff.tau
    elif falloff is None:
        tau = None
    else:
        tau = falloff.tau if isinstance(falloff, FalloffModel) else float(falloff)
    params = RigParams(
        rot=light_pose.rotation.matrix,
        t=light_pose.translation,
        rid=use_rid,
        tau=tau,
        ambient=use_ambient,
    )
    out = _render_forward(
        scene.view(), pose, intr, params,
        light_pose.rotation.matrix, light_pose.translation,
        opts, want_aux=want_aux,
    )
    if want_aux:
        img, aux = out
        return np.asarray(img), aux
    return np.asarray(out)


def relight(scene: Scene, new_rid, new_falloff, new_ambient, cam_index: int, options=None):
    """Re-render with substituted light components; scene parameters are
    untouched.  `new_falloff=None` simulates a parallel light source."""
    return render(
        scene, cam_index,
        rid=scene.rig.rid if new_rid is KEEP else new_rid,
        falloff=new_falloff,
        ambient=scene.ambient if new_ambient is KEEP else new_ambient,
        options=options,
    )


def white_balance(image: np.ndarray, gains, max_value: float = 1e6) -> np.ndarray:
    """Per-channel gain with an upper clamp."""
    gains = np.asarray(gains, dtype=float).reshape(1, 1, -1)
    if np.any(gains <= 0):
        raise ValueError("white-balance gains must be positive")
    return np.minimum(np.asarray(image, dtype=float) * gains, max_value)


# -- training ---------------------------------------------------------------

SCENE_GROUPS = ("scene-gaussians", "scene-scale", "ambient")

# relative step sizes of the per-Gaussian attributes inside the
# scene-gaussians group (multipliers on the group learning rate)
ATTR_LR_SCALES = {
    "positions": 0.1,
    "log_scales": 1.0,
    "quats": 0.5,
    "opacity_raw": 5.0,
    "albedo_raw": 1.0,
    "normals": 1.0,
}


def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), 1e-6, 1.0 - 1e-6)
    return np.log(x) - np.log1p(-x)


@dataclass(frozen=True)
class _Entry:
    group: str
    name: str
    shape: tuple
    offset: int
    lr_scale: float = 1.0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class SceneLayout:
    """Flat-vector codec for the live scene parameter groups."""

    def __init__(self, scene: Scene, frozen: frozenset):
        self.frozen = frozen
        self.entries: list[_Entry] = []
        chunks: list[np.ndarray] = []
        offset = 0
        c = scene.cloud

        def put(group, name, arr, lr_scale=1.0):
            nonlocal offset
            arr = np.asarray(arr, dtype=float)
            self.entries.append(_Entry(group, name, arr.shape, offset, lr_scale))
            chunks.append(arr.reshape(-1))
            offset += arr.size

        if "scene-gaussians" not in frozen and len(c):
            put("scene-gaussians", "positions", c.positions, ATTR_LR_SCALES["positions"])
            put("scene-gaussians", "log_scales", np.log(c.scales), ATTR_LR_SCALES["log_scales"])
            put("scene-gaussians", "quats", c.quats, ATTR_LR_SCALES["quats"])
            put("scene-gaussians", "opacity_raw", _logit(c.opacities), ATTR_LR_SCALES["opacity_raw"])
            put("scene-gaussians", "albedo_raw", _logit(c.albedos), ATTR_LR_SCALES["albedo_raw"])
            put("scene-gaussians", "normals", c.normals, ATTR_LR_SCALES["normals"])
        if "scene-scale" not in frozen:
            put("scene-scale", "log_s", np.array([math.log(scene.scale)]))
        if "ambient" not in frozen:
            put("ambient", "raw", ad.softplus_inverse(scene.ambient.value))

        self.total = offset
        self._vec = np.concatenate(chunks) if chunks else np.zeros(0)
        self._base_view = scene.view()

    def initial_vector(self) -> np.ndarray:
        return self._vec.copy()

    def entry(self, group, name) -> _Entry:
        for e in self.entries:
            if e.group == group and e.name == name:
                return e
        raise KeyError(f"{group}/{name}")

    def group_slices(self) -> dict:
        out = {}
        for e in self.entries:
            s = out.get(e.group)
            lo = e.offset if s is None else min(s.start, e.offset)
            hi = e.offset + e.size if s is None else max(s.stop, e.offset + e.size)
            out[e.group] = slice(lo, hi)
        return out

    def live_groups(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.group not in seen:
                seen.append(e.group)
        return seen

    def entry_lr_scales(self):
        return [
            (slice(e.offset, e.offset + e.size), e.lr_scale)
            for e in self.entries
            if e.lr_scale != 1.0
        ]

    def _seg(self, vec, group, name):
        e = self.entry(group, name)
        return ad.reshape(vec[e.offset : e.offset + e.size], e.shape)

    def decode(self, vec) -> dict:
        n = value_of(vec).shape
        if len(n) != 1 or n[0] != self.total:
            raise ShapeMismatch(f"expected vector of length {self.total}, got {n}")
        view = dict(self._base_view)
        if "scene-gaussians" not in self.frozen and len(self._base_view["positions"]):
            view["positions"] = self._seg(vec, "scene-gaussians", "positions")
            view["scales"] = ad.exp(self._seg(vec, "scene-gaussians", "log_scales"))
            view["quats"] = self._seg(vec, "scene-gaussians", "quats")
            view["opacities"] = ad.sigmoid(self._seg(vec, "scene-gaussians", "opacity_raw"))
            view["albedos"] = ad.sigmoid(self._seg(vec, "scene-gaussians", "albedo_raw"))
            view["normals"] = self._seg(vec, "scene-gaussians", "normals")
        if "scene-scale" not in self.frozen:
            view["s"] = ad.reshape(ad.exp(self._seg(vec, "scene-scale", "log_s")), ())
        if "ambient" not in self.frozen:
            view["ambient"] = ad.softplus(self._seg(vec, "ambient", "raw"))
        return view


@dataclass
class SceneStage(StageConfig):
    images_per_iter: int = 1


@dataclass
class SceneSchedule:
    """Training recipe: warm-up length, stages, renderer options."""

    stages: list
    seed: int = 0
    warmup_k: int = 300
    options: RenderOptions = field(
        default_factory=lambda: RenderOptions(radius_mult=3.5, term_threshold=1e-4)
    )

    @classmethod
    def default(cls, seed: int = 0, warmup_k: int = 300, iterations: int = 900) -> "SceneSchedule":
        """Constant learning rates while the light pose warms up, then a
        decayed settling phase on the final objective.  The stage split
        matches warmup_k so annealing never starts before the true pose
        is in place (with warmup_k = 0 the first stage is plain
        constant-rate fitting of the same total length)."""
        lrs = {"scene-gaussians": 1e-2, "scene-scale": 3e-2, "ambient": 1e-3}
        head = min(max(warmup_k, 0), iterations)
        stages = []
        if head:
            stages.append(
                SceneStage(name="warmup", iterations=head, learning_rates=dict(lrs))
            )
        if iterations - head:
            stages.append(
                SceneStage(
                    name="fit",
                    iterations=iterations - head,
                    learning_rates=dict(lrs),
                    lr_decay=0.03,
                )
            )
        return cls(seed=seed, warmup_k=warmup_k, stages=stages)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSchedule":
        stages = []
        for sd in d.get("stages", []):
            stages.append(
                SceneStage(
                    name=sd.get("name", f"stage{len(stages)}"),
                    iterations=int(sd.get("iterations", 100)),
                    frozen=frozenset(sd.get("frozen", [])),
                    learning_rates={k: float(v) for k, v in sd.get("learning_rates", {}).items()},
                    lr_decay=float(sd.get("lr_decay", 1.0)),
                    images_per_iter=int(sd.get("images_per_iter", 1)),
                    early_stop_window=sd.get("early_stop_window"),
                    early_stop_rel=float(sd.get("early_stop_rel", 1e-5)),
                )
            )
        if not stages:
            raise SchemaError("scene schedule has no stages")
        opts = d.get("render", {})
        return cls(
            stages=stages,
            seed=int(d.get("seed", 0)),
            warmup_k=int(d.get("warmup_k", 300)),
            options=RenderOptions(
                radius_mult=float(opts.get("radius_mult", 3.5)),
                term_threshold=float(opts.get("term_threshold", 1e-4)),
                near=float(opts.get("near", 0.01)),
                blur_floor=float(opts.get("blur_floor", 0.3)),
            ),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "warmup_k": self.warmup_k,
            "render": {
                "radius_mult": self.options.radius_mult,
                "term_threshold": self.options.term_threshold,
                "near": self.options.near,
                "blur_floor": self.options.blur_floor,
            },
            "stages": [
                {
                    "name": s.name,
                    "iterations": s.iterations,
                    "frozen": sorted(s.frozen),
                    "learning_rates": s.learning_rates,
                    "lr_decay": s.lr_decay,
                    "images_per_iter": s.images_per_iter,
                    "early_stop_window": s.early_stop_window,
                    "early_stop_rel": s.early_stop_rel,
                }
                for s in self.stages
            ],
        }


class SceneProblem:
    """Adapter fitting a scene to captured images.

    The light rig stays frozen; per-Gaussian attributes, ambient, and the
    global scale are live.  Each loss evaluation renders the images of
    the current mini-batch (a seeded permutation advanced once per
    applied step) under the warm-up light pose for the current global
    iteration.
    """

    def __init__(
        self,
        scene: Scene,
        images: list[np.ndarray],
        schedule: SceneSchedule,
        frame_indices: list[int] | None = None,
    ):
        if len(images) != len(scene.cameras):
            raise ShapeMismatch(
                f"{len(images)} images for {len(scene.cameras)} cameras"
            )
        self.scene = scene
        self.images = [np.asarray(im, dtype=float) for im in images]
        self.schedule = schedule
        self.frames = list(frame_indices) if frame_indices is not None else list(range(len(images)))
        self.iteration = 0
        self.batch_size = 1
        self._rng = np.random.default_rng(schedule.seed)
        self._perm: list[int] = []
        self._cursor = 0
        self._pending_batch: list[int] | None = None

    def _batch(self) -> list[int]:
        out = []
        for _ in range(min(self.batch_size, len(self.frames))):
            if self._cursor >= len(self._perm):
                self._perm = [self.frames[j] for j in self._rng.permutation(len(self.frames))]
                self._cursor = 0
            out.append(self._perm[self._cursor])
            self._cursor += 1
        return out

    def flatten(self, frozen):
        layout = SceneLayout(self.scene, frozenset(frozen))
        return layout.initial_vector(), layout

    def light_pose_now(self) -> RigidPose:
        return warmup_pose(
            self.scene.rig.pose_light_to_cam,
            WarmupSchedule(k=self.schedule.warmup_k, m=self.iteration),
        )

    def loss_var(self, vec, layout):
        view = layout.decode(vec)
        light_pose = self.light_pose_now()
        if not self._pending_batch:
            self._pending_batch = self._batch()
        total = None
        for fi in self._pending_batch:
            pose, intr = self.scene.cameras[fi]
            params = RigParams(
                rot=light_pose.rotation.matrix,
                t=light_pose.translation,
                rid=self.scene.rig.rid,
                tau=self.scene.rig.falloff.tau,
                ambient=view["ambient"],
            )
            img = _render_forward(
                view, pose, intr, params,
                light_pose.rotation.matrix, light_pose.translation,
                self.schedule.options,
            )
            diff = ad.sub(img, self.images[fi])
            term = ad.mean(ad.sum_(ad.absolute(diff, deadband=1e-12), axis=2))
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 1.0 / len(self._pending_batch))

    def apply(self, vec, layout):
        view = layout.decode(np.asarray(vec, dtype=float))
        c = self.scene.cloud
        if "scene-gaussians" not in layout.frozen and len(c):
            self.scene.cloud = GaussianCloud(
                positions=np.asarray(view["positions"]),
                scales=np.asarray(view["scales"]),
                quats=_unit_rows(np.asarray(view["quats"])),
                opacities=np.asarray(view["opacities"]),
                albedos=np.asarray(view["albedos"]),
                normals=_unit_rows(np.asarray(view["normals"])),
            )
        if "scene-scale" not in layout.frozen:
            self.scene.scale = float(value_of(view["s"]))
        if "ambient" not in layout.frozen:
            self.scene.ambient = AmbientLight(np.asarray(view["ambient"]))
        self.iteration += 1
        self._pending_batch = None


@dataclass
class SceneTrainResult:
    scene: Scene
    stage_reports: list
    warmup_k: int


def train_scene(
    scene: Scene,
    images: list[np.ndarray],
    schedule: SceneSchedule | None = None,
    frame_indices: list[int] | None = None,
    callback=None,
) -> SceneTrainResult:
    """Fit Gaussian attributes, ambient, and global scale to the images.

    `scene` is mutated in place and also returned inside the result.
    `frame_indices` restricts training to a subset (the rest can serve
    as a held-out set).
    """
    if schedule is None:
        schedule = SceneSchedule.default()
    problem = SceneProblem(scene, images, schedule, frame_indices)
    reports: list[StageReport] = []
    for stage in schedule.stages:
        problem.batch_size = getattr(stage, "images_per_iter", 1)
        reports.append(run_stage(problem, stage, callback=callback))
        if reports[-1].aborted:
            break
    return SceneTrainResult(scene=problem.scene, stage_reports=reports, warmup_k=schedule.warmup_k)


def scene_image_loss(
    scene: Scene,
    images: list[np.ndarray],
    frame_indices: list[int],
    options: RenderOptions | None = None,
) -> float:
    """Mean per-pixel L1 between renders and captures over the frames."""
    opts = options or RenderOptions()
    vals = []
    for fi in frame_indices:
        img = render(scene, fi, options=opts)
        vals.append(np.mean(np.abs(img - images[fi]).sum(axis=2)))
    return float(np.mean(vals))


# -- scene manifest (up-to-scale reconstruction input) ------------------------


def _knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors, chunked O(N^2)."""
    n = len(points)
    if n <= 1:
        return np.full(n, 0.01)
    out = np.empty(n)
    kk = min(k, n - 1)
    chunk = max(1, int(2e7 // max(n, 1)))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = ((points[lo:hi, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        idx = np.arange(lo, hi)
        d2[np.arange(hi - lo), idx] = np.inf
        part = np.partition(d2, kk - 1, axis=1)[:, :kk]
        out[lo:hi] = np.sqrt(part).mean(axis=1)
    return out


def init_scene_from_manifest(manifest: dict, rig: LightRig, base_dir: str | Path = ".") -> Scene:
    """Starting scene for training: point-cloud positions, isotropic
    scales from nearest-neighbor spacing, normals facing the camera
    centroid, mid-range opacity, colors (or gray) as albedo, scale 1."""
    pts = np.asarray(manifest["points"], dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SchemaError("manifest points must be (N, 3)")
    cameras = []
    for cd in manifest["cameras"]:
        cameras.append(
            (RigidPose.from_matrix(np.asarray(cd["pose_cam_to_world"], dtype=float)), _intr_from(cd["intrinsics"]))
        )
    channels = rig.channels
    colors = manifest.get("colors")
    if colors is not None:
        albedos = np.clip(np.asarray(colors, dtype=float), 0.02, 0.98)
        if albedos.shape != (len(pts), channels):
            raise SchemaError("colors shape does not match points/channels")
    else:
        albedos = np.full((len(pts), channels), 0.5)
    cam_centroid = np.mean([p.translation for p, _ in cameras], axis=0)
    to_cam = cam_centroid[None, :] - pts
    norms = np.linalg.norm(to_cam, axis=1, keepdims=True)
    normals = np.where(norms > 1e-9, to_cam / np.maximum(norms, 1e-9), [[0.0, 0.0, -1.0]])
    spacing = _knn_mean_distance(pts)
    cloud = GaussianCloud(
        positions=pts,
        scales=np.clip(np.repeat(spacing[:, None], 3, axis=1) * 0.35, 1e-4, None),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (len(pts), 1)),
        opacities=np.full(len(pts), 0.7),
        albedos=albedos,
        normals=normals,
    )
    return Scene(
        cloud=cloud,
        scale=1.0,
        ambient=AmbientLight(np.full(channels, 0.01)),
        cameras=cameras,
        rig=rig,
    )


def load_scene_manifest(manifest_path: str | Path):
    """Read a scene manifest: (manifest dict, images, rig, train, test)."""
    from . import imageio
    from .calibration import split_indices
    from .lights import load_rig

    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read scene manifest {manifest_path}: {exc}") from exc
    for key in ("points", "cameras", "rig"):
        if key not in manifest:
            raise SchemaError(f"scene manifest missing key {key!r}")
    base = manifest_path.parent
    rig = load_rig(base / manifest["rig"])
    images = []
    for cd in manifest["cameras"]:
        if "image" not in cd:
            raise SchemaError("scene manifest camera entry missing image path")
        images.append(imageio.read_image(base / cd["image"]))
    split = manifest.get("split", {})
    payload = {k: v for k, v in manifest.items() if k != "split"}
    fp = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    train, test = split_indices(
        len(images), fp, int(split.get("seed", 0)), float(split.get("test_fraction", 0.2))
    )
    return manifest, images, rig, train, test


# -- serialization -----------------------------------------------------------


def save_scene(scene: Scene, json_path: str | Path) -> None:
    """JSON header + little-endian float32 record blob.

    Record layout per Gaussian: px py pz sx sy sz qw qx qy qz opacity
    albedo[channels] nx ny nz.
    """
    json_path = Path(json_path)
    blob_name = json_path.stem + ".bin"
    c = scene.cloud
    records = np.concatenate(
        [c.positions, c.scales, c.quats, c.opacities[:, None], c.albedos, c.normals],
        axis=1,
    ).astype("<f4")
    (json_path.parent / blob_name).write_bytes(records.tobytes())
    header = {
        "kind": "gaussian-scene",
        "count": len(c),
        "channels": c.channels,
        "fields": list(GAUSSIAN_FIELDS)
        + [f"albedo_{i}" for i in range(c.channels)]
        + ["nx", "ny", "nz"],
        "dtype": "<f4",
        "blob": blob_name,
        "scale": scene.scale,
        "ambient": scene.ambient.value.tolist(),
        "rig": scene.rig.to_dict(),
        "cameras": [
            {"pose_cam_to_world": pose.as_matrix().tolist(), "intrinsics": _intr_dict(intr)}
            for pose, intr in scene.cameras
        ],
    }
    json_path.write_text(json.dumps(header, indent=1))


def _intr_dict(intr: CameraIntrinsics) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
    }


def _intr_from(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
    )


def load_scene(json_path: str | Path) -> Scene:
    json_path = Path(json_path)
    try:
        header = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read scene {json_path}: {exc}") from exc
    if header.get("kind") != "gaussian-scene":
        raise SchemaError("not a gaussian-scene file")
    count = int(header["count"])
    channels = int(header["channels"])
    width = 14 + channels
    raw = (json_path.parent / header["blob"]).read_bytes()
    records = np.frombuffer(raw, dtype="<f4").reshape(count, width).astype(np.float64)
    cloud = GaussianCloud(
        positions=records[:, 0:3],
        scales=records[:, 3:6],
        quats=records[:, 6:10],
        opacities=np.clip(records[:, 10], 0.0, 1.0),
        albedos=np.clip(records[:, 11 : 11 + channels], 0.0, 1.0),
        normals=records[:, 11 + channels : 14 + channels],
    )
    cameras = [
        (RigidPose.from_matrix(np.asarray(cd["pose_cam_to_world"], dtype=float)), _intr_from(cd["intrinsics"]))
        for cd in header["cameras"]
    ]
    return Scene(
        cloud=cloud,
        scale=float(header["scale"]),
        ambient=AmbientLight(np.asarray(header["ambient"], dtype=float)),
        cameras=cameras,
        rig=LightRig.from_dict(header["rig"]),
    )
