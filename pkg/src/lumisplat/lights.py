"""Physically interpretable light model.

A light rig bundles four learnable pieces:

- the light-to-camera pose (rotation + translation),
- a radiant intensity distribution (RID): per-channel emitted intensity
  as a function of the polar angle from the light's centerline,
- a Lorentzian range falloff 1 / (tau + d^2), which reduces to the
  inverse-square law at tau = 0,
- an additive ambient term.

Incident radiance at a world point x is  falloff(d) * rid(angle) + ambient,
and the surface response is a Lambertian cosine BRDF.  All evaluation
functions are written against the autodiff op set, so they accept either
plain numpy parameters (fast forward evaluation) or tape variables
(gradient-based fitting).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of
from .errors import DegenerateFalloff, LayoutMismatch, ZeroDirection
from .geometry import RigidPose, Rotation

_EZ = np.array([0.0, 0.0, 1.0])

# arccos argument is clamped this far inside [-1, 1] to keep its
# derivative finite on the centerline
_COS_CLAMP = 1.0 - 1e-9


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


# -- RID variants -------------------------------------------------------------


@dataclass
class ConstantRid:
    """Angle-independent intensity, one value per channel."""

    value: Any  # (channels,)

    def __post_init__(self):
        if not _is_var(self.value):
            self.value = np.asarray(self.value, dtype=float).reshape(-1)
            if np.any(self.value < 0):
                raise ValueError("constant RID must be nonnegative")

    @property
    def channels(self) -> int:
        return int(value_of(self.value).shape[0])

    def eval(self, angle):
        shape = np.shape(value_of(angle))
        ones = np.ones(shape + (1,))
        return ad.mul(ones, self.value)

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": np.asarray(self.value).tolist()}


@dataclass
class GaussianLobeRid:
    """Single Gaussian lobe centered on the light axis.

    intensity(angle) = peak * exp(-angle^2 / (2 sigma^2))
    """

    peak: Any  # (channels,)
    sigma: Any  # scalar, radians

    def __post_init__(self):
        if not _is_var(self.peak, self.sigma):
            self.peak = np.asarray(self.peak, dtype=float).reshape(-1)
            self.sigma = float(self.sigma)
            if np.any(self.peak < 0):
                raise ValueError("lobe peak must be nonnegative")
            if self.sigma <= 0:
                raise ValueError("lobe sigma must be positive")

    @property
    def channels(self) -> int:
        return int(value_of(self.peak).shape[0])

    def eval(self, angle):
        shape = np.shape(value_of(angle))
        a2 = ad.mul(angle, angle)
        s2 = ad.mul(self.sigma, self.sigma)
        lobe = ad.exp(ad.div(ad.mul(a2, -0.5), s2))
        return ad.mul(ad.reshape(lobe, shape + (1,)), self.peak)

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_lobe",
            "peak": np.asarray(self.peak).tolist(),
            "sigma": float(value_of(self.sigma)),
        }


@dataclass
class MlpRid:
    """Small fully connected network mapping angle -> per-channel intensity.

    Input is angle / pi; hidden layers and the per-channel output both use
    softplus, which keeps the output strictly positive and gradients alive
    everywhere.
    """

    weights: list  # each (fan_in, fan_out)
    biases: list  # each (fan_out,)
    hidden: tuple[int, ...] = (32, 32, 32)
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.hidden) + 1:
            raise ValueError("weight count does not match architecture")

    @property
    def channels(self) -> int:
        return int(value_of(self.weights[-1]).shape[1])

    @classmethod
    def init_random(
        cls,
        channels: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (32, 32, 32),
    ) -> "MlpRid":
        sizes = (1,) + tuple(hidden) + (channels,)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, hidden=tuple(hidden))

    def eval(self, angle):
        shape = np.shape(value_of(angle))
        h = ad.mul(ad.reshape(angle, (-1, 1)), 1.0 / math.pi)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.softplus(ad.add(ad.matmul(h, w), b))
        out = ad.softplus(ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1]))
        return ad.reshape(out, shape + (self.channels,))

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "hidden": list(self.hidden),
            "activation": self.activation,
            "weights": [np.asarray(w).tolist() for w in self.weights],
            "biases": [np.asarray(b).tolist() for b in self.biases],
        }


@dataclass
class LobeSumRid:
    """Sum of Gaussian lobes at configurable center angles.

    Used as fixture ground truth for multi-lobed beam patterns; not part
    of the calibratable parameter space.
    """

    peaks: np.ndarray  # (m, channels)
    sigmas: np.ndarray  # (m,)
    centers: np.ndarray  # (m,) radians

    def __post_init__(self):
        self.peaks = np.atleast_2d(np.asarray(self.peaks, dtype=float))
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(-1)
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1)
        if np.any(self.peaks < 0) or np.any(self.sigmas <= 0):
            raise ValueError("lobe peaks must be >= 0 and sigmas > 0")

    @property
    def channels(self) -> int:
        return int(self.peaks.shape[1])

    def eval(self, angle):
        shape = np.shape(value_of(angle))
        out = np.zeros(shape + (self.channels,))
        for peak, sigma, center in zip(self.peaks, self.sigmas, self.centers):
            d = ad.sub(angle, center)
            lobe = ad.exp(ad.div(ad.mul(ad.mul(d, d), -0.5), sigma * sigma))
            out = ad.add(out, ad.mul(ad.reshape(lobe, shape + (1,)), peak))
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "lobe_sum",
            "peaks": self.peaks.tolist(),
            "sigmas": self.sigmas.tolist(),
            "centers": self.centers.tolist(),
        }


def rid_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "constant":
        return ConstantRid(np.asarray(d["value"], dtype=float))
    if kind == "gaussian_lobe":
        return GaussianLobeRid(np.asarray(d["peak"], dtype=float), float(d["sigma"]))
    if kind == "mlp":
        return MlpRid(
            weights=[np.asarray(w, dtype=float) for w in d["weights"]],
            biases=[np.asarray(b, dtype=float) for b in d["biases"]],
            hidden=tuple(d.get("hidden", (32, 32, 32))),
            activation=d.get("activation", "softplus"),
        )
    if kind == "lobe_sum":
        return LobeSumRid(
            np.asarray(d["peaks"], dtype=float),
            np.asarray(d["sigmas"], dtype=float),
            np.asarray(d["centers"], dtype=float),
        )
    raise ValueError(f"unknown RID kind {kind!r}")


def rid_eval(rid, angle):
    """Per-channel intensity at polar angle(s); shape(angle) + (channels,)."""
    return rid.eval(angle)


# -- falloff, ambient, rig -----------------------------------------------------


@dataclass
class FalloffModel:
    """Lorentzian range falloff 1 / (tau + d^2); tau >= 0, in m^2."""

    tau: Any = 0.0

    def __post_init__(self):
        if not _is_var(self.tau):
            self.tau = float(self.tau)
            if self.tau < 0:
                raise ValueError("tau must be nonnegative")


@dataclass
class AmbientLight:
    """Distance- and angle-independent additive radiance per channel."""

    value: Any  # (channels,)

    def __post_init__(self):
        if not _is_var(self.value):
            self.value = np.asarray(self.value, dtype=float).reshape(-1)
            if np.any(self.value < 0):
                raise ValueError("ambient must be nonnegative")

    @property
    def channels(self) -> int:
        return int(value_of(self.value).shape[0])


@dataclass
class LightRig:
    """Pose + RID + falloff + ambient for one camera-mounted light."""

    pose_light_to_cam: RigidPose
    rid: Any
    falloff: FalloffModel
    ambient: AmbientLight

    def __post_init__(self):
        lam = self.channels
        if lam not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {lam}")
        if self.ambient.channels != lam:
            raise ValueError("ambient channel count does not match RID")

    @property
    def channels(self) -> int:
        return self.rid.channels

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "pose": {
                "rotation": self.pose_light_to_cam.rotation.matrix.tolist(),
                "translation": self.pose_light_to_cam.translation.tolist(),
            },
            "rid": self.rid.to_dict(),
            "tau": float(self.falloff.tau),
            "ambient": np.asarray(self.ambient.value).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LightRig":
        pose = RigidPose(
            Rotation(np.asarray(d["pose"]["rotation"], dtype=float)),
            np.asarray(d["pose"]["translation"], dtype=float),
        )
        return cls(
            pose_light_to_cam=pose,
            rid=rid_from_dict(d["rid"]),
            falloff=FalloffModel(float(d["tau"])),
            ambient=AmbientLight(np.asarray(d["ambient"], dtype=float)),
        )


def save_rig(rig: LightRig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=1))


def load_rig(path: str | Path) -> LightRig:
    return LightRig.from_dict(json.loads(Path(path).read_text()))


# -- differentiable parameter view ---------------------------------------------


@dataclass
class RigParams:
    """Rig fields as raw arrays or tape variables; no validation.

    This is the form the shading math operates on.  `rot`/`t` are the
    light-to-camera pose, `rid` is a variant instance whose numeric
    fields may themselves be Vars.
    """

    rot: Any  # (3, 3)
    t: Any  # (3,)
    rid: Any
    tau: Any  # scalar
    ambient: Any  # (channels,)

    @classmethod
    def from_rig(cls, rig: LightRig) -> "RigParams":
        return cls(
            rot=rig.pose_light_to_cam.rotation.matrix,
            t=rig.pose_light_to_cam.translation,
            rid=rig.rid,
            tau=rig.falloff.tau,
            ambient=rig.ambient.value,
        )


def light_origin_axis(params: RigParams, rot_cw, t_cw):
    """World-frame light origin and unit centerline for one camera pose.

    o = R_cw @ t_lc + t_cw;  axis = R_cw @ R_lc @ e_z.
    `rot_cw` / `t_cw` may be stacked (F, 3, 3) / (F, 3) to process many
    cameras at once.
    """
    rot_cw = np.asarray(rot_cw, dtype=float)
    t_cw = np.asarray(t_cw, dtype=float)
    t_col = ad.reshape(params.t, (3, 1))
    o = ad.add(ad.reshape(ad.matmul(rot_cw, t_col), rot_cw.shape[:-2] + (3,)), t_cw)
    axis_cam = ad.matmul(params.rot, _EZ.reshape(3, 1))
    axis = ad.reshape(ad.matmul(rot_cw, axis_cam), rot_cw.shape[:-2] + (3,))
    return o, axis


def light_center_and_axis(rig: LightRig, cam_pose_world: RigidPose):
    """Public wrapper of :func:`light_origin_axis` for validated rigs."""
    o, axis = light_origin_axis(
        RigParams.from_rig(rig),
        cam_pose_world.rotation.matrix,
        cam_pose_world.translation,
    )
    return np.asarray(o), np.asarray(axis)


def beam_axis_angle(a: LightRig, b: LightRig) -> float:
    """Angle (radians) between two rigs' beam centerlines in the camera
    frame.  For a rotationally symmetric RID the roll about the
    centerline is unobservable, so this is the meaningful rotation error
    between a fitted and a reference rig."""
    za = a.pose_light_to_cam.rotation.matrix @ _EZ
    zb = b.pose_light_to_cam.rotation.matrix @ _EZ
    return float(np.arccos(np.clip(za @ zb, -1.0, 1.0)))


def falloff_eval(falloff_or_tau, distance):
    """1 / (tau + d^2); raises DegenerateFalloff when the denominator
    drops below 1e-12."""
    tau = falloff_or_tau.tau if isinstance(falloff_or_tau, FalloffModel) else falloff_or_tau
    d = distance
    denom = ad.add(tau, ad.mul(d, d))
    if np.min(value_of(denom)) < 1e-12:
        raise DegenerateFalloff("tau + distance^2 < 1e-12")
    return ad.div(1.0, denom)


def incident_radiance_at(params: RigParams, rot_cw, t_cw, x):
    """Incident radiance at world point(s) x, shape (..., 3) -> (..., channels)."""
    o, axis = light_origin_axis(params, rot_cw, t_cw)
    omega = ad.sub(x, o)
    d2 = ad.sum_(ad.mul(omega, omega), axis=-1)
    denom = ad.add(params.tau, d2)
    if np.min(value_of(denom)) < 1e-12:
        raise DegenerateFalloff("tau + distance^2 < 1e-12")
    d = ad.sqrt(d2)
    omega_hat = ad.div(omega, ad.reshape(d, np.shape(value_of(d)) + (1,)))
    cosang = ad.sum_(ad.mul(omega_hat, axis), axis=-1)
    angle = ad.arccos(ad.clip(cosang, -_COS_CLAMP, _COS_CLAMP))
    phi = params.rid.eval(angle)
    psi = ad.div(1.0, denom)
    psi_col = ad.reshape(psi, np.shape(value_of(psi)) + (1,))
    return ad.add(ad.mul(psi_col, phi), params.ambient)


def incident_radiance(rig: LightRig, cam_pose_world: RigidPose, x) -> np.ndarray:
    """Eq.-of-model radiance falloff(d) * rid(angle) + ambient at x."""
    out = incident_radiance_at(
        RigParams.from_rig(rig),
        cam_pose_world.rotation.matrix,
        cam_pose_world.translation,
        np.asarray(x, dtype=float),
    )
    return np.asarray(out)


def lambertian_brdf(omega_x, n, c):
    """Lambertian response max(-omega_hat . n, 0) * c.

    `omega_x` points from the light to the surface; `n` is the stored
    surface normal, oriented toward the light-carrying half-space, so a
    head-on hit gives the full albedo and back-facing surfaces go black.
    Accepts single vectors (3,) or stacks (..., 3).
    """
    om = value_of(omega_x)
    nn = np.linalg.norm(np.atleast_2d(om), axis=-1)
    if np.any(nn < 1e-12):
        raise ZeroDirection("light-to-surface direction has zero length")
    omega_hat = ad.normalize(omega_x, axis=-1)
    cosi = ad.relu(ad.neg(ad.sum_(ad.mul(omega_hat, n), axis=-1)))
    shape = np.shape(value_of(cosi))
    return ad.mul(ad.reshape(cosi, shape + (1,)), c)


# -- flat parameter vector codec -------------------------------------------

RIG_GROUPS = ("pose", "rid", "tau", "ambient")


@dataclass(frozen=True)
class LayoutEntry:
    group: str
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class ParamLayout:
    """Describes how a rig maps onto a flat parameter vector.

    Frozen groups are excluded from the vector; their values come from
    the stored base rig.  The rotation enters as a 3-vector increment d
    applied on the left, R = exp(d) @ R_base, so a freshly flattened
    vector always carries d = 0.  tau, ambient, and the lobe / constant
    RID magnitudes are stored through softplus so they stay nonnegative
    for any real vector.
    """

    entries: list[LayoutEntry]
    total: int
    frozen: frozenset[str]
    base: LightRig

    def entry(self, group: str, name: str) -> LayoutEntry:
        for e in self.entries:
            if e.group == group and e.name == name:
                return e
        raise KeyError(f"no entry {group}/{name}")

    def segment(self, vec, e: LayoutEntry):
        seg = vec[e.offset : e.offset + e.size]
        return ad.reshape(seg, e.shape) if e.shape else ad.reshape(seg, ())

    def group_slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        for e in self.entries:
            s = out.get(e.group)
            lo = e.offset if s is None else min(s.start, e.offset)
            hi = e.offset + e.size if s is None else max(s.stop, e.offset + e.size)
            out[e.group] = slice(lo, hi)
        return out

    def live_groups(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.group not in seen:
                seen.append(e.group)
        return seen

    def _check(self, vec) -> None:
        n = value_of(vec).shape
        if len(n) != 1 or n[0] != self.total:
            raise LayoutMismatch(f"expected vector of length {self.total}, got shape {n}")

    def decode(self, vec) -> RigParams:
        """Rebuild a RigParams view from a flat vector (Var or ndarray)."""
        self._check(vec)
        base = RigParams.from_rig(self.base)
        rot, t = base.rot, base.t
        rid = base.rid
        tau, ambient = base.tau, base.ambient
        if "pose" not in self.frozen:
            delta = self.segment(vec, self.entry("pose", "rot_delta"))
            rot = ad.matmul(ad.so3_exp_var(delta), base.rot)
            t = self.segment(vec, self.entry("pose", "trans"))
        if "rid" not in self.frozen:
            rid = self._decode_rid(vec)
        if "tau" not in self.frozen:
            tau = ad.reshape(ad.softplus(self.segment(vec, self.entry("tau", "raw"))), ())
        if "ambient" not in self.frozen:
            ambient = ad.softplus(self.segment(vec, self.entry("ambient", "raw")))
        return RigParams(rot=rot, t=t, rid=rid, tau=tau, ambient=ambient)

    def _decode_rid(self, vec):
        rid = self.base.rid
        if isinstance(rid, ConstantRid):
            return ConstantRid(ad.softplus(self.segment(vec, self.entry("rid", "raw_value"))))
        if isinstance(rid, GaussianLobeRid):
            return GaussianLobeRid(
                peak=ad.softplus(self.segment(vec, self.entry("rid", "raw_peak"))),
                sigma=ad.reshape(
                    ad.softplus(self.segment(vec, self.entry("rid", "raw_sigma"))), ()
                ),
            )
        if isinstance(rid, MlpRid):
            weights, biases = [], []
            for i in range(len(rid.weights)):
                weights.append(self.segment(vec, self.entry("rid", f"w{i}")))
                biases.append(self.segment(vec, self.entry("rid", f"b{i}")))
            return MlpRid(
                weights=weights, biases=biases, hidden=rid.hidden, activation=rid.activation
            )
        raise LayoutMismatch(f"RID variant {type(rid).__name__} is not optimizable")

    def to_rig(self, vec: np.ndarray) -> LightRig:
        """Decode to a validated LightRig (numpy vectors only).

        Frozen groups pass their base objects through untouched, which
        keeps their values bit-identical across any number of steps.
        """
        p = self.decode(np.asarray(vec, dtype=float))
        if "pose" in self.frozen:
            pose = self.base.pose_light_to_cam
        else:
            rot = np.asarray(p.rot)
            if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-10:
                rot = _reorthonormalize(rot)
            pose = RigidPose(Rotation(rot), np.asarray(p.t))
        if "rid" in self.frozen:
            rid = self.base.rid
        else:
            rid = p.rid
            if isinstance(rid, GaussianLobeRid):
                rid = GaussianLobeRid(np.asarray(rid.peak), float(value_of(rid.sigma)))
            elif isinstance(rid, ConstantRid):
                rid = ConstantRid(np.asarray(rid.value))
            elif isinstance(rid, MlpRid):
                rid = MlpRid(
                    weights=[np.asarray(w) for w in rid.weights],
                    biases=[np.asarray(b) for b in rid.biases],
                    hidden=rid.hidden,
                    activation=rid.activation,
                )
        falloff = self.base.falloff if "tau" in self.frozen else FalloffModel(float(value_of(p.tau)))
        ambient = (
            self.base.ambient
            if "ambient" in self.frozen
            else AmbientLight(np.asarray(value_of(p.ambient)))
        )
        return LightRig(
            pose_light_to_cam=pose, rid=rid, falloff=falloff, ambient=ambient
        )


def _reorthonormalize(m: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def params_flatten(
    rig: LightRig, frozen: frozenset[str] | set[str] | tuple = ()
) -> tuple[np.ndarray, ParamLayout]:
    """Flat parameter vector + layout for the unfrozen groups of a rig."""
    frozen = frozenset(frozen)
    unknown = frozen - set(RIG_GROUPS)
    if unknown:
        raise LayoutMismatch(f"unknown groups in freeze set: {sorted(unknown)}")
    entries: list[LayoutEntry] = []
    chunks: list[np.ndarray] = []
    offset = 0

    def put(group: str, name: str, arr: np.ndarray):
        nonlocal offset
        arr = np.asarray(arr, dtype=float)
        entries.append(LayoutEntry(group, name, arr.shape, offset))
        chunks.append(arr.reshape(-1))
        offset += arr.size

    if "pose" not in frozen:
        put("pose", "rot_delta", np.zeros(3))
        put("pose", "trans", rig.pose_light_to_cam.translation)
    if "rid" not in frozen:
        rid = rig.rid
        if isinstance(rid, ConstantRid):
            put("rid", "raw_value", ad.softplus_inverse(rid.value))
        elif isinstance(rid, GaussianLobeRid):
            put("rid", "raw_peak", ad.softplus_inverse(rid.peak))
            put("rid", "raw_sigma", ad.softplus_inverse(np.array([rid.sigma])))
        elif isinstance(rid, MlpRid):
            for i, (w, b) in enumerate(zip(rid.weights, rid.biases)):
                put("rid", f"w{i}", np.asarray(w))
                put("rid", f"b{i}", np.asarray(b))
        else:
            raise LayoutMismatch(f"RID variant {type(rid).__name__} is not optimizable")
    if "tau" not in frozen:
        put("tau", "raw", ad.softplus_inverse(np.array([rig.falloff.tau])))
    if "ambient" not in frozen:
        put("ambient", "raw", ad.softplus_inverse(rig.ambient.value))

    vec = np.concatenate(chunks) if chunks else np.zeros(0)
    return vec, ParamLayout(entries=entries, total=offset, frozen=frozen, base=rig)


def params_unflatten(layout: ParamLayout, vec: np.ndarray) -> LightRig:
    """Inverse of params_flatten; frozen groups keep their base values."""
    return layout.to_rig(vec)
