"""Independent reference implementations used to cross-check the renderer.

The brute-force renderer below evaluates the compositing sum directly:
every Gaussian against every pixel, no footprint truncation, no early
termination, sequential front-to-back accumulation.  It shares no code
with the production splat pipeline beyond basic numpy.
"""

import numpy as np


def _quat_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _rid_value(rid, angle):
    """Closed-form RID evaluation for the oracle (constant / lobe only)."""
    from lumisplat.lights import ConstantRid, GaussianLobeRid

    if isinstance(rid, ConstantRid):
        return np.broadcast_to(rid.value, np.shape(angle) + rid.value.shape).copy()
    if isinstance(rid, GaussianLobeRid):
        lobe = np.exp(-0.5 * (np.asarray(angle) / rid.sigma) ** 2)
        return lobe[..., None] * rid.peak
    raise TypeError(f"oracle supports constant/lobe RIDs, got {type(rid).__name__}")


def bruteforce_render(scene, cam_index, blur_floor=0.3, near=0.01):
    """Direct evaluation of the shaded compositing sum for one view."""
    pose, intr = scene.cameras[cam_index]
    H, W, C = intr.height, intr.width, scene.channels
    s = scene.scale
    R = pose.rotation.matrix
    cam_t = s * pose.translation
    rig = scene.rig
    o_l = R @ rig.pose_light_to_cam.translation + cam_t
    axis = R @ (rig.pose_light_to_cam.rotation.matrix @ np.array([0.0, 0.0, 1.0]))
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))

    items = []
    for i in range(len(scene.cloud)):
        p = s * scene.cloud.positions[i]
        xc = R.T @ (p - cam_t)
        if xc[2] <= near:
            continue
        z = xc[2]
        mean = np.array([intr.fx * xc[0] / z + intr.cx, intr.fy * xc[1] / z + intr.cy])
        Rq = _quat_to_matrix(scene.cloud.quats[i])
        M = Rq * (s * scene.cloud.scales[i])[None, :]
        cov_cam = R.T @ (M @ M.T) @ R
        J = np.array(
            [
                [intr.fx / z, 0.0, -intr.fx * xc[0] / z**2],
                [0.0, intr.fy / z, -intr.fy * xc[1] / z**2],
            ]
        )
        cov2 = J @ cov_cam @ J.T + blur_floor * np.eye(2)
        icov = np.linalg.inv(cov2)

        omega = p - o_l
        d = np.linalg.norm(omega)
        omega_hat = omega / d
        angle = np.arccos(np.clip(omega_hat @ axis, -1.0, 1.0))
        phi = _rid_value(rig.rid, angle)
        incident = phi / (rig.falloff.tau + d * d) + scene.ambient.value
        cosi = max(-(omega_hat @ scene.cloud.normals[i]), 0.0)
        shade = incident * cosi * scene.cloud.albedos[i]
        items.append((z, mean, icov, float(scene.cloud.opacities[i]), shade))

    items.sort(key=lambda it: it[0])
    img = np.zeros((H, W, C))
    T = np.ones((H, W))
    for z, mean, icov, opac, shade in items:
        du = uu - mean[0]
        dv = vv - mean[1]
        q = icov[0, 0] * du * du + 2 * icov[0, 1] * du * dv + icov[1, 1] * dv * dv
        alpha = opac * np.exp(-0.5 * q)
        img += (T * alpha)[:, :, None] * shade[None, None, :]
        T = T * (1.0 - alpha)
    return img


def random_test_scene(rng, n_gaussians, channels=3, width=48, height=36):
    """A bounded random scene for renderer-equivalence checks."""
    from lumisplat import geometry as geo
    from lumisplat import lights
    from lumisplat import scene as sc

    n = n_gaussians
    positions = np.stack(
        [rng.uniform(-0.4, 0.4, n), rng.uniform(-0.3, 0.3, n), rng.uniform(0.8, 1.4, n)],
        axis=1,
    )
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    ang = rng.uniform(0, np.pi, n)
    quats = np.concatenate([np.cos(ang / 2)[:, None], axes * np.sin(ang / 2)[:, None]], axis=1)
    normals = np.stack([rng.normal(0, 0.3, n), rng.normal(0, 0.3, n), -np.ones(n)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = sc.GaussianCloud(
        positions=positions,
        scales=rng.uniform(0.01, 0.05, (n, 3)),
        quats=quats,
        opacities=rng.uniform(0.2, 0.9, n),
        albedos=rng.uniform(0.1, 0.9, (n, channels)),
        normals=normals,
    )
    rig = lights.LightRig(
        pose_light_to_cam=geo.RigidPose(
            geo.so3_exp(rng.normal(0, 0.05, 3)), [0.32, 0.0, 0.0]
        ),
        rid=lights.GaussianLobeRid(rng.uniform(0.8, 1.5, channels), 0.5),
        falloff=lights.FalloffModel(0.05),
        ambient=lights.AmbientLight(rng.uniform(0.0, 0.03, channels)),
    )
    intr = geo.CameraIntrinsics(
        fx=60.0, fy=60.0, cx=width / 2, cy=height / 2, width=width, height=height
    )
    eye = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.6, -0.3)])
    cam = (geo.look_at_pose(eye, [0.0, 0.0, 1.0]), intr)
    return sc.Scene(
        cloud=cloud,
        scale=float(rng.uniform(0.8, 1.6)),
        ambient=lights.AmbientLight(rng.uniform(0.0, 0.03, channels)),
        cameras=[cam],
        rig=rig,
    )
