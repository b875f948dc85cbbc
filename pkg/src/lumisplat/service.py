"""Session-oriented HTTP API for human-in-the-loop calibration.

The browser studio drives this service: it loads a dataset into a
session, lets the operator set initial parameters, launches staged
optimization runs, polls state while they progress, and fetches
rendered-vs-captured previews.  One writer at a time per session; every
mutation bumps a monotonically increasing revision counter.  A PUT while
an optimization is running is rejected with 409, never queued.
"""

from __future__ import annotations

import base64
import itertools
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import imageio
from .calibration import (
    CalibrationProblem,
    CalibrationSchedule,
    calib_loss,
    execute_schedule,
    load_dataset,
)
from .errors import LumisplatError, SchemaError
from .geometry import RigidPose, Rotation, so3_exp
from .lights import (
    AmbientLight,
    FalloffModel,
    GaussianLobeRid,
    LightRig,
    load_rig,
)
from .synth import render_frame


class _StopRun(Exception):
    pass


@dataclass
class Session:
    id: str
    dataset: object
    problem: CalibrationProblem
    status: str = "idle"  # idle | running | failed
    revision: int = 0
    stage: str | None = None
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    stop_event: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None
    _metrics_cache: tuple | None = None

    def bump(self, event: str | None = None) -> int:
        self.revision += 1
        if event:
            self.events.append({"revision": self.revision, "event": event})
        return self.revision

    def metrics(self) -> dict:
        if self._metrics_cache is not None and self._metrics_cache[0] == self.revision:
            return self._metrics_cache[1]
        out = {}
        for subset in ("train", "test"):
            rep = calib_loss(self.problem.rig, self.dataset, subset, albedo=self.problem.albedo)
            out[subset] = {"l1": rep.terms["l1"], "mse": rep.terms["mse"]}
        self._metrics_cache = (self.revision, out)
        return out


class CreateSessionBody(BaseModel):
    manifest_path: str
    init_rig_path: str | None = None


class RunBody(BaseModel):
    schedule: dict | None = None
    iterations: int | None = None


def _field_error(field_name: str, msg: str) -> HTTPException:
    return HTTPException(status_code=422, detail=[{"loc": ["body", field_name], "msg": msg}])


def create_app() -> FastAPI:
    app = FastAPI(title="lumisplat calibration service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    counter = itertools.count(1)

    def get_session(session_id: str) -> Session:
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="no such session")
        return session

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        try:
            dataset = load_dataset(body.manifest_path)
            if body.init_rig_path:
                rig = load_rig(body.init_rig_path)
            else:
                rig = LightRig(
                    pose_light_to_cam=RigidPose.identity(),
                    rid=GaussianLobeRid(np.ones(dataset.channels), 0.5),
                    falloff=FalloffModel(0.05),
                    ambient=AmbientLight(np.full(dataset.channels, 0.01)),
                )
        except (LumisplatError, OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        session = Session(
            id=f"s{next(counter)}-{uuid.uuid4().hex[:8]}",
            dataset=dataset,
            problem=CalibrationProblem(dataset, rig),
        )
        session.bump("session created")
        with registry_lock:
            sessions[session.id] = session
        return {"id": session.id, "revision": session.revision}

    @app.get("/sessions/{session_id}/state")
    def get_state(session_id: str):
        session = get_session(session_id)
        with session.lock:
            rig = session.problem.rig
            state = {
                "revision": session.revision,
                "status": session.status,
                "stage": session.stage,
                "iteration": session.iteration,
                "loss_history": list(session.loss_history),
                "rig": rig.to_dict(),
                "albedo": session.problem.albedo.tolist(),
                "frames": len(session.dataset.frames),
                "channels": session.dataset.channels,
                "events": list(session.events[-20:]),
            }
        state["metrics"] = session.metrics()
        return state

    @app.get("/sessions/{session_id}/rig")
    def export_rig(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session.problem.rig.to_dict()

    @app.put("/sessions/{session_id}/params")
    def put_params(session_id: str, body: dict):
        session = get_session(session_id)
        with session.lock:
            if session.status == "running":
                raise HTTPException(status_code=409, detail="optimization is running")
            rig = session.problem.rig
            pose = rig.pose_light_to_cam
            rot, trans = pose.rotation, pose.translation
            rid = rig.rid
            tau = rig.falloff.tau
            ambient = rig.ambient.value
            channels = session.dataset.channels

            if "rotation_matrix" in body:
                try:
                    rot = Rotation(np.asarray(body["rotation_matrix"], dtype=float))
                except (ValueError, TypeError) as exc:
                    raise _field_error("rotation_matrix", str(exc)) from exc
            if "rotation_axis_angle" in body:
                v = np.asarray(body["rotation_axis_angle"], dtype=float).reshape(-1)
                if v.shape != (3,) or not np.all(np.isfinite(v)):
                    raise _field_error("rotation_axis_angle", "expected 3 finite values")
                rot = so3_exp(v)
            if "translation" in body:
                t = np.asarray(body["translation"], dtype=float).reshape(-1)
                if t.shape != (3,) or not np.all(np.isfinite(t)):
                    raise _field_error("translation", "expected 3 finite values")
                trans = t
            if "tau" in body:
                tau = float(body["tau"])
                if not np.isfinite(tau) or tau < 0:
                    raise _field_error("tau", "must be a finite value >= 0")
            if "ambient" in body:
                a = np.asarray(body["ambient"], dtype=float).reshape(-1)
                if a.shape != (channels,) or np.any(a < 0):
                    raise _field_error("ambient", f"expected {channels} values >= 0")
                ambient = a
            if "lobe_sigma" in body or "lobe_peak" in body:
                if not isinstance(rid, GaussianLobeRid):
                    raise _field_error("lobe_sigma", "current RID is not a Gaussian lobe")
                sigma = float(body.get("lobe_sigma", rid.sigma))
                peak = np.asarray(body.get("lobe_peak", rid.peak), dtype=float).reshape(-1)
                if sigma <= 0:
                    raise _field_error("lobe_sigma", "must be > 0")
                if peak.shape != (channels,) or np.any(peak < 0):
                    raise _field_error("lobe_peak", f"expected {channels} values >= 0")
                rid = GaussianLobeRid(peak, sigma)
            if "albedo" in body:
                alb = np.asarray(body["albedo"], dtype=float).reshape(-1)
                if alb.shape != (channels,) or np.any(alb < 0) or np.any(alb > 1):
                    raise _field_error("albedo", f"expected {channels} values in [0, 1]")
                session.problem.albedo = alb

            try:
                session.problem.rig = LightRig(
                    pose_light_to_cam=RigidPose(rot, trans),
                    rid=rid,
                    falloff=FalloffModel(tau),
                    ambient=AmbientLight(ambient),
                )
            except ValueError as exc:
                raise _field_error("rig", str(exc)) from exc
            rev = session.bump("params updated")
        return {"revision": rev}

    @app.post("/sessions/{session_id}/run", status_code=202)
    def run(session_id: str, body: RunBody):
        session = get_session(session_id)
        with session.lock:
            if session.status == "running":
                raise HTTPException(status_code=409, detail="a run is already in flight")
            try:
                if body.schedule:
                    schedule = CalibrationSchedule.from_dict(body.schedule)
                else:
                    schedule = CalibrationSchedule.default()
                if body.iterations:
                    for stage in schedule.stages:
                        stage.iterations = int(body.iterations)
            except SchemaError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            session.status = "running"
            session.stage = schedule.stages[0].name
            session.iteration = 0
            session.loss_history = []
            session.stop_event.clear()
            rev = session.bump("run started")

        def loop():
            def cb(it, value):
                with session.lock:
                    session.iteration = it + 1
                    session.loss_history.append(value)
                    session.bump()
                if session.stop_event.is_set():
                    raise _StopRun()
                return True

            try:
                execute_schedule(session.problem, schedule, callback=cb)
                final = "idle"
                note = "run completed"
            except _StopRun:
                final = "idle"
                note = "run stopped by client"
            except LumisplatError as exc:
                final = "failed"
                note = f"run failed: {exc}"
            with session.lock:
                session.status = final
                session.stage = None
                session.bump(note)

        session.thread = threading.Thread(target=loop, daemon=True)
        session.thread.start()
        return {"revision": rev, "status": "running"}

    @app.post("/sessions/{session_id}/stop")
    def stop(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if session.status != "running":
                return {"revision": session.revision, "status": session.status}
            session.stop_event.set()
            rev = session.bump("stop requested")
        return {"revision": rev, "status": "stopping"}

    @app.get("/sessions/{session_id}/preview")
    def preview(session_id: str, frame: int = 0, raw: bool = False):
        session = get_session(session_id)
        dataset = session.dataset
        if not 0 <= frame < len(dataset.frames):
            raise HTTPException(status_code=404, detail="frame index out of range")
        with session.lock:
            rig = session.problem.rig
            albedo = session.problem.albedo
            revision = session.revision
        f = dataset.frames[frame]
        rendered = render_frame(rig, albedo, dataset.target, f.cam_pose_world, f.intrinsics)
        captured = f.image
        error = np.abs(captured - rendered).mean(axis=2)
        payload = {
            "revision": revision,
            "frame": frame,
            "roi": f.roi.tolist(),
            "metrics": session.metrics(),
            "captured_png": base64.b64encode(imageio.encode_preview_png_bytes(captured)).decode(),
            "rendered_png": base64.b64encode(imageio.encode_preview_png_bytes(rendered)).decode(),
            "error_png": base64.b64encode(imageio.encode_preview_png_bytes(error)).decode(),
        }
        if raw:
            payload["captured"] = captured.tolist()
            payload["rendered"] = rendered.tolist()
            payload["error"] = error.tolist()
        return payload

    return app
