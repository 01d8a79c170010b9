"""HTTP facade over inference: patient browsing, slice rasters, plan
suggestions and asynchronous what-if rollouts with per-session chaining."""

import os
import threading
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .cohort import TreatmentPlan, load_cohort
from .infer import NoPlanError, PatientState, generate_future, predict_plan
from .model import WorldModel
from .train import load_checkpoint
from .viz import overlay_image, slice_image, to_png_bytes

MAX_SESSIONS = 64


class PatientSummary(BaseModel):
    subject_id: str
    sex: str
    age: int
    grade: int
    n_timepoints: int
    days: list[int]
    plans: list[str]


class TimepointInfo(BaseModel):
    subject_id: str
    timepoint: int
    day: int
    shape: list[int]
    tumor_voxels: int
    history: list[str]
    slice_url: str


class SuggestRequest(BaseModel):
    subject: str
    timepoint: Optional[int] = None
    session: Optional[str] = None
    node: Optional[str] = None


class SuggestResponse(BaseModel):
    plan: str
    tokens: list[str]
    step_scores: list[dict]
    mask_url: str


class WhatifRequest(BaseModel):
    subject: str
    action: str
    interval_days: int = Field(gt=0)
    seed: int = 0
    session: Optional[str] = None
    base_timepoint: Optional[int] = None
    base_node: Optional[str] = None


class WhatifResponse(BaseModel):
    job_id: str
    session_id: str


class JobStatus(BaseModel):
    job_id: str
    status: str
    error: Optional[str] = None
    result: Optional[dict] = None


class SessionNode(BaseModel):
    node_id: str
    parent: Optional[str]
    base_timepoint: Optional[int]
    action: str
    interval_days: int
    seed: int
    day: int
    status: str
    suggested_plan: Optional[str] = None


class SessionView(BaseModel):
    session_id: str
    subject: str
    nodes: list[SessionNode]


class _Session:
    def __init__(self, subject: str):
        self.subject = subject
        self.nodes = {}      # node_id -> dict(record + state arrays)
        self.order = []
        self.busy = False


class SandboxState:
    """Model + cohort snapshot plus per-session rollout state."""

    def __init__(self, model: WorldModel, cohort, split_map):
        self.model = model
        self.trajs = {t.subject_id: t for t in cohort}
        self.split_map = split_map
        self.sessions = OrderedDict()
        self.jobs = {}
        self.lock = threading.Lock()
        self.pool = ThreadPoolExecutor(max_workers=2)

    def get_traj(self, subject: str):
        if subject not in self.trajs:
            raise HTTPException(404, detail={"error": f"unknown subject {subject!r}",
                                             "subjects": sorted(self.trajs)})
        return self.trajs[subject]

    def session(self, sid: Optional[str], subject: str) -> str:
        with self.lock:
            if sid is None:
                sid = uuid.uuid4().hex[:12]
            if sid not in self.sessions:
                self.sessions[sid] = _Session(subject)
                while len(self.sessions) > MAX_SESSIONS:
                    self.sessions.popitem(last=False)
            self.sessions.move_to_end(sid)
            return sid

    def state_for(self, subject: str, timepoint: Optional[int],
                  session_id: Optional[str], node: Optional[str]) -> PatientState:
        traj = self.get_traj(subject)
        if node is not None:
            if session_id is None or session_id not in self.sessions:
                raise HTTPException(404, detail={"error": "unknown session"})
            rec = self.sessions[session_id].nodes.get(node)
            if rec is None or rec["status"] != "done":
                raise HTTPException(409, detail={"error": "node not available",
                                                 "retryable": rec is not None})
            return rec["state"]
        k = timepoint if timepoint is not None else len(traj.timepoints) - 1
        if not (0 <= k < len(traj.timepoints)):
            raise HTTPException(404, detail={
                "error": f"timepoint {k} out of range",
                "valid": [0, len(traj.timepoints) - 1]})
        return PatientState.from_trajectory(traj, k)


def _run_job(state: SandboxState, sid: str, job_id: str, base: PatientState,
             plan: TreatmentPlan, tau: int, seed: int):
    job = state.jobs[job_id]
    job["status"] = "running"
    try:
        gen = generate_future(state.model, base, plan, tau, seed=seed)
        new_state = PatientState(sex=base.sex, age=base.age, grade=base.grade,
                                 history=base.history + [plan],
                                 volume=gen.volume, day=base.day + tau)
        try:
            suggestion, _ = predict_plan(state.model, new_state)
            sug = str(suggestion)
        except NoPlanError:
            sug = None
        with state.lock:
            sess = state.sessions[sid]
            rec = sess.nodes[job_id]
            rec.update(status="done", state=new_state, volume=gen.volume,
                       mask=gen.mask, day=new_state.day, suggested_plan=sug)
            sess.busy = False
        job["status"] = "done"
        job["result"] = {
            "session_id": sid,
            "node_id": job_id,
            "day": new_state.day,
            "suggested_plan": sug,
            "volume_hash": hash_bytes(gen.volume.data.tobytes()),
            "slice_url": f"/slices?subject={base_subject(sess)}&job={job_id}"
                         f"&channel=0&axis=0&index={gen.volume.data.shape[1] // 2}",
            "overlay_url": f"/slices?subject={base_subject(sess)}&job={job_id}"
                           f"&channel=0&axis=0&index={gen.volume.data.shape[1] // 2}"
                           f"&overlay=1",
        }
    except Exception as e:  # surface into the job record
        with state.lock:
            sess = state.sessions.get(sid)
            if sess is not None:
                sess.busy = False
                if job_id in sess.nodes:
                    sess.nodes[job_id]["status"] = "error"
        job["status"] = "error"
        job["error"] = str(e)


def base_subject(sess: _Session) -> str:
    return sess.subject


def hash_bytes(b: bytes) -> str:
    import hashlib

    return hashlib.sha256(b).hexdigest()[:16]


def create_app(ckpt_path: str = None, cohort_path: str = None) -> FastAPI:
    ckpt_path = ckpt_path or os.environ.get("GLIOWORLD_CKPT")
    cohort_path = cohort_path or os.environ.get("GLIOWORLD_COHORT")
    if not ckpt_path or not cohort_path:
        raise RuntimeError("set GLIOWORLD_CKPT and GLIOWORLD_COHORT (or pass paths)")
    model, _, _, _ = load_checkpoint(ckpt_path)
    cohort, split_map = load_cohort(cohort_path)
    state = SandboxState(model, cohort, split_map)

    app = FastAPI(title="glioworld sandbox")
    app.state.sandbox = state

    @app.get("/patients", response_model=list[PatientSummary])
    def patients():
        return [PatientSummary(
            subject_id=t.subject_id, sex=t.sex, age=t.age, grade=t.grade,
            n_timepoints=len(t.timepoints),
            days=[tp.day for tp in t.timepoints],
            plans=[str(p) for p in t.plans]) for t in state.trajs.values()]

    @app.get("/patients/{subject}/timepoints/{k}", response_model=TimepointInfo)
    def timepoint(subject: str, k: int):
        traj = state.get_traj(subject)
        if not (0 <= k < len(traj.timepoints)):
            raise HTTPException(404, detail={
                "error": f"timepoint {k} out of range",
                "valid": [0, len(traj.timepoints) - 1]})
        tp = traj.timepoints[k]
        return TimepointInfo(
            subject_id=subject, timepoint=k, day=tp.day,
            shape=list(tp.volume.data.shape),
            tumor_voxels=tp.mask.foreground_voxels(),
            history=[str(p) for p in traj.plans[:k]],
            slice_url=f"/slices?subject={subject}&tp={k}&channel=0&axis=0"
                      f"&index={tp.volume.data.shape[1] // 2}")

    @app.get("/slices")
    def slices(subject: str, channel: int = 0, axis: int = 0, index: int = 0,
               tp: Optional[int] = None, job: Optional[str] = None,
               session: Optional[str] = None,
               overlay: int = Query(0, ge=0, le=1)):
        traj = state.get_traj(subject)
        mask = None
        if job is not None:
            rec = None
            with state.lock:
                for sess in state.sessions.values():
                    if job in sess.nodes:
                        rec = sess.nodes[job]
                        break
            if rec is None or rec["status"] != "done":
                raise HTTPException(404, detail={"error": f"job {job!r} not found or unfinished"})
            vol = rec["volume"]
            mask = rec["mask"]
        else:
            k = tp if tp is not None else len(traj.timepoints) - 1
            if not (0 <= k < len(traj.timepoints)):
                raise HTTPException(404, detail={
                    "error": f"timepoint {k} out of range",
                    "valid": [0, len(traj.timepoints) - 1]})
            vol = traj.timepoints[k].volume
            mask = traj.timepoints[k].mask
        if not (0 <= channel < vol.data.shape[0]):
            raise HTTPException(404, detail={"error": f"channel {channel} out of range",
                                             "valid": [0, vol.data.shape[0] - 1]})
        n = vol.data.shape[1 + axis] if 0 <= axis <= 2 else None
        if n is None or not (0 <= index < n):
            raise HTTPException(404, detail={"error": f"slice index {index} out of range",
                                             "valid": [0, (n or 1) - 1]})
        if overlay:
            if mask is None:
                raise HTTPException(404, detail={"error": "no mask for this volume"})
            img = overlay_image(vol.data[channel], mask.labels(), axis, index)
        else:
            img = slice_image(vol.data[channel], axis, index)
        return Response(content=to_png_bytes(img), media_type="image/png")

    @app.post("/suggest", response_model=SuggestResponse)
    def suggest(req: SuggestRequest):
        ps = state.state_for(req.subject, req.timepoint, req.session, req.node)
        try:
            plan, step_logits = predict_plan(state.model, ps)
        except NoPlanError as e:
            raise HTTPException(422, detail={"error": str(e)})
        vocab = state.model.vocab
        scores = []
        for row in step_logits:
            ids = list(vocab.planning_ids) + [vocab.eos]
            scores.append({vocab.tokens[i]: float(row[i]) for i in ids})
        mask_q = f"/slices?subject={req.subject}"
        if req.node:
            mask_q += f"&job={req.node}"
        elif req.timepoint is not None:
            mask_q += f"&tp={req.timepoint}"
        mask_q += "&channel=0&axis=0&index=16&overlay=1"
        return SuggestResponse(plan=str(plan),
                               tokens=[t.label for t in plan.tokens],
                               step_scores=scores, mask_url=mask_q)

    @app.post("/whatif", response_model=WhatifResponse)
    def whatif(req: WhatifRequest):
        try:
            plan = TreatmentPlan.parse(req.action)
        except ValueError as e:
            raise HTTPException(422, detail={"error": str(e)})
        sid = state.session(req.session, req.subject)
        base = state.state_for(req.subject, req.base_timepoint, sid, req.base_node)
        with state.lock:
            sess = state.sessions[sid]
            if sess.busy:
                raise HTTPException(409, detail={
                    "error": "a generation job is already running for this session",
                    "retryable": True})
            sess.busy = True
            job_id = uuid.uuid4().hex[:12]
            state.jobs[job_id] = {"status": "queued", "error": None, "result": None}
            sess.nodes[job_id] = {
                "node_id": job_id, "parent": req.base_node,
                "base_timepoint": req.base_timepoint,
                "action": str(plan), "interval_days": req.interval_days,
                "seed": req.seed, "day": -1, "status": "queued",
                "state": None, "volume": None, "mask": None,
                "suggested_plan": None}
            sess.order.append(job_id)
        state.pool.submit(_run_job, state, sid, job_id, base, plan,
                          req.interval_days, req.seed)
        return WhatifResponse(job_id=job_id, session_id=sid)

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job(job_id: str):
        rec = state.jobs.get(job_id)
        if rec is None:
            raise HTTPException(404, detail={"error": f"job {job_id!r} not found"})
        return JobStatus(job_id=job_id, status=rec["status"], error=rec["error"],
                         result=rec["result"])

    @app.get("/sessions/{sid}", response_model=SessionView)
    def session_view(sid: str):
        with state.lock:
            sess = state.sessions.get(sid)
            if sess is None:
                raise HTTPException(404, detail={"error": f"session {sid!r} not found"})
            nodes = [SessionNode(
                node_id=n["node_id"], parent=n["parent"],
                base_timepoint=n["base_timepoint"], action=n["action"],
                interval_days=n["interval_days"], seed=n["seed"],
                day=n["day"], status=n["status"],
                suggested_plan=n["suggested_plan"])
                for n in (sess.nodes[i] for i in sess.order)]
        return SessionView(session_id=sid, subject=sess.subject, nodes=nodes)

    return app
