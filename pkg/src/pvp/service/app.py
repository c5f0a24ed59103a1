"""FastAPI service wrapping the avatar toolkit."""

from __future__ import annotations

import asyncio
import base64
import io
import json
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response, WebSocket, WebSocketDisconnect
from pydantic import ValidationError

from ..faceparams import PARAM_DIM, FaceParams
from ..genbackend import ToyGenerator, make_toy_video
from .models import (
    AvatarRecord,
    ControlStateMsg,
    CreateAvatarRequest,
    DirectionInfo,
    PipelineConfig,
    PivotInfo,
    PlaybackMsg,
    Progress,
)
from .pipeline import PipelineManager
from .store import AvatarStore, NotFound, StateConflict
from .stream import RenderSession

DEFAULT_DATA_DIR = "./pvp_data"


def create_app(data_dir: str | None = None, panel_dir: str | None = None) -> FastAPI:
    data_dir = data_dir or os.environ.get("PVP_DATA_DIR", DEFAULT_DATA_DIR)
    panel_dir = panel_dir or os.environ.get("PVP_PANEL_DIR")
    app = FastAPI(title="pvp avatar service")
    store = AvatarStore(data_dir)
    jobs = PipelineManager(store)
    app.state.store = store
    app.state.jobs = jobs
    if panel_dir and Path(panel_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/panel", StaticFiles(directory=panel_dir, html=True), name="panel")

    def get_record(avatar_id: str) -> AvatarRecord:
        try:
            return store.get(avatar_id)
        except NotFound:
            raise HTTPException(404, f"avatar {avatar_id} not found")

    # -- avatars -----------------------------------------------------------------

    @app.post("/avatars", response_model=AvatarRecord, status_code=201)
    def create_avatar(req: CreateAvatarRequest):
        if req.toy is not None:
            backend = ToyGenerator()
            frames, params = make_toy_video(backend, req.toy.n_frames, seed=req.toy.seed)
        else:
            try:
                blob = base64.b64decode(req.video.npz_b64)
                with np.load(io.BytesIO(blob)) as data:
                    frames = data["frames"].astype(np.float64)
                    raw = data["params"]
            except Exception as exc:
                raise HTTPException(400, f"malformed video payload: {exc}")
            if frames.ndim != 4 or frames.shape[3] != 3:
                raise HTTPException(400, f"frames must be NxHxWx3, got {frames.shape}")
            if raw.ndim != 2 or raw.shape[1] != PARAM_DIM:
                raise HTTPException(400, f"params must be Nx{PARAM_DIM}, got {raw.shape}")
            if frames.min() < 0 or frames.max() > 1:
                raise HTTPException(400, "frame values must lie in [0, 1]")
            params = [FaceParams.from_vector(row) for row in raw]
        try:
            return store.create(frames, params)
        except ValueError as exc:
            raise HTTPException(400, str(exc))

    @app.get("/avatars", response_model=list[AvatarRecord])
    def list_avatars():
        return store.list()

    @app.get("/avatars/{avatar_id}", response_model=AvatarRecord)
    def get_avatar(avatar_id: str):
        return get_record(avatar_id)

    @app.delete("/avatars/{avatar_id}", status_code=204)
    def delete_avatar(avatar_id: str):
        get_record(avatar_id)
        jobs.cancel(avatar_id)
        handle = jobs.job(avatar_id)
        if handle is not None and handle.thread is not None:
            handle.thread.join(timeout=60)
        store.delete(avatar_id)
        return Response(status_code=204)

    # -- pipeline ------------------------------------------------------------------

    @app.post("/avatars/{avatar_id}/pipeline", status_code=202)
    def run_pipeline(avatar_id: str, cfg: PipelineConfig = PipelineConfig()):
        record = get_record(avatar_id)
        if record.state != "ingesting":
            raise HTTPException(409, f"pipeline requires state 'ingesting', got {record.state!r}")
        if record.n_frames < cfg.k:
            raise HTTPException(400, f"K={cfg.k} exceeds frame count {record.n_frames}")
        try:
            jobs.start(avatar_id, cfg)
        except RuntimeError as exc:
            raise HTTPException(409, str(exc))
        return {"avatar_id": avatar_id, "status": "started"}

    @app.delete("/avatars/{avatar_id}/pipeline")
    def cancel_pipeline(avatar_id: str):
        get_record(avatar_id)
        if not jobs.cancel(avatar_id):
            raise HTTPException(409, "no running pipeline for this avatar")
        return {"avatar_id": avatar_id, "status": "cancelling"}

    @app.post("/avatars/{avatar_id}/reset", response_model=AvatarRecord)
    def reset_avatar(avatar_id: str):
        record = get_record(avatar_id)
        if record.state != "failed":
            raise HTTPException(409, f"only failed avatars can be reset, got {record.state!r}")
        return store.advance_state(avatar_id, "ingesting")

    @app.get("/avatars/{avatar_id}/progress", response_model=Progress)
    def progress(avatar_id: str):
        record = get_record(avatar_id)
        handle = jobs.job(avatar_id)
        snap = handle.snapshot() if handle else {}
        return Progress(state=record.state, stage=snap.get("stage"),
                        step=snap.get("step"), total_steps=snap.get("total_steps"),
                        loss=snap.get("loss"), error=record.error)

    # -- directions -------------------------------------------------------------------

    @app.get("/avatars/{avatar_id}/directions", response_model=list[DirectionInfo])
    def list_directions(avatar_id: str):
        get_record(avatar_id)
        path = store.avatar_dir(avatar_id) / "directions.pvpd"
        if not path.exists():
            return []
        from ..animation import load_directions

        return [DirectionInfo(name=d.name, layers=d.offsets.shape[0],
                              dim=d.offsets.shape[1], strength_range=d.strength_range)
                for d in load_directions(path)]

    @app.post("/avatars/{avatar_id}/directions", status_code=201)
    async def upload_directions(avatar_id: str, request: Request):
        get_record(avatar_id)
        payload = await request.body()
        path = store.avatar_dir(avatar_id) / "directions.pvpd"
        path.write_bytes(payload)
        from ..animation import load_directions

        try:
            dirs = load_directions(path)
        except ValueError as exc:
            path.unlink()
            raise HTTPException(400, f"invalid direction file: {exc}")
        return {"count": len(dirs), "names": [d.name for d in dirs]}

    # -- pivots (gallery metadata) ----------------------------------------------------

    @app.get("/avatars/{avatar_id}/pivots", response_model=list[PivotInfo])
    def list_pivots(avatar_id: str):
        record = get_record(avatar_id)
        if record.state != "ready":
            raise HTTPException(409, "avatar is not ready")
        from ..personalization import load_manifold

        manifold = load_manifold(store.avatar_dir(avatar_id) / "manifold")
        return [PivotInfo(index=i, frame_index=fi, yaw=p.yaw_deg, pitch=p.pitch_deg)
                for i, (fi, p) in enumerate(zip(manifold.pivots.frame_indices,
                                                manifold.pivots.params))]

    # -- driving sequences --------------------------------------------------------------

    @app.post("/avatars/{avatar_id}/driving", status_code=201)
    async def upload_driving(avatar_id: str, request: Request):
        get_record(avatar_id)
        payload = await request.body()
        try:
            driving_id = store.save_driving(avatar_id, payload)
        except ValueError as exc:
            raise HTTPException(400, f"invalid driving file: {exc}")
        return {"driving_id": driving_id}

    @app.get("/avatars/{avatar_id}/driving")
    def list_driving(avatar_id: str):
        get_record(avatar_id)
        return {"driving_ids": store.list_driving(avatar_id)}

    # -- export / import ------------------------------------------------------------------

    @app.get("/avatars/{avatar_id}/export")
    def export_avatar(avatar_id: str):
        get_record(avatar_id)
        blob = store.export_archive(avatar_id)
        return Response(content=blob, media_type="application/gzip",
                        headers={"Content-Disposition": f"attachment; filename={avatar_id}.tgz"})

    @app.post("/import", response_model=AvatarRecord, status_code=201)
    async def import_avatar(request: Request):
        payload = await request.body()
        try:
            return store.import_archive(payload)
        except FileExistsError as exc:
            raise HTTPException(409, str(exc))
        except (ValueError, KeyError) as exc:
            raise HTTPException(400, f"invalid archive: {exc}")

    @app.get("/health")
    def health():
        return {"status": "ok", "data_dir": str(store.root)}

    # -- live render stream ------------------------------------------------------------------

    @app.websocket("/avatars/{avatar_id}/stream")
    async def stream(ws: WebSocket, avatar_id: str):
        lossy = ws.query_params.get("lossy", "0") in ("1", "true")
        debug = ws.query_params.get("debug", "0") in ("1", "true")
        try:
            record = store.get(avatar_id)
        except NotFound:
            await ws.close(code=1008, reason="unknown avatar")
            return
        if record.state != "ready":
            await ws.close(code=1008, reason=f"avatar not ready (state {record.state})")
            return
        session = await asyncio.to_thread(RenderSession, store.avatar_dir(avatar_id), lossy)
        await ws.accept()
        await _run_stream(ws, session, store, avatar_id, debug=debug)

    return app


class _StreamState:
    """Mutable state shared between the reader loop and the render worker."""

    def __init__(self):
        self.pending: ControlStateMsg | None = None  # latest-wins slot
        self.playback: dict | None = None
        self.wake = asyncio.Event()
        self.closed = False
        self.last_seq = 0


async def _run_stream(ws: WebSocket, session: RenderSession, store: AvatarStore,
                      avatar_id: str, debug: bool = False) -> None:
    state = _StreamState()
    worker = asyncio.create_task(_render_worker(ws, session, state, debug))
    try:
        while True:
            text = await ws.receive_text()
            try:
                msg = json.loads(text)
            except json.JSONDecodeError as exc:
                await _send_error(ws, f"malformed message: {exc}")
                continue
            try:
                if isinstance(msg, dict) and msg.get("type") == "playback":
                    pb = PlaybackMsg.model_validate(msg)
                    _handle_playback(pb, state, store, avatar_id, session)
                else:
                    control = ControlStateMsg.model_validate(msg)
                    if control.seq <= state.last_seq:
                        await _send_error(
                            ws, f"sequence {control.seq} is not greater than {state.last_seq}",
                            seq=control.seq)
                        continue
                    state.last_seq = control.seq
                    state.pending = control
                state.wake.set()
            except (ValidationError, NotFound, ValueError) as exc:
                await _send_error(ws, f"invalid message: {exc}")
    except WebSocketDisconnect:
        pass
    finally:
        state.closed = True
        state.wake.set()
        worker.cancel()
        try:
            await worker
        except asyncio.CancelledError:
            pass


def _prepare_playback(params, bundle):
    """Renormalize a driving sequence once; returns per-frame (yaw, pitch, jaw, expr)."""
    from ..animation import make_driving_sequence, renormalize_driving

    driving = make_driving_sequence(params, bundle)
    prepared = []
    for p in params:
        je = renormalize_driving(
            np.concatenate([p.jaw_pose, p.expression]),
            driving.driving_mean, driving.driving_std,
            driving.source_mean, driving.source_std)
        pose = renormalize_driving(
            np.array([p.pitch_deg, p.yaw_deg]),
            driving.pose_driving_mean, driving.pose_driving_std,
            driving.pose_source_mean, driving.pose_source_std)
        prepared.append((pose[1], pose[0], je[:3], je[3:]))
    return prepared


def _handle_playback(pb: PlaybackMsg, state: _StreamState, store: AvatarStore,
                     avatar_id: str, session: RenderSession) -> None:
    params = store.load_driving(avatar_id, pb.driving_id)
    if pb.action == "pause":
        if state.playback is not None:
            state.playback["playing"] = False
        return
    if pb.index >= len(params):
        raise ValueError(f"index {pb.index} beyond driving length {len(params)}")
    state.playback = {
        "frames": _prepare_playback(params, session.bundle),
        "index": pb.index,
        "playing": pb.action == "start",
        "render_one": pb.action == "seek",
        "seq": pb.seq,
        "driving_id": pb.driving_id,
    }


async def _send_error(ws: WebSocket, detail: str, seq: int | None = None) -> None:
    await ws.send_text(json.dumps({"type": "error", "detail": detail, "seq": seq}))


PLAYBACK_FRAME_INTERVAL = 1.0 / 30.0


async def _render_worker(ws: WebSocket, session: RenderSession, state: _StreamState,
                         debug: bool = False) -> None:
    while not state.closed:
        await state.wake.wait()
        state.wake.clear()
        while not state.closed:
            control = state.pending
            if control is not None:
                state.pending = None
                try:
                    pixels, alpha = await asyncio.to_thread(
                        session.render_state_with_weights, control.yaw, control.pitch,
                        control.jaw, control.expr,
                        [(e.name, e.strength) for e in control.edits])
                except KeyError as exc:
                    await _send_error(ws, str(exc), seq=control.seq)
                    continue
                meta = {"type": "frame_meta", "seq": control.seq,
                        "state": control.model_dump(), "encoding": session.encoding}
                if debug:
                    meta["alpha"] = [round(float(a), 6) for a in alpha]
                await ws.send_text(json.dumps(meta))
                await ws.send_bytes(session.encode_frame(control.seq, pixels))
                continue
            pb = state.playback
            if pb is not None and (pb.get("playing") or pb.get("render_one")):
                idx = pb["index"]
                frames = pb["frames"]
                if idx >= len(frames):
                    pb["playing"] = False
                    pb["render_one"] = False
                    continue
                yaw, pitch, jaw, expr = frames[idx]
                pixels = await asyncio.to_thread(
                    session.render_state, yaw, pitch, jaw, expr, [])
                await ws.send_text(json.dumps({
                    "type": "frame_meta", "seq": pb["seq"], "playback_index": idx,
                    "driving_id": pb["driving_id"], "encoding": session.encoding}))
                await ws.send_bytes(session.encode_frame(pb["seq"], pixels))
                if pb["render_one"]:
                    pb["render_one"] = False
                    continue
                pb["index"] = idx + 1
                await asyncio.sleep(PLAYBACK_FRAME_INTERVAL)
                continue
            break
