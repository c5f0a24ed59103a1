"""Disk-backed avatar store: one directory per avatar, JSON record + blobs."""

from __future__ import annotations

import base64
import io
import json
import tarfile
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..faceparams import FaceParams, load_params, save_params
from .models import STATE_ORDER, AvatarRecord

RECORD_FILE = "record.json"
VIDEO_FILE = "video.npz"
PARAMS_FILE = "params.pvpf"


class NotFound(KeyError):
    pass


class StateConflict(RuntimeError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class AvatarStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def lock(self, avatar_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(avatar_id, threading.Lock())

    def avatar_dir(self, avatar_id: str) -> Path:
        return self.root / avatar_id

    # -- records ---------------------------------------------------------------

    def _record_path(self, avatar_id: str) -> Path:
        return self.avatar_dir(avatar_id) / RECORD_FILE

    def _write_record(self, record: AvatarRecord) -> None:
        self._record_path(record.id).write_text(record.model_dump_json(indent=2))

    def get(self, avatar_id: str) -> AvatarRecord:
        path = self._record_path(avatar_id)
        if not path.exists():
            raise NotFound(avatar_id)
        return AvatarRecord.model_validate_json(path.read_text())

    def list(self) -> list[AvatarRecord]:
        records = []
        for entry in sorted(self.root.iterdir()):
            if (entry / RECORD_FILE).exists():
                records.append(AvatarRecord.model_validate_json((entry / RECORD_FILE).read_text()))
        return records

    def create(self, frames: np.ndarray, params: list[FaceParams]) -> AvatarRecord:
        if frames.shape[0] < 2:
            raise ValueError("need at least 2 frames")
        if frames.shape[0] != len(params):
            raise ValueError(
                f"frame count {frames.shape[0]} does not match parameter count {len(params)}")
        avatar_id = uuid.uuid4().hex[:12]
        adir = self.avatar_dir(avatar_id)
        adir.mkdir(parents=True)
        np.savez_compressed(adir / VIDEO_FILE, frames=frames.astype(np.float32))
        save_params(adir / PARAMS_FILE, params)
        record = AvatarRecord(id=avatar_id, state="ingesting", created_at=_now(),
                              updated_at=_now(), n_frames=int(frames.shape[0]))
        self._write_record(record)
        return record

    def delete(self, avatar_id: str) -> None:
        import shutil

        adir = self.avatar_dir(avatar_id)
        if not (adir / RECORD_FILE).exists():
            raise NotFound(avatar_id)
        with self.lock(avatar_id):
            shutil.rmtree(adir)

    def advance_state(self, avatar_id: str, state: str, error: str | None = None,
                      artifacts: dict | None = None) -> AvatarRecord:
        """Move to a new state, enforcing the pipeline ordering; failed is absorbing."""
        with self.lock(avatar_id):
            record = self.get(avatar_id)
            if record.state == "failed" and state != "ingesting":
                raise StateConflict("avatar is failed; reset it first")
            if state not in ("failed", "ingesting"):
                cur = STATE_ORDER.index(record.state) if record.state in STATE_ORDER else -1
                nxt = STATE_ORDER.index(state)
                if nxt != cur + 1:
                    raise StateConflict(f"cannot move from {record.state} to {state}")
            record.state = state
            record.error = error
            record.updated_at = _now()
            if artifacts:
                record.artifacts.update(artifacts)
            self._write_record(record)
            return record

    # -- assets ------------------------------------------------------------------

    def load_assets(self, avatar_id: str):
        adir = self.avatar_dir(avatar_id)
        if not (adir / VIDEO_FILE).exists():
            raise NotFound(avatar_id)
        with np.load(adir / VIDEO_FILE) as data:
            frames = data["frames"].astype(np.float64)
        params = load_params(adir / PARAMS_FILE)
        return frames, params

    # -- driving sequences ---------------------------------------------------------

    def save_driving(self, avatar_id: str, payload: bytes) -> str:
        adir = self.avatar_dir(avatar_id)
        if not (adir / RECORD_FILE).exists():
            raise NotFound(avatar_id)
        ddir = adir / "driving"
        ddir.mkdir(exist_ok=True)
        driving_id = uuid.uuid4().hex[:8]
        path = ddir / f"{driving_id}.pvpf"
        path.write_bytes(payload)
        load_params(path)  # validates magic/version
        return driving_id

    def list_driving(self, avatar_id: str) -> list[str]:
        ddir = self.avatar_dir(avatar_id) / "driving"
        if not ddir.exists():
            return []
        return sorted(p.stem for p in ddir.glob("*.pvpf"))

    def load_driving(self, avatar_id: str, driving_id: str) -> list[FaceParams]:
        path = self.avatar_dir(avatar_id) / "driving" / f"{driving_id}.pvpf"
        if not path.exists():
            raise NotFound(driving_id)
        return load_params(path)

    # -- export / import -------------------------------------------------------------

    def export_archive(self, avatar_id: str) -> bytes:
        adir = self.avatar_dir(avatar_id)
        if not (adir / RECORD_FILE).exists():
            raise NotFound(avatar_id)
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w:gz") as tar:
            tar.add(adir, arcname=avatar_id)
        return buf.getvalue()

    def import_archive(self, payload: bytes) -> AvatarRecord:
        from ..mappers import load_bundle
        from ..personalization import load_manifold

        buf = io.BytesIO(payload)
        try:
            tar_ctx = tarfile.open(fileobj=buf, mode="r:gz")
        except tarfile.TarError as exc:
            raise ValueError(f"not a valid avatar archive: {exc}")
        with tar_ctx as tar:
            names = [m.name for m in tar.getmembers()]
            top = {n.split("/")[0] for n in names}
            if len(top) != 1:
                raise ValueError("archive must contain exactly one avatar directory")
            avatar_id = top.pop()
            if self.avatar_dir(avatar_id).exists():
                raise FileExistsError(f"avatar {avatar_id} already exists")
            for member in tar.getmembers():
                if member.name.startswith("/") or ".." in member.name:
                    raise ValueError("unsafe path in archive")
            tar.extractall(self.root)
        record = self.get(avatar_id)
        # validate magics/versions of everything the record claims is there
        if record.state == "ready":
            manifold = load_manifold(self.avatar_dir(avatar_id) / "manifold")
            load_bundle(self.avatar_dir(avatar_id) / "bundle", manifold)
        return record
