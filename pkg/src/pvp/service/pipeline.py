"""Background pipeline jobs: pivots -> inversion -> tuning -> mapper training."""

from __future__ import annotations

import threading
import traceback

from ..faceparams import Image, SmoothingConfig, smooth_params
from ..genbackend import ToyGenerator, ToyInverter
from ..mappers import make_bundle, save_bundle
from ..personalization import PTIConfig, PivotSet, personalize, save_manifold, select_pivots
from ..training import PerturbationConfig, TrainConfig, train, write_history
from .models import PipelineConfig
from .store import AvatarStore


class JobHandle:
    def __init__(self, avatar_id: str):
        self.avatar_id = avatar_id
        self.cancel_event = threading.Event()
        self.thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._progress = {"stage": None, "step": None, "total_steps": None, "loss": None}

    def update(self, **kw):
        with self._lock:
            self._progress.update(kw)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._progress)

    @property
    def running(self) -> bool:
        return self.thread is not None and self.thread.is_alive()


class CancelledError(RuntimeError):
    pass


class PipelineManager:
    def __init__(self, store: AvatarStore):
        self.store = store
        self._jobs: dict[str, JobHandle] = {}
        self._guard = threading.Lock()

    def job(self, avatar_id: str) -> JobHandle | None:
        with self._guard:
            return self._jobs.get(avatar_id)

    def start(self, avatar_id: str, cfg: PipelineConfig) -> JobHandle:
        with self._guard:
            existing = self._jobs.get(avatar_id)
            if existing is not None and existing.running:
                raise RuntimeError("pipeline already running for this avatar")
            handle = JobHandle(avatar_id)
            handle.thread = threading.Thread(
                target=self._run, args=(handle, cfg), daemon=True)
            self._jobs[avatar_id] = handle
            handle.thread.start()
            return handle

    def cancel(self, avatar_id: str) -> bool:
        handle = self.job(avatar_id)
        if handle is None or not handle.running:
            return False
        handle.cancel_event.set()
        return True

    def _run(self, handle: JobHandle, cfg: PipelineConfig) -> None:
        store = self.store
        avatar_id = handle.avatar_id
        adir = store.avatar_dir(avatar_id)
        cancelled = handle.cancel_event.is_set

        def check_cancel():
            if cancelled():
                raise CancelledError("cancelled")

        try:
            frames, params = store.load_assets(avatar_id)
            if cfg.smoothing.enabled:
                params = smooth_params(params, SmoothingConfig(
                    cfg.smoothing.kernel_sigma_frames, cfg.smoothing.window_radius_frames))

            store.advance_state(avatar_id, "selecting_pivots")
            handle.update(stage="selecting_pivots")
            idx = select_pivots(params, cfg.k, seed=cfg.seed)
            targets = [Image(pixels=frames[i]) for i in idx]
            backend = ToyGenerator()
            latents = ToyInverter(backend).invert_batch(targets)
            pivots = PivotSet(frame_indices=tuple(idx), latents=tuple(latents),
                              params=tuple(params[i] for i in idx))
            check_cancel()

            store.advance_state(avatar_id, "personalizing")
            handle.update(stage="personalizing", step=0, total_steps=cfg.pti.max_steps)

            def pti_progress(step, loss):
                handle.update(step=step, loss=loss)
                check_cancel()

            manifold = personalize(
                backend, pivots, targets,
                PTIConfig(
                    lpips_threshold=cfg.pti.lpips_threshold, max_steps=cfg.pti.max_steps,
                    lambda_l2=cfg.pti.lambda_l2, lambda_reg=cfg.pti.lambda_reg,
                    locality_samples_per_step=cfg.pti.locality_samples_per_step,
                    step_size=cfg.pti.step_size, pivot_batch=cfg.pti.pivot_batch,
                    budget_mode=cfg.pti.budget_mode, seed=cfg.seed,
                ),
                beta=cfg.beta, progress=pti_progress)
            save_manifold(adir / "manifold", manifold)
            check_cancel()

            store.advance_state(avatar_id, "training_mappers")
            handle.update(stage="training_mappers", step=0, total_steps=cfg.train.steps)
            bundle = make_bundle(manifold, params, pose_seed=cfg.seed, expr_seed=cfg.seed + 1)

            def train_progress(step, loss):
                handle.update(step=step, loss=loss)

            result = train(
                bundle, frames, params,
                TrainConfig(steps=cfg.train.steps, learning_rate=cfg.train.learning_rate,
                            batch_size=cfg.train.batch_size,
                            checkpoint_every=cfg.train.checkpoint_every, seed=cfg.seed),
                pcfg=PerturbationConfig(sigma=cfg.train.sigma, seed=cfg.seed),
                checkpoint_dir=adir / "checkpoints",
                progress=train_progress, should_cancel=cancelled)
            check_cancel()
            save_bundle(adir / "bundle", result.bundle)
            write_history(adir / "loss_history.log", result.history)

            store.advance_state(avatar_id, "ready",
                                artifacts={"manifold": "manifold", "bundle": "bundle"})
            handle.update(stage="ready")
        except CancelledError:
            store.advance_state(avatar_id, "failed", error="cancelled")
            handle.update(stage="failed")
        except Exception as exc:  # captured diagnostic, state machine absorbs
            store.advance_state(avatar_id, "failed",
                                error=f"{type(exc).__name__}: {exc}")
            handle.update(stage="failed")
            handle.update(traceback="".join(traceback.format_exception(exc)[-3:]))
