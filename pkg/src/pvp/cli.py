"""Thin command-line client for the avatar service (plus local evaluation)."""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click
import httpx
import numpy as np

DEFAULT_URL = "http://127.0.0.1:8000"


def _client(url: str) -> httpx.Client:
    return httpx.Client(base_url=url, timeout=600.0)


def _echo_json(data) -> None:
    click.echo(json.dumps(data, indent=2))


def _fail(resp: httpx.Response) -> None:
    click.echo(f"error {resp.status_code}: {resp.text}", err=True)
    sys.exit(1)


@click.group()
@click.option("--url", envvar="PVP_URL", default=DEFAULT_URL, show_default=True,
              help="Avatar service base URL.")
@click.pass_context
def main(ctx, url):
    ctx.obj = {"url": url}


@main.command()
@click.option("--data-dir", envvar="PVP_DATA_DIR", default="./pvp_data", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--panel", "panel_dir", envvar="PVP_PANEL_DIR", default=None,
              help="Serve the built control panel from this directory at /panel.")
def serve(data_dir, host, port, panel_dir):
    """Run the avatar service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(data_dir, panel_dir=panel_dir), host=host, port=port,
                log_level="info")


@main.command()
@click.option("--toy-frames", type=int, default=None, help="Create from a synthetic toy video.")
@click.option("--toy-seed", type=int, default=0)
@click.option("--video", "video_path", type=click.Path(exists=True), default=None,
              help=".npz with arrays 'frames' (N,H,W,3) and 'params' (N,58).")
@click.pass_context
def create(ctx, toy_frames, toy_seed, video_path):
    """Create an avatar from a toy spec or an uploaded video payload."""
    if (toy_frames is None) == (video_path is None):
        raise click.UsageError("provide exactly one of --toy-frames or --video")
    if toy_frames is not None:
        body = {"toy": {"n_frames": toy_frames, "seed": toy_seed}}
    else:
        blob = Path(video_path).read_bytes()
        body = {"video": {"npz_b64": base64.b64encode(blob).decode()}}
    with _client(ctx.obj["url"]) as client:
        resp = client.post("/avatars", json=body)
        if resp.status_code != 201:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.option("--k", type=int, default=24, show_default=True)
@click.option("--beta", type=float, default=0.02, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pti-steps", type=int, default=350, show_default=True)
@click.option("--pti-threshold", type=float, default=0.03, show_default=True)
@click.option("--train-steps", type=int, default=2000, show_default=True)
@click.option("--learning-rate", type=float, default=5e-3, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--no-smoothing", is_flag=True)
@click.pass_context
def run(ctx, avatar_id, k, beta, seed, pti_steps, pti_threshold, train_steps,
        learning_rate, batch_size, no_smoothing):
    """Start the avatar pipeline (pivots, tuning, mapper training)."""
    cfg = {
        "k": k, "beta": beta, "seed": seed,
        "smoothing": {"enabled": not no_smoothing},
        "pti": {"max_steps": pti_steps, "lpips_threshold": pti_threshold},
        "train": {"steps": train_steps, "learning_rate": learning_rate,
                  "batch_size": batch_size},
    }
    with _client(ctx.obj["url"]) as client:
        resp = client.post(f"/avatars/{avatar_id}/pipeline", json=cfg)
        if resp.status_code != 202:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.option("--watch", is_flag=True, help="Poll until ready or failed.")
@click.pass_context
def progress(ctx, avatar_id, watch):
    """Show pipeline progress."""
    import time

    with _client(ctx.obj["url"]) as client:
        while True:
            resp = client.get(f"/avatars/{avatar_id}/progress")
            if resp.status_code != 200:
                _fail(resp)
            data = resp.json()
            click.echo(f"state={data['state']} stage={data.get('stage')} "
                       f"step={data.get('step')} loss={data.get('loss')}")
            if not watch or data["state"] in ("ready", "failed"):
                break
            time.sleep(2.0)


@main.command(name="list")
@click.pass_context
def list_avatars(ctx):
    """List avatars."""
    with _client(ctx.obj["url"]) as client:
        resp = client.get("/avatars")
        if resp.status_code != 200:
            _fail(resp)
        for rec in resp.json():
            click.echo(f"{rec['id']}  {rec['state']:<18} frames={rec['n_frames']}")


@main.command()
@click.argument("avatar_id")
@click.pass_context
def get(ctx, avatar_id):
    """Show one avatar record."""
    with _client(ctx.obj["url"]) as client:
        resp = client.get(f"/avatars/{avatar_id}")
        if resp.status_code != 200:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.pass_context
def delete(ctx, avatar_id):
    """Delete an avatar."""
    with _client(ctx.obj["url"]) as client:
        resp = client.delete(f"/avatars/{avatar_id}")
        if resp.status_code != 204:
            _fail(resp)
        click.echo("deleted")


@main.command()
@click.argument("avatar_id")
@click.pass_context
def cancel(ctx, avatar_id):
    """Cancel a running pipeline."""
    with _client(ctx.obj["url"]) as client:
        resp = client.delete(f"/avatars/{avatar_id}/pipeline")
        if resp.status_code != 200:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.pass_context
def reset(ctx, avatar_id):
    """Reset a failed avatar back to ingesting."""
    with _client(ctx.obj["url"]) as client:
        resp = client.post(f"/avatars/{avatar_id}/reset")
        if resp.status_code != 200:
            _fail(resp)
        _echo_json(resp.json())


def _ws_url(base: str, avatar_id: str) -> str:
    ws = base.replace("https://", "wss://").replace("http://", "ws://")
    return f"{ws}/avatars/{avatar_id}/stream"


@main.command()
@click.argument("avatar_id")
@click.option("--yaw", type=float, default=0.0, show_default=True)
@click.option("--pitch", type=float, default=0.0, show_default=True)
@click.option("--jaw", default="0,0,0", help="Comma-separated 3-vector.")
@click.option("--expr", default=None, help="Comma-separated 50-vector (default zeros).")
@click.option("--edit", "edits", multiple=True, help="NAME=STRENGTH, repeatable.")
@click.option("--out", type=click.Path(), default=None, help="Write the frame as PNG.")
@click.pass_context
def render(ctx, avatar_id, yaw, pitch, jaw, expr, edits, out):
    """Render one frame over the live stream."""
    from websockets.sync.client import connect

    from .service.stream import decode_frame

    jaw_vec = [float(v) for v in jaw.split(",")]
    expr_vec = [float(v) for v in expr.split(",")] if expr else [0.0] * 50
    edit_list = []
    for e in edits:
        name, _, strength = e.partition("=")
        edit_list.append({"name": name, "strength": float(strength or 0)})
    msg = {"seq": 1, "yaw": yaw, "pitch": pitch, "jaw": jaw_vec,
           "expr": expr_vec, "edits": edit_list}
    with connect(_ws_url(ctx.obj["url"], avatar_id)) as ws:
        ws.send(json.dumps(msg))
        meta = None
        while True:
            reply = ws.recv()
            if isinstance(reply, str):
                parsed = json.loads(reply)
                if parsed.get("type") == "error":
                    click.echo(f"error: {parsed['detail']}", err=True)
                    sys.exit(1)
                meta = parsed
                continue
            seq, pixels = decode_frame(reply)
            break
    click.echo(f"frame seq={seq} shape={pixels.shape} encoding={meta.get('encoding')}")
    if out:
        from PIL import Image as PILImage

        PILImage.fromarray(pixels).save(out)
        click.echo(f"wrote {out}")


@main.command()
@click.argument("avatar_id")
@click.option("--driving-id", required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--limit", type=int, default=None, help="Stop after this many frames.")
@click.pass_context
def playback(ctx, avatar_id, driving_id, out_dir, limit):
    """Stream a driving-sequence playback and save frames as PNGs."""
    from PIL import Image as PILImage
    from websockets.sync.client import connect

    from .service.stream import decode_frame

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with connect(_ws_url(ctx.obj["url"], avatar_id)) as ws:
        ws.send(json.dumps({"type": "playback", "seq": 1, "driving_id": driving_id,
                            "action": "start", "index": 0}))
        index = None
        saved = 0
        while True:
            try:
                reply = ws.recv(timeout=10.0)
            except TimeoutError:
                break
            if isinstance(reply, str):
                parsed = json.loads(reply)
                if parsed.get("type") == "error":
                    click.echo(f"error: {parsed['detail']}", err=True)
                    sys.exit(1)
                index = parsed.get("playback_index")
                continue
            _, pixels = decode_frame(reply)
            PILImage.fromarray(pixels).save(out / f"frame_{index:05d}.png")
            saved += 1
            if limit is not None and saved >= limit:
                break
    click.echo(f"saved {saved} frames to {out}")


@main.command(name="export")
@click.argument("avatar_id")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def export_cmd(ctx, avatar_id, out):
    """Download an avatar archive."""
    with _client(ctx.obj["url"]) as client:
        resp = client.get(f"/avatars/{avatar_id}/export")
        if resp.status_code != 200:
            _fail(resp)
        Path(out).write_bytes(resp.content)
        click.echo(f"wrote {out} ({len(resp.content)} bytes)")


@main.command(name="import")
@click.argument("archive", type=click.Path(exists=True))
@click.pass_context
def import_cmd(ctx, archive):
    """Upload an avatar archive."""
    with _client(ctx.obj["url"]) as client:
        resp = client.post("/import", content=Path(archive).read_bytes())
        if resp.status_code != 201:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.option("--upload", type=click.Path(exists=True), default=None,
              help="Upload a PVPD direction file.")
@click.pass_context
def directions(ctx, avatar_id, upload):
    """List or upload edit directions."""
    with _client(ctx.obj["url"]) as client:
        if upload:
            resp = client.post(f"/avatars/{avatar_id}/directions",
                               content=Path(upload).read_bytes())
            if resp.status_code != 201:
                _fail(resp)
        resp = client.get(f"/avatars/{avatar_id}/directions")
        if resp.status_code != 200:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.argument("avatar_id")
@click.option("--upload", type=click.Path(exists=True), default=None,
              help="Upload a PVPF driving-parameter file.")
@click.pass_context
def driving(ctx, avatar_id, upload):
    """List or upload driving sequences."""
    with _client(ctx.obj["url"]) as client:
        if upload:
            resp = client.post(f"/avatars/{avatar_id}/driving",
                               content=Path(upload).read_bytes())
            if resp.status_code != 201:
                _fail(resp)
            _echo_json(resp.json())
        resp = client.get(f"/avatars/{avatar_id}/driving")
        if resp.status_code != 200:
            _fail(resp)
        _echo_json(resp.json())


@main.command()
@click.option("--pred", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--protocol", type=click.Choice(["nha", "nbs", "custom"]), default="custom",
              show_default=True)
@click.option("--train-range", default=None, help="custom protocol: START:STOP")
@click.option("--eval-range", default=None, help="custom protocol: START:STOP")
@click.option("--mask", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", type=click.Path(), default=None, help="Write the machine record here.")
def evaluate(pred, gt, protocol, train_range, eval_range, mask, out):
    """Evaluate rendered frames against ground truth (local, no server)."""
    from PIL import Image as PILImage

    from .evalkit import SplitSpec, evaluate_frames, report_machine, report_text, split_dataset
    from .faceparams import Image

    def load_dir(path):
        files = sorted(Path(path).glob("*.png")) + sorted(Path(path).glob("*.jpg"))
        return {f.stem: f for f in files}

    pred_files = load_dir(pred)
    gt_files = load_dir(gt)
    common = sorted(set(pred_files) & set(gt_files))
    if not common:
        raise click.UsageError("no matching filenames between --pred and --gt")

    if protocol != "custom" or (train_range and eval_range):
        def parse_range(s):
            a, _, b = s.partition(":")
            return int(a), int(b)

        spec = SplitSpec(protocol,
                         train_range=parse_range(train_range) if train_range else None,
                         eval_range=parse_range(eval_range) if eval_range else None)
        try:
            numeric = {int(stem): stem for stem in common}
        except ValueError:
            raise click.UsageError("protocol-based selection needs numeric frame filenames")
        _, eval_idx = split_dataset(max(numeric) + 1, spec)
        common = [numeric[i] for i in eval_idx if i in numeric]

    def read(path):
        arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
        return Image(pixels=arr)

    preds = [read(pred_files[s]) for s in common]
    gts = [read(gt_files[s]) for s in common]
    masks = None
    if mask:
        mask_files = load_dir(mask)
        masks = [np.asarray(PILImage.open(mask_files[s]).convert("L"), dtype=np.float64) / 255.0
                 for s in common]
    report = evaluate_frames(preds, gts, masks=masks,
                             provenance={"protocol": protocol, "frames": len(common)})
    click.echo(report_text(report))
    if out:
        Path(out).write_text(report_machine(report))
        click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
