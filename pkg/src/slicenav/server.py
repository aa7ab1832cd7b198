"""Localhost render/record service backing the recorder UI.

JSON over HTTP, stdlib only. /render is a pure call into the slice engine
(bit-identical to offline rendering); finished recordings persist in the
standard dataset format so recorded and procedural trajectories are
interchangeable downstream. Lab tool: localhost, no auth.
"""

from __future__ import annotations

import base64
import json
import secrets
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import ConfigError, SliceNavError, ValidationError
from .slicer import ACTION_DIM, Action, RenderConfig, render_slice
from .trajectory import Trajectory, TrajectoryDataset, save_dataset
from .volumes import Volume

__all__ = ["RenderService", "create_server", "serve_forever"]

MAX_OUT = 256


def _b64(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode()


def _parse_action(raw) -> Action:
    if not isinstance(raw, list) or len(raw) != ACTION_DIM:
        raise ValidationError(f"action must be a list of {ACTION_DIM} numbers",
                              field="action")
    for i, v in enumerate(raw):
        if not isinstance(v, (int, float)) or not (-1.0 <= float(v) <= 1.0):
            raise ValidationError(f"action component {i} = {v} outside [-1, 1]",
                                  field=str(i))
    return Action.from_array(np.asarray(raw, dtype=np.float64))


class _Session:
    def __init__(self, volume_id: str, subject_id: str):
        self.volume_id = volume_id
        self.subject_id = subject_id
        self.actions: list[Action] = []
        self.lock = threading.Lock()
        self.finished = False
        self.path: str | None = None


class RenderService:
    """State shared by all request handlers."""

    def __init__(self, volumes: dict[str, Volume], cfg: RenderConfig,
                 recordings_dir: str | Path, ui_dir: str | Path | None = None):
        self.volumes = volumes
        self.cfg = cfg
        self.recordings_dir = Path(recordings_dir)
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.sessions: dict[str, _Session] = {}
        self.sessions_lock = threading.Lock()

    # ------------------------------------------------------------------

    def list_volumes(self) -> dict:
        return {"volumes": [{"id": vid, "dims": list(v.dims)}
                            for vid, v in sorted(self.volumes.items())],
                "render": {"out_h": self.cfg.out_h, "out_w": self.cfg.out_w}}

    def render(self, payload: dict) -> dict:
        volume_id = payload.get("volume_id")
        if volume_id not in self.volumes:
            raise ValidationError(f"unknown volume id {volume_id!r}", field="volume_id")
        action = _parse_action(payload.get("action"))
        out = payload.get("out") or [self.cfg.out_h, self.cfg.out_w]
        if (not isinstance(out, list) or len(out) != 2
                or any(not isinstance(v, int) or v < 2 or v > MAX_OUT for v in out)):
            raise ValidationError(f"out must be [h, w] with 2 <= v <= {MAX_OUT}",
                                  field="out")
        cfg = RenderConfig(out_h=out[0], out_w=out[1],
                           base_extent=self.cfg.base_extent,
                           fill_value=self.cfg.fill_value)
        frame = render_slice(self.volumes[volume_id], action, cfg)
        return {"pixels_b64": _b64(frame.pixels, "<f4"),
                "valid_b64": _b64(frame.valid, "u1"),
                "h": cfg.out_h, "w": cfg.out_w}

    def traj_start(self, payload: dict) -> dict:
        volume_id = payload.get("volume_id")
        if volume_id not in self.volumes:
            raise ValidationError(f"unknown volume id {volume_id!r}", field="volume_id")
        traj_id = secrets.token_hex(8)
        subject = payload.get("subject_id") or f"recorded_{volume_id}"
        with self.sessions_lock:
            self.sessions[traj_id] = _Session(volume_id, subject)
        return {"traj_id": traj_id}

    def _session(self, payload: dict) -> _Session:
        traj_id = payload.get("traj_id")
        with self.sessions_lock:
            session = self.sessions.get(traj_id)
        if session is None:
            raise ValidationError(f"unknown trajectory id {traj_id!r}", field="traj_id")
        return session

    def traj_append(self, payload: dict) -> dict:
        session = self._session(payload)
        action = _parse_action(payload.get("action"))
        with session.lock:
            if session.finished:
                raise ValidationError("trajectory already finished", field="traj_id")
            session.actions.append(action)
            return {"length": len(session.actions)}

    def traj_finish(self, payload: dict) -> dict:
        session = self._session(payload)
        with session.lock:
            if session.finished:
                raise ValidationError("trajectory already finished", field="traj_id")
            if len(session.actions) < 2:
                raise ValidationError("need at least 2 recorded actions", field="traj_id")
            volume = self.volumes[session.volume_id]
            frames = [render_slice(volume, a, self.cfg) for a in session.actions]
            traj = Trajectory(frames=frames, actions=list(session.actions),
                              subject_id=session.subject_id, stride=1,
                              volume_dims=volume.dims)
            ds = TrajectoryDataset(
                trajectories=[traj], split_of={session.subject_id: "train"},
                manifest={"recorded": True, "volume_id": session.volume_id})
            traj_id = payload.get("traj_id")
            path = self.recordings_dir / traj_id
            save_dataset(ds, path)
            session.finished = True
            session.path = str(path)
            return {"path": str(path), "length": len(session.actions)}

    def traj_info(self, traj_id: str) -> dict:
        session = self._session({"traj_id": traj_id})
        with session.lock:
            return {"traj_id": traj_id, "volume_id": session.volume_id,
                    "length": len(session.actions), "finished": session.finished,
                    "path": session.path,
                    "actions": [a.as_array().tolist() for a in session.actions]}


class _Handler(BaseHTTPRequestHandler):
    service: RenderService  # set by create_server

    def log_message(self, *args):  # quiet
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, status: int, err: SliceNavError) -> None:
        self._send(status, err.to_json())

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            payload = json.loads(raw or b"{}")
        except json.JSONDecodeError as e:
            raise ValidationError(f"request body is not JSON: {e}") from e
        if not isinstance(payload, dict):
            raise ValidationError("request body must be a JSON object")
        return payload

    def do_OPTIONS(self):
        self._send(204, {})

    def do_GET(self):
        try:
            if self.path == "/volumes":
                self._send(200, self.service.list_volumes())
            elif self.path.startswith("/traj/"):
                self._send(200, self.service.traj_info(self.path.split("/", 2)[2]))
            elif self.service.ui_dir is not None:
                self._serve_static()
            else:
                self._send(404, {"error": "not_found", "message": self.path})
        except ValidationError as e:
            self._send_error(404 if "unknown" in str(e) else 400, e)
        except SliceNavError as e:
            self._send_error(400, e)

    def _serve_static(self):
        rel = self.path.lstrip("/") or "index.html"
        target = (self.service.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.service.ui_dir.resolve())) \
                or not target.is_file():
            self._send(404, {"error": "not_found", "message": self.path})
            return
        body = target.read_bytes()
        ctype = {"html": "text/html", "js": "text/javascript",
                 "css": "text/css", "map": "application/json"}.get(
            target.suffix.lstrip("."), "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        routes = {
            "/render": self.service.render,
            "/traj/start": self.service.traj_start,
            "/traj/append": self.service.traj_append,
            "/traj/finish": self.service.traj_finish,
        }
        handler = routes.get(self.path)
        try:
            if handler is None:
                self._send(404, {"error": "not_found", "message": self.path})
                return
            payload = self._read_json()
            self._send(200, handler(payload))
        except ValidationError as e:
            status = 404 if "unknown volume" in str(e) or "unknown trajectory" in str(e) else 400
            self._send_error(status, e)
        except SliceNavError as e:
            self._send_error(400, e)


def create_server(service: RenderService, host: str = "127.0.0.1",
                  port: int = 8787) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    try:
        return ThreadingHTTPServer((host, port), handler)
    except OSError as e:
        raise ConfigError(f"cannot bind {host}:{port}: {e}", code="port_in_use") from e


def serve_forever(service: RenderService, host: str, port: int) -> None:
    server = create_server(service, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
