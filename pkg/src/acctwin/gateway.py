"""User-entity gateway: snapshot streaming and remote-management commands.

The gateway is stateless apart from a cached latest snapshot; every command
is validated here, then handed to the digital-twin loop through a queue.
Rejected commands never reach the twin. The HTTP surface:

    GET  /api/state    latest snapshot document
    POST /api/command  {"kind": ..., "value"?: ...} -> {"accepted": bool}
    POST /api/report   {"from_us"?: int, "to_us"?: int} -> CSV paths
    WS   /ws/stream    snapshot JSON pushed at 10 Hz
"""

from __future__ import annotations

import asyncio
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse

COMMAND_KINDS = frozenset(
    {
        "enable_acc",
        "disable_acc",
        "set_speed",
        "emergency_brake",
        "start_collection",
        "stop_collection",
        "generate_report",
    }
)

STREAM_PERIOD_S = 0.1  # 10 Hz snapshot push


@dataclass(frozen=True)
class CommandRequest:
    kind: str
    value: Optional[float] = None
    from_us: Optional[int] = None
    to_us: Optional[int] = None


class CommandError(ValueError):
    """Command rejected; `code` selects the 4xx response class."""

    STATUS = {"malformed": 400, "unknown_kind": 404, "bad_value": 422}

    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.status = self.STATUS[code]


def handle_command(doc, v_set_max: float = 3.0) -> CommandRequest:
    """Validate a raw command document into a CommandRequest."""
    if not isinstance(doc, dict):
        raise CommandError("malformed", "command body must be a JSON object")
    kind = doc.get("kind")
    if not isinstance(kind, str):
        raise CommandError("malformed", "missing string field 'kind'")
    if kind not in COMMAND_KINDS:
        raise CommandError("unknown_kind", f"unknown command kind '{kind}'")
    value = doc.get("value")
    if kind == "set_speed":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise CommandError("bad_value", "set_speed requires a numeric 'value'")
        if not 0.0 <= float(value) <= v_set_max:
            raise CommandError(
                "bad_value", f"set_speed must lie in [0, {v_set_max}]"
            )
        value = float(value)
    elif value is not None and not isinstance(value, (int, float)):
        raise CommandError("bad_value", "'value' must be numeric when present")
    from_us = doc.get("from_us")
    to_us = doc.get("to_us")
    for name, bound in (("from_us", from_us), ("to_us", to_us)):
        if bound is not None and (not isinstance(bound, int) or bound < 0):
            raise CommandError("bad_value", f"'{name}' must be a non-negative integer")
    if from_us is not None and to_us is not None and from_us > to_us:
        raise CommandError("bad_value", "'from_us' must not exceed 'to_us'")
    return CommandRequest(kind=kind, value=value, from_us=from_us, to_us=to_us)


def snapshot(dt_state) -> dict:
    """The state document streamed to the cockpit."""
    return dt_state.snapshot()


class GatewayBridge:
    """Thread-safe handoff between connection handlers and the twin loop."""

    def __init__(
        self,
        report_handler: Optional[Callable[[int, int], dict]] = None,
    ) -> None:
        self._snapshot: dict = {}
        self._lock = threading.Lock()
        self.commands: queue.Queue[CommandRequest] = queue.Queue()
        self.report_handler = report_handler

    def set_snapshot(self, doc: dict) -> None:
        with self._lock:
            self._snapshot = doc

    def latest_snapshot(self) -> dict:
        with self._lock:
            return self._snapshot

    def submit(self, command: CommandRequest) -> None:
        self.commands.put(command)

    def drain_commands(self) -> list[CommandRequest]:
        drained = []
        while True:
            try:
                drained.append(self.commands.get_nowait())
            except queue.Empty:
                return drained

    def report(self, from_us: int, to_us: int) -> dict:
        if self.report_handler is None:
            raise RuntimeError("no report handler attached")
        return self.report_handler(from_us, to_us)


def create_app(
    bridge: GatewayBridge,
    v_set_max: float = 3.0,
    static_dir: Optional[str | Path] = None,
) -> FastAPI:
    app = FastAPI(title="acctwin gateway")

    @app.get("/api/state")
    def get_state() -> JSONResponse:
        return JSONResponse(bridge.latest_snapshot())

    @app.post("/api/command")
    async def post_command(request: Request) -> JSONResponse:
        try:
            doc = await request.json()
        except Exception:
            return JSONResponse(
                {"accepted": False, "error": "body is not valid JSON"},
                status_code=400,
            )
        try:
            command = handle_command(doc, v_set_max=v_set_max)
        except CommandError as exc:
            return JSONResponse(
                {"accepted": False, "error": str(exc)}, status_code=exc.status
            )
        bridge.submit(command)
        return JSONResponse({"accepted": True})

    @app.post("/api/report")
    async def post_report(request: Request) -> JSONResponse:
        try:
            doc = await request.json()
        except Exception:
            doc = {}
        if not isinstance(doc, dict):
            return JSONResponse({"error": "body must be a JSON object"}, status_code=400)
        from_us = doc.get("from_us", 0)
        to_us = doc.get("to_us", 2**62)
        if not isinstance(from_us, int) or not isinstance(to_us, int) or from_us > to_us:
            return JSONResponse({"error": "bad report bounds"}, status_code=422)
        try:
            result = bridge.report(from_us, to_us)
        except Exception as exc:
            return JSONResponse({"error": str(exc)}, status_code=500)
        return JSONResponse(
            {
                "ego_csv": result["ego_csv_path"],
                "tracks_csv": result["tracks_csv_path"],
                "rows": result["row_counts"],
            }
        )

    @app.websocket("/ws/stream")
    async def ws_stream(socket: WebSocket) -> None:
        await socket.accept()
        try:
            while True:
                await socket.send_json(bridge.latest_snapshot())
                await asyncio.sleep(STREAM_PERIOD_S)
        except WebSocketDisconnect:
            pass

    if static_dir is not None:
        static_dir = Path(static_dir)
        index = static_dir / "index.html"

        @app.get("/")
        def root() -> FileResponse:
            return FileResponse(index)

        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=static_dir), name="ui")

    return app


def serve_in_thread(app: FastAPI, host: str, port: int) -> threading.Thread:
    """Run uvicorn on a daemon thread; returns once the server is listening."""
    import uvicorn

    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    import time

    deadline = time.monotonic() + 10.0
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.02)
    app.state.uvicorn_server = server
    return thread
