"""Review HTTP service: pipeline runs as sessions, reviewer overrides and
threshold changes re-grade synchronously, reports stay reproducible from
(input bytes, config, review log).
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .errors import FishgradeError, InputError
from .image import MultiChannelImage, decode_image_bytes
from .pipeline import (
    SCHEMA,
    PipelineConfig,
    regrade_report_dict,
    render_overlay,
    report_json_bytes,
    run_pipeline,
)
from .scoring import NucleusClass, ScoringConfig

VALID_CLASSES = {c.value for c in NucleusClass}


class Session:
    """One uploaded slide: machine report plus an append-only review log."""

    def __init__(self, sid: str, data: bytes, config: PipelineConfig):
        self.id = sid
        self.data = data
        self.config = config
        self.state = "Processing"
        self.progress = 0.0
        self.error: Optional[str] = None
        self.image: Optional[MultiChannelImage] = None
        self.base_report: Optional[dict] = None  # machine output, no overrides
        self.report: Optional[dict] = None  # current (overrides + scoring applied)
        self.review_log: list[dict] = []
        self.lock = threading.Lock()

    def run(self) -> None:
        try:
            self.progress = 0.1
            image = decode_image_bytes(self.data)
            self.image = image
            self.progress = 0.3
            report = run_pipeline(image, self.config).to_dict()
            with self.lock:
                self.base_report = report
                self.report = self._replay()
                self.state = "Ready"
                self.progress = 1.0
        except Exception as exc:
            self.error = f"{type(exc).__name__}: {exc}"
            self.state = "Failed"

    def _replay(self) -> dict:
        """Rebuild the current report from the machine report + review log."""
        report = json.loads(json.dumps(self.base_report))
        scoring = ScoringConfig.from_dict(report["config"]["scoring"])
        for event in self.review_log:
            if event["kind"] == "override":
                for rec in report["nuclei"]:
                    if rec["id"] == event["nucleus_id"]:
                        ov = {"action": event["action"], "by": event.get("actor", "reviewer"), "at": event["at"]}
                        if event["action"] == "set_class":
                            ov["class"] = event["class"]
                        rec["override"] = ov
            elif event["kind"] == "config":
                scoring = ScoringConfig.from_dict(event["scoring"])
        return regrade_report_dict(report, scoring)

    def apply_event(self, event: dict) -> dict:
        with self.lock:
            self.review_log.append(event)
            self.report = self._replay()
            return self.report


class SessionStore:
    def __init__(self, config: PipelineConfig, sessions_dir: Optional[str]):
        self.config = config
        self.dir = Path(sessions_dir) if sessions_dir else None
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()

    def create(self, data: bytes, run_async: bool = True) -> Session:
        sid = hashlib.sha256(data).hexdigest()
        with self.lock:
            existing = self.sessions.get(sid)
            if existing is not None:
                return existing
            session = Session(sid, data, self.config)
            self.sessions[sid] = session
        self._persist(session)
        if run_async:
            threading.Thread(target=session.run, daemon=True).start()
        else:
            session.run()
        return session

    def get(self, sid: str) -> Optional[Session]:
        with self.lock:
            s = self.sessions.get(sid)
        if s is None and self.dir is not None:
            s = self._load(sid)
        return s

    def _persist(self, session: Session) -> None:
        if self.dir is None:
            return
        d = self.dir / session.id
        d.mkdir(parents=True, exist_ok=True)
        (d / "input.bin").write_bytes(session.data)
        (d / "config.json").write_text(json.dumps(session.config.to_dict(), indent=1), encoding="utf-8")
        self._persist_log(session)

    def _persist_log(self, session: Session) -> None:
        if self.dir is None:
            return
        path = self.dir / session.id / "log.jsonl"
        path.write_text("".join(json.dumps(e) + "\n" for e in session.review_log), encoding="utf-8")

    def _load(self, sid: str) -> Optional[Session]:
        d = self.dir / sid
        if not (d / "input.bin").exists():
            return None
        data = (d / "input.bin").read_bytes()
        config = PipelineConfig.from_dict(json.loads((d / "config.json").read_text(encoding="utf-8")))
        session = Session(sid, data, config)
        log_path = d / "log.jsonl"
        if log_path.exists():
            session.review_log = [
                json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines() if line
            ]
        with self.lock:
            self.sessions[sid] = session
        session.run()  # synchronous rebuild; report derives from input+config+log
        return session


def _report_response(report: dict) -> Response:
    return Response(content=report_json_bytes(report), media_type="application/json")


def create_app(
    config: Optional[PipelineConfig] = None,
    sessions_dir: Optional[str] = None,
    token: Optional[str] = None,
    run_async: bool = True,
) -> FastAPI:
    """App factory. token enables static bearer auth on /slides routes;
    run_async=False runs pipelines inline (useful under test clients)."""
    cfg = (config or PipelineConfig()).validate()
    store = SessionStore(cfg, sessions_dir)
    app = FastAPI(title="fishgrade review service", version=SCHEMA)
    app.state.store = store

    @app.middleware("http")
    async def schema_header(request: Request, call_next):
        if token and request.url.path.startswith("/slides"):
            auth = request.headers.get("authorization", "")
            if auth != f"Bearer {token}":
                return JSONResponse({"detail": "unauthorized"}, status_code=401,
                                    headers={"X-Report-Schema": SCHEMA})
        response = await call_next(request)
        response.headers["X-Report-Schema"] = SCHEMA
        return response

    @app.get("/healthz")
    async def healthz():
        return Response(content="ok", media_type="text/plain")

    @app.post("/slides", status_code=202)
    async def create_slide(request: Request):
        data = await request.body()
        if not data:
            return JSONResponse({"detail": "empty body"}, status_code=400)
        try:
            decode_image_bytes(data)
        except InputError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        session = store.create(data, run_async=run_async)
        return {"id": session.id, "state": session.state}

    @app.get("/slides/{sid}/report")
    async def get_report(sid: str):
        session = store.get(sid)
        if session is None:
            return JSONResponse({"detail": "unknown slide"}, status_code=404)
        if session.state == "Processing":
            return JSONResponse({"state": "Processing", "progress": session.progress}, status_code=202)
        if session.state == "Failed":
            return JSONResponse({"state": "Failed", "detail": session.error}, status_code=500)
        return _report_response(session.report)

    @app.patch("/slides/{sid}/nuclei/{nid}")
    async def override_nucleus(sid: str, nid: int, request: Request):
        session = store.get(sid)
        if session is None:
            return JSONResponse({"detail": "unknown slide"}, status_code=404)
        if session.state != "Ready":
            return JSONResponse({"detail": f"session is {session.state}"}, status_code=409)
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            return JSONResponse({"detail": "invalid JSON body"}, status_code=422)
        action = body.get("action")
        if action not in ("set_class", "exclude", "include"):
            return JSONResponse({"detail": f"unknown action {action!r}"}, status_code=422)
        if not any(r["id"] == nid for r in session.base_report["nuclei"]):
            return JSONResponse({"detail": f"unknown nucleus {nid}"}, status_code=404)
        event = {
            "kind": "override",
            "nucleus_id": nid,
            "action": action,
            "actor": body.get("actor", "reviewer"),
            "at": _now(),
        }
        if action == "set_class":
            cls = body.get("class")
            if cls not in VALID_CLASSES:
                return JSONResponse({"detail": f"invalid class {cls!r}"}, status_code=422)
            event["class"] = cls
        report = session.apply_event(event)
        store._persist_log(session)
        return _report_response(report)

    @app.put("/slides/{sid}/config")
    async def update_config(sid: str, request: Request):
        session = store.get(sid)
        if session is None:
            return JSONResponse({"detail": "unknown slide"}, status_code=404)
        if session.state != "Ready":
            return JSONResponse({"detail": f"session is {session.state}"}, status_code=409)
        try:
            body = json.loads(await request.body())
            scoring = ScoringConfig.from_dict(body)
        except (json.JSONDecodeError, FishgradeError, TypeError) as exc:
            return JSONResponse({"detail": f"invalid scoring config: {exc}"}, status_code=422)
        event = {"kind": "config", "scoring": scoring.to_dict(), "at": _now()}
        report = session.apply_event(event)
        store._persist_log(session)
        return _report_response(report)

    @app.get("/slides/{sid}/overlay")
    async def get_overlay(sid: str, layer: str = "nuclei", nucleus_id: Optional[int] = None):
        session = store.get(sid)
        if session is None:
            return JSONResponse({"detail": "unknown slide"}, status_code=404)
        if session.state != "Ready":
            return JSONResponse({"detail": f"session is {session.state}"}, status_code=409)
        if layer == "cam":
            if nucleus_id is None:
                return JSONResponse({"detail": "cam layer needs nucleus_id"}, status_code=422)
            rec = next((r for r in session.report["nuclei"] if r["id"] == nucleus_id), None)
            if rec is None:
                return JSONResponse({"detail": f"unknown nucleus {nucleus_id}"}, status_code=404)
            if rec["cam"] is None:
                return JSONResponse(
                    {"detail": f"no CAM stored: {rec['cam_reason'] or 'unavailable'}"}, status_code=404
                )
            png = _cam_png(rec)
            return Response(content=png, media_type="image/png")
        if layer not in ("nuclei", "signals", "all"):
            return JSONResponse({"detail": f"unknown layer {layer!r}"}, status_code=422)
        png = render_overlay(session.report, session.image, layer)
        return Response(content=png, media_type="image/png")

    return app


def _cam_png(rec: dict) -> bytes:
    import io

    import numpy as np
    from PIL import Image

    cam = np.asarray(rec["cam"], dtype=np.float64)
    rgb = np.stack([cam, np.zeros_like(cam), 1.0 - cam], axis=2)
    img = Image.fromarray((rgb * 255).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _now() -> str:
    import datetime

    return datetime.datetime.now(datetime.timezone.utc).isoformat()
