"""HTTP service for interactive token-wise generation sessions.

Each session owns a GenerationState advanced one column per step request;
the newly decodable column band comes back as a base64 PNG strip. Strips
are immutable once served (clients may cache them byte-for-byte): the full
image endpoint concatenates the served strips, and rejecting a token
replaces only the latest strip. Model weights are shared read-only across
sessions; per-session steps are strictly serialized (423 on overlap).
"""

from __future__ import annotations

import base64
import io
import secrets
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from colflow.generator import Generator
from colflow.sampler import GenerationState, SamplerConfig, resample_token, start_state, step_token
from colflow.tokenizer import ConvTokenizer, LinearTokenizer
from colflow.numerics import Tensor


@dataclass
class ServiceSettings:
    max_sessions: int = 64
    session_ttl_s: float = 1800.0
    max_len_multiplier: int = 16


class GenerationEngine:
    """Checkpointed model + tokenizer behind the session API."""

    def __init__(self, model: Generator, tokenizer, train_len: int,
                 cfg_end: float = 1.0, n_steps: int = 100):
        self.model = model
        self.tokenizer = tokenizer
        self.train_len = train_len
        self.default_cfg_end = cfg_end
        self.default_n_steps = n_steps
        if isinstance(tokenizer, LinearTokenizer):
            self.image_h = tokenizer.cfg.image_h
            self.band_width = tokenizer.cfg.band_width
        elif isinstance(tokenizer, ConvTokenizer):
            self.image_h = tokenizer.cfg.image_h
            self.band_width = tokenizer.cfg.downsample_f
        else:
            raise TypeError(f"unsupported tokenizer {type(tokenizer)!r}")

    @property
    def n_classes(self) -> int:
        return self.model.cfg.n_classes

    def decode_prefix(self, tokens: list[np.ndarray]) -> np.ndarray:
        """Accepted tokens -> (H, P*band_width, 3) pixels in [-1, 1]."""
        seq = np.stack([t[0] for t in tokens], axis=0)
        if isinstance(self.tokenizer, LinearTokenizer):
            return self.tokenizer.decode(seq)
        return self.tokenizer.decode_tokens(Tensor(seq)).data


def _png_bytes(pixels: np.ndarray) -> bytes:
    u8 = np.clip((pixels + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class Session:
    id: str
    state: GenerationState
    target_len: int
    class_id: int
    config: dict
    strips: list[bytes] = field(default_factory=list)
    status: str = "active"
    created: float = field(default_factory=time.monotonic)
    updated: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock)


class CreateSessionBody(BaseModel):
    class_id: int
    target_len: int
    seed: int | None = None
    cfg_start: float | None = None
    cfg_end: float | None = None
    n_steps: int | None = None
    temperature: float | None = None


def create_app(engine: GenerationEngine | None,
               settings: ServiceSettings | None = None) -> FastAPI:
    settings = settings or ServiceSettings()
    app = FastAPI(title="colflow interactive generation")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    def _evict_idle() -> None:
        now = time.monotonic()
        stale = [sid for sid, s in sessions.items()
                 if now - s.updated > settings.session_ttl_s]
        for sid in stale:
            sessions.pop(sid, None)

    def _error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"error": message})

    def _get(sid: str) -> Session | None:
        with registry_lock:
            _evict_idle()
            return sessions.get(sid)

    def _strip_of(session: Session, position: int) -> bytes:
        img = engine.decode_prefix(session.state.tokens)
        band = img[:, position * engine.band_width:(position + 1) * engine.band_width, :]
        return _png_bytes(band)

    @app.get("/v1/classes")
    def list_classes():
        if engine is None:
            return _error(503, "model not loaded")
        return {"classes": [{"id": i, "name": f"class-{i}"} for i in range(engine.n_classes)],
                "train_len": engine.train_len,
                "variant": engine.model.cfg.variant,
                "max_target_len": settings.max_len_multiplier * engine.train_len,
                "image_h": engine.image_h,
                "band_width": engine.band_width}

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        if engine is None:
            return _error(503, "model not loaded")
        if not 0 <= body.class_id < engine.n_classes:
            return _error(400, f"unknown class {body.class_id}")
        ceiling = settings.max_len_multiplier * engine.train_len
        if body.target_len < 1 or body.target_len > ceiling:
            return _error(400, f"target_len must be in [1, {ceiling}]")
        if body.seed is not None and body.seed < 0:
            return _error(400, "seed must be non-negative")
        if engine.model.cfg.variant == "baseline_2d" and body.target_len > engine.train_len:
            return _error(400,
                          f"baseline_2d checkpoint cannot extrapolate past {engine.train_len}")
        with registry_lock:
            _evict_idle()
            if len(sessions) >= settings.max_sessions:
                return _error(429, "session limit reached")
            seed = body.seed if body.seed is not None else secrets.randbits(31)
            cfg = SamplerConfig(
                n_steps=body.n_steps or engine.default_n_steps,
                cfg_start=body.cfg_start if body.cfg_start is not None else 1.0,
                cfg_end=body.cfg_end if body.cfg_end is not None else engine.default_cfg_end,
                target_len=body.target_len,
                seed=seed,
                temperature=body.temperature if body.temperature is not None else 1.0,
            )
            state = start_state(engine.model, np.array([body.class_id]), cfg)
            sid = uuid.uuid4().hex
            config = {
                "class_id": body.class_id,
                "target_len": body.target_len,
                "seed": seed,
                "cfg_start": cfg.cfg_start,
                "cfg_end": cfg.cfg_end,
                "n_steps": cfg.n_steps,
                "temperature": cfg.temperature,
            }
            sessions[sid] = Session(id=sid, state=state, target_len=body.target_len,
                                    class_id=body.class_id, config=config)
        return {"session_id": sid, "config": config}

    @app.post("/v1/sessions/{sid}/step")
    def step(sid: str):
        session = _get(sid)
        if session is None:
            return _error(404, "unknown session")
        if not session.lock.acquire(blocking=False):
            return _error(423, "step already in flight")
        try:
            if session.status != "active" or session.state.done:
                return _error(409, "session is done")
            token = step_token(engine.model, session.state)
            session.updated = time.monotonic()
            position = session.state.next_pos - 1
            strip = _strip_of(session, position)
            session.strips.append(strip)
            if session.state.done:
                session.status = "done"
            return {
                "position": position,
                "token_norm": float(np.linalg.norm(token)),
                "image_strip": base64.b64encode(strip).decode("ascii"),
                "done": session.state.done,
            }
        finally:
            session.lock.release()

    @app.post("/v1/sessions/{sid}/reject")
    def reject(sid: str):
        session = _get(sid)
        if session is None:
            return _error(404, "unknown session")
        if not session.lock.acquire(blocking=False):
            return _error(423, "step already in flight")
        try:
            if not session.state.tokens:
                return _error(409, "no accepted token to reject")
            token = resample_token(engine.model, session.state)
            session.updated = time.monotonic()
            position = session.state.next_pos - 1
            strip = _strip_of(session, position)
            session.strips[-1] = strip
            session.status = "done" if session.state.done else "active"
            return {
                "position": position,
                "token_norm": float(np.linalg.norm(token)),
                "image_strip": base64.b64encode(strip).decode("ascii"),
                "done": session.state.done,
            }
        finally:
            session.lock.release()

    @app.get("/v1/sessions/{sid}/image")
    def image(sid: str):
        session = _get(sid)
        if session is None:
            return _error(404, "unknown session")
        h = engine.image_h
        bw = engine.band_width
        canvas = np.zeros((h, session.target_len * bw, 3), dtype=np.uint8) + 128
        for pos, strip in enumerate(session.strips):
            band = np.asarray(Image.open(io.BytesIO(strip)).convert("RGB"))
            canvas[:, pos * bw:(pos + 1) * bw, :] = band
        buf = io.BytesIO()
        Image.fromarray(canvas, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.delete("/v1/sessions/{sid}", status_code=204)
    def delete(sid: str):
        with registry_lock:
            sessions.pop(sid, None)
        return Response(status_code=204)

    return app
