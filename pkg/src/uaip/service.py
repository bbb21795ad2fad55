"""Interactive query sessions over HTTP.

A session walks a human through the same inference loop the offline engine
runs: the server proposes the next query, the client answers yes, no, or
unsure, and the posterior updates after every committed answer. Unsure
permanently masks the query without consuming budget. Because each session
drives exactly the shared engine primitives, replaying its recorded answers
through the offline path reproduces every posterior bit for bit.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, ConfigDict

from . import pursuit

ANSWER_VALUES = {"yes": 1, "no": -1}


class CreateSessionRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    stop_threshold: Optional[float] = None
    budget: Optional[int] = None


class AnswerRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    query_index: int
    answer: Literal["yes", "no", "unsure"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Session:
    sid: str
    state: pursuit.InferenceState
    stop_threshold: float
    budget: int
    posterior: np.ndarray
    pending: int | None = None
    termination: str | None = None
    steps: list[dict] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)

    @property
    def done(self) -> bool:
        return self.termination is not None


def _advance(model: pursuit.PursuitModel, s: Session) -> None:
    """Move the session to its next pending query or a terminal state."""
    if pursuit.reached_confidence(s.posterior, s.stop_threshold):
        s.pending = None
        s.termination = "confidence"
        return
    if len(s.state.order) >= s.budget:
        s.pending = None
        s.termination = "exhausted"
        return
    s.pending = pursuit.propose_query(model, s.state)
    if s.pending is None:
        s.termination = "exhausted"


def create_app(model: pursuit.PursuitModel,
               query_texts: list[str] | None = None,
               stop_threshold: float = 0.85,
               budget: int | None = None,
               session_log: str | Path | None = None,
               ui_dir: str | Path | None = None) -> FastAPI:
    if query_texts is not None and len(query_texts) != model.n_queries:
        raise ValueError(
            f"need {model.n_queries} query texts, got {len(query_texts)}")
    texts = query_texts or [f"query {i}" for i in range(model.n_queries)]
    default_budget = model.n_queries if budget is None else budget

    app = FastAPI(title="query sessions")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    def log_event(event: str, payload: dict) -> None:
        if session_log is None:
            return
        with open(session_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"event": event, **payload}) + "\n")

    def query_obj(index: int | None) -> dict | None:
        if index is None:
            return None
        return {"index": index, "text": texts[index]}

    def public_state(s: Session) -> dict:
        return {
            "session_id": s.sid,
            "status": "done" if s.done else "active",
            "posterior": [float(p) for p in s.posterior],
            "next_query": query_obj(s.pending),
            "steps": [dict(step) for step in s.steps],
            "skipped": list(s.skipped),
            "asked_count": len(s.state.order),
            "budget": s.budget,
            "stop_threshold": s.stop_threshold,
            "termination": s.termination,
            "predicted": int(np.argmax(s.posterior)),
            "confidence": float(np.max(s.posterior)),
            "created_at": s.created_at,
            "updated_at": s.updated_at,
        }

    def get_session(sid: str) -> Session:
        s = sessions.get(sid)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        return s

    @app.get("/model")
    def model_info() -> dict:
        return {
            "n_queries": model.n_queries,
            "n_classes": model.n_classes,
            "variant": model.variant,
            "stop_threshold": stop_threshold,
            "budget": default_budget,
            "query_texts": list(texts),
        }

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest) -> dict:
        theta = stop_threshold if req.stop_threshold is None else req.stop_threshold
        try:
            pursuit._check_stop_threshold(theta, model.n_classes)
        except Exception as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        b = default_budget if req.budget is None else req.budget
        if not 0 <= b <= model.n_queries:
            raise HTTPException(status_code=422,
                                detail=f"budget must lie in [0, {model.n_queries}]")
        state = pursuit.start_inference(model)
        s = Session(
            sid=uuid.uuid4().hex,
            state=state,
            stop_threshold=theta,
            budget=b,
            posterior=pursuit.class_posterior(model, state.h),
        )
        _advance(model, s)
        sessions[s.sid] = s
        out = public_state(s)
        out["prior_posterior"] = out["posterior"]
        out["first_query"] = out["next_query"]
        log_event("create", out)
        return out

    @app.post("/sessions/{sid}/answer")
    def answer_session(sid: str, req: AnswerRequest) -> dict:
        s = get_session(sid)
        if s.done:
            raise HTTPException(status_code=409, detail="session is finished")
        if req.query_index != s.pending:
            raise HTTPException(
                status_code=409,
                detail=f"query {req.query_index} is not pending "
                       f"(expected {s.pending})")
        if req.answer == "unsure":
            pursuit.mark_unsure(s.state, req.query_index)
            s.skipped.append(req.query_index)
            s.steps.append({"query": req.query_index, "answer": "unsure"})
        else:
            s.posterior = pursuit.apply_answer(model, s.state, req.query_index,
                                               ANSWER_VALUES[req.answer])
            s.steps.append({"query": req.query_index, "answer": req.answer,
                            "posterior": [float(p) for p in s.posterior]})
        s.updated_at = _now()
        _advance(model, s)
        out = public_state(s)
        log_event("answer", out)
        return out

    @app.get("/sessions/{sid}")
    def read_session(sid: str) -> dict:
        return public_state(get_session(sid))

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str) -> dict:
        get_session(sid)
        del sessions[sid]
        log_event("delete", {"session_id": sid})
        return {"deleted": True, "session_id": sid}

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def load_query_texts(path: str | Path, n_queries: int) -> list[str]:
    """One query text per line; blank lines and #-comments are skipped."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    texts = [ln for ln in lines if ln and not ln.startswith("#")]
    if len(texts) != n_queries:
        raise ValueError(f"{path}: expected {n_queries} query texts, got {len(texts)}")
    return texts
