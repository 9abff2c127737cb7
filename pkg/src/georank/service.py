"""Read-only HTTP reranking endpoint over a loaded store and scorer checkpoint."""

from __future__ import annotations

import math
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .geodesy import GeoCoordinate
from .pipeline import Ranker


class LatLon(BaseModel):
    lat: float
    lon: float


class RankRequest(BaseModel):
    query_emb: list[float]
    generated: list[LatLon] = Field(default_factory=list)
    n_retrieved: Optional[int] = None


def _field_name(loc) -> str:
    parts = [str(p) for p in loc if p != "body"]
    return ".".join(parts) or "body"


def create_app(ranker: Ranker, meta: dict | None = None) -> FastAPI:
    """App bound to an immutable ranker; every request is scored independently."""
    app = FastAPI(title="georank", docs_url=None, redoc_url=None)
    info = {"candidates": len(ranker.store), "dims": dict(ranker.store.dims),
            "scorer_dim": ranker.state.dim, "layout": ranker.state.layout.sizes,
            "n_retrieved": ranker.cfg.inference.n_retrieved, **(meta or {})}

    @app.exception_handler(RequestValidationError)
    async def _malformed(request: Request, exc: RequestValidationError):
        errs = exc.errors()
        fields = sorted({_field_name(e.get("loc", ())) for e in errs})
        detail = "; ".join(f"{_field_name(e.get('loc', ()))}: {e.get('msg', 'invalid')}" for e in errs)
        return JSONResponse(status_code=400, content={"detail": f"malformed request: {detail}",
                                                      "fields": fields})

    @app.get("/health")
    def health():
        return {"status": "ok", **info}

    @app.post("/rank")
    def rank(req: RankRequest):
        if not all(math.isfinite(v) for v in req.query_emb):
            raise HTTPException(400, "malformed request: query_emb: values must be finite")
        if len(req.query_emb) != ranker.adapters.img_dim:
            raise HTTPException(422, f"query_emb has dim {len(req.query_emb)}, "
                                     f"expected {ranker.adapters.img_dim}")
        nr = ranker.cfg.inference.n_retrieved if req.n_retrieved is None else req.n_retrieved
        if nr < 0:
            raise HTTPException(400, "malformed request: n_retrieved: must be non-negative")
        try:
            gen = [GeoCoordinate(g.lat, g.lon) for g in req.generated]
        except ValueError as e:
            raise HTTPException(400, f"malformed request: generated: {e}") from None
        if nr == 0 and (not gen or ranker.cfg.ablation.no_generated):
            raise HTTPException(422, "empty candidate pool: no retrieved or generated candidates")
        pred = ranker.rank(req.query_emb, gen, nr)
        d = pred.to_dict()
        return {"chosen": d["chosen"], "source": d["source"], "index": d["index"],
                "scores": [s["score"] for s in d["scores"]],
                "refs": [s["ref"] for s in d["scores"]]}

    return app
