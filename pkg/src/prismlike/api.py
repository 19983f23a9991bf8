"""Read-only HTTP API over one metric store.

Serves process and thread-dynamics graphs, the query-template library, and
tracking runs, plus upload/download of one KPI series per server instance.
The store is opened read-only at startup; no request mutates it. Responses
use the same JSON serializations as the CLI, so a tracking run through the
API and through `prismlike analyze` are byte-comparable.
"""

from __future__ import annotations

from typing import List, Optional

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from . import graph as graphmod
from .analyzer import (
    DEFAULT_ALPHA, DEFAULT_MIN_EFFECT, Range, full_search,
    selective_thread_tracking,
)
from .kpi import KpiFormatError, KpiSeries, parse_kpi_csv
from .store import InvalidBinding, MetricStore, UnknownTemplate

MAX_KPI_BYTES = 4_000_000


def parse_range(text: str) -> Range:
    """Parse "start..end" in seconds (floats allowed) into a ns range."""
    try:
        lo, hi = text.split("..", 1)
        return Range(int(round(float(lo) * 1e9)), int(round(float(hi) * 1e9)))
    except (ValueError, TypeError):
        raise ValueError(f"range must look like '10..50' (seconds), got {text!r}")


def parse_tgids(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    return [int(t) for t in text.split(",") if t.strip()]


class QueryBody(BaseModel):
    template: str
    bindings: dict = {}


class TrackBody(BaseModel):
    baseline: str
    compare: str
    tgids: Optional[List[int]] = None
    alpha: float = DEFAULT_ALPHA
    min_effect: float = DEFAULT_MIN_EFFECT
    full: bool = False


def create_app(db_path: str) -> FastAPI:
    app = FastAPI(title="prismlike", version="0.1.0")
    store = MetricStore.open_ro(db_path)
    app.state.store = store
    app.state.kpi: Optional[KpiSeries] = None

    def _range_or_400(text: str) -> Range:
        try:
            return parse_range(text)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/processes")
    def processes():
        rows = store.sql(
            "SELECT tgid, comm, first_seen, parent_tgid FROM processes ORDER BY tgid")
        return [{"tgid": r[0], "comm": r[1], "first_seen": r[2],
                 "parent_tgid": r[3]} for r in rows]

    @app.get("/process-graph")
    def process_graph(range: str = Query(...)):
        rng = _range_or_400(range)
        return graphmod.build_process_graph(store, rng.start_ns, rng.end_ns).to_json()

    @app.get("/thread-graph")
    def thread_graph(range: str = Query(...), tgids: Optional[str] = None,
                     min_time_ns: int = graphmod.DEFAULT_MIN_TIME_NS,
                     min_count: int = graphmod.DEFAULT_MIN_COUNT):
        rng = _range_or_400(range)
        g = graphmod.build_thread_graph(store, rng.start_ns, rng.end_ns,
                                        parse_tgids(tgids),
                                        min_time_ns=min_time_ns,
                                        min_count=min_count)
        return g.to_json()

    @app.get("/templates")
    def templates():
        return [{"name": t.name, "columns": list(t.columns), "plot": t.plot}
                for t in sorted(store.templates().values(), key=lambda t: t.name)]

    @app.post("/query")
    def query(body: QueryBody):
        try:
            tpl = store.templates()[body.template]
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"unknown template {body.template!r}")
        try:
            rows = store.query(tpl, {k: str(v) for k, v in body.bindings.items()})
        except InvalidBinding as e:
            raise HTTPException(status_code=400, detail=str(e))
        return {"columns": list(tpl.columns), "plot": tpl.plot,
                "rows": [list(r) for r in rows]}

    @app.post("/track")
    def track(body: TrackBody):
        baseline = _range_or_400(body.baseline)
        compare = _range_or_400(body.compare)
        if body.full:
            flags = full_search(store, baseline, compare, body.tgids,
                                body.alpha, body.min_effect)
            return {"flags": [f.to_json() for f in flags]}
        report = selective_thread_tracking(store, baseline, compare, body.tgids,
                                           body.alpha, body.min_effect)
        return report.to_json(store)

    @app.post("/kpi")
    async def upload_kpi(request: Request, name: str = "kpi", unit: str = "",
                         offset_ns: int = 0):
        declared = request.headers.get("content-length")
        if declared and int(declared) > MAX_KPI_BYTES:
            raise HTTPException(status_code=413, detail="KPI upload too large")
        body = await request.body()
        if len(body) > MAX_KPI_BYTES:
            raise HTTPException(status_code=413, detail="KPI upload too large")
        try:
            app.state.kpi = parse_kpi_csv(body.decode("utf-8", errors="replace"),
                                          name=name, unit=unit, offset_ns=offset_ns)
        except KpiFormatError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return {"points": len(app.state.kpi.points), "name": app.state.kpi.name}

    @app.get("/kpi")
    def get_kpi():
        if app.state.kpi is None:
            raise HTTPException(status_code=404, detail="no KPI uploaded")
        return app.state.kpi.to_json()

    return app
