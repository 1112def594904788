"""HTTP facade over a fitted (or running) analysis for the web viewer.

Map payloads are little-endian float32 blobs (content-type
application/octet-stream); append ?meta=1 for the JSON sidecar (length,
value range, unit). Slices are JSON with nulls outside the mask. EM
progress fans out over a server-sent event stream; stop is a cooperative
flag honored at iteration boundaries.
"""

from __future__ import annotations

import asyncio
import json
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response, StreamingResponse
from pydantic import BaseModel

from . import nifti
from .inference import (
    ContrastSpec,
    VolumeMap,
    contrast_test,
    subpopulation_map,
    threshold_mask,
    zscore_map,
)
from .pipeline import AnalysisStore


class SubpopRequest(BaseModel):
    x: list
    ic: int | None = None


class ContrastRequest(BaseModel):
    coefficients: list = None
    varianceMode: str = "plug-in"
    ic: int | None = None

    model_config = {"populate_by_name": True}

    def __init__(self, **data):
        if "lambda" in data:
            data["coefficients"] = data.pop("lambda")
        super().__init__(**data)


class MaskRequest(BaseModel):
    cutoff: float
    source: str  # map id, e.g. "s0/1"


class StartRequest(BaseModel):
    maxit: int = 100
    epsilon1: float = 1e-4
    epsilon2: float = 1e-3


class EmRunner:
    """Single live EM run with progress fan-out and cooperative stop."""

    def __init__(self, store: AnalysisStore):
        self.store = store
        self.thread = None
        self.stop_signal = threading.Event()
        self.events = []  # completed-iteration records
        self.subscribers = []  # asyncio queues
        self.lock = threading.Lock()
        self.error = None

    @property
    def live(self):
        return self.thread is not None and self.thread.is_alive()

    def _sink(self, record):
        with self.lock:
            self.events.append(record)
            queues = list(self.subscribers)
        for q in queues:
            q.put_nowait(record)

    def subscribe(self):
        q = asyncio.Queue()
        with self.lock:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q):
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def start(self, maxit, eps_g, eps_l):
        if self.live:
            raise RuntimeError("a run is already live")
        self.stop_signal.clear()
        self.error = None

        def target():
            try:
                self.store.resume(
                    maxit, eps_g, eps_l, progress_sink=self._sink, stop_signal=self.stop_signal
                )
            except Exception as exc:  # surfaced via /api/em/status
                self.error = str(exc)
            finally:
                for q in list(self.subscribers):
                    q.put_nowait(None)

        self.thread = threading.Thread(target=target, daemon=True)
        self.thread.start()

    def request_stop(self):
        if not self.live:
            raise RuntimeError("no live run")
        self.stop_signal.set()


def create_app(analysis_dir) -> FastAPI:
    store = AnalysisStore(analysis_dir)
    runner = EmRunner(store)
    masks = {}  # id -> {"cutoff", "source", "included": bool list}
    app = FastAPI(title="hc-ICA viewer service")

    def fitted():
        try:
            return store.fitted()
        except Exception as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    def map_values(map_id):
        """Resolve a map id path like s0/1, population/2, subject/3/1,
        beta/2/1, se/2/1 (1-based indices) to (values, unit)."""
        f = fitted()
        parts = [p for p in map_id.strip("/").split("/") if p]
        q, p = f.params.q, f.params.p
        try:
            if parts[0] == "s0" and len(parts) == 2:
                ic = int(parts[1]) - 1
                if not 0 <= ic < q:
                    raise IndexError
                return f.posterior.s0_mean[:, ic], "intensity"
            if parts[0] == "population" and len(parts) == 2:
                ic = int(parts[1]) - 1
                if not 0 <= ic < q:
                    raise IndexError
                return f.posterior.si_mean.mean(axis=0)[:, ic], "intensity"
            if parts[0] == "subject" and len(parts) == 3:
                i, ic = int(parts[1]) - 1, int(parts[2]) - 1
                if not (0 <= i < f.params.N and 0 <= ic < q):
                    raise IndexError
                return f.posterior.si_mean[i, :, ic], "intensity"
            if parts[0] in ("beta", "se") and len(parts) == 3:
                k, ic = int(parts[1]) - 1, int(parts[2]) - 1
                if not (0 <= k < p and 0 <= ic < q):
                    raise IndexError
                if parts[0] == "beta":
                    return f.params.B[:, k, ic], "intensity"
                from .inference import beta_covariance

                cov = beta_covariance(f, mode="plug-in")
                return np.sqrt(cov[:, k * q + ic, k * q + ic]), "intensity"
        except (ValueError, IndexError):
            pass
        raise HTTPException(status_code=404, detail=f"unknown map {map_id!r}")

    def blob_response(values, unit, meta=False):
        values = np.asarray(values, dtype=np.float64)
        if meta:
            return JSONResponse(
                {
                    "length": int(values.size),
                    "range": [float(values.min()), float(values.max())],
                    "unit": unit,
                    "dtype": "<f4",
                }
            )
        return Response(values.astype("<f4").tobytes(), media_type="application/octet-stream")

    @app.get("/api/meta")
    def meta():
        run = store.runinfo
        f = fitted() if store.state is not None else None
        return {
            "q": run.q,
            "N": run.N,
            "p": int(run.X.shape[1]),
            "covariates": run.covariates,
            "designColumns": run.varNamesX,
            "maskDims": run.voxSize,
            "nVoxels": store.mask.n_voxels,
            "prefix": run.prefix,
            "mapKinds": ["s0", "population", "subject", "beta", "se"],
            "fitted": f is not None,
        }

    @app.get("/api/maps/{map_id:path}")
    def get_map(map_id: str, meta: int = 0):
        values, unit = map_values(map_id)
        return blob_response(values, unit, meta=bool(meta))

    @app.post("/api/subpop")
    def post_subpop(req: SubpopRequest, meta: int = 0):
        f = fitted()
        if len(req.x) != f.params.p:
            raise HTTPException(status_code=422, detail=f"x must have length {f.params.p}")
        maps = subpopulation_map(f, np.asarray(req.x, dtype=float))
        if req.ic is not None:
            if not 1 <= req.ic <= f.params.q:
                raise HTTPException(status_code=404, detail=f"unknown IC {req.ic}")
            values = maps[req.ic - 1].values
        else:
            values = np.concatenate([m.values for m in maps])
        return blob_response(values, "intensity", meta=bool(meta))

    @app.post("/api/contrast")
    def post_contrast(req: ContrastRequest, meta: int = 0):
        f = fitted()
        if req.coefficients is None or len(req.coefficients) != f.params.p:
            raise HTTPException(status_code=422, detail=f"lambda must have length {f.params.p}")
        try:
            spec = ContrastSpec(coefficients=np.asarray(req.coefficients, dtype=float))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if req.varianceMode not in ("plug-in", "empirical"):
            raise HTTPException(status_code=422, detail=f"unknown variance mode {req.varianceMode!r}")
        result = contrast_test(f, spec, variance_mode=req.varianceMode)
        if req.ic is not None:
            if not 1 <= req.ic <= f.params.q:
                raise HTTPException(status_code=404, detail=f"unknown IC {req.ic}")
            values = result.z[:, req.ic - 1]
        else:
            values = result.z.T.reshape(-1)  # IC-major
        return blob_response(values, "z", meta=bool(meta))

    @app.get("/api/slice")
    def get_slice(map: str, axis: str, index: int):
        axes = {"sagittal": 0, "coronal": 1, "axial": 2}
        if axis not in axes:
            raise HTTPException(status_code=422, detail=f"axis must be one of {list(axes)}")
        values, unit = map_values(map)
        grid = store.mask.unmask(values)
        flags = store.mask.flags
        ax = axes[axis]
        if not 0 <= index < grid.shape[ax]:
            raise HTTPException(status_code=404, detail=f"{axis} index {index} out of range")
        plane = np.take(grid, index, axis=ax)
        in_mask = np.take(flags, index, axis=ax)
        data = [
            [float(plane[r, c]) if in_mask[r, c] else None for c in range(plane.shape[1])]
            for r in range(plane.shape[0])
        ]
        header = store.reference_header()
        return {
            "shape": list(plane.shape),
            "data": data,
            "range": [float(values.min()), float(values.max())],
            "unit": unit,
            "affine": nifti.world_affine(header).tolist(),
            "axis": axis,
            "index": index,
        }

    @app.get("/api/em/status")
    def em_status():
        state = store.state
        return {
            "live": runner.live,
            "iteration": state.iteration if state else 0,
            "termination": state.termination if state else None,
            "history": [list(h) for h in state.history] if state else [],
            "events": runner.events,
            "error": runner.error,
        }

    @app.post("/api/em/start")
    def em_start(req: StartRequest):
        if runner.live:
            raise HTTPException(status_code=409, detail="a run is already live")
        try:
            runner.start(req.maxit, req.epsilon1, req.epsilon2)
        except Exception as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"started": True}

    @app.post("/api/em/stop")
    def em_stop():
        try:
            runner.request_stop()
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"stopping": True}

    @app.get("/api/em/events")
    async def em_events(request: Request):
        queue = runner.subscribe()
        last_id = request.headers.get("last-event-id")

        async def gen():
            try:
                # replay missed iterations on reconnect
                start_from = int(last_id) if last_id else 0
                for record in list(runner.events):
                    if record["iteration"] > start_from:
                        yield f"id: {record['iteration']}\ndata: {json.dumps(record)}\n\n"
                while True:
                    try:
                        record = await asyncio.wait_for(queue.get(), timeout=30.0)
                    except asyncio.TimeoutError:
                        yield ": keepalive\n\n"
                        continue
                    if record is None:
                        yield "event: done\ndata: {}\n\n"
                        break
                    yield f"id: {record['iteration']}\ndata: {json.dumps(record)}\n\n"
            finally:
                runner.unsubscribe(queue)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/api/masks")
    def list_masks():
        return [
            {"id": mid, "cutoff": m["cutoff"], "source": m["source"], "count": int(sum(m["included"]))}
            for mid, m in masks.items()
        ]

    @app.post("/api/masks")
    def create_mask(req: MaskRequest):
        values, unit = map_values(req.source)
        vmap = VolumeMap(values, unit)
        if unit == "intensity":
            vmap = zscore_map(vmap)
        try:
            included = threshold_mask(vmap, req.cutoff)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        mid = uuid.uuid4().hex[:12]
        masks[mid] = {"cutoff": req.cutoff, "source": req.source, "included": included.tolist()}
        return {"id": mid, "count": int(included.sum())}

    app.state.store = store
    app.state.runner = runner
    return app
