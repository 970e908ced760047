"""HTTP facade over the experiment harness.

Every endpoint takes the same line-oriented config text the CLI accepts and
returns JSON; side-effect outputs (trace CSVs, instance files) are written on
the machine running the service. Validation failures map to 400s with the
underlying message so the thin client can just relay them.
"""

from __future__ import annotations

from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import harness

__all__ = ["create_app"]


class RunRequest(BaseModel):
    config: str = Field(description="key=value experiment config text")


class MethodSummary(BaseModel):
    method: str
    k: int
    comm_rounds: int
    grad_calls: int
    prox_calls: int
    summand_grad_calls: int
    rel_subopt: float
    dist_sq: float


class RunResponse(BaseModel):
    f_star: float
    f_star_how: str
    lam: float
    lines: List[str]
    summaries: List[MethodSummary]
    csv_paths: Dict[str, str]
    summary_path: Optional[str]


class CertifyResponse(BaseModel):
    ok: bool
    lines: List[str]
    csv_paths: Dict[str, str]


class SplitRequest(BaseModel):
    path: str
    clients: int
    mode: str = "heterogeneous"
    seed: int = 0
    out: Optional[str] = None


class SplitResponse(BaseModel):
    rows: int
    d: int
    n: int
    m: int
    dropped: int
    manifest: Optional[str] = None
    out: Optional[str] = None


class GenQuadraticResponse(BaseModel):
    path: str
    n: int
    d: int


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


def create_app() -> FastAPI:
    app = FastAPI(title="perfl", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        try:
            cfg = harness.parse_config(req.config)
            out = harness.cmd_run(cfg)
        except (ValueError, RuntimeError) as exc:
            raise _bad_request(exc) from exc
        summaries = []
        for method, res in out.results.items():
            last = res.rows[-1]
            summaries.append(MethodSummary(
                method=method, k=last.k, comm_rounds=last.comm_rounds,
                grad_calls=last.grad_calls, prox_calls=last.prox_calls,
                summand_grad_calls=last.summand_grad_calls,
                rel_subopt=last.rel_subopt, dist_sq=last.dist_sq,
            ))
        return RunResponse(
            f_star=out.f_star, f_star_how=out.f_star_how, lam=out.lam,
            lines=out.lines, summaries=summaries, csv_paths=out.csv_paths,
            summary_path=out.summary_path,
        )

    @app.post("/certify-lb", response_model=CertifyResponse)
    def certify_lb(req: RunRequest) -> CertifyResponse:
        try:
            cfg = harness.parse_config(req.config)
            out = harness.cmd_certify_lowerbound(cfg)
        except (ValueError, RuntimeError) as exc:
            raise _bad_request(exc) from exc
        return CertifyResponse(ok=out.ok, lines=out.lines, csv_paths=out.csv_paths)

    @app.post("/split", response_model=SplitResponse)
    def split(req: SplitRequest) -> SplitResponse:
        try:
            manifest, info = harness.cmd_split(req.path, req.clients, req.mode,
                                               req.seed)
        except ValueError as exc:
            raise _bad_request(exc) from exc
        out_path = None
        if req.out:
            with open(req.out, "w", encoding="utf-8", newline="") as fh:
                fh.write(manifest)
            out_path = req.out
        return SplitResponse(manifest=None if req.out else manifest,
                             out=out_path, **info)

    @app.post("/gen-quadratic", response_model=GenQuadraticResponse)
    def gen_quadratic(req: RunRequest) -> GenQuadraticResponse:
        try:
            cfg = harness.parse_config(req.config)
            path, info = harness.cmd_gen_quadratic(cfg)
        except ValueError as exc:
            raise _bad_request(exc) from exc
        return GenQuadraticResponse(path=path, **info)

    return app
