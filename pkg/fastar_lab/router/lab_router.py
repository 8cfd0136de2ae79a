"""Main API router for the analytic lab endpoints."""

from typing import Annotated

import numpy as np
from fastapi import APIRouter, Depends, Query
from fastapi_restful.cbv import cbv

from fastar_lab import costmodel
from fastar_lab.ar_engine import cosine_plan
from fastar_lab.exceptions import DomainError
from fastar_lab.models import GaussianFieldConfig
from fastar_lab.responses import CSVResponse
from fastar_lab.service import COST_COLUMNS, build_table, table_to_csv
from fastar_lab.settings import Settings, get_settings
from fastar_lab.toylab import GaussianFieldSpec, analytic_conditional

lab_router = APIRouter(tags=["Lab"])


@cbv(lab_router)
class LabRouter:
    """Router for the analytic (model-free) lab endpoints."""

    settings: Settings = Depends(get_settings)

    def _check_size(self, size: int, what: str) -> None:
        if size > self.settings.API_MAX_TOKENS:
            raise DomainError(f"{what} of {size} exceeds the limit of {self.settings.API_MAX_TOKENS}")

    @lab_router.get(
        "/cost",
        summary="Inference cost grid",
        description="Analytic FLOP breakdown per architecture preset, AR iterations and denoising steps, as CSV.",
        response_class=CSVResponse,
    )
    def cost(
        self,
        arch: Annotated[list[str], Query(description="Architecture presets.", example=["mar-b", "far-b"])] = None,
        ar_iters: Annotated[list[int], Query(description="AR iterations K.", example=[32, 64])] = None,
        denoise_steps: Annotated[list[int], Query(description="Denoising steps per token O.", example=[8, 100])] = None,
        head_width: Annotated[int, Query(description="Head MLP width.", gt=0)] = costmodel.DOCUMENTED_HEAD_WIDTH,
    ) -> CSVResponse:
        archs = [costmodel.preset(name, head_width) for name in (arch or ["mar-b", "far-b", "far-b-causal"])]
        ar_iters = ar_iters or [64]
        denoise_steps = denoise_steps or [8, 100]
        if any(k < 1 for k in ar_iters) or any(o < 1 for o in denoise_steps):
            raise DomainError("ar_iters and denoise_steps must be positive")
        self._check_size(len(archs) * len(ar_iters) * len(denoise_steps), "grid size")

        rows = [
            {
                "arch_id": b.arch_id,
                "K": b.ar_iters,
                "O": b.denoise_steps,
                "kv_cache": b.kv_cache,
                "backbone_flops": b.backbone_flops,
                "head_flops": b.head_flops,
                "head_calls": b.head_calls,
                "head_share": b.head_share,
            }
            for b in costmodel.cost_grid(archs, ar_iters, denoise_steps)
        ]
        comments = [costmodel.FLOP_CONVENTION, f"head width {head_width}", *costmodel.reference_comments()]
        return CSVResponse(content=table_to_csv(build_table(rows, COST_COLUMNS), comments))

    @lab_router.get(
        "/schedule",
        summary="Cosine AR schedule",
        description="Tokens generated per AR iteration under the cosine mask schedule.",
    )
    def schedule(
        self,
        ar_iters: Annotated[int, Query(description="AR iterations K.", ge=1)] = 64,
        total_tokens: Annotated[int, Query(description="Tokens T in the grid.", ge=1)] = 256,
    ) -> dict:
        self._check_size(total_tokens, "total_tokens")
        counts = cosine_plan(ar_iters, total_tokens)
        return {"ar_iters": ar_iters, "total_tokens": total_tokens, "counts": counts, "iterations": len(counts)}

    @lab_router.get(
        "/conditional",
        summary="Exact Gaussian conditional",
        description="Conditional mean and covariance of the unclamped tokens of a toy Gaussian field.",
    )
    def conditional(
        self,
        known: Annotated[list[int], Query(description="Clamped raster positions.", example=[0, 5])] = None,
        values: Annotated[
            list[float],
            Query(description="Clamped values, token-major (defaults to zeros).", example=[0.5, -0.2, 1.0, 0.1]),
        ] = None,
        height: Annotated[int, Query(ge=1)] = 4,
        width: Annotated[int, Query(ge=1)] = 4,
        token_dim: Annotated[int, Query(ge=1)] = 2,
        length_scale: Annotated[float, Query(gt=0.0)] = 1.5,
        channel_correlation: Annotated[float, Query(gt=-1.0, lt=1.0)] = 0.0,
    ) -> dict:
        self._check_size(height * width * token_dim, "field size")
        spec = GaussianFieldSpec.from_config(
            GaussianFieldConfig(
                height=height,
                width=width,
                token_dim=token_dim,
                length_scale=length_scale,
                channel_correlation=channel_correlation,
            )
        )
        known = known or []
        values = np.zeros(len(known) * token_dim) if values is None else np.asarray(values, dtype=np.float64)
        result = analytic_conditional(spec, known, values)
        return {
            "known_positions": [int(p) for p in known],
            "masked_positions": result.masked_positions.tolist(),
            "mean": result.token_mean(token_dim).tolist(),
            "covariance": result.covariance.tolist(),
        }
