"""Report, manifest, checkpoint and run-directory handling for lab commands.

Every CSV report is an astropy table with per-column descriptions and units,
written with ``astropy.io.ascii`` under a pinned column order. Optional
``# ``-prefixed comment lines precede the header.
"""

from __future__ import annotations

import io
import logging
import os
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from astropy.io import ascii as astro_ascii
from astropy.table import Table as AstroTable
from pydantic import BaseModel, Field

from fastar_lab import __version__
from fastar_lab.ar_engine import TrainState
from fastar_lab.diffcore.checkpoint import load_records, save_records
from fastar_lab.exceptions import CheckpointError, RunDirectoryLockedError
from fastar_lab.models import HeadKind, OptimConfig, RunConfig

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"

LOSS_COLUMNS = {
    HeadKind.SHORTCUT: ("step", "total", "fm", "consist", "self_consist", "grad_norm", "lr"),
    HeadKind.FM_TO_SHORTCUT: ("step", "total", "fm", "consist", "self_consist", "grad_norm", "lr"),
    HeadKind.FLOW_MATCHING: ("step", "total", "fm", "self_consist", "grad_norm", "lr"),
    HeadKind.CVAE: ("step", "total", "recon", "kl", "grad_norm", "lr"),
}
COST_COLUMNS = ("arch_id", "K", "O", "kv_cache", "backbone_flops", "head_flops", "head_calls", "head_share")
ABLATION_COLUMNS = ("head_kind", "N", "energy_distance", "mean_error", "cov_error", "n_samples")
CFG_COLUMNS = ("cfg_weight", "K", "N", "energy_distance", "n_samples")
KL_COLUMNS = ("kl_weight", "steps", "recon", "kl", "n_tokens")
ORACLE_COLUMNS = ("pattern", "source", "N", "known_positions", "mean_error", "cov_error", "n_samples")
GRADCHECK_COLUMNS = ("check", "kind", "max_rel_error", "passed")
GRID_COLUMNS = ("sample", "label", "position", "row", "col")

COLUMN_METADATA = {
    "step": {"description": "Optimizer step (0-based)"},
    "total": {"description": "Objective minimised at this step"},
    "fm": {"description": "Flow matching loss"},
    "consist": {"description": "Self-consistency loss"},
    "self_consist": {"description": "Held-out self-consistency residual of the EMA head (NaN between log steps)"},
    "recon": {"description": "C-VAE reconstruction MSE"},
    "kl": {"description": "C-VAE KL divergence to N(0, I)"},
    "grad_norm": {"description": "Global gradient norm before clipping"},
    "lr": {"description": "Learning rate after warm-up"},
    "arch_id": {"description": "Architecture preset"},
    "K": {"description": "AR iterations"},
    "O": {"description": "Denoising steps per token"},
    "N": {"description": "Sampling steps per token"},
    "kv_cache": {"description": "Causal backbone reuses cached keys and values"},
    "backbone_flops": {"description": "Conditioner FLOPs", "unit": "FLOP"},
    "head_flops": {"description": "Head FLOPs", "unit": "FLOP"},
    "head_calls": {"description": "Head evaluations (token-steps)"},
    "head_share": {"description": "head_flops / (head_flops + backbone_flops)"},
    "head_kind": {"description": "Head training objective"},
    "energy_distance": {"description": "Energy distance to reference samples"},
    "mean_error": {"description": "Max-abs error of the empirical mean"},
    "cov_error": {"description": "Max-abs error of the empirical covariance"},
    "n_samples": {"description": "Generated samples"},
    "cfg_weight": {"description": "Terminal guidance weight"},
    "kl_weight": {"description": "Weight of the KL term in the C-VAE objective"},
    "steps": {"description": "Training steps"},
    "n_tokens": {"description": "Held-out tokens"},
    "pattern": {"description": "Clamp pattern index"},
    "source": {"description": "model or oracle sampler"},
    "known_positions": {"description": "Clamped raster positions, space separated"},
    "check": {"description": "Primitive, layer or loss under test"},
    "kind": {"description": "primitive, layer or loss"},
    "max_rel_error": {"description": "Max elementwise relative gradient error"},
    "passed": {"description": "Error below tolerance"},
    "sample": {"description": "Sample index"},
    "label": {"description": "Class label"},
    "position": {"description": "Raster position"},
    "row": {"description": "Grid row"},
    "col": {"description": "Grid column"},
}


def build_table(rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> AstroTable:
    """Astropy table with exactly ``columns`` in order, plus column metadata."""
    rows = [dict(row) for row in rows]
    if rows:
        table = AstroTable(rows=[[row.get(name) for name in columns] for row in rows], names=columns)
    else:
        table = AstroTable(names=columns, dtype=[str] * len(columns))
    for name in columns:
        metadata = COLUMN_METADATA.get(name)
        if metadata:
            table[name].description = metadata.get("description")
            if "unit" in metadata:
                table[name].meta["unit"] = metadata["unit"]
    return table


def table_to_csv(table: AstroTable, comments: Sequence[str] = ()) -> str:
    buffer = io.StringIO()
    for line in comments:
        buffer.write(f"# {line}\n")
    astro_ascii.write(table, buffer, format="csv")
    return buffer.getvalue()


def write_csv(path: str | Path, table: AstroTable, comments: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table_to_csv(table, comments))
    logger.info("Wrote %s (%d rows)", path, len(table))
    return path


def read_csv(path: str | Path) -> AstroTable:
    return astro_ascii.read(path, format="csv", comment="#")


def loss_rows(reports: Iterable[Mapping[str, float]], columns: Sequence[str]) -> list[dict[str, float]]:
    """Training reports mapped onto ``columns``; losses a stage does not compute (consist while pretraining) are NaN."""
    rows = []
    for report in reports:
        row = {name: float(report.get(name, np.nan)) for name in columns}
        row.update(step=int(report["step"]), total=float(report["loss"]))
        rows.append(row)
    return rows


def grid_rows(tokens: np.ndarray, labels: np.ndarray, width: int) -> tuple[list[dict[str, Any]], tuple[str, ...]]:
    """One row per (sample, position) with the token components as z0, z1, ..."""
    token_dim = tokens.shape[-1]
    components = tuple(f"z{i}" for i in range(token_dim))
    rows = []
    for sample, grid in enumerate(tokens):
        for position, token in enumerate(grid):
            row = {"sample": sample, "label": int(labels[sample]), "position": position}
            row.update(row=position // width, col=position % width)
            row.update(zip(components, (float(v) for v in token)))
            rows.append(row)
    return rows, GRID_COLUMNS + components


class RunManifest(BaseModel):
    """Everything needed to reproduce a command's outputs."""

    command: str
    run_id: str
    seed: int
    config: dict[str, Any]
    checkpoint_id: Optional[str] = None
    ar_iters: Optional[int] = None
    steps: Optional[int] = None
    cfg_weight: Optional[float] = None
    outputs: list[str] = []
    version: str = __version__
    created: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


def write_manifest(path: str | Path, manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def new_manifest(command: str, config: RunConfig, **fields) -> RunManifest:
    return RunManifest(
        command=command, run_id=config.run_id, seed=config.seed, config=config.model_dump(mode="json"), **fields
    )


@contextmanager
def run_directory(path: str | Path) -> Iterator[Path]:
    """Own ``path`` for the duration of the block through an exclusive lock file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunDirectoryLockedError(f"Run directory {path} is locked by {lock}") from exc
    with os.fdopen(fd, "w") as handle:
        handle.write(str(os.getpid()))
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_id(run_id: str, step: int) -> str:
    return f"{run_id}-{step:07d}"


def checkpoint_path(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}.fits"


def save_checkpoint(
    run_dir: str | Path, state: TrainState, config: RunConfig, head_kind: HeadKind | None = None
) -> Path:
    meta = {
        "step": state.step,
        "seed": config.seed,
        "ckptid": checkpoint_id(config.run_id, state.step),
        "headkind": str(head_kind or config.head_kind),
    }
    return save_records(checkpoint_path(run_dir, state.step), state.to_records(), meta)


def latest_checkpoint(run_dir: str | Path) -> Path:
    candidates = sorted((Path(run_dir) / "checkpoints").glob("step_*.fits"))
    if not candidates:
        raise CheckpointError(f"No checkpoint found under {run_dir}")
    return candidates[-1]


def load_checkpoint(path: str | Path, optim: OptimConfig) -> tuple[TrainState, dict[str, Any]]:
    records, meta = load_records(path)
    return TrainState.from_records(records, int(meta.get("step", 0)), optim), meta
