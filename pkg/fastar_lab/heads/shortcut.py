"""Shortcut velocity head: flow matching, self-consistency and few-step Euler sampling.

The head predicts a velocity ``f(z_t, t, d, c)`` for a noisy token ``z_t`` at
time ``t``, a desired step size ``d`` and a condition ``c``. Noise sits at
``t = 0`` and data at ``t = 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from fastar_lab.diffcore import ops
from fastar_lab.diffcore.autodiff import forward_backward
from fastar_lab.diffcore.tensor import Tensor
from fastar_lab.exceptions import DomainError, NonFiniteError, ShapeMismatchError
from fastar_lab.heads.layers import AdaLNFinalLayer, AdaLNResBlock, Linear, Params, ScalarEmbedder
from fastar_lab.models import HeadConfig, SamplerSpec

logger = logging.getLogger(__name__)


@dataclass
class CallCounter:
    """Counts head evaluations as token-steps (one per token per call)."""

    token_steps: int = 0
    decoder_calls: int = 0
    by_d: dict[float, int] = field(default_factory=dict)

    def record(self, tokens: int, d: float | None = None) -> None:
        self.token_steps += tokens
        if d is not None:
            self.by_d[d] = self.by_d.get(d, 0) + tokens


@dataclass(frozen=True)
class FlowPoint:
    """Interpolation-path quantities for one batch of tokens."""

    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    d: np.ndarray
    z_t: np.ndarray
    v: np.ndarray


def _check_unit_interval(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.size and (np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr))):
        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def _per_row(value, batch: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        return np.full(batch, float(arr[0]))
    if arr.size != batch:
        raise ShapeMismatchError("head_forward", f"expected {batch} per-row values, got {arr.size}")
    return arr


def _check_rows_finite(what: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        bad = ~np.all(np.isfinite(data.reshape(data.shape[0], -1)), axis=1)
        if np.any(bad):
            raise NonFiniteError(what, batch_index=int(np.argmax(bad)))


class ShortcutHead:
    """AdaLN MLP velocity head conditioned on t, d and c.

    With ``step_size_embedding`` off the head ignores ``d`` and is a plain flow
    matching head; the two differ only by the d embedder.
    """

    def __init__(self, config: HeadConfig, prefix: str = "head"):
        self.config = config
        self.prefix = prefix
        width = config.hidden_width
        zero = config.zero_init_output
        self.input_proj = Linear(f"{prefix}.input_proj", config.token_dim, width)
        self.cond_proj = Linear(f"{prefix}.cond_proj", config.cond_dim, width)
        self.t_embed = ScalarEmbedder(f"{prefix}.t_embed", config.t_embed_dim, width)
        self.d_embed = None
        if config.step_size_embedding:
            self.d_embed = ScalarEmbedder(f"{prefix}.d_embed", config.d_embed_dim, width)
        self.blocks = [AdaLNResBlock(f"{prefix}.blocks.{i}", width, zero_init=zero) for i in range(config.depth)]
        self.final = AdaLNFinalLayer(f"{prefix}.final", width, config.token_dim, zero_init=zero)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        params = {}
        embedders = [self.t_embed, self.d_embed] if self.d_embed else [self.t_embed]
        parts = [self.input_proj, self.cond_proj, *embedders, *self.blocks, self.final]
        for part in parts:
            params.update(part.init(rng, dtype))
        return params

    def __call__(self, params: Params, z, t, d, c) -> Tensor:
        """head_forward: velocity for tokens ``z`` (B, token_dim) given conditions ``c`` (B, cond_dim)."""
        squeeze = np.ndim(z.data if isinstance(z, Tensor) else z) == 1
        if squeeze:
            z = ops.reshape(z, (1, -1))
            c = ops.reshape(c, (1, -1))
        batch, token_dim = z.shape if isinstance(z, Tensor) else np.shape(z)
        c_shape = c.shape if isinstance(c, Tensor) else np.shape(c)
        if token_dim != self.config.token_dim or c_shape != (batch, self.config.cond_dim):
            raise ShapeMismatchError(
                "head_forward",
                f"z {(batch, token_dim)} / c {c_shape} for token_dim={self.config.token_dim}, "
                f"cond_dim={self.config.cond_dim}",
            )
        t = _per_row(_check_unit_interval("t", t), batch)
        d = _per_row(_check_unit_interval("d", d), batch)

        y = ops.add(self.cond_proj(params, c), self.t_embed(params, t))
        if self.d_embed is not None:
            y = ops.add(y, self.d_embed(params, d))
        x = self.input_proj(params, z)
        for block in self.blocks:
            x = block(params, x, y)
        out = self.final(params, x, y)
        return ops.reshape(out, (token_dim,)) if squeeze else out


def interpolate(z0, z1, t, sigma_min: float) -> np.ndarray:
    """z_t = t z1 + (1 - (1 - sigma_min) t) z0, with t broadcast per row."""
    t = _check_unit_interval("t", t)
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if t.ndim == 1 and z1.ndim == 2:
        t = t[:, None]
    return t * z1 + (1.0 - (1.0 - sigma_min) * t) * z0


def velocity_target(z0, z1, sigma_min: float) -> np.ndarray:
    """v = z1 - (1 - sigma_min) z0, the time derivative of the interpolant."""
    return np.asarray(z1, dtype=np.float64) - (1.0 - sigma_min) * np.asarray(z0, dtype=np.float64)


def flow_point(z0, z1, t, d, sigma_min: float) -> FlowPoint:
    t = np.asarray(t, dtype=np.float64)
    d = np.minimum(np.asarray(d, dtype=np.float64), 1.0 - t)
    z_t = interpolate(z0, z1, t, sigma_min)
    return FlowPoint(z0=z0, z1=z1, t=t, d=d, z_t=z_t, v=velocity_target(z0, z1, sigma_min))


def sample_step_size(t, rng: np.random.Generator) -> np.ndarray | float:
    """d = min(u, 1 - t) with u ~ U(0, 1), so that t + d <= 1."""
    t_arr = _check_unit_interval("t", t)
    u = rng.random(t_arr.shape)
    d = np.minimum(u, 1.0 - t_arr)
    return float(d) if np.ndim(t) == 0 else d


def _draw_path(
    z1: np.ndarray, rng: np.random.Generator, sigma_min: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    z0 = rng.standard_normal(z1.shape).astype(z1.dtype)
    t = rng.random(z1.shape[0])
    z_t = interpolate(z0, z1, t, sigma_min).astype(z1.dtype)
    return z0, t, z_t, velocity_target(z0, z1, sigma_min).astype(z1.dtype)


def flow_matching_objective(head: ShortcutHead, params: Params, z1: np.ndarray, c, rng: np.random.Generator) -> Tensor:
    """MSE between f(z_t, t, 0, c) and the velocity target, with z0 and t drawn from ``rng``."""
    z1 = np.asarray(z1)
    if z1.shape[0] == 0:
        raise DomainError("flow matching loss needs a non-empty batch")
    _check_rows_finite("flow matching batch", z1, c)
    _, t, z_t, v = _draw_path(z1, rng, head.config.sigma_min)
    return ops.mse(head(params, z_t, t, 0.0, c), v)


def consistency_target(head: ShortcutHead, ema_params: Params, z_t, t, d, c) -> np.ndarray:
    """Average of two EMA half-steps of size d/2; gradient-free.

    v_t = f(z_t, t, d/2), z~ = z_t + (d/2) v_t, v' = f(z~, t + d/2, d/2); returns (v_t + v') / 2.
    """
    z_t = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    c = c.data if isinstance(c, Tensor) else np.asarray(c)
    ema = {name: (p.data if isinstance(p, Tensor) else p) for name, p in ema_params.items()}
    t = np.asarray(t, dtype=np.float64)
    half = np.asarray(d, dtype=np.float64) / 2.0
    if np.any(t + 2.0 * half > 1.0 + 1e-12):
        raise DomainError("consistency target requires t + d <= 1")
    half_col = half[:, None] if half.ndim == 1 else half
    v_t = head(ema, z_t, t, half, c).data
    z_mid = z_t + half_col * v_t
    v_mid = head(ema, z_mid, np.minimum(t + half, 1.0), half, c).data
    return (v_t + v_mid) / 2.0


def self_consistency_residual(head: ShortcutHead, params: Params, z_t, t, d, c) -> float:
    """mean ||f(z_t, t, d) - v*|| / mean ||f(z_t, t, d)||, with ``params`` standing in for the EMA weights.

    Zero for any field that is already self-consistent (a constant field, for
    one); 0.0 when the field itself is zero.
    """
    params = {name: (p.data if isinstance(p, Tensor) else p) for name, p in params.items()}
    f = head(params, z_t, t, d, c).data
    target = consistency_target(head, params, z_t, t, d, c)
    scale = np.linalg.norm(f, axis=-1).mean()
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(f - target, axis=-1).mean() / scale)


def consistency_objective(
    head: ShortcutHead,
    params: Params,
    ema_params: Params,
    z1: np.ndarray,
    c,
    rng: np.random.Generator,
    d: np.ndarray | None = None,
) -> Tensor:
    """MSE between f(z_t, t, d, c) and the stop-gradient EMA target.

    Only the leading ``consistency_fraction`` of the batch takes part. ``d``
    overrides the sampled step sizes.
    """
    z1 = np.asarray(z1)
    if z1.shape[0] == 0:
        raise DomainError("consistency loss needs a non-empty batch")
    rows = max(1, math.ceil(head.config.consistency_fraction * z1.shape[0]))
    if rows < z1.shape[0]:
        z1 = z1[:rows]
        c = ops.slice_(c, slice(0, rows)) if isinstance(c, Tensor) else np.asarray(c)[:rows]
    _check_rows_finite("consistency batch", z1, c)
    _, t, z_t, _ = _draw_path(z1, rng, head.config.sigma_min)
    if d is None:
        d = sample_step_size(t, rng)
    else:
        d = np.minimum(np.broadcast_to(np.asarray(d, dtype=np.float64), t.shape), 1.0 - t)
    target = ops.stopgrad(consistency_target(head, ema_params, z_t, t, d, c))
    return ops.mse(head(params, z_t, t, d, c), target)


def shortcut_objective(
    head: ShortcutHead,
    params: Params,
    ema_params: Params,
    z1: np.ndarray,
    c,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    """L = L_FM + L_Consist on the same batch; the consistency term is dropped for flow-matching heads.

    The two terms draw from independent children of ``rng`` (``rng.spawn(2)``).
    """
    fm_rng, consist_rng = rng.spawn(2)
    fm = flow_matching_objective(head, params, z1, c, fm_rng)
    if not head.config.consistency:
        return {"loss": fm, "fm": fm}
    consist = consistency_objective(head, params, ema_params, z1, c, consist_rng)
    return {"loss": ops.add(fm, consist), "fm": fm, "consist": consist}


def fm_loss(
    head: ShortcutHead, params: Mapping[str, np.ndarray], z1, c, rng: np.random.Generator
) -> tuple[float, dict[str, np.ndarray]]:
    """Flow matching loss and its parameter gradients."""
    outputs, grads = forward_backward(
        lambda leaves: flow_matching_objective(head, leaves, z1, c, rng), params
    )
    return _finite_loss(outputs["loss"], "flow matching loss"), grads


def consistency_loss(
    head: ShortcutHead,
    params: Mapping[str, np.ndarray],
    ema_params: Mapping[str, np.ndarray],
    z1,
    c,
    rng: np.random.Generator,
    d: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Consistency loss and its gradients; the EMA parameters receive none."""
    outputs, grads = forward_backward(
        lambda leaves: consistency_objective(head, leaves, ema_params, z1, c, rng, d=d), params
    )
    return _finite_loss(outputs["loss"], "consistency loss"), grads


def total_loss(
    head: ShortcutHead,
    params: Mapping[str, np.ndarray],
    ema_params: Mapping[str, np.ndarray],
    z1,
    c,
    rng: np.random.Generator,
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Unweighted sum of the flow matching and consistency losses, with component values."""
    outputs, grads = forward_backward(lambda leaves: shortcut_objective(head, leaves, ema_params, z1, c, rng), params)
    values = {name: _finite_loss(value, name) for name, value in outputs.items()}
    return values, grads


def _finite_loss(value: np.ndarray, what: str) -> float:
    value = float(np.asarray(value).reshape(-1)[0])
    if not math.isfinite(value):
        raise NonFiniteError(what)
    return value


def cfg_combine(v_cond, v_uncond, w_eff: float) -> np.ndarray:
    """v_uncond + w (v_cond - v_uncond); w = 1 returns v_cond exactly."""
    if w_eff == 1.0:
        return np.array(v_cond, copy=True)
    return v_uncond + w_eff * (v_cond - v_uncond)


def euler_sample(
    head: ShortcutHead,
    params: Params,
    c,
    spec: SamplerSpec,
    rng: np.random.Generator,
    c_uncond=None,
    cfg_weight: float = 1.0,
    noise: np.ndarray | None = None,
    counter: CallCounter | None = None,
) -> np.ndarray:
    """Integrate the velocity field from t = 0 to 1 in N uniform Euler steps.

    h_{t+1/N} = h_t + (1/N) f(h_t, t, d, c) with d = 1/N for N <= 16 and 0
    beyond. Guidance with ``cfg_weight`` != 1 evaluates the conditional and
    unconditional fields in one batched call per step.
    """
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    batch = c.shape[0]
    dtype = c.dtype if c.dtype in (np.float32, np.float64) else np.float64
    if noise is None:
        h = rng.standard_normal((batch, head.config.token_dim)).astype(dtype)
    else:
        h = np.array(noise, dtype=dtype)
    n = spec.steps
    d = spec.d_value
    dt = 1.0 / n
    guided = c_uncond is not None and cfg_weight != 1.0
    if guided:
        both = np.concatenate([c, np.asarray(c_uncond, dtype=dtype)], axis=0)
    for i in range(n):
        t = i / n
        if guided:
            v = head(params, np.concatenate([h, h], axis=0), t, d, both).data
            v = cfg_combine(v[:batch], v[batch:], cfg_weight)
        else:
            v = head(params, h, t, d, c).data
        if counter is not None:
            counter.record(batch, d)
        h = h + dt * v
    return h


def expand_flow_matching_params(
    fm_params: Mapping[str, np.ndarray], shortcut_head: ShortcutHead, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Widen flow-matching head parameters with a fresh step-size embedder.

    The embedder's output layer starts at zero, so the widened head computes
    the same field until fine-tuning moves it.
    """
    if shortcut_head.d_embed is None:
        raise DomainError("target head has no step-size embedding")
    dtype = next(iter(fm_params.values())).dtype
    config = shortcut_head.config
    name = shortcut_head.d_embed.name
    embedder = ScalarEmbedder(name, config.d_embed_dim, config.hidden_width, zero_init_output=True)
    expanded = dict(fm_params)
    expanded.update(embedder.init(rng, dtype))
    logger.info("Expanded flow matching head with step-size embedder (%d new arrays)", len(expanded) - len(fm_params))
    return expanded
