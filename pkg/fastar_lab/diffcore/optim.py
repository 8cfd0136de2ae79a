"""AdamW, global-norm clipping, EMA and the warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from fastar_lab.exceptions import DomainError, NonFiniteError, ShapeMismatchError

ParamArrays = dict[str, np.ndarray]


def default_decay_exempt(name: str) -> bool:
    """Biases and everything in the generative head skip weight decay."""
    return name.endswith(".bias") or name.startswith("head.")


@dataclass
class OptimState:
    """Moments, step counter and hyperparameters of a decoupled-weight-decay Adam."""

    m: ParamArrays
    v: ParamArrays
    exempt: dict[str, bool]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.03
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(
        cls,
        params: Mapping[str, np.ndarray],
        exempt: Callable[[str], bool] = default_decay_exempt,
        **hyper,
    ) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            exempt={k: bool(exempt(k)) for k in params},
            **hyper,
        )


def _check_pairs(op: str, params: Mapping[str, np.ndarray], other: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in other:
            raise ShapeMismatchError(op, f"missing entry for parameter {name!r}")
        if other[name].shape != p.shape:
            raise ShapeMismatchError(op, f"{name!r}: {other[name].shape} vs parameter {p.shape}")


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | None = None,
) -> tuple[ParamArrays, OptimState]:
    """One AdamW update with bias correction; returns new params and state.

    ``lr`` overrides ``state.lr`` for this step (warm-up schedules).
    """
    _check_pairs("adamw_step", params, grads)
    _check_pairs("adamw_step", params, state.m)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name}", step=state.step)
    lr = state.lr if lr is None else lr
    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        decayed = p if state.exempt.get(name, False) else p * (1.0 - lr * state.weight_decay)
        new_params[name] = decayed - lr * update
        new_m[name], new_v[name] = m, v

    new_state = OptimState(
        m=new_m,
        v=new_v,
        exempt=state.exempt,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        weight_decay=state.weight_decay,
        eps=state.eps,
        step=step,
    )
    return new_params, new_state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[ParamArrays, float]:
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds ``max_norm``.

    Returns the (possibly) rescaled gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise DomainError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class EmaState:
    """Shadow copy of the trainable parameters."""

    shadow: ParamArrays
    decay: float = 0.9999
    updates: int = field(default=0)

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], decay: float = 0.9999) -> "EmaState":
        if not 0.0 < decay < 1.0:
            raise DomainError(f"EMA decay must lie in (0, 1), got {decay}")
        return cls(shadow={k: np.array(p, copy=True) for k, p in params.items()}, decay=decay)


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * param, elementwise."""
    if not 0.0 < ema.decay < 1.0:
        raise DomainError(f"EMA decay must lie in (0, 1), got {ema.decay}")
    _check_pairs("ema_update", ema.shadow, params)
    d = ema.decay
    shadow = {name: d * s + (1.0 - d) * params[name] for name, s in ema.shadow.items()}
    return EmaState(shadow=shadow, decay=d, updates=ema.updates + 1)


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up from 0 to ``base_lr`` over ``warmup_steps``, constant afterwards."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)
