"""Training and generation loops for masked and causal autoregressive token models.

A :class:`FarModel` bundles a conditioner (parameters under ``backbone.``)
and a per-token head (parameters under ``head.``) in one flat parameter
mapping, so one optimizer, one EMA and one checkpoint cover both.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Optional

import numpy as np
from tqdm import tqdm

from fastar_lab.conditioner import CausalConditioner, MaskedConditioner, MaskSet, build_conditioner, partition_tokens
from fastar_lab.diffcore import ops
from fastar_lab.diffcore.autodiff import forward_backward
from fastar_lab.diffcore.checkpoint import group, prefixed
from fastar_lab.diffcore.optim import EmaState, OptimState, adamw_step, clip_global_norm, ema_update, lr_at
from fastar_lab.diffcore.rng import RngStreams
from fastar_lab.diffcore.tensor import Tensor
from fastar_lab.exceptions import CheckpointError, ConfigError, DomainError, GenerationIncompleteError, NonFiniteError
from fastar_lab.heads.cvae import CvaeHead, cvae_objective, cvae_sample
from fastar_lab.heads.shortcut import (
    CallCounter,
    ShortcutHead,
    euler_sample,
    expand_flow_matching_params,
    interpolate,
    sample_step_size,
    self_consistency_residual,
    shortcut_objective,
)
from fastar_lab.models import BackboneKind, CfgSchedule, HeadKind, OptimConfig, Precision, RunConfig, SamplerSpec
from fastar_lab.toylab import BatchSampler

logger = logging.getLogger(__name__)

ParamArrays = dict[str, np.ndarray]


def cosine_plan(ar_iters: int, total_tokens: int) -> list[int]:
    """Tokens generated per iteration under the ceil-cosine rule.

    remaining(k) = ceil(T cos(pi/2 k/K)) with remaining(K) = 0; iterations
    that would generate nothing are dropped.
    """
    if not 1 <= ar_iters <= total_tokens:
        raise DomainError(f"AR iterations K={ar_iters} must lie in 1..{total_tokens}")
    remaining = [math.ceil(round(total_tokens * math.cos(math.pi / 2.0 * k / ar_iters), 9)) for k in range(ar_iters)]
    remaining.append(0)
    counts = [remaining[k - 1] - remaining[k] for k in range(1, ar_iters + 1)]
    return [c for c in counts if c > 0]


def param_dtype(precision: Precision):
    return np.float32 if precision == Precision.FLOAT32 else np.float64


class FarModel:
    """Conditioner plus head sharing one parameter namespace."""

    def __init__(
        self,
        conditioner: MaskedConditioner | CausalConditioner,
        head: ShortcutHead | CvaeHead,
        head_kind: HeadKind,
        kl_weight: float = 0.01,
    ):
        self.conditioner = conditioner
        self.head = head
        self.head_kind = head_kind
        self.kl_weight = kl_weight

    @classmethod
    def from_config(cls, config: RunConfig, head_kind: HeadKind | None = None) -> "FarModel":
        head_kind = head_kind or config.head_kind
        conditioner = build_conditioner(config.backbone_config())
        if head_kind == HeadKind.CVAE:
            cvae = config.cvae_config()
            return cls(conditioner, CvaeHead(cvae), head_kind, kl_weight=cvae.kl_weight)
        return cls(conditioner, ShortcutHead(config.head_config(head_kind)), head_kind)

    @property
    def backbone_kind(self) -> BackboneKind:
        return self.conditioner.config.kind

    @property
    def tokens(self) -> int:
        return self.conditioner.config.max_sequence

    @property
    def null_label(self) -> int:
        return self.conditioner.config.null_label

    def init(self, rng: np.random.Generator, dtype=np.float64) -> ParamArrays:
        backbone_rng, head_rng = rng.spawn(2)
        return {**self.conditioner.init(backbone_rng, dtype), **self.head.init(head_rng, dtype)}

    def head_objective(
        self, params, z1, c, ema_params: Mapping[str, np.ndarray], rng: np.random.Generator
    ) -> dict[str, Tensor]:
        """Head losses on flattened (tokens, conditions) pairs."""
        if self.head_kind == HeadKind.CVAE:
            eps = rng.standard_normal((z1.shape[0], self.head.config.latent_dim)).astype(z1.dtype)
            return cvae_objective(self.head, params, z1, c, eps, self.kl_weight)
        return shortcut_objective(self.head, params, ema_params, z1, c, rng)


@dataclass
class TrainState:
    """Live parameters, optimizer moments and EMA shadow."""

    params: ParamArrays
    optim: OptimState
    ema: EmaState
    step: int = 0

    @classmethod
    def create(cls, params: ParamArrays, config: OptimConfig) -> "TrainState":
        optim = OptimState.create(
            params,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            weight_decay=config.weight_decay,
            eps=config.eps,
        )
        return cls(params=params, optim=optim, ema=EmaState.create(params, decay=config.ema_decay))

    def to_records(self) -> ParamArrays:
        return {
            **prefixed("param", self.params),
            **prefixed("ema", self.ema.shadow),
            **prefixed("adam_m", self.optim.m),
            **prefixed("adam_v", self.optim.v),
        }

    @classmethod
    def from_records(cls, records: Mapping[str, np.ndarray], step: int, config: OptimConfig) -> "TrainState":
        params = group(records, "param")
        if not params:
            raise CheckpointError("checkpoint holds no parameters")
        state = cls.create(params, config)
        ema = group(records, "ema") or {k: v.copy() for k, v in params.items()}
        state.ema = replace(state.ema, shadow=ema)
        moments_m, moments_v = group(records, "adam_m"), group(records, "adam_v")
        if moments_m and moments_v:
            state.optim = replace(state.optim, m=moments_m, v=moments_v, step=step)
        state.step = step
        return state


def _drop_labels(labels: np.ndarray, null_label: int, probability: float, rng: np.random.Generator) -> np.ndarray:
    drop = rng.random(labels.shape[0]) < probability
    return np.where(drop, null_label, labels)


def _apply_update(
    state: TrainState, objective: Callable, config: OptimConfig, extra: dict[str, float]
) -> tuple[TrainState, dict[str, float]]:
    outputs, grads = forward_backward(objective, state.params)
    report: dict[str, float] = {"step": state.step}
    for name, value in outputs.items():
        value = float(np.asarray(value).reshape(-1)[0])
        if not math.isfinite(value):
            raise NonFiniteError(f"training {name}", step=state.step)
        report[name] = value
    grads, norm = clip_global_norm(grads, config.grad_clip)
    lr = lr_at(state.step, config.lr, config.warmup_steps)
    params, optim = adamw_step(state.params, grads, state.optim, lr=lr)
    ema = ema_update(state.ema, params)
    report.update(grad_norm=norm, lr=lr, **extra)
    return TrainState(params=params, optim=optim, ema=ema, step=state.step + 1), report


def train_step(
    model: FarModel,
    state: TrainState,
    tokens: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    config: OptimConfig,
    mask_ratio: float | None = None,
) -> tuple[TrainState, dict[str, float]]:
    """One masked-AR update of conditioner and head together.

    Tokens are (B, T, token_dim). Each row gets its own random mask; the head
    losses run on the masked positions only.
    """
    tokens = np.asarray(tokens, dtype=next(iter(state.params.values())).dtype)
    if tokens.shape[0] == 0:
        raise DomainError("training batch is empty")
    mask_rng, drop_rng, loss_rng = rng.spawn(3)
    labels = _drop_labels(np.asarray(labels, dtype=np.int64), model.null_label, config.label_dropout, drop_rng)
    mask = partition_tokens(
        tokens.shape[1],
        mask_rng,
        (config.mask_ratio_min, config.mask_ratio_max),
        batch_size=tokens.shape[0],
        ratio=mask_ratio,
    )
    rows = np.arange(tokens.shape[0])[:, None]
    z1 = tokens[rows, mask.masked].reshape(-1, tokens.shape[2])
    ema = state.ema.shadow

    def objective(leaves):
        c = model.conditioner(leaves, tokens, mask, labels)
        c = ops.reshape(c, (-1, c.shape[-1]))
        return model.head_objective(leaves, z1, c, ema, loss_rng)

    return _apply_update(state, objective, config, {"mask_ratio": mask.ratio})


def causal_train_step(
    model: FarModel,
    state: TrainState,
    tokens: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    config: OptimConfig,
) -> tuple[TrainState, dict[str, float]]:
    """One update with the conditions of all T tokens computed by a single causal pass over the true tokens."""
    tokens = np.asarray(tokens, dtype=next(iter(state.params.values())).dtype)
    if tokens.shape[0] == 0:
        raise DomainError("training batch is empty")
    drop_rng, loss_rng = rng.spawn(2)
    labels = _drop_labels(np.asarray(labels, dtype=np.int64), model.null_label, config.label_dropout, drop_rng)
    z1 = tokens.reshape(-1, tokens.shape[2])
    ema = state.ema.shadow

    def objective(leaves):
        c = model.conditioner(leaves, tokens, labels, length=tokens.shape[1])
        c = ops.reshape(c, (-1, c.shape[-1]))
        return model.head_objective(leaves, z1, c, ema, loss_rng)

    return _apply_update(state, objective, config, {})


def fit(
    model: FarModel,
    state: TrainState,
    config: RunConfig,
    sampler: BatchSampler,
    streams: RngStreams,
    steps: int,
    progress: bool = False,
) -> Iterator[tuple[TrainState, dict[str, float]]]:
    """Run ``steps`` updates from ``state``; yields the state and loss report after each.

    Batch and update randomness come from the ``data`` and ``train`` streams
    keyed by the global step, so a resumed run repeats an uninterrupted one.
    """
    step_fn = causal_train_step if model.backbone_kind == BackboneKind.CAUSAL else train_step
    for _ in tqdm(range(steps), desc=config.run_id, disable=not progress):
        tokens, labels = sampler(streams.stream("data", state.step), config.train.batch_size)
        state, report = step_fn(model, state, tokens, labels, streams.stream("train", state.step), config.optim)
        yield state, report


def widen_to_shortcut(
    fm_model: FarModel, state: TrainState, config: RunConfig, rng: np.random.Generator
) -> tuple[FarModel, TrainState]:
    """Turn a pre-trained flow-matching model into a shortcut model with identical outputs.

    The optimizer restarts; the EMA shadow is widened the same way as the
    live parameters.
    """
    if fm_model.head_kind != HeadKind.FLOW_MATCHING:
        raise ConfigError("only flow-matching models can be widened")
    model = FarModel.from_config(config, HeadKind.FM_TO_SHORTCUT)
    params = expand_flow_matching_params(state.params, model.head, rng)
    widened = TrainState.create(params, config.optim)
    added = {name: params[name] for name in params.keys() - state.params.keys()}
    widened.ema = replace(widened.ema, shadow={**state.ema.shadow, **added})
    widened.step = state.step
    return model, widened


def _heldout_pairs(model: FarModel, params, tokens, labels, rng: np.random.Generator, mask_ratio: float | None):
    """Flattened (token, condition) pairs as the training step would form them, without gradients."""
    tokens = np.asarray(tokens, dtype=next(iter(params.values())).dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if model.backbone_kind == BackboneKind.CAUSAL:
        c = model.conditioner(params, tokens, labels, length=tokens.shape[1]).data
        z1 = tokens
    else:
        mask = partition_tokens(tokens.shape[1], rng, batch_size=tokens.shape[0], ratio=mask_ratio)
        c = model.conditioner(params, tokens, mask, labels).data
        z1 = tokens[np.arange(tokens.shape[0])[:, None], mask.masked]
    return z1.reshape(-1, tokens.shape[2]), c.reshape(-1, c.shape[-1])


def measure_self_consistency(
    model: FarModel,
    params,
    tokens: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    mask_ratio: float | None = None,
) -> float:
    """Self-consistency residual of the head at conditions computed from held-out grids.

    Masked backbones see a random partition of each grid (``mask_ratio`` or
    the default training range), causal ones the whole grid. Noise, t and d
    are drawn like the consistency loss draws them, so one seed compares
    checkpoints on identical inputs.
    """
    if not isinstance(model.head, ShortcutHead):
        raise ConfigError("self-consistency needs a velocity head")
    mask_rng, path_rng = rng.spawn(2)
    z1, c = _heldout_pairs(model, params, tokens, labels, mask_rng, mask_ratio)
    z0 = path_rng.standard_normal(z1.shape)
    t = path_rng.random(z1.shape[0])
    d = sample_step_size(t, path_rng)
    z_t = interpolate(z0, z1, t, model.head.config.sigma_min).astype(z1.dtype)
    return self_consistency_residual(model.head, params, z_t, t, d, c)


def measure_reconstruction(
    model: FarModel,
    params,
    tokens: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    mask_ratio: float | None = None,
) -> dict[str, float]:
    """Held-out C-VAE reconstruction MSE, KL and token count; the reparameterisation noise comes from ``rng``."""
    if model.head_kind != HeadKind.CVAE:
        raise ConfigError("reconstruction needs a C-VAE head")
    mask_rng, eps_rng = rng.spawn(2)
    z1, c = _heldout_pairs(model, params, tokens, labels, mask_rng, mask_ratio)
    eps = eps_rng.standard_normal((z1.shape[0], model.head.config.latent_dim)).astype(z1.dtype)
    outputs = cvae_objective(model.head, params, z1, c, eps, model.kl_weight)
    return {"recon": outputs["recon"].item(), "kl": outputs["kl"].item(), "n_tokens": z1.shape[0]}


@dataclass
class GenerationState:
    """Token grid with generated/pending status per position."""

    tokens: np.ndarray
    generated: np.ndarray
    rng: np.random.Generator
    counter: CallCounter = field(default_factory=CallCounter)
    iteration: int = 0
    order: np.ndarray | None = None

    def __post_init__(self):
        if self.order is None:
            self.order = np.where(self.generated, -1, -2)

    @property
    def complete(self) -> bool:
        return bool(self.generated.all())

    @property
    def progress(self) -> float:
        return float(self.generated.sum(axis=1).min()) / self.generated.shape[1]

    def commit(self, positions: np.ndarray, values: np.ndarray) -> None:
        """Write freshly generated tokens; positions already generated are never overwritten."""
        rows = np.arange(self.tokens.shape[0])[:, None]
        if np.any(self.generated[rows, positions]):
            raise DomainError("attempted to regenerate an already generated position")
        self.tokens[rows, positions] = values
        self.generated[rows, positions] = True
        self.order[rows, positions] = self.iteration
        self.iteration += 1


@dataclass
class GenerationResult:
    tokens: np.ndarray
    counter: CallCounter
    order: np.ndarray
    conditions: Optional[np.ndarray] = None
    cache_appends: Optional[list[int]] = None


def _sample_tokens(
    model: FarModel,
    params,
    c: np.ndarray,
    c_uncond: np.ndarray | None,
    weight: float,
    sampler: SamplerSpec,
    rng: np.random.Generator,
    counter: CallCounter,
) -> np.ndarray:
    if model.head_kind == HeadKind.CVAE:
        return cvae_sample(model.head, params, c, rng, counter=counter)
    return euler_sample(model.head, params, c, sampler, rng, c_uncond=c_uncond, cfg_weight=weight, counter=counter)


def _labels_array(labels, batch: int | None = None) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if batch is not None and labels.size == 1:
        labels = np.full(batch, int(labels[0]))
    return labels


def far_generate(
    model: FarModel,
    params,
    labels,
    ar_iters: int,
    sampler: SamplerSpec,
    cfg: CfgSchedule,
    rng: np.random.Generator,
    known: np.ndarray | None = None,
    known_mask: np.ndarray | None = None,
) -> GenerationResult:
    """Masked-AR generation of one token grid per label.

    Follows the cosine plan over the pending positions; each iteration picks
    its positions uniformly among the pending ones, conditions on every
    token generated so far and samples them with the head. ``known`` and
    ``known_mask`` (B, T) clamp positions that are never generated.
    """
    if not isinstance(model.conditioner, MaskedConditioner):
        raise ConfigError("far_generate needs a masked conditioner")
    known_batch = None
    if known is not None:
        # (T, d) clamps are shared by every grid, (B, T, d) ones are per grid
        known_batch = np.shape(known)[0] if np.ndim(known) == 3 else 1
    labels = _labels_array(labels, known_batch)
    batch, total = labels.shape[0], model.tokens
    dtype = next(iter(params.values())).dtype
    tokens = np.zeros((batch, total, model.conditioner.config.token_dim), dtype=dtype)
    generated = np.zeros((batch, total), dtype=bool)
    if known_mask is not None:
        generated = np.array(np.broadcast_to(known_mask, (batch, total)), dtype=bool)
        tokens[generated] = np.broadcast_to(np.asarray(known, dtype=dtype), tokens.shape)[generated]
    state = GenerationState(tokens=tokens, generated=generated, rng=rng)

    pending = total - int(generated.sum(axis=1).max()) if batch else 0
    plan = cosine_plan(min(ar_iters, pending), pending) if pending else []
    null_labels = np.full(batch, model.null_label)
    rows = np.arange(batch)[:, None]
    for count in plan:
        mask = MaskSet.from_known(state.generated)
        weight = cfg.effective_weight(state.progress)
        c = model.conditioner(params, state.tokens, mask, labels).data
        c_uncond = model.conditioner(params, state.tokens, mask, null_labels).data if weight != 1.0 else None
        choice = np.argsort(rng.random(mask.masked.shape), axis=1)[:, :count]
        positions = mask.masked[rows, choice]
        cond_dim = c.shape[-1]
        c_sel = c[rows, choice].reshape(-1, cond_dim)
        u_sel = None if c_uncond is None else c_uncond[rows, choice].reshape(-1, cond_dim)
        values = _sample_tokens(model, params, c_sel, u_sel, weight, sampler, rng, state.counter)
        state.commit(positions, values.reshape(batch, count, -1))
        logger.debug("Iteration %d generated %d tokens per sample (cfg weight %.3f)", state.iteration, count, weight)

    if not state.complete:
        pending = int((~state.generated).sum())
        raise GenerationIncompleteError(f"{pending} positions still pending after {len(plan)} iterations")
    return GenerationResult(tokens=state.tokens, counter=state.counter, order=state.order)


def causal_generate(
    model: FarModel,
    params,
    labels,
    sampler: SamplerSpec,
    cfg: CfgSchedule,
    rng: np.random.Generator,
    use_cache: bool = True,
) -> GenerationResult:
    """Raster-order generation, one token per backbone step.

    With ``use_cache`` each step feeds a single slot through the KV cache;
    without it the whole prefix is recomputed. Both produce the same tokens
    for the same ``rng``.
    """
    if not isinstance(model.conditioner, CausalConditioner):
        raise ConfigError("causal_generate needs a causal conditioner")
    conditioner = model.conditioner
    labels = _labels_array(labels)
    batch, total = labels.shape[0], model.tokens
    dtype = next(iter(params.values())).dtype
    null_labels = np.full(batch, model.null_label)
    state = GenerationState(
        tokens=np.zeros((batch, total, conditioner.config.token_dim), dtype=dtype),
        generated=np.zeros((batch, total), dtype=bool),
        rng=rng,
    )
    conditions = np.zeros((batch, total, conditioner.config.embed_dim), dtype=dtype)
    cache, uncond_cache = conditioner.new_cache(), conditioner.new_cache()
    guided = cfg.weight != 1.0

    for i in range(1, total + 1):
        weight = cfg.effective_weight((i - 1) / total)
        previous = state.tokens[:, i - 2] if i > 1 else None
        if use_cache:
            c, cache = conditioner.step(params, labels, previous, cache, position=i)
            c = c.data
            if guided:
                c_uncond, uncond_cache = conditioner.step(params, null_labels, previous, uncond_cache, position=i)
                c_uncond = c_uncond.data
        else:
            c = conditioner(params, state.tokens, labels, length=i).data[:, i - 1]
            if guided:
                c_uncond = conditioner(params, state.tokens, null_labels, length=i).data[:, i - 1]
        conditions[:, i - 1] = c
        c_null = c_uncond if guided and weight != 1.0 else None
        values = _sample_tokens(model, params, c, c_null, weight, sampler, rng, state.counter)
        state.commit(np.full((batch, 1), i - 1), values.reshape(batch, 1, -1))

    return GenerationResult(
        tokens=state.tokens,
        counter=state.counter,
        order=state.order,
        conditions=conditions,
        cache_appends=list(cache.appends) if use_cache else None,
    )


def _chunk_rows(values: np.ndarray | None, start: int, size: int, batched_ndim: int) -> np.ndarray | None:
    if values is None:
        return None
    values = np.asarray(values)
    if values.ndim == batched_ndim:
        return values[start:start + size]
    return np.broadcast_to(values, (size, *values.shape))


def generate(
    model: FarModel,
    params,
    labels,
    ar_iters: int,
    sampler: SamplerSpec,
    cfg: CfgSchedule,
    rng: np.random.Generator,
    chunk_size: int | None = None,
    known: np.ndarray | None = None,
    known_mask: np.ndarray | None = None,
) -> GenerationResult:
    """Dispatch to the masked or causal pipeline, ``chunk_size`` labels at a time.

    Chunks run in order on the same ``rng``. Clamps apply to the masked
    pipeline only; unbatched clamps are shared by every sample.
    """
    labels = _labels_array(labels)
    chunk_size = chunk_size or max(labels.size, 1)
    tokens, orders, counter = [], [], CallCounter()
    for start in range(0, labels.size, chunk_size):
        chunk = labels[start:start + chunk_size]
        if model.backbone_kind == BackboneKind.CAUSAL:
            if known_mask is not None:
                raise ConfigError("clamped generation needs a masked conditioner")
            result = causal_generate(model, params, chunk, sampler, cfg, rng)
        else:
            result = far_generate(
                model,
                params,
                chunk,
                ar_iters,
                sampler,
                cfg,
                rng,
                known=_chunk_rows(known, start, chunk.size, 3),
                known_mask=_chunk_rows(known_mask, start, chunk.size, 2),
            )
        tokens.append(result.tokens)
        orders.append(result.order)
        counter.token_steps += result.counter.token_steps
        counter.decoder_calls += result.counter.decoder_calls
        for d, calls in result.counter.by_d.items():
            counter.by_d[d] = counter.by_d.get(d, 0) + calls
    return GenerationResult(tokens=np.concatenate(tokens), counter=counter, order=np.concatenate(orders))
