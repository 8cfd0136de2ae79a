"""Analytic inference-cost accounting for masked and causal token generators.

Only matrix products are counted, at 2 FLOPs per multiply-add; norms,
activations and softmax are ignored. All tallies are Python integers, so
totals are exact and additive.

Transformer block with L new tokens attending to L_total keys (embed dim D,
MLP ratio 4):

    projections (QKV + output)   8 L D^2
    MLP                         16 L D^2
    scores and weighted values   4 L L_total D

Head call (one token, width W, depth n):

    input/cond projections       2 W (token_dim + cond_dim)
    t (and d) embedders          2 (F W + W^2) each
    residual blocks              n (6 W^2 modulation + 4 W^2 MLP)
    final layer                  4 W^2 modulation + 2 W token_dim
"""

from __future__ import annotations

import logging
from typing import NamedTuple, Optional

from pydantic import BaseModel, Field, model_validator

from fastar_lab.ar_engine import cosine_plan
from fastar_lab.exceptions import DomainError
from fastar_lab.models import BackboneKind

logger = logging.getLogger(__name__)

FLOPS_PER_MAC = 2
MLP_RATIO = 4
DOCUMENTED_HEAD_WIDTH = 1024
FLOP_CONVENTION = "FLOPs count matrix products only at 2 FLOPs per multiply-add; MLP ratio 4"
SHARE_BRACKET = (0.55, 0.70)
MIN_SPEEDUP = 2.0
MAJORITY_AR_ITERS = (32, 64, 256)


class HeadSpec(BaseModel):
    """Per-token MLP head."""

    depth: int = Field(default=6, ge=0)
    width: int = Field(default=DOCUMENTED_HEAD_WIDTH, gt=0)
    token_dim: int = Field(default=16, gt=0)
    cond_dim: int = Field(default=768, gt=0)
    freq_dim: int = Field(default=256, gt=0)
    step_size_embedding: bool = True


class ArchSpec(BaseModel):
    """Backbone and head dimensions of one generator."""

    arch_id: str
    kind: BackboneKind = BackboneKind.MASKED
    embed_dim: int = Field(default=768, gt=0)
    num_heads: int = Field(default=12, gt=0)
    encoder_depth: int = Field(default=12, ge=0)
    decoder_depth: int = Field(default=12, ge=0)
    depth: int = Field(default=24, ge=0)
    cls_repeat: int = Field(default=64, ge=1)
    tokens: int = Field(default=256, gt=0)
    batch_size: int = Field(default=1, gt=0)
    head: HeadSpec = Field(default_factory=HeadSpec)

    @model_validator(mode="after")
    def check_depths(self):
        if self.kind == BackboneKind.MASKED and (self.encoder_depth < 1 or self.decoder_depth < 1):
            raise ValueError("masked backbones need encoder and decoder depths of at least 1")
        if self.kind == BackboneKind.CAUSAL and self.depth < 1:
            raise ValueError("causal backbones need a depth of at least 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self

    def with_head_width(self, width: int) -> "ArchSpec":
        return self.model_copy(update={"head": self.head.model_copy(update={"width": width})})


class BlockFlops(NamedTuple):
    projections: int
    mlp: int
    attention: int

    @property
    def total(self) -> int:
        return self.projections + self.mlp + self.attention


class IterationCost(BaseModel):
    iteration: int
    tokens: int
    backbone_flops: int
    head_flops: int


class CostBreakdown(BaseModel):
    """Whole-run totals of one (arch, K, O, kv_cache) configuration."""

    arch_id: str
    kind: BackboneKind
    ar_iters: int
    denoise_steps: int
    kv_cache: bool
    head_width: int
    backbone_flops: int
    head_flops: int
    head_calls: int
    iterations: list[IterationCost] = []

    @property
    def total_flops(self) -> int:
        return self.backbone_flops + self.head_flops

    @property
    def head_share(self) -> float:
        return self.head_flops / self.total_flops if self.total_flops else 0.0


def attention_block_terms(embed_dim: int, seq_len: int, kv_cache: bool = False, cached_len: int = 0) -> BlockFlops:
    """Projection, MLP and attention FLOPs of one block for ``seq_len`` new tokens."""
    total_len = seq_len + (cached_len if kv_cache else 0)
    d2 = embed_dim * embed_dim
    return BlockFlops(
        projections=FLOPS_PER_MAC * 4 * seq_len * d2,
        mlp=FLOPS_PER_MAC * 2 * MLP_RATIO * seq_len * d2,
        attention=FLOPS_PER_MAC * 2 * seq_len * total_len * embed_dim,
    )


def flops_attention_block(embed_dim: int, heads: int, seq_len: int, kv_cache: bool = False, cached_len: int = 0) -> int:
    """FLOPs of one transformer block; the head count does not change the matmul tally."""
    if embed_dim % heads:
        raise DomainError("embed_dim must be divisible by heads")
    return attention_block_terms(embed_dim, seq_len, kv_cache, cached_len).total


def head_layer_flops(head: HeadSpec) -> int:
    """FLOPs of the residual blocks alone."""
    w2 = head.width * head.width
    return head.depth * FLOPS_PER_MAC * (3 * w2 + 2 * w2)


def flops_head_call(head: HeadSpec) -> int:
    """FLOPs of one head evaluation for one token; a depth-0 head costs nothing."""
    if head.depth == 0:
        return 0
    w = head.width
    embedders = 2 if head.step_size_embedding else 1
    return (
        FLOPS_PER_MAC * w * (head.token_dim + head.cond_dim)
        + embedders * FLOPS_PER_MAC * (head.freq_dim * w + w * w)
        + head_layer_flops(head)
        + FLOPS_PER_MAC * (2 * w * w + w * head.token_dim)
    )


def _masked_iterations(arch: ArchSpec, ar_iters: int, denoise_steps: int) -> list[IterationCost]:
    per_call = flops_head_call(arch.head)
    rows, known = [], 0
    decoder_len = arch.cls_repeat + arch.tokens
    decoder = arch.decoder_depth * flops_attention_block(arch.embed_dim, arch.num_heads, decoder_len)
    for i, count in enumerate(cosine_plan(ar_iters, arch.tokens)):
        encoder = arch.encoder_depth * flops_attention_block(arch.embed_dim, arch.num_heads, arch.cls_repeat + known)
        rows.append(
            IterationCost(
                iteration=i,
                tokens=count,
                backbone_flops=arch.batch_size * (encoder + decoder),
                head_flops=arch.batch_size * count * denoise_steps * per_call,
            )
        )
        known += count
    return rows


def _causal_iterations(arch: ArchSpec, denoise_steps: int, kv_cache: bool) -> list[IterationCost]:
    per_call = flops_head_call(arch.head)
    rows = []
    for i in range(arch.tokens):
        if kv_cache:
            block = flops_attention_block(arch.embed_dim, arch.num_heads, 1, kv_cache=True, cached_len=i)
        else:
            block = flops_attention_block(arch.embed_dim, arch.num_heads, i + 1)
        rows.append(
            IterationCost(
                iteration=i,
                tokens=1,
                backbone_flops=arch.batch_size * arch.depth * block,
                head_flops=arch.batch_size * denoise_steps * per_call,
            )
        )
    return rows


def breakdown(arch: ArchSpec, ar_iters: int, denoise_steps: int, kv_cache: bool = True) -> CostBreakdown:
    """Backbone and head FLOPs of generating one batch.

    Masked backbones follow the cosine plan: the encoder sees the CLS copies
    plus the known tokens, the decoder sees the CLS copies plus all T
    positions. Causal backbones take one step per token (``ar_iters`` is T)
    with or without a KV cache.
    """
    if denoise_steps < 1:
        raise DomainError("denoise_steps must be at least 1")
    if arch.kind == BackboneKind.MASKED:
        if not 1 <= ar_iters <= arch.tokens:
            raise DomainError(f"ar_iters={ar_iters} outside 1..{arch.tokens}")
        rows = _masked_iterations(arch, ar_iters, denoise_steps)
        kv_cache = False
    else:
        ar_iters = arch.tokens
        rows = _causal_iterations(arch, denoise_steps, kv_cache)
    return CostBreakdown(
        arch_id=arch.arch_id,
        kind=arch.kind,
        ar_iters=ar_iters,
        denoise_steps=denoise_steps,
        kv_cache=kv_cache,
        head_width=arch.head.width,
        backbone_flops=sum(r.backbone_flops for r in rows),
        head_flops=sum(r.head_flops for r in rows),
        head_calls=arch.batch_size * arch.tokens * denoise_steps,
        iterations=rows,
    )


def kv_cache_comparison(arch: ArchSpec, tokens: Optional[int] = None) -> tuple[int, int]:
    """Causal backbone FLOPs for ``tokens`` steps (with cache, without cache)."""
    tokens = arch.tokens if tokens is None else tokens
    depth = arch.depth if arch.kind == BackboneKind.CAUSAL else arch.encoder_depth + arch.decoder_depth
    dim, heads = arch.embed_dim, arch.num_heads
    with_cache = sum(flops_attention_block(dim, heads, 1, kv_cache=True, cached_len=i) for i in range(tokens))
    without = sum(flops_attention_block(dim, heads, i + 1) for i in range(tokens))
    return arch.batch_size * depth * with_cache, arch.batch_size * depth * without


def speedup(fast: CostBreakdown, slow: CostBreakdown) -> float:
    """Ratio of total FLOPs, slow over fast."""
    return slow.total_flops / fast.total_flops


def preset(name: str, head_width: int = DOCUMENTED_HEAD_WIDTH) -> ArchSpec:
    """Named architectures; the head width is an assumption and defaults to 1024."""
    head = HeadSpec(depth=6, width=head_width, token_dim=16, cond_dim=768)
    match name:
        case "mar-b":
            return ArchSpec(arch_id=name, head=head.model_copy(update={"step_size_embedding": False}))
        case "far-b":
            return ArchSpec(arch_id=name, head=head)
        case "far-l":
            return ArchSpec(
                arch_id=name,
                embed_dim=1024,
                num_heads=16,
                encoder_depth=16,
                decoder_depth=16,
                head=head.model_copy(update={"cond_dim": 1024}),
            )
        case "far-b-causal":
            return ArchSpec(arch_id=name, kind=BackboneKind.CAUSAL, depth=24, cls_repeat=1, head=head)
    raise DomainError(f"unknown architecture preset {name!r}; expected one of {', '.join(PRESETS)}")


PRESETS = ("mar-b", "far-b", "far-l", "far-b-causal")


def calibrate_head_width(
    arch: ArchSpec, ar_iters: int, denoise_steps: int, target_share: float = 0.63, low: int = 1, high: int = 1 << 15
) -> int:
    """Smallest head width whose FLOP share at (K, O) reaches ``target_share``; found by bisection."""
    if not 0.0 < target_share < 1.0:
        raise DomainError("target share must lie in (0, 1)")

    def share(width: int) -> float:
        return breakdown(arch.with_head_width(width), ar_iters, denoise_steps).head_share

    if share(high) < target_share:
        raise DomainError(f"share {target_share} not reachable below width {high}")
    while low < high:
        mid = (low + high) // 2
        if share(mid) >= target_share:
            high = mid
        else:
            low = mid + 1
    logger.info(
        "Head width %d gives share %.3f for %s at K=%d, O=%d", low, share(low), arch.arch_id, ar_iters, denoise_steps
    )
    return low


def cost_grid(archs: list[ArchSpec], ar_iters: list[int], denoise_steps: list[int]) -> list[CostBreakdown]:
    """Every (arch, K, O) breakdown; causal archs appear once per O with and without cache."""
    rows = []
    for arch in archs:
        for steps in denoise_steps:
            if arch.kind == BackboneKind.CAUSAL:
                rows.extend(breakdown(arch, arch.tokens, steps, kv_cache=cache) for cache in (True, False))
                continue
            for k in ar_iters:
                if k > arch.tokens:
                    raise DomainError(f"ar_iters={k} exceeds {arch.tokens} tokens for {arch.arch_id}")
                rows.append(breakdown(arch, k, steps))
    return rows


class CostCheck(NamedTuple):
    """One pass/fail statement about the MAR-B-like reference at a given head width."""

    name: str
    value: float
    passed: bool
    head_width: int

    def comment(self, label: str) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name} ({label} width {self.head_width}): {self.value:.3f}"


def reference_checks(head_width: int = DOCUMENTED_HEAD_WIDTH) -> list[CostCheck]:
    """Head-share bracket and majority at O=100, and the far-b O=8 over mar-b O=100 speedup at K=64."""
    mar, far = preset("mar-b", head_width), preset("far-b", head_width)
    low, high = SHARE_BRACKET
    share = breakdown(mar, 64, 100).head_share
    bracket = f"mar-b head share at K=64, O=100 in [{low:.2f}, {high:.2f}]"
    checks = [CostCheck(bracket, share, low <= share <= high, head_width)]
    ratio = speedup(breakdown(far, 64, 8), breakdown(mar, 64, 100))
    faster = f"far-b O=8 speedup over mar-b O=100 at K=64 >= {MIN_SPEEDUP:g}"
    checks.append(CostCheck(faster, ratio, ratio >= MIN_SPEEDUP, head_width))
    for k in MAJORITY_AR_ITERS:
        share = breakdown(mar, k, 100).head_share
        checks.append(CostCheck(f"mar-b head share at K={k}, O=100 > 0.5", share, share > 0.5, head_width))
    return checks


def reference_comments(target_share: float = 0.63, calibrated_width: Optional[int] = None) -> list[str]:
    """PASS/FAIL report lines for the documented head width and for the width calibrated to ``target_share``."""
    if calibrated_width is None:
        calibrated_width = calibrate_head_width(preset("mar-b"), 64, 100, target_share)
    lines = []
    for label, width in (("documented", DOCUMENTED_HEAD_WIDTH), ("calibrated", calibrated_width)):
        lines.extend(check.comment(label) for check in reference_checks(width))
    return lines
