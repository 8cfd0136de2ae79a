"""Condition generators: masked bidirectional encoder-decoder and causal transformer.

Both map a partially known token grid plus a class label to one condition
vector per token still to be generated. Grids are flattened in raster order;
class row ``num_classes`` of the class table is the learned null condition
used for classifier-free guidance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from fastar_lab.diffcore import ops
from fastar_lab.diffcore.tensor import Tensor, as_tensor
from fastar_lab.exceptions import CacheLengthError, DomainError, ShapeMismatchError
from fastar_lab.heads.layers import Linear, Params
from fastar_lab.models import BackboneConfig

logger = logging.getLogger(__name__)

EMBED_INIT_STD = 0.02


def flatten_grid(grid: np.ndarray) -> np.ndarray:
    """(B, h, w, d) -> (B, h*w, d) in raster order."""
    grid = np.asarray(grid)
    return grid.reshape(grid.shape[0], grid.shape[1] * grid.shape[2], grid.shape[3])


def unflatten_grid(tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """(B, h*w, d) -> (B, h, w, d)."""
    tokens = np.asarray(tokens)
    if tokens.shape[1] != height * width:
        raise ShapeMismatchError("unflatten_grid", f"{tokens.shape[1]} tokens for a {height}x{width} grid")
    return tokens.reshape(tokens.shape[0], height, width, tokens.shape[2])


@dataclass(frozen=True)
class MaskSet:
    """Per-row partition of raster positions into known (U) and masked (M) sets."""

    total: int
    unmasked: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        if self.unmasked.shape[0] != self.masked.shape[0]:
            raise ShapeMismatchError("MaskSet", "unmasked and masked sets disagree on batch size")
        if self.unmasked.shape[1] + self.masked.shape[1] != self.total:
            raise ShapeMismatchError("MaskSet", "U and M must partition every row")

    @property
    def batch_size(self) -> int:
        return self.masked.shape[0]

    @property
    def ratio(self) -> float:
        return self.masked.shape[1] / self.total

    @classmethod
    def from_known(cls, known: np.ndarray) -> "MaskSet":
        """Build from a boolean (B, T) known-position mask with equal counts per row."""
        known = np.asarray(known, dtype=bool)
        counts = known.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ShapeMismatchError("MaskSet", "every row must have the same number of known positions")
        total = known.shape[1]
        order = np.argsort(~known, axis=1, kind="stable")
        n_u = int(counts[0]) if counts.size else 0
        return cls(total=total, unmasked=order[:, :n_u], masked=order[:, n_u:])


def partition_tokens(
    n: int,
    rng: np.random.Generator,
    ratio_range: tuple[float, float] = (0.7, 1.0),
    batch_size: int = 1,
    ratio: float | None = None,
) -> MaskSet:
    """Draw a mask ratio uniformly from ``ratio_range`` and mask round(ratio * n) positions per row.

    At least one position is masked; positions are chosen uniformly without
    replacement, independently per row. ``ratio`` forces the ratio.
    """
    if n < 1:
        raise DomainError("partition needs at least one token")
    low, high = ratio_range
    if ratio is None:
        ratio = float(rng.uniform(low, high))
    n_masked = min(n, max(1, int(math.floor(ratio * n + 0.5))))
    order = np.argsort(rng.random((batch_size, n)), axis=1)
    masked = np.sort(order[:, :n_masked], axis=1)
    unmasked = np.sort(order[:, n_masked:], axis=1)
    return MaskSet(total=n, unmasked=unmasked, masked=masked)


class LayerNorm:
    """Layer norm with learned gain and bias."""

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.weight": np.ones(self.dim, dtype=dtype),
            f"{self.name}.bias": np.zeros(self.dim, dtype=dtype),
        }

    def __call__(self, params: Params, x) -> Tensor:
        return ops.add(ops.mul(ops.layernorm(x), params[f"{self.name}.weight"]), params[f"{self.name}.bias"])


@dataclass
class KvCache:
    """Per-layer keys and values of every processed slot; append-only."""

    num_layers: int
    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    appends: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.keys = [None] * self.num_layers
        self.values = [None] * self.num_layers
        self.appends = [0] * self.num_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def append(self, layer: int, key: np.ndarray, value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = key, value
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], key], axis=-2)
            self.values[layer] = np.concatenate([self.values[layer], value], axis=-2)
        self.appends[layer] += key.shape[-2]
        return self.keys[layer], self.values[layer]


def causal_mask(length: int, offset: int = 0, dtype=np.float64) -> np.ndarray:
    """Additive mask letting query i (at absolute slot offset + i) see slots <= offset + i."""
    q = np.arange(length)[:, None] + offset
    k = np.arange(offset + length)[None, :]
    return np.where(k <= q, 0.0, ops.MASK_VALUE).astype(dtype)


class TransformerBlock:
    """Pre-norm multi-head self-attention and GELU MLP."""

    def __init__(self, name: str, dim: int, num_heads: int, mlp_ratio: int = 4):
        self.name = name
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm1 = LayerNorm(f"{name}.norm1", dim)
        # bias-free qkv: a key bias has no effect on the softmax
        self.qkv = Linear(f"{name}.attn.qkv", dim, 3 * dim, bias=False)
        self.proj = Linear(f"{name}.attn.proj", dim, dim)
        self.norm2 = LayerNorm(f"{name}.norm2", dim)
        self.fc1 = Linear(f"{name}.mlp.fc1", dim, mlp_ratio * dim)
        self.fc2 = Linear(f"{name}.mlp.fc2", mlp_ratio * dim, dim)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        params = {}
        for part in (self.norm1, self.qkv, self.proj, self.norm2, self.fc1, self.fc2):
            params.update(part.init(rng, dtype))
        return params

    def attention(
        self, params: Params, x, mask: np.ndarray | None = None, cache: KvCache | None = None, layer: int = 0
    ) -> Tensor:
        batch, length, _ = x.shape
        qkv = ops.reshape(self.qkv(params, x), (batch, length, 3, self.num_heads, self.head_dim))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (ops.reshape(ops.slice_(qkv, i), (batch, self.num_heads, length, self.head_dim)) for i in range(3))
        if cache is not None:
            k_all, v_all = cache.append(layer, k.data, v.data)
            k, v = as_tensor(k_all), as_tensor(v_all)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = ops.add(scores, mask)
        out = ops.matmul(ops.softmax(scores, axis=-1), v)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (batch, length, self.dim))
        return self.proj(params, out)

    def __call__(
        self, params: Params, x, mask: np.ndarray | None = None, cache: KvCache | None = None, layer: int = 0
    ) -> Tensor:
        x = ops.add(x, self.attention(params, self.norm1(params, x), mask=mask, cache=cache, layer=layer))
        return ops.add(x, self.fc2(params, ops.gelu(self.fc1(params, self.norm2(params, x)))))


def _embedding(rng: np.random.Generator, rows: int, dim: int, dtype) -> np.ndarray:
    return (EMBED_INIT_STD * rng.standard_normal((rows, dim))).astype(dtype)


def _check_labels(labels, config: BackboneConfig) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() > config.num_classes):
        expected = f"0..{config.num_classes - 1} or the null label {config.num_classes}"
        raise DomainError(f"unknown class label; expected {expected}")
    return labels


def _check_positions(positions: np.ndarray, total: int) -> None:
    if positions.size and (positions.min() < 0 or positions.max() >= total):
        raise DomainError(f"position out of range for a {total}-token grid")


class MaskedConditioner:
    """Bidirectional encoder over known tokens plus CLS copies; decoder adds mask tokens for M."""

    def __init__(self, config: BackboneConfig, prefix: str = "backbone"):
        self.config = config
        self.prefix = prefix
        dim = config.embed_dim
        self.token_proj = Linear(f"{prefix}.encoder.token_proj", config.token_dim, dim)
        self.encoder = [
            TransformerBlock(f"{prefix}.encoder.blocks.{i}", dim, config.num_heads, config.mlp_ratio)
            for i in range(config.encoder_depth)
        ]
        self.encoder_norm = LayerNorm(f"{prefix}.encoder.norm", dim)
        self.decoder_embed = Linear(f"{prefix}.decoder.embed", dim, dim)
        self.decoder = [
            TransformerBlock(f"{prefix}.decoder.blocks.{i}", dim, config.num_heads, config.mlp_ratio)
            for i in range(config.decoder_depth)
        ]
        self.decoder_norm = LayerNorm(f"{prefix}.decoder.norm", dim)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        c, p = self.config, self.prefix
        params = {
            f"{p}.class_emb": _embedding(rng, c.num_classes + 1, c.embed_dim, dtype),
            f"{p}.encoder.buffer_pos": _embedding(rng, c.cls_repeat, c.embed_dim, dtype),
            f"{p}.encoder.pos": _embedding(rng, c.max_sequence, c.embed_dim, dtype),
            f"{p}.decoder.buffer_pos": _embedding(rng, c.cls_repeat, c.embed_dim, dtype),
            f"{p}.decoder.pos": _embedding(rng, c.max_sequence, c.embed_dim, dtype),
            f"{p}.decoder.mask_token": _embedding(rng, 1, c.embed_dim, dtype),
        }
        encoder = (self.token_proj, *self.encoder, self.encoder_norm)
        for part in (*encoder, self.decoder_embed, *self.decoder, self.decoder_norm):
            params.update(part.init(rng, dtype))
        return params

    def __call__(self, params: Params, tokens, mask: MaskSet, labels) -> Tensor:
        """masked_conditions: one condition per masked position, shape (B, |M|, embed_dim).

        Only the values of ``tokens`` (B, T, token_dim) at U positions are read.
        """
        c, p = self.config, self.prefix
        labels = _check_labels(labels, c)
        _check_positions(mask.unmasked, c.max_sequence)
        _check_positions(mask.masked, c.max_sequence)
        batch, n_u, n_m, r = mask.batch_size, mask.unmasked.shape[1], mask.masked.shape[1], c.cls_repeat
        if labels.shape[0] != batch:
            raise ShapeMismatchError("masked_conditions", f"{labels.shape[0]} labels for a batch of {batch}")

        class_emb = ops.reshape(ops.take(params[f"{p}.class_emb"], labels), (batch, 1, c.embed_dim))
        cls = ops.add(class_emb, params[f"{p}.encoder.buffer_pos"])
        x = cls
        if n_u:
            known = ops.batch_take(tokens, mask.unmasked)
            known = ops.add(self.token_proj(params, known), ops.take(params[f"{p}.encoder.pos"], mask.unmasked))
            x = ops.concat([cls, known], axis=1)
        for block in self.encoder:
            x = block(params, x)
        x = self.decoder_embed(params, self.encoder_norm(params, x))

        parts = [ops.add(ops.slice_(x, (slice(None), slice(0, r))), params[f"{p}.decoder.buffer_pos"])]
        if n_u:
            known = ops.slice_(x, (slice(None), slice(r, r + n_u)))
            parts.append(ops.add(known, ops.take(params[f"{p}.decoder.pos"], mask.unmasked)))
        parts.append(ops.add(ops.take(params[f"{p}.decoder.pos"], mask.masked), params[f"{p}.decoder.mask_token"]))
        x = ops.concat(parts, axis=1)
        for block in self.decoder:
            x = block(params, x)
        x = self.decoder_norm(params, x)
        return ops.slice_(x, (slice(None), slice(r + n_u, r + n_u + n_m)))


class CausalConditioner:
    """Causal transformer: slot 0 holds the class token, slot j the projected token z_j.

    The output at slot j - 1 is the condition c_j of token j (1-based).
    """

    def __init__(self, config: BackboneConfig, prefix: str = "backbone"):
        self.config = config
        self.prefix = prefix
        dim = config.embed_dim
        self.token_proj = Linear(f"{prefix}.token_proj", config.token_dim, dim)
        self.blocks = [
            TransformerBlock(f"{prefix}.blocks.{i}", dim, config.num_heads, config.mlp_ratio)
            for i in range(config.depth)
        ]
        self.norm = LayerNorm(f"{prefix}.norm", dim)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        c, p = self.config, self.prefix
        params = {
            f"{p}.class_emb": _embedding(rng, c.num_classes + 1, c.embed_dim, dtype),
            f"{p}.pos": _embedding(rng, c.max_sequence, c.embed_dim, dtype),
        }
        for part in (self.token_proj, *self.blocks, self.norm):
            params.update(part.init(rng, dtype))
        return params

    def new_cache(self) -> KvCache:
        return KvCache(num_layers=self.config.depth)

    def _slots(self, params: Params, tokens, labels: np.ndarray, count: int) -> Tensor:
        c, p = self.config, self.prefix
        batch = labels.shape[0]
        cls = ops.reshape(ops.take(params[f"{p}.class_emb"], labels), (batch, 1, c.embed_dim))
        if count > 1:
            prefix = ops.slice_(as_tensor(tokens), (slice(None), slice(0, count - 1)))
            x = ops.concat([cls, self.token_proj(params, prefix)], axis=1)
        else:
            x = cls
        return ops.add(x, ops.slice_(as_tensor(params[f"{p}.pos"]), slice(0, count)))

    def __call__(self, params: Params, tokens, labels, length: int | None = None) -> Tensor:
        """Conditions c_1..c_L from the true tokens z_1..z_{L-1}; shape (B, L, embed_dim)."""
        labels = _check_labels(labels, self.config)
        length = self.config.max_sequence if length is None else length
        if not 1 <= length <= self.config.max_sequence:
            raise DomainError(f"sequence length {length} outside 1..{self.config.max_sequence}")
        x = self._slots(params, tokens, labels, length)
        mask = causal_mask(length, dtype=x.dtype)
        for block in self.blocks:
            x = block(params, x, mask=mask)
        return self.norm(params, x)

    def step(
        self, params: Params, labels, token, cache: KvCache, position: int | None = None
    ) -> tuple[Tensor, KvCache]:
        """causal_condition: feed one slot through the cache and return c_i for i = cache.length + 1.

        The first call (empty cache) feeds the class token and ``token`` is
        ignored; later calls feed z_{i-1}.
        """
        c, p = self.config, self.prefix
        labels = _check_labels(labels, c)
        slot = cache.length
        if position is not None and position - 1 != slot:
            raise CacheLengthError(f"cache holds {slot} slots but condition {position} needs {position - 1}")
        if slot >= c.max_sequence:
            raise CacheLengthError(f"cache already holds {slot} of {c.max_sequence} slots")
        batch = labels.shape[0]
        if slot == 0:
            x = ops.take(params[f"{p}.class_emb"], labels)
        else:
            if token is None:
                raise CacheLengthError("a token is required once the class slot is cached")
            x = self.token_proj(params, token)
        x = ops.reshape(ops.add(x, ops.slice_(as_tensor(params[f"{p}.pos"]), slot)), (batch, 1, c.embed_dim))
        for layer, block in enumerate(self.blocks):
            x = block(params, x, cache=cache, layer=layer)
        return ops.reshape(self.norm(params, x), (batch, c.embed_dim)), cache


def build_conditioner(config: BackboneConfig, prefix: str = "backbone") -> MaskedConditioner | CausalConditioner:
    return MaskedConditioner(config, prefix) if config.kind == "masked" else CausalConditioner(config, prefix)
