"""Finite-difference checks of every primitive, every layer type and the training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Mapping

import numpy as np

from fastar_lab.conditioner import (
    CausalConditioner,
    LayerNorm,
    MaskedConditioner,
    TransformerBlock,
    causal_mask,
    partition_tokens,
)
from fastar_lab.diffcore import ops
from fastar_lab.diffcore.autodiff import DEFAULT_STEP, forward_backward, grad_check, relative_error
from fastar_lab.heads.cvae import CvaeHead, cvae_objective
from fastar_lab.heads.layers import AdaLNFinalLayer, AdaLNResBlock, Linear, ScalarEmbedder
from fastar_lab.heads.shortcut import ShortcutHead, shortcut_objective
from fastar_lab.models import BackboneConfig, BackboneKind, CvaeConfig, HeadConfig

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class Check:
    name: str
    kind: str
    fn: Callable[..., Any]
    point: Mapping[str, np.ndarray]


def _projected(out, weights: np.ndarray):
    """Scalar sum(out * weights), so every output element feeds the gradient."""
    return ops.sum_(ops.mul(out, weights))


def _randomize(params: Mapping[str, np.ndarray], rng: np.random.Generator, scale: float = 0.5) -> dict[str, np.ndarray]:
    # zero-initialised layers would leave exact-zero gradients next to rounding noise
    return {name: scale * rng.standard_normal(p.shape) for name, p in params.items()}


def primitive_checks(rng: np.random.Generator) -> list[Check]:
    """One check per primitive in ``ops.PRIMITIVES`` except stopgrad (see :func:`stopgrad_error`)."""
    x35 = rng.standard_normal((3, 5))
    w35 = rng.standard_normal((3, 5))

    def unary(op):
        return lambda leaves: _projected(op(leaves["x"]), w35)

    checks = [
        Check(
            "add",
            "primitive",
            lambda p: _projected(ops.add(p["x"], p["y"]), w35[:, :4]),
            {"x": x35[:, :4].copy(), "y": rng.standard_normal(4)},
        ),
        Check(
            "sub",
            "primitive",
            lambda p: _projected(ops.sub(p["x"], p["y"]), w35),
            {"x": x35.copy(), "y": rng.standard_normal((3, 1))},
        ),
        Check("scale", "primitive", lambda p: _projected(ops.mul(p["x"], 1.7), w35), {"x": x35.copy()}),
        Check(
            "mul",
            "primitive",
            lambda p: _projected(ops.mul(p["x"], p["y"]), w35),
            {"x": x35.copy(), "y": rng.standard_normal((1, 5))},
        ),
        Check(
            "matmul",
            "primitive",
            lambda p: _projected(ops.matmul(p["a"], p["b"]), np.ones((2, 3, 5))),
            {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 5))},
        ),
    ]
    for name, op in (
        ("exp", ops.exp),
        ("square", ops.square),
        ("tanh", ops.tanh),
        ("silu", ops.silu),
        ("gelu", ops.gelu),
        ("layernorm", ops.layernorm),
        ("softmax", ops.softmax),
    ):
        checks.append(Check(name, "primitive", unary(op), {"x": x35.copy()}))

    w_cat = rng.standard_normal((2, 5))
    w_take = rng.standard_normal((4, 3))
    w_bt = rng.standard_normal((2, 2, 3))
    w_t = rng.standard_normal((4, 2, 3))
    checks += [
        Check(
            "concat",
            "primitive",
            lambda p: _projected(ops.concat([p["x"], p["y"]], axis=1), w_cat),
            {"x": rng.standard_normal((2, 3)), "y": rng.standard_normal((2, 2))},
        ),
        Check(
            "slice",
            "primitive",
            lambda p: _projected(ops.slice_(p["x"], (slice(1, 3), Ellipsis)), w35[:2]),
            {"x": rng.standard_normal((4, 5))},
        ),
        Check(
            "take",
            "primitive",
            lambda p: _projected(ops.take(p["table"], [0, 2, 2, 5]), w_take),
            {"table": rng.standard_normal((6, 3))},
        ),
        Check(
            "batch_take",
            "primitive",
            lambda p: _projected(ops.batch_take(p["x"], [[0, 4], [1, 1]]), w_bt),
            {"x": rng.standard_normal((2, 5, 3))},
        ),
        Check(
            "reshape",
            "primitive",
            lambda p: _projected(ops.reshape(p["x"], (3, 4)), w35[:, :4]),
            {"x": rng.standard_normal((2, 6))},
        ),
        Check(
            "transpose",
            "primitive",
            lambda p: _projected(ops.transpose(p["x"], (2, 0, 1)), w_t),
            {"x": rng.standard_normal((2, 3, 4))},
        ),
        Check("sum", "primitive", lambda p: _projected(ops.sum_(p["x"], axis=1), w35[:, 0]), {"x": x35.copy()}),
        Check(
            "mse",
            "primitive",
            lambda p: ops.mse(p["pred"], p["target"]),
            {"pred": rng.standard_normal((3, 2)), "target": rng.standard_normal((3, 2))},
        ),
    ]
    return checks


def stopgrad_error(rng: np.random.Generator) -> float:
    """sum(w * x * stopgrad(x)) must have gradient w * x; the stopped factor is a constant."""
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    _, grads = forward_backward(lambda p: ops.sum_(ops.mul(ops.mul(p["x"], ops.stopgrad(p["x"])), w)), {"x": x})
    return relative_error(grads["x"], w * x)


def layer_checks(rng: np.random.Generator) -> list[Check]:
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    seq = rng.standard_normal((2, 3, 8))
    checks = []

    linear = Linear("linear", 4, 5)
    linear_point = _randomize(linear.init(rng), rng)
    checks.append(Check("Linear", "layer", lambda p: _projected(linear(p, x), np.ones((3, 5))), linear_point))

    norm = LayerNorm("norm", 4)
    w_norm = rng.standard_normal((3, 4))
    norm_point = _randomize(norm.init(rng), rng)
    checks.append(Check("LayerNorm", "layer", lambda p: _projected(norm(p, x), w_norm), norm_point))

    embedder = ScalarEmbedder("embed", 8, 4)
    w_emb = rng.standard_normal((3, 4))
    embedder_point = _randomize(embedder.init(rng), rng)
    checks.append(
        Check("ScalarEmbedder", "layer", lambda p: _projected(embedder(p, [0.1, 0.5, 0.9]), w_emb), embedder_point)
    )

    block = AdaLNResBlock("block", 4)
    w_block = rng.standard_normal((3, 4))
    block_point = {**_randomize(block.init(rng), rng), "y": y}
    checks.append(Check("AdaLNResBlock", "layer", lambda p: _projected(block(p, x, p["y"]), w_block), block_point))

    final = AdaLNFinalLayer("final", 4, 2)
    w_final = rng.standard_normal((3, 2))
    final_point = {**_randomize(final.init(rng), rng), "y": y}
    checks.append(Check("AdaLNFinalLayer", "layer", lambda p: _projected(final(p, x, p["y"]), w_final), final_point))

    attention = TransformerBlock("attn", 8, 2)
    w_attn = rng.standard_normal((2, 3, 8))
    attn_params = _randomize(attention.init(rng), rng, scale=0.3)
    checks.append(Check("TransformerBlock", "layer", lambda p: _projected(attention(p, seq), w_attn), attn_params))
    mask = causal_mask(3)
    checks.append(
        Check(
            "CausalTransformerBlock",
            "layer",
            lambda p: _projected(attention(p, seq, mask=mask), w_attn),
            dict(attn_params),
        )
    )
    return checks


def loss_checks(rng: np.random.Generator) -> list[Check]:
    """Both head losses, alone and trained jointly through each conditioner."""
    head = ShortcutHead(HeadConfig(token_dim=2, cond_dim=8, hidden_width=8, depth=2, t_embed_dim=8, d_embed_dim=8))
    head_params = _randomize(head.init(rng), rng)
    ema = _randomize(head.init(rng), rng)
    z1 = rng.standard_normal((5, 2))
    c = rng.standard_normal((5, 8))
    checks = [
        Check(
            "shortcut_total_loss",
            "loss",
            lambda p: shortcut_objective(head, p, ema, z1, c, np.random.default_rng(11))["loss"],
            head_params,
        )
    ]

    cvae = CvaeHead(
        CvaeConfig(token_dim=2, cond_dim=8, hidden_width=8, encoder_depth=2, decoder_depth=2, kl_weight=0.1)
    )
    eps = rng.standard_normal((5, 2))
    cvae_point = _randomize(cvae.init(rng), rng)
    checks.append(Check("cvae_loss", "loss", lambda p: cvae_objective(cvae, p, z1, c, eps, 0.1)["loss"], cvae_point))

    backbone = BackboneConfig(
        token_dim=2, embed_dim=8, encoder_depth=1, decoder_depth=1, num_heads=2, cls_repeat=2, max_sequence=4
    )
    masked = MaskedConditioner(backbone)
    tokens = rng.standard_normal((2, 4, 2))
    labels = np.array([0, 1])
    mask = partition_tokens(4, rng, batch_size=2, ratio=0.5)
    z_masked = tokens[np.arange(2)[:, None], mask.masked].reshape(-1, 2)
    joint = {**_randomize(masked.init(rng), rng, scale=0.3), **head_params}

    def masked_objective(p):
        conditions = ops.reshape(masked(p, tokens, mask, labels), (-1, 8))
        return shortcut_objective(head, p, ema, z_masked, conditions, np.random.default_rng(12))["loss"]

    checks.append(Check("masked_joint_loss", "loss", masked_objective, joint))

    causal = CausalConditioner(backbone.model_copy(update={"kind": BackboneKind.CAUSAL, "depth": 1, "cls_repeat": 1}))
    causal_point = {**_randomize(causal.init(rng), rng, scale=0.3), **head_params}

    def causal_objective(p):
        conditions = ops.reshape(causal(p, tokens, labels), (-1, 8))
        return shortcut_objective(head, p, ema, tokens.reshape(-1, 2), conditions, np.random.default_rng(13))["loss"]

    checks.append(Check("causal_joint_loss", "loss", causal_objective, causal_point))
    return checks


def _row(name: str, kind: str, error: float, tolerance: float) -> dict[str, Any]:
    return {"check": name, "kind": kind, "max_rel_error": error, "passed": bool(error < tolerance)}


def run_gradcheck(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_STEP) -> list[dict[str, Any]]:
    """One report row per check: name, kind, max elementwise relative error over every coordinate, pass flag."""
    rng = np.random.default_rng(seed)
    rows = [_check_row(check, seed, tolerance, h) for check in primitive_checks(rng)]
    rows.append(_row("stopgrad", "primitive", stopgrad_error(rng), tolerance))
    rows.extend(_check_row(check, seed, tolerance, h) for check in layer_checks(rng) + loss_checks(rng))
    return rows


def _check_row(check: Check, seed: int, tolerance: float, h: float) -> dict[str, Any]:
    error, _ = grad_check(check.fn, check.point, h=h, rng=np.random.default_rng(seed))
    logger.debug("%s %s: %.3e", check.kind, check.name, error)
    return _row(check.name, check.kind, error, tolerance)
