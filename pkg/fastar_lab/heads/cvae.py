"""Conditional VAE head: one decoder call per generated token."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from fastar_lab.diffcore import ops
from fastar_lab.diffcore.autodiff import forward_backward
from fastar_lab.diffcore.tensor import Tensor, as_tensor
from fastar_lab.exceptions import NonFiniteError, ShapeMismatchError
from fastar_lab.heads.layers import AdaLNFinalLayer, AdaLNResBlock, Linear, Params
from fastar_lab.heads.shortcut import CallCounter
from fastar_lab.models import CvaeConfig


class _AdaLNMlp:
    """Input projection, AdaLN residual blocks and a modulated output layer."""

    def __init__(self, name: str, in_dim: int, cond_dim: int, width: int, depth: int, out_dim: int):
        self.input_proj = Linear(f"{name}.input_proj", in_dim, width)
        self.cond_proj = Linear(f"{name}.cond_proj", cond_dim, width)
        self.blocks = [AdaLNResBlock(f"{name}.blocks.{i}", width) for i in range(depth)]
        self.final = AdaLNFinalLayer(f"{name}.final", width, out_dim)
        self.in_dim = in_dim
        self.cond_dim = cond_dim

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        params = {}
        for part in (self.input_proj, self.cond_proj, *self.blocks, self.final):
            params.update(part.init(rng, dtype))
        return params

    def __call__(self, params: Params, x, c) -> Tensor:
        if x.shape[-1] != self.in_dim or c.shape[-1] != self.cond_dim or x.shape[0] != c.shape[0]:
            raise ShapeMismatchError("cvae", f"input {x.shape} / condition {c.shape}")
        y = self.cond_proj(params, c)
        h = self.input_proj(params, x)
        for block in self.blocks:
            h = block(params, h, y)
        return self.final(params, h, y)


class CvaeHead:
    """Encoder (z, c) -> (mu, logvar); decoder (latent, c) -> token."""

    def __init__(self, config: CvaeConfig, prefix: str = "head"):
        self.config = config
        self.prefix = prefix
        latent = config.latent_dim
        width, cond = config.hidden_width, config.cond_dim
        self.encoder = _AdaLNMlp(f"{prefix}.encoder", config.token_dim, cond, width, config.encoder_depth, 2 * latent)
        self.decoder = _AdaLNMlp(f"{prefix}.decoder", latent, cond, width, config.decoder_depth, config.token_dim)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        return {**self.encoder.init(rng, dtype), **self.decoder.init(rng, dtype)}

    def encode(self, params: Params, z, c) -> tuple[Tensor, Tensor]:
        """cvae_encode: posterior mean and log-variance."""
        out = self.encoder(params, as_tensor(z), as_tensor(c))
        latent = self.config.latent_dim
        mu = ops.slice_(out, (Ellipsis, slice(0, latent)))
        logvar = ops.slice_(out, (Ellipsis, slice(latent, 2 * latent)))
        return mu, logvar

    def decode(self, params: Params, latent, c, counter: CallCounter | None = None) -> Tensor:
        latent = latent if isinstance(latent, Tensor) else as_tensor(latent)
        c = c if isinstance(c, Tensor) else as_tensor(c)
        if counter is not None:
            counter.decoder_calls += latent.shape[0]
            counter.record(latent.shape[0])
        return self.decoder(params, latent, c)


def reparameterize(mu, logvar, eps) -> Tensor:
    """latent = mu + exp(logvar / 2) * eps."""
    return ops.add(mu, ops.mul(ops.exp(ops.mul(logvar, 0.5)), eps))


def kl_divergence(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu = as_tensor(mu)
    inner = ops.sub(ops.sub(ops.add(logvar, 1.0), ops.square(mu)), ops.exp(logvar))
    rows = max(mu.size // mu.shape[-1], 1)
    return ops.mul(ops.sum_(inner), -0.5 / rows)


def cvae_objective(head: CvaeHead, params: Params, z, c, eps, kl_weight: float) -> dict[str, Tensor]:
    """Reconstruction MSE, KL term and their weighted total."""
    mu, logvar = head.encode(params, z, c)
    recon = ops.mse(head.decode(params, reparameterize(mu, logvar, eps), c), z)
    kl = kl_divergence(mu, logvar)
    return {"loss": ops.add(recon, ops.mul(kl, kl_weight)), "recon": recon, "kl": kl}


def cvae_loss(
    head: CvaeHead, params: Mapping[str, np.ndarray], z, c, eps, kl_weight: float
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """(recon_mse, kl, total) values and the gradient of the total."""
    outputs, grads = forward_backward(lambda leaves: cvae_objective(head, leaves, z, c, eps, kl_weight), params)
    values = {}
    for name, value in outputs.items():
        value = float(np.asarray(value).reshape(-1)[0])
        if not math.isfinite(value):
            raise NonFiniteError(f"C-VAE {name}")
        values[name] = value
    return values, grads


def cvae_sample(
    head: CvaeHead, params: Params, c, rng: np.random.Generator, counter: CallCounter | None = None
) -> np.ndarray:
    """Draw latent ~ N(0, I) and decode once; the encoder is unused."""
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    dtype = c.dtype if c.dtype in (np.float32, np.float64) else np.float64
    latent = rng.standard_normal((c.shape[0], head.config.latent_dim)).astype(dtype)
    return head.decode(params, latent, c, counter=counter).data
