"""Shared fixtures: tiny run configs and seeded generators."""

import numpy as np
import pytest

from fastar_lab.models import RunConfig
from fastar_lab.settings import get_settings


def tiny_config(tmp_path=None, **overrides) -> RunConfig:
    """A 2x2 Gaussian field with a one-block backbone and a narrow head."""
    data = {
        "run_id": "tiny",
        "seed": 3,
        "task": {"kind": "gaussian-field", "gaussian_field": {"height": 2, "width": 2, "token_dim": 2}},
        "backbone": {
            "embed_dim": 16,
            "encoder_depth": 1,
            "decoder_depth": 1,
            "depth": 1,
            "num_heads": 2,
            "cls_repeat": 2,
        },
        "head": {"hidden_width": 16, "depth": 1, "t_embed_dim": 8, "d_embed_dim": 8},
        "cvae": {"hidden_width": 16, "encoder_depth": 1, "decoder_depth": 1},
        "optim": {"lr": 1e-3, "ema_decay": 0.9, "label_dropout": 0.0},
        "train": {"steps": 3, "batch_size": 4, "log_every": 1, "checkpoint_every": 2},
        "generation": {"ar_iters": 2, "steps": 2, "num_samples": 3, "chunk_size": 2},
        "oracle": {"clamp_patterns": 1, "samples": 4},
        "ablation": {
            "steps_list": [1, 2],
            "head_kinds": ["shortcut"],
            "samples": 4,
            "cfg_weights": [1.0, 2.0],
            "cfg_steps": [1],
        },
        "cost": {"archs": ["mar-b", "far-b-causal"], "ar_iters": [32, 64], "denoise_steps": [8, 100]},
    }
    if tmp_path is not None:
        data["output_dir"] = str(tmp_path)
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return RunConfig.model_validate(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config(tmp_path):
    return tiny_config(tmp_path)


@pytest.fixture(autouse=True)
def clear_settings_cache():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
