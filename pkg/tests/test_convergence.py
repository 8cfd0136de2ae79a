"""Short training runs on the toy tasks; deselected by default, run with ``pytest -m slow``."""

from pathlib import Path

import numpy as np
import pytest

from fastar_lab import cli
from fastar_lab.ar_engine import FarModel, TrainState, fit, generate, measure_self_consistency
from fastar_lab.diffcore.rng import RngStreams
from fastar_lab.models import KL_WEIGHT_SWEEP, CfgSchedule, HeadKind, SamplerSpec
from fastar_lab.service import load_checkpoint, read_csv
from fastar_lab.toylab import energy_distance, task_sampler

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def mixture_config(tmp_path, *overrides):
    return cli.load_config(
        CONFIGS / "mixture2d.toml",
        ["train.steps=1500", "train.batch_size=128", "optim.ema_decay=0.99", "generation.num_samples=400", *overrides],
        output_dir=str(tmp_path),
    )


def train(config, head_kind=None):
    model = FarModel.from_config(config, head_kind)
    streams = RngStreams(config.seed)
    state = TrainState.create(model.init(streams.stream("init")), config.optim)
    reports = []
    for state, report in fit(model, state, config, task_sampler(config.task), streams, config.train.steps):
        reports.append(report)
    return model, state, reports


def distance_to_data(config, model, params, steps):
    labels = np.arange(config.generation.num_samples) % config.task.num_classes
    reference, _ = task_sampler(config.task)(np.random.default_rng(7), labels.size)
    result = generate(model, params, labels, 1, SamplerSpec(steps=steps), CfgSchedule(), np.random.default_rng(8))
    return energy_distance(result.tokens.reshape(labels.size, -1), reference.reshape(labels.size, -1))


def test_shortcut_training_approaches_the_mixture(tmp_path):
    config = mixture_config(tmp_path)
    model, state, reports = train(config)
    assert np.mean([r["loss"] for r in reports[-100:]]) < np.mean([r["loss"] for r in reports[:100]])
    untrained = distance_to_data(config, model, model.init(np.random.default_rng(0)), 1)
    for steps in (1, 8):
        assert distance_to_data(config, model, state.ema.shadow, steps) < untrained


def test_kl_weight_trades_latent_usage(tmp_path):
    final_kl = {}
    for weight in (KL_WEIGHT_SWEEP[0], KL_WEIGHT_SWEEP[-1]):
        config = mixture_config(tmp_path, "train.steps=500", f"cvae.kl_weight={weight}")
        _, _, reports = train(config, HeadKind.CVAE)
        assert all(np.isfinite(r["loss"]) for r in reports)
        final_kl[weight] = np.mean([r["kl"] for r in reports[-50:]])
    assert final_kl[KL_WEIGHT_SWEEP[0]] <= final_kl[KL_WEIGHT_SWEEP[-1]]


def test_oracle_moments_improve_with_training(tmp_path):
    config = cli.load_config(
        CONFIGS / "gaussian-field.toml",
        [
            "train.steps=1500",
            "optim.ema_decay=0.99",
            "oracle.clamp_patterns=2",
            "oracle.samples=500",
            "generation.chunk_size=500",
        ],
        output_dir=str(tmp_path),
    )
    untrained = oracle_errors(cli.cmd_oracle(config, untrained=True))
    cli.cmd_train(config)
    trained = oracle_errors(cli.cmd_oracle(config))
    assert np.mean(trained["model"]) < np.mean(untrained["model"])


def oracle_errors(path):
    table = read_csv(path)
    errors = {"model": [], "oracle": []}
    for row in table:
        errors[row["source"]].append(row["mean_error"] + row["cov_error"])
    return errors


def test_self_consistency_falls_across_checkpoints(tmp_path):
    config = mixture_config(
        tmp_path,
        'head_kind="fm-to-shortcut"',
        "train.pretrain_steps=1000",
        "train.steps=2000",
        "train.checkpoint_every=1000",
        "train.log_every=1000",
        "train.heldout_size=1024",
    )
    out = cli.cmd_train(config)
    paths = sorted((out / "checkpoints").glob("step_*.fits"))
    assert [p.name for p in paths] == ["step_0001000.fits", "step_0002000.fits", "step_0003000.fits"]
    tokens, labels = task_sampler(config.task)(np.random.default_rng(11), 1024)
    residuals = []
    for path in paths:
        state, meta = load_checkpoint(path, config.optim)
        model = FarModel.from_config(config, HeadKind(meta["headkind"]))
        residuals.append(measure_self_consistency(model, state.ema.shadow, tokens, labels, np.random.default_rng(12)))
    assert residuals[0] > residuals[1] > residuals[2]

    losses = read_csv(out / "losses.csv")
    logged = np.asarray(losses["self_consist"], dtype=float)
    logged = logged[np.isfinite(logged)]
    assert len(logged) == 3
    assert logged[0] > logged[1] > logged[2]


def test_few_step_quality_bars(tmp_path):
    config = cli.load_config(
        CONFIGS / "mixture2d.toml",
        ["ablation.steps_list=[1, 128]", 'ablation.head_kinds=["shortcut", "fm"]'],
        output_dir=str(tmp_path),
    )
    for kind in (HeadKind.SHORTCUT, HeadKind.FLOW_MATCHING):
        cli.cmd_train(config.model_copy(update={"head_kind": kind, "run_id": f"{config.run_id}-{kind}"}))
    table = read_csv(cli.cmd_ablate_steps(config))
    distance = {(row["head_kind"], int(row["N"])): float(row["energy_distance"]) for row in table}
    shortcut_one, shortcut_many = distance["shortcut", 1], distance["shortcut", 128]
    fm_one, fm_many = distance["fm", 1], distance["fm", 128]
    assert shortcut_one <= 3.0 * shortcut_many
    assert fm_one >= 10.0 * fm_many
    assert fm_one >= 5.0 * shortcut_one


def test_oracle_mean_error_bar(tmp_path):
    config = cli.load_config(
        CONFIGS / "gaussian-field.toml",
        ["generation.ar_iters=8", "generation.steps=8", "oracle.clamp_patterns=5", "oracle.samples=2000"],
        output_dir=str(tmp_path),
    )
    assert config.oracle.tolerance == 0.1
    cli.cmd_train(config)
    errors = {source: [] for source in ("model", "oracle")}
    for row in read_csv(cli.cmd_oracle(config)):
        errors[row["source"]].append(float(row["mean_error"]))
    assert len(errors["model"]) == 5
    assert max(errors["model"]) < 0.1


def test_reconstruction_improves_as_kl_weight_falls(tmp_path):
    config = mixture_config(tmp_path, "train.heldout_size=1024")
    table = read_csv(cli.cmd_ablate_kl(config))
    assert list(table["kl_weight"]) == list(KL_WEIGHT_SWEEP)
    recon = np.asarray(table["recon"], dtype=float)
    assert np.all(np.isfinite(recon))
    assert np.all(np.diff(recon) <= 0.0)
