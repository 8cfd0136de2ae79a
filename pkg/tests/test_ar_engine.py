import numpy as np
import pytest

from fastar_lab.ar_engine import (
    FarModel,
    TrainState,
    causal_generate,
    causal_train_step,
    cosine_plan,
    far_generate,
    fit,
    generate,
    measure_self_consistency,
    train_step,
    widen_to_shortcut,
)
from fastar_lab.diffcore.rng import RngStreams
from fastar_lab.exceptions import ConfigError, DomainError, NonFiniteError
from fastar_lab.gradcheck import _randomize
from fastar_lab.models import CfgKind, CfgSchedule, HeadKind, SamplerSpec
from fastar_lab.toylab import task_sampler
from tests.conftest import tiny_config


@pytest.mark.parametrize("ar_iters,total", [(1, 16), (4, 16), (16, 16), (64, 256), (32, 256), (256, 256), (7, 10)])
def test_cosine_plan_covers_every_token(ar_iters, total):
    plan = cosine_plan(ar_iters, total)
    assert sum(plan) == total
    assert all(count > 0 for count in plan)
    assert len(plan) <= ar_iters


def test_cosine_plan_single_iteration_and_bounds():
    assert cosine_plan(1, 9) == [9]
    with pytest.raises(DomainError):
        cosine_plan(17, 16)
    with pytest.raises(DomainError):
        cosine_plan(0, 16)


def test_cosine_plan_starts_small():
    plan = cosine_plan(64, 256)
    assert plan[0] < plan[-1]


def test_linear_guidance_schedule():
    schedule = CfgSchedule(weight=3.0)
    assert schedule.effective_weight(0.0) == 1.0
    assert schedule.effective_weight(0.5) == 2.0
    assert schedule.effective_weight(1.0) == 3.0
    assert CfgSchedule(weight=3.0, kind=CfgKind.CONSTANT).effective_weight(0.0) == 3.0


@pytest.fixture
def masked(config):
    model = FarModel.from_config(config)
    return model, _randomize(model.init(np.random.default_rng(0)), np.random.default_rng(1), scale=0.2)


@pytest.fixture
def causal(tmp_path):
    config = tiny_config(tmp_path, **{"backbone.kind": "causal"})
    model = FarModel.from_config(config)
    return model, _randomize(model.init(np.random.default_rng(0)), np.random.default_rng(1), scale=0.2)


def test_far_generate_fills_every_position_once(masked, rng):
    model, params = masked
    result = far_generate(model, params, [0, 0, 0], 2, SamplerSpec(steps=3), CfgSchedule(), rng)
    assert result.tokens.shape == (3, 4, 2)
    assert np.all(result.order >= 0)
    assert result.order.max() <= 1
    assert result.counter.token_steps == 3 * 4 * 3
    assert np.all(np.isfinite(result.tokens))


def test_far_generate_keeps_clamped_tokens(masked, rng):
    model, params = masked
    known = rng.standard_normal((4, 2))
    known_mask = np.array([True, False, True, False])
    sampler = SamplerSpec(steps=2)
    result = generate(model, params, [0, 0], 2, sampler, CfgSchedule(), rng, known=known, known_mask=known_mask)
    np.testing.assert_array_equal(result.tokens[:, known_mask], np.broadcast_to(known[known_mask], (2, 2, 2)))
    np.testing.assert_array_equal(result.order[:, known_mask], -1)
    assert result.counter.token_steps == 2 * 2 * 2


def test_far_generate_is_reproducible(masked):
    model, params = masked
    sampler, cfg = SamplerSpec(steps=2), CfgSchedule(weight=2.0)
    first = far_generate(model, params, [0, 0], 4, sampler, cfg, np.random.default_rng(5))
    second = far_generate(model, params, [0, 0], 4, sampler, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(first.tokens, second.tokens)


def test_far_generate_single_label_with_shared_clamps(masked, rng):
    model, params = masked
    known = rng.standard_normal((4, 2))
    known_mask = np.array([True, False, False, True])
    result = far_generate(model, params, 1, 2, SamplerSpec(steps=2), CfgSchedule(), rng, known, known_mask)
    assert result.tokens.shape == (1, 4, 2)
    np.testing.assert_array_equal(result.tokens[0, known_mask], known[known_mask])


def test_far_generate_single_label_with_per_grid_clamps(masked, rng):
    model, params = masked
    known = rng.standard_normal((3, 4, 2))
    known_mask = np.tile([True, False, False, True], (3, 1))
    result = far_generate(model, params, 1, 2, SamplerSpec(steps=2), CfgSchedule(), rng, known, known_mask)
    assert result.tokens.shape == (3, 4, 2)
    np.testing.assert_array_equal(result.tokens[known_mask], known[known_mask])


def test_self_consistency_of_held_out_grids(masked, causal):
    for model, params in (masked, causal):
        tokens, labels = task_sampler(tiny_config().task)(np.random.default_rng(0), 5)
        first = measure_self_consistency(model, params, tokens, labels, np.random.default_rng(3))
        second = measure_self_consistency(model, params, tokens, labels, np.random.default_rng(3))
        assert first == second
        assert np.isfinite(first)
        assert first > 0.0


def test_self_consistency_needs_velocity_head(tmp_path, rng):
    model = FarModel.from_config(tiny_config(tmp_path, head_kind="cvae"))
    tokens, labels = task_sampler(tiny_config().task)(rng, 2)
    with pytest.raises(ConfigError):
        measure_self_consistency(model, model.init(rng), tokens, labels, rng)


def test_far_generate_needs_masked_conditioner(causal, rng):
    model, params = causal
    with pytest.raises(ConfigError):
        far_generate(model, params, [0], 2, SamplerSpec(), CfgSchedule(), rng)


def test_causal_generation_cache_parity(causal):
    model, params = causal
    sampler = SamplerSpec(steps=2)
    with_cache = causal_generate(model, params, [0, 0], sampler, CfgSchedule(), np.random.default_rng(4))
    without = causal_generate(model, params, [0, 0], sampler, CfgSchedule(), np.random.default_rng(4), use_cache=False)
    np.testing.assert_allclose(with_cache.tokens, without.tokens, atol=1e-9)
    np.testing.assert_allclose(with_cache.conditions, without.conditions, atol=1e-9)
    assert with_cache.cache_appends == [4]
    assert without.cache_appends is None
    assert with_cache.counter.token_steps == 2 * 4 * 2
    np.testing.assert_array_equal(with_cache.order[0], [0, 1, 2, 3])


def test_causal_generation_with_guidance(causal, rng):
    model, params = causal
    result = causal_generate(model, params, [0], SamplerSpec(steps=1), CfgSchedule(weight=2.0), rng)
    assert result.tokens.shape == (1, 4, 2)
    assert np.all(np.isfinite(result.tokens))


def test_chunked_generation_aggregates(masked, rng):
    model, params = masked
    result = generate(model, params, [0, 0, 0, 0, 0], 2, SamplerSpec(steps=1), CfgSchedule(), rng, chunk_size=2)
    assert result.tokens.shape == (5, 4, 2)
    assert result.order.shape == (5, 4)
    assert result.counter.token_steps == 5 * 4


def test_cvae_generation_uses_one_call_per_token(config, rng):
    model = FarModel.from_config(config, HeadKind.CVAE)
    params = model.init(rng)
    result = generate(model, params, [0, 0], 2, SamplerSpec(steps=8), CfgSchedule(), rng)
    assert result.counter.token_steps == 2 * 4
    assert result.counter.decoder_calls == 2 * 4


def test_train_step_updates_everything(config, rng):
    model = FarModel.from_config(config)
    state = TrainState.create(model.init(rng), config.optim)
    tokens, labels = task_sampler(config.task)(rng, 4)
    new, report = train_step(model, state, tokens, labels, rng, config.optim)
    assert new.step == 1
    assert {"step", "loss", "fm", "consist", "grad_norm", "lr", "mask_ratio"} <= set(report)
    assert report["loss"] == pytest.approx(report["fm"] + report["consist"])
    assert any(not np.array_equal(new.params[k], state.params[k]) for k in state.params if k.startswith("backbone."))
    assert any(not np.array_equal(new.ema.shadow[k], state.ema.shadow[k]) for k in state.params)


def test_train_step_rejects_non_finite_batch(config, rng):
    model = FarModel.from_config(config)
    state = TrainState.create(model.init(rng), config.optim)
    tokens = np.full((2, 4, 2), np.nan)
    with pytest.raises(NonFiniteError):
        train_step(model, state, tokens, [0, 0], rng, config.optim)


def test_causal_train_step(tmp_path, rng):
    config = tiny_config(tmp_path, **{"backbone.kind": "causal", "head_kind": "cvae"})
    model = FarModel.from_config(config)
    state = TrainState.create(model.init(rng), config.optim)
    tokens, labels = task_sampler(config.task)(rng, 3)
    new, report = causal_train_step(model, state, tokens, labels, rng, config.optim)
    assert new.step == 1
    assert {"recon", "kl"} <= set(report)


def test_fit_is_deterministic(config):
    def run():
        model = FarModel.from_config(config)
        streams = RngStreams(config.seed)
        state = TrainState.create(model.init(streams.stream("init")), config.optim)
        return [report["loss"] for _, report in fit(model, state, config, task_sampler(config.task), streams, 3)]

    first, second = run(), run()
    assert len(first) == 3
    assert first == second


def test_train_state_records_round_trip(config, rng):
    model = FarModel.from_config(config)
    state = TrainState.create(model.init(rng), config.optim)
    restored = TrainState.from_records(state.to_records(), 5, config.optim)
    assert restored.step == 5
    assert restored.optim.step == 5
    assert set(restored.params) == set(state.params)


def test_widen_to_shortcut_keeps_field(tmp_path, rng):
    config = tiny_config(tmp_path, head_kind="fm-to-shortcut")
    fm_model = FarModel.from_config(config, HeadKind.FLOW_MATCHING)
    params = _randomize(fm_model.init(rng), rng, scale=0.2)
    state = TrainState.create(params, config.optim)
    state.step = 7
    model, widened = widen_to_shortcut(fm_model, state, config, rng)
    assert model.head_kind == HeadKind.FM_TO_SHORTCUT
    assert widened.step == 7
    assert set(widened.ema.shadow) == set(widened.params)
    z, c = rng.standard_normal((3, 2)), rng.standard_normal((3, 16))
    expected = fm_model.head(params, z, 0.5, 0.0, c).data
    np.testing.assert_allclose(model.head(widened.params, z, 0.5, 0.25, c).data, expected, atol=1e-12)
    with pytest.raises(ConfigError):
        widen_to_shortcut(model, widened, config, rng)
