import numpy as np
import pytest

from fastar_lab.conditioner import (
    CausalConditioner,
    MaskedConditioner,
    MaskSet,
    build_conditioner,
    causal_mask,
    flatten_grid,
    partition_tokens,
    unflatten_grid,
)
from fastar_lab.diffcore import ops
from fastar_lab.exceptions import CacheLengthError, DomainError, ShapeMismatchError
from fastar_lab.models import BackboneConfig, BackboneKind


def masked_config(**overrides) -> BackboneConfig:
    settings = dict(token_dim=2, embed_dim=8, encoder_depth=1, decoder_depth=1, num_heads=2, cls_repeat=3)
    return BackboneConfig(**{**settings, "max_sequence": 6, "num_classes": 2, **overrides})


def causal_config(**overrides) -> BackboneConfig:
    return masked_config(kind=BackboneKind.CAUSAL, depth=2, cls_repeat=1, **overrides)


def test_grid_flattening_is_raster_order():
    grid = np.arange(2 * 2 * 3 * 1).reshape(2, 2, 3, 1)
    flat = flatten_grid(grid)
    assert flat.shape == (2, 6, 1)
    np.testing.assert_array_equal(flat[0, :, 0], [0, 1, 2, 3, 4, 5])
    np.testing.assert_array_equal(unflatten_grid(flat, 2, 3), grid)
    with pytest.raises(ShapeMismatchError):
        unflatten_grid(flat, 2, 2)


def test_partition_is_a_per_row_partition(rng):
    mask = partition_tokens(10, rng, batch_size=4, ratio=0.7)
    assert mask.masked.shape == (4, 7)
    assert mask.unmasked.shape == (4, 3)
    for u, m in zip(mask.unmasked, mask.masked):
        assert sorted(np.concatenate([u, m]).tolist()) == list(range(10))
    assert mask.ratio == pytest.approx(0.7)


def test_partition_masks_at_least_one_token(rng):
    assert partition_tokens(5, rng, ratio=0.0).masked.shape == (1, 1)
    assert partition_tokens(5, rng, ratio=1.0).unmasked.shape == (1, 0)
    ratios = [partition_tokens(100, rng).ratio for _ in range(50)]
    assert min(ratios) >= 0.7
    assert max(ratios) <= 1.0
    with pytest.raises(DomainError):
        partition_tokens(0, rng)


def test_mask_set_from_known():
    known = np.array([[True, False, True, False], [False, False, True, True]])
    mask = MaskSet.from_known(known)
    np.testing.assert_array_equal(mask.unmasked, [[0, 2], [2, 3]])
    np.testing.assert_array_equal(mask.masked, [[1, 3], [0, 1]])
    with pytest.raises(ShapeMismatchError):
        MaskSet.from_known(np.array([[True, False], [True, True]]))


def test_masked_conditions_shape(rng):
    conditioner = MaskedConditioner(masked_config())
    params = conditioner.init(rng)
    mask = partition_tokens(6, rng, batch_size=2, ratio=0.5)
    out = conditioner(params, rng.standard_normal((2, 6, 2)), mask, [0, 1])
    assert out.shape == (2, 3, 8)


def test_masked_conditions_read_only_known_tokens(rng):
    conditioner = MaskedConditioner(masked_config())
    params = conditioner.init(rng)
    mask = partition_tokens(6, rng, batch_size=2, ratio=0.5)
    tokens = rng.standard_normal((2, 6, 2))
    base = conditioner(params, tokens, mask, [0, 1]).data

    scrambled = tokens.copy()
    rows = np.arange(2)[:, None]
    scrambled[rows, mask.masked] = 100.0
    np.testing.assert_array_equal(conditioner(params, scrambled, mask, [0, 1]).data, base)

    moved = tokens.copy()
    moved[rows, mask.unmasked] += 1.0
    assert not np.allclose(conditioner(params, moved, mask, [0, 1]).data, base)


def test_masked_conditions_without_known_tokens(rng):
    conditioner = MaskedConditioner(masked_config())
    params = conditioner.init(rng)
    mask = partition_tokens(6, rng, batch_size=1, ratio=1.0)
    out = conditioner(params, np.zeros((1, 6, 2)), mask, [2])
    assert out.shape == (1, 6, 8)


def test_class_labels_are_validated(rng):
    conditioner = MaskedConditioner(masked_config())
    params = conditioner.init(rng)
    mask = partition_tokens(6, rng, batch_size=1)
    with pytest.raises(DomainError):
        conditioner(params, np.zeros((1, 6, 2)), mask, [3])
    with pytest.raises(ShapeMismatchError):
        conditioner(params, np.zeros((1, 6, 2)), mask, [0, 1])


def test_causal_mask():
    mask = causal_mask(3)
    assert mask[0, 1] == ops.MASK_VALUE
    assert mask[2, 0] == 0.0
    np.testing.assert_array_equal(causal_mask(1, offset=2), [[0.0, 0.0, 0.0]])


def test_causal_condition_depends_only_on_earlier_tokens(rng):
    conditioner = CausalConditioner(causal_config())
    params = conditioner.init(rng)
    tokens = rng.standard_normal((2, 6, 2))
    base = conditioner(params, tokens, [0, 1]).data
    assert base.shape == (2, 6, 8)

    changed = tokens.copy()
    changed[:, 2] += 1.0
    out = conditioner(params, changed, [0, 1]).data
    # c_j sees z_1..z_{j-1}: slot 2 (c_3) sees z_1, z_2 only
    np.testing.assert_allclose(out[:, :3], base[:, :3], atol=1e-12)
    assert not np.allclose(out[:, 3:], base[:, 3:])


def test_kv_cache_matches_full_recompute(rng):
    conditioner = CausalConditioner(causal_config())
    params = conditioner.init(rng)
    tokens = rng.standard_normal((2, 6, 2))
    full = conditioner(params, tokens, [1, 0]).data
    cache = conditioner.new_cache()
    for i in range(1, 7):
        c, cache = conditioner.step(params, [1, 0], tokens[:, i - 2] if i > 1 else None, cache, position=i)
        np.testing.assert_allclose(c.data, full[:, i - 1], atol=1e-10)
    assert cache.length == 6
    assert cache.appends == [6, 6]


def test_kv_cache_length_errors(rng):
    conditioner = CausalConditioner(causal_config())
    params = conditioner.init(rng)
    cache = conditioner.new_cache()
    with pytest.raises(CacheLengthError):
        conditioner.step(params, [0], None, cache, position=2)
    _, cache = conditioner.step(params, [0], None, cache, position=1)
    with pytest.raises(CacheLengthError):
        conditioner.step(params, [0], None, cache)


def test_build_conditioner_dispatches_on_kind():
    assert isinstance(build_conditioner(masked_config()), MaskedConditioner)
    assert isinstance(build_conditioner(causal_config()), CausalConditioner)
