import numpy as np
import pytest

from fastar_lab import gradcheck
from fastar_lab.diffcore import ops
from fastar_lab.diffcore.tensor import as_tensor, emit


@pytest.fixture(scope="module")
def rows():
    return gradcheck.run_gradcheck(seed=0)


def test_every_check_passes(rows):
    failed = [row["check"] for row in rows if not row["passed"]]
    assert failed == []
    assert all(row["max_rel_error"] < gradcheck.DEFAULT_TOLERANCE for row in rows)


def test_every_primitive_is_covered_in_order(rows):
    primitives = [row["check"] for row in rows if row["kind"] == "primitive"]
    assert sorted(primitives) == sorted(ops.PRIMITIVES)
    # primitive rows come first, with stopgrad appended after the finite-difference ones
    kinds = [row["kind"] for row in rows]
    assert kinds[: len(primitives)] == ["primitive"] * len(primitives)
    assert primitives[-1] == "stopgrad"
    assert primitives[:-1] == [name for name in ops.PRIMITIVES if name != "stopgrad"]


def test_layers_and_losses_are_covered(rows):
    layers = {row["check"] for row in rows if row["kind"] == "layer"}
    losses = {row["check"] for row in rows if row["kind"] == "loss"}
    expected = {"Linear", "LayerNorm", "AdaLNResBlock", "AdaLNFinalLayer", "TransformerBlock", "CausalTransformerBlock"}
    assert expected <= layers
    assert losses == {"shortcut_total_loss", "cvae_loss", "masked_joint_loss", "causal_joint_loss"}


def test_stopgrad_blocks_its_branch():
    assert gradcheck.stopgrad_error(np.random.default_rng(0)) < 1e-12


def test_wrong_backward_is_reported(monkeypatch):
    def broken_tanh(x):
        x = as_tensor(x)
        value = np.tanh(x.data)
        return emit("tanh", (x,), value, lambda g: (g * (1.0 - value),))

    monkeypatch.setattr(ops, "tanh", broken_tanh)
    rows = {row["check"]: row for row in gradcheck.run_gradcheck(seed=0)}
    assert not rows["tanh"]["passed"]
    assert rows["exp"]["passed"]
