import numpy as np
import pytest
from gradcheck import check_gradients
from hypothesis import given, settings
from hypothesis import strategies as st

from hyps import autodiff as ad
from hyps.adapters import AdapterSpec
from hyps.autodiff import Parameter, Tape
from hyps.errors import ShapeError, UsageError
from hyps.linalg import make_rng
from hyps.metrics import dice_score
from hyps.model import ToyModelConfig, attach_adapters, build_model

TOL = 1e-6


def P(name, arr):
    return Parameter(name, np.array(arr, dtype=np.float64), True)


def weighted(tape, out, seed=0):
    r = make_rng(seed).normal(size=out.shape)
    return ad.total(ad.mul(out, tape.const(r)))


PRIMITIVES = {
    "add_broadcast": (lambda t, a, b: ad.add(t.param(a), t.param(b)), [(3, 4), (4,)]),
    "mul": (lambda t, a, b: ad.mul(t.param(a), t.param(b)), [(3, 4), (3, 1)]),
    "scale": (lambda t, a: ad.scale(t.param(a), -2.5), [(5,)]),
    "matmul_batched": (lambda t, a, b: ad.matmul(t.param(a), t.param(b)), [(2, 3, 4), (4, 5)]),
    "linear": (lambda t, x, w, b: ad.linear(t.param(x), t.param(w), t.param(b)), [(2, 3, 4), (5, 4), (5,)]),
    "relu": (lambda t, a: ad.relu(t.param(a)), [(4, 6)]),
    "sigmoid": (lambda t, a: ad.sigmoid(t.param(a)), [(4, 6)]),
    "softmax": (lambda t, a: ad.softmax(t.param(a)), [(3, 7)]),
    "layer_norm": (lambda t, x, g, b: ad.layer_norm(t.param(x), t.param(g), t.param(b)), [(2, 3, 6), (6,), (6,)]),
    "reshape": (lambda t, a: ad.reshape(t.param(a), (6, 4)), [(2, 3, 4)]),
    "transpose": (lambda t, a: ad.transpose(t.param(a), (2, 0, 1)), [(2, 3, 4)]),
    "roll": (lambda t, a: ad.roll(t.param(a), (1, -2), (0, 1)), [(3, 5)]),
    "upsample": (lambda t, a: ad.upsample_nearest(t.param(a), 2, (1, 2)), [(2, 3, 2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    rng = make_rng(sum(map(ord, name)))
    params = [P(f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]
    report = check_gradients({p.name: p for p in params}, lambda t: weighted(t, fn(t, *params)))
    assert report.checked > 0
    assert report.max_rel <= TOL, report.worst


def test_dice_loss_gradient():
    rng = make_rng(0)
    logits = P("z", rng.normal(size=(2, 4, 4, 4)))
    target = (rng.random((2, 4, 4, 4)) < 0.3).astype(float)
    report = check_gradients({"z": logits}, lambda t: ad.dice_loss(ad.sigmoid(t.param(logits)), target))
    assert report.max_rel <= TOL, report.worst


def test_sum_wx_gradient_is_x_per_row():
    x = np.array([1.0, -2.0, 3.0])
    w = P("w", make_rng(1).normal(size=(4, 3)))
    tape = Tape()
    g = tape.backward(ad.total(ad.linear(tape.const(x), tape.param(w))))
    assert np.array_equal(g["w"], np.tile(x, (4, 1)))


def test_dead_relu_blocks_gradient():
    w = P("w", -np.ones((2, 3)))
    tape = Tape()
    g = tape.backward(ad.total(ad.relu(ad.linear(tape.const(np.ones(3)), tape.param(w)))))
    assert not g["w"].any()


def test_frozen_parameters_get_no_entry():
    a, b = P("a", np.ones(3)), Parameter("b", np.ones(3), trainable=False)
    tape = Tape()
    g = tape.backward(ad.total(ad.mul(tape.param(a), tape.param(b))))
    assert set(g) == {"a"}


def test_non_scalar_loss_is_usage_error():
    a = P("a", np.ones(3))
    tape = Tape()
    with pytest.raises(UsageError):
        tape.backward(ad.scale(tape.param(a), 2.0))


def test_tape_is_topologically_ordered():
    a = P("a", np.ones((2, 2)))
    tape = Tape()
    weighted(tape, ad.relu(ad.matmul(tape.param(a), tape.param(a))))
    for node in tape.nodes:
        assert all(i < node.output for i in node.inputs)


def test_shared_parameter_accumulates():
    a = P("a", np.array([3.0]))
    tape = Tape()
    g = tape.backward(ad.total(ad.mul(tape.param(a), tape.param(a))))
    assert g["a"].tolist() == [6.0]


class TestDiceLoss:
    def test_perfect(self):
        y = np.zeros((1, 4, 4, 4))
        y[0, 1:3, 1:3, 1:3] = 1
        assert abs(ad.dice_loss(Tape().const(y), y).value + 1) <= 1e-5

    def test_disjoint(self):
        y, p = np.zeros((1, 8)), np.zeros((1, 8))
        y[0, :2], p[0, 4:6] = 1, 1
        assert abs(ad.dice_loss(Tape().const(p), y).value) <= 1e-4

    def test_half_overlap(self):
        y, p = np.zeros((1, 8)), np.zeros((1, 8))
        y[0, :2], p[0, 1:3] = 1, 1
        assert abs(ad.dice_loss(Tape().const(p), y).value + 0.5) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.dice_loss(Tape().const(np.zeros((1, 3))), np.zeros((1, 4)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 3), st.integers(0, 2**31))
    def test_range_and_hard_prediction_agreement(self, n, seed):
        rng = make_rng(seed)
        soft = rng.random((n, 4, 4, 4))
        y = rng.random((n, 4, 4, 4)) < 0.4
        loss = float(ad.dice_loss(Tape().const(soft), y).value)
        assert -1.0 <= loss <= 0.0
        hard = rng.random((n, 4, 4, 4)) < 0.4
        hard_loss = float(ad.dice_loss(Tape().const(hard.astype(float)), y).value)
        expect = -np.mean([dice_score(hard[i], y[i]) for i in range(n)]) / 100
        assert abs(hard_loss - expect) <= 1e-4


SMALL = ToyModelConfig(patch=8, window=4)


@pytest.mark.parametrize("variant", ["full", "linear-probe"])
@pytest.mark.parametrize("shifted", [False, True])
def test_block_gradients_non_peft(variant, shifted):
    """Every trainable scalar of one block, on a single-window token grid."""
    rng = make_rng(17)
    model, _ = attach_adapters(build_model(SMALL, 4), AdapterSpec(variant), 0)
    prefix = "stage0.block1" if shifted else "stage0.block0"
    params = {k: p for k, p in model.parameters().items() if p.trainable and k.startswith(prefix)}
    x = rng.normal(size=(1, 4, 4, 4, SMALL.embed_dim))

    def loss(tape):
        return weighted(tape, model.block(tape, tape.const(x), prefix, shifted), seed=3)

    report = check_gradients(params, loss)
    assert report.checked > 0.99 * sum(p.size for p in params.values())
    assert report.max_rel <= TOL, report.worst


def test_full_model_gradients_spot_check():
    """Dice loss through the whole model: decoder scalars and one adapter branch."""
    rng = make_rng(5)
    model, _ = attach_adapters(build_model(SMALL, 2), AdapterSpec("hyps", 2), 0)
    for p in model.parameters().values():
        if p.name.endswith("b_up"):
            p.value = rng.normal(scale=0.1, size=p.value.shape)
    params = {k: p for k, p in model.parameters().items()
              if p.trainable and (k.startswith("dec.") or k.startswith("stage0.block1.mlp.fc2.b_"))}
    x = rng.normal(size=(2, 8, 8, 8))
    y = (rng.random((2, 8, 8, 8)) < 0.2).astype(float)
    report = check_gradients(params, lambda t: ad.dice_loss(model.forward(t, x), y))
    assert report.max_rel <= TOL, report.worst
