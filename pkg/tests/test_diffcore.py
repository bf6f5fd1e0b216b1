"""Autodiff core: op semantics, gradients, Adam, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdflab import diffcore as dc


def test_tensor_flat_data_row_major():
    t = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert np.prod(t.shape) == len(t.data)
    assert list(t.data) == [1.0, 2.0, 3.0, 4.0]


def test_affine_identity():
    W = dc.Tensor(np.eye(3))
    b = dc.Tensor(np.zeros(3))
    y = dc.affine(W, b, dc.Tensor([1.0, 2.0, 3.0]))
    assert np.array_equal(y.value, [1.0, 2.0, 3.0])


def test_affine_zero_weights_gives_bias():
    W = dc.Tensor(np.zeros((1, 3)))
    b = dc.Tensor([5.0])
    y = dc.affine(W, b, dc.Tensor([9.0, -2.0, 4.0]))
    assert np.array_equal(y.value, [5.0])


def test_affine_matches_handrolled_loop():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    x = rng.normal(size=(5, 3))
    got = dc.affine(dc.Tensor(W), dc.Tensor(b), dc.Tensor(x)).value
    # independent dot-product loop
    want = np.empty((5, 4))
    for i in range(5):
        for j in range(4):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * W[j, k]
            want[i, j] = acc
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        dc.affine(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros(2)), dc.Tensor(np.zeros((1, 4))))


def test_activation_fixed_points():
    assert dc.activation("relu", dc.Tensor([-1.0])).value[0] == 0.0
    assert dc.activation("tanh", dc.Tensor([0.0])).value[0] == 0.0
    assert dc.activation("sigmoid", dc.Tensor([0.0])).value[0] == 0.5
    with pytest.raises(ValueError):
        dc.activation("gelu", dc.Tensor([0.0]))


def test_maxpool_columnwise():
    y = dc.maxpool_set(dc.Tensor([[1.0, 5.0], [3.0, 2.0]]))
    assert np.array_equal(y.value, [3.0, 5.0])


def test_maxpool_single_row_identity():
    row = np.array([[2.0, -1.0, 7.0]])
    assert np.array_equal(dc.maxpool_set(dc.Tensor(row)).value, row[0])


def test_maxpool_empty_rejected():
    with pytest.raises(ValueError):
        dc.maxpool_set(dc.Tensor(np.zeros((0, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_maxpool_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    perm = rng.permutation(n)
    a = dc.maxpool_set(dc.Tensor(x)).value
    b = dc.maxpool_set(dc.Tensor(x[perm])).value
    assert np.array_equal(a, b)


def test_maxpool_gradient_first_argmax_on_ties():
    x = dc.Tensor([[1.0, 2.0], [1.0, 2.0]])
    with dc.Tape() as tape:
        loss = dc.total(dc.maxpool_set(x))
    grads = dc.backward(tape, loss)
    assert np.array_equal(grads[x], [[1.0, 1.0], [0.0, 0.0]])


def test_fuse_max_first_wins_ties():
    a = dc.Tensor([[1.0, 4.0]])
    b = dc.Tensor([[1.0, 2.0]])
    with dc.Tape() as tape:
        loss = dc.total(dc.fuse_max([a, b]))
    grads = dc.backward(tape, loss)
    assert np.array_equal(grads[a], [[1.0, 1.0]])
    assert grads.get(b) is None or np.array_equal(grads[b], [[0.0, 0.0]])


class TestBatchNorm:
    def test_identical_batch_both_branches_fresh_state(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 4))
        gamma, beta = dc.Tensor(np.ones(4)), dc.Tensor(np.zeros(4))
        state = dc.DualBatchNormState(4)
        ya = dc.dual_batchnorm(dc.Tensor(x), "real", gamma, beta, state, training=True)
        yb = dc.dual_batchnorm(dc.Tensor(x), "fake", gamma, beta, state, training=True)
        assert np.array_equal(ya.value, yb.value)

    def test_constant_batch_centered_to_zero(self):
        x = np.full((6, 3), 2.5)
        gamma, beta = dc.Tensor(np.ones(3)), dc.Tensor(np.zeros(3))
        y = dc.batchnorm(
            dc.Tensor(x), gamma, beta, dc.BatchNormState(3), training=True
        )
        assert np.allclose(y.value, 0.0, atol=1e-12)

    def test_running_mean_matches_scalar_recurrence_oracle(self):
        rng = np.random.default_rng(2)
        state = dc.BatchNormState(1)
        gamma, beta = dc.Tensor(np.ones(1)), dc.Tensor(np.zeros(1))
        momentum = 0.1
        mean_oracle, var_oracle = 0.0, 1.0
        for _ in range(5):
            x = rng.normal(size=(16, 1))
            dc.batchnorm(dc.Tensor(x), gamma, beta, state, training=True, momentum=momentum)
            # independent scalar recurrence
            mu = float(x.mean())
            var_unbiased = float(x.var() * 16 / 15)
            mean_oracle = (1 - momentum) * mean_oracle + momentum * mu
            var_oracle = (1 - momentum) * var_oracle + momentum * var_unbiased
        assert np.isclose(state.mean[0], mean_oracle, rtol=0, atol=1e-12)
        assert np.isclose(state.var[0], var_oracle, rtol=0, atol=1e-12)

    def test_branches_never_mix(self):
        rng = np.random.default_rng(3)
        state = dc.DualBatchNormState(2)
        gamma, beta = dc.Tensor(np.ones(2)), dc.Tensor(np.zeros(2))
        before = (state["fake"].mean.copy(), state["fake"].var.copy())
        dc.dual_batchnorm(
            dc.Tensor(rng.normal(size=(8, 2))), "real", gamma, beta, state, training=True
        )
        assert np.array_equal(state["fake"].mean, before[0])
        assert np.array_equal(state["fake"].var, before[1])

    def test_training_needs_two_rows(self):
        gamma, beta = dc.Tensor(np.ones(2)), dc.Tensor(np.zeros(2))
        with pytest.raises(ValueError):
            dc.batchnorm(
                dc.Tensor(np.zeros((1, 2))), gamma, beta, dc.BatchNormState(2), training=True
            )


class TestBackward:
    def test_quadratic(self):
        z = dc.Tensor([1.0, -2.0])
        with dc.Tape() as tape:
            loss = dc.total(dc.square(z))
        grads = dc.backward(tape, loss)
        assert np.array_equal(grads[z], [2.0, -4.0])

    def test_unused_parameter_gets_no_gradient(self):
        z = dc.Tensor([1.0, 2.0])
        w = dc.Tensor([3.0])
        with dc.Tape() as tape:
            loss = dc.total(dc.square(z))
            _ = dc.square(w)  # on tape but off the loss path
        grads = dc.backward(tape, loss)
        assert grads.get(w) is None

    def test_non_scalar_loss_rejected(self):
        z = dc.Tensor([1.0, 2.0])
        with dc.Tape() as tape:
            y = dc.square(z)
        with pytest.raises(ValueError):
            dc.backward(tape, y)

    def test_each_op_visited_once_accumulates_fanout(self):
        x = dc.Tensor([2.0])
        with dc.Tape() as tape:
            y = dc.square(x)
            loss = dc.total(dc.add(y, y))  # fan-out of y
        grads = dc.backward(tape, loss)
        assert np.array_equal(grads[x], [8.0])  # d/dx (2 x^2)


class TestAdam:
    def test_zero_gradient_is_fixpoint(self):
        ps = dc.ParamSet()
        ps.add("w", [1.0, 2.0])
        state = dc.AdamState(lr=0.1)
        dc.adam_step(state, ps, {"w": np.zeros(2)})
        assert np.array_equal(ps["w"].value, [1.0, 2.0])

    def test_first_step_matches_hand_formula(self):
        g = 0.37
        ps = dc.ParamSet()
        ps.add("w", [1.0])
        state = dc.AdamState(lr=0.01)
        dc.adam_step(state, ps, {"w": np.array([g])})
        # bias-corrected m_hat = g, v_hat = g^2
        want = 1.0 - 0.01 * g / (abs(g) + state.eps)
        assert np.isclose(ps["w"].value[0], want, rtol=0, atol=1e-15)

    def test_frozen_parameter_untouched(self):
        ps = dc.ParamSet()
        ps.add("w", [1.0])
        ps.add("frozen", [5.0], trainable=False)
        dc.adam_step(dc.AdamState(lr=0.5), ps, {"w": np.array([1.0])})
        assert ps["frozen"].value[0] == 5.0

    def test_deterministic_bitwise(self):
        def run():
            ps = dc.ParamSet()
            ps.add("w", np.linspace(-1, 1, 7))
            state = dc.AdamState(lr=0.03)
            for i in range(5):
                dc.adam_step(state, ps, {"w": np.sin(np.arange(7) + i)})
            return ps["w"].value
        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        ps = dc.ParamSet()
        ps.add("w", [1.0, 2.0])
        with pytest.raises(ValueError):
            dc.adam_step(dc.AdamState(lr=0.1), ps, {"w": np.zeros(3)})


class TestGradcheck:
    def test_exact_quadratic(self):
        p = dc.Tensor(np.linspace(-2, 2, 9))
        err = dc.gradcheck(lambda: dc.total(dc.square(p)), [p])
        assert err < 1e-9

    def test_tanh_chain(self):
        rng = np.random.default_rng(4)
        w = dc.Tensor(rng.normal(size=(3, 5)))
        x = dc.Tensor(rng.normal(size=(4, 5)))
        b = dc.Tensor(np.zeros(3))
        err = dc.gradcheck(
            lambda: dc.total(dc.tanh(dc.affine(w, b, x))), [w, x, b], rng=rng
        )
        assert err < 1e-6

    def test_detector_fires_on_corrupted_gradient(self):
        p = dc.Tensor([1.0, 2.0, 3.0])

        def broken():
            detached = dc.Tensor(p.value.copy())  # breaks the graph to p
            return dc.total(dc.square(detached))

        err = dc.gradcheck(broken, [p])
        assert err > 1e-3

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            dc.gradcheck(lambda: dc.Tensor(0.0), [], eps=0.0)


class TestParamSetSerial:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        ps = dc.ParamSet()
        ps.add("a", rng.normal(size=(3, 4)))
        ps.add("b", np.array([1e-300, -0.0, np.pi, 1e300]), trainable=False)
        dc.save_params(ps, tmp_path / "ckpt")
        loaded, manifest = dc.load_params(tmp_path / "ckpt")
        assert loaded.equals_bitwise(ps)
        assert loaded.is_trainable("a") and not loaded.is_trainable("b")
        assert manifest["entries"][0]["dtype"] == "<f8"

    def test_blob_is_little_endian_concatenation(self, tmp_path):
        ps = dc.ParamSet()
        ps.add("x", [1.0, 2.0])
        manifest, blob = dc.write_manifest(ps)
        assert blob == np.array([1.0, 2.0], dtype="<f8").tobytes()
        assert manifest["entries"][0]["offset"] == 0

    def test_duplicate_name_rejected(self):
        ps = dc.ParamSet()
        ps.add("x", [1.0])
        with pytest.raises(ValueError):
            ps.add("x", [2.0])

    def test_assign_validates_shape(self):
        ps = dc.ParamSet()
        ps.add("x", [1.0, 2.0])
        with pytest.raises(ValueError):
            ps.assign("x", np.zeros(3))


def test_norm2_zero_has_zero_gradient():
    z = dc.Tensor(np.zeros(4))
    with dc.Tape() as tape:
        loss = dc.norm2(z)
    grads = dc.backward(tape, loss)
    assert loss.value == 0.0
    assert np.array_equal(grads[z], np.zeros(4))


def test_no_tape_suspends_recording():
    x = dc.Tensor([1.0])
    with dc.Tape() as tape:
        dc.square(x)
        with dc.no_tape():
            dc.square(x)
    assert len(tape) == 1
