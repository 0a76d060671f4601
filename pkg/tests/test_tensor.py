import numpy as np
import pytest

from deepela import tensor as F
from deepela.tensor import (
    BatchNormState,
    Tape,
    Tensor,
    batch_norm_nonaffine,
    dropout,
    get_default_dtype,
    set_default_dtype,
)

from _helpers import op_gradient_error

OP_TOL = 1e-5


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestKernels:
    def test_matmul_identity(self):
        A = _rng().normal(size=(3, 4))
        np.testing.assert_array_equal(F.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_row_mean_pool_identical_rows(self):
        row = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(F.row_mean_pool(Tensor(np.stack([row, row]))).data, row)

    def test_layer_norm_examples(self):
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        np.testing.assert_allclose(F.layer_norm(Tensor([[1.0, -1.0]]), g, b, eps=0.0).data, [[1.0, -1.0]])
        g3, b3 = Tensor(np.ones(3)), Tensor(np.zeros(3))
        np.testing.assert_array_equal(F.layer_norm(Tensor(np.full((1, 3), 7.0)), g3, b3).data, np.zeros((1, 3)))
        out = F.layer_norm(Tensor(_rng().normal(3, 5, size=(20, 6))), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-8

    def test_layer_norm_eps_regularized(self):
        out = F.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[1, -1]] / np.sqrt(1 + 1e-5), rtol=1e-14)

    def test_glu_examples(self):
        v = np.array([[2.0, -3.0]])
        np.testing.assert_allclose(F.glu(Tensor(np.hstack([v, np.zeros((1, 2))]))).data, 0.5 * v)
        np.testing.assert_allclose(F.glu(Tensor(np.hstack([v, np.full((1, 2), 60.0)]))).data, v)
        with pytest.raises(ValueError):
            F.glu(Tensor(np.ones((2, 3))))

    def test_softmax_examples(self):
        np.testing.assert_allclose(F.softmax_rows(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3])
        e = np.exp(-20.0)
        np.testing.assert_allclose(F.softmax_rows(Tensor([[20.0, 0.0]])).data, [[1 / (1 + e), e / (1 + e)]], rtol=1e-15)
        x = _rng().normal(scale=30, size=(50, 17))
        for tau in (0.05, 1.0, 7.0):
            assert np.max(np.abs(F.softmax_rows(Tensor(x), tau).data.sum(axis=1) - 1)) < 1e-12
        with pytest.raises(ValueError):
            F.softmax_rows(Tensor(x), 0.0)

    def test_log_softmax_consistent(self):
        x = _rng().normal(size=(4, 5))
        np.testing.assert_allclose(np.exp(F.log_softmax_rows(Tensor(x), 0.3).data), F.softmax_rows(Tensor(x), 0.3).data)

    def test_sigmoid_tanh(self):
        x = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(F.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-14)
        np.testing.assert_allclose(F.tanh(Tensor(x)).data, np.tanh(x))

    def test_concat_and_diagonal(self):
        a, b = np.ones((2, 1)), np.zeros((2, 2))
        np.testing.assert_array_equal(F.concat_cols([Tensor(a), Tensor(b)]).data, np.hstack([a, b]))
        np.testing.assert_array_equal(F.diagonal(Tensor(np.arange(9.0).reshape(3, 3))).data, [0, 4, 8])


class TestBatchNorm:
    def test_train_example(self):
        st = BatchNormState.create(1)
        out = batch_norm_nonaffine(Tensor([[1.0], [3.0]]), st, training=True).data
        np.testing.assert_allclose(out, [[-1.0], [1.0]], rtol=1e-5)
        np.testing.assert_allclose(st.running_mean, [0.2])
        # unbiased batch variance of {1, 3} is 2
        np.testing.assert_allclose(st.running_var, [0.9 + 0.1 * 2.0])

    def test_eval_unit_stats_identity(self):
        x = _rng().normal(size=(5, 3))
        out = batch_norm_nonaffine(Tensor(x), BatchNormState.create(3), training=False).data
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_momentum_zero_freezes(self):
        st = BatchNormState.create(2, momentum=0.0)
        batch_norm_nonaffine(Tensor(_rng().normal(size=(6, 2))), st, training=True)
        np.testing.assert_array_equal(st.running_mean, [0, 0])
        np.testing.assert_array_equal(st.running_var, [1, 1])

    def test_identical_rows_give_zeros(self):
        out = batch_norm_nonaffine(Tensor(np.tile([[2.0, -1.0]], (4, 1))), BatchNormState.create(2), True).data
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_single_row_train_rejected(self):
        with pytest.raises(ValueError):
            batch_norm_nonaffine(Tensor(np.ones((1, 2))), BatchNormState.create(2), True)


class TestDropout:
    def test_identity_cases(self):
        x = Tensor(np.ones((3, 3)))
        assert dropout(x, 0.0, True, _rng()) is x
        assert dropout(x, 0.7, False) is x

    def test_zero_fraction_and_scale(self):
        out = dropout(Tensor(np.ones(1_000_000)), 0.1, True, _rng(3)).data
        assert abs(np.mean(out == 0) - 0.1) < 1e-3
        np.testing.assert_allclose(np.unique(out[out != 0]), [1 / 0.9])

    @pytest.mark.parametrize("rate", [1.0, -0.1, 1.5])
    def test_invalid_rate(self, rate):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), rate, True, _rng())


class TestTape:
    def test_sum_wx_gradient(self):
        rng = _rng(1)
        W, x = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        Wt = Tensor(W, requires_grad=True)
        with Tape() as tape:
            loss = F.sum(F.matmul(Wt, Tensor(x)))
        tape.backward(loss)
        # d/dW sum(W x) = 1 x^T
        np.testing.assert_allclose(Wt.grad, np.ones((3, 2)) @ x.T, rtol=1e-12)

    def test_unreached_parameter_zero(self):
        a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = F.sum(F.scale(a, 2.0))
        grads = tape.backward(loss, [a, b])
        np.testing.assert_array_equal(grads[0], [2, 2, 2])
        np.testing.assert_array_equal(grads[1], [0, 0])

    def test_second_backward_errors(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = F.sum(a)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)
        tape.reset()
        assert tape.records == []

    def test_non_scalar_loss(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            out = F.scale(a, 3.0)
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_nothing_recorded_outside_tape(self):
        a = Tensor(np.ones(2), requires_grad=True)
        out = F.scale(a, 3.0)
        assert out.is_leaf and not out.requires_grad

    def test_fanout_accumulates(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = F.sum(F.mul(a, a) + a)
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, [5.0])

    def test_precision_switch(self):
        try:
            set_default_dtype(np.float32)
            assert Tensor([1.0]).data.dtype == np.float32
            assert F.softmax_rows(Tensor(np.ones((2, 3))), np.sqrt(2.0)).data.dtype == np.float32
            with pytest.raises(ValueError):
                set_default_dtype(np.int64)
        finally:
            set_default_dtype(np.float64)
        assert get_default_dtype() is np.float64


def _bn_train(x):
    return batch_norm_nonaffine(x, BatchNormState.create(x.shape[1]), training=True)


def _bn_eval(x):
    st = BatchNormState(np.array([0.3, -0.2, 0.1]), np.array([1.5, 0.7, 2.0]))
    return batch_norm_nonaffine(x, st, training=False)


def _dropout_fixed(x):
    return dropout(x, 0.3, True, np.random.default_rng(9))


R = _rng(42)
GRAD_CASES = {
    "add": (F.add, [R.normal(size=(3, 4)), R.normal(size=(1, 4))]),
    "sub": (F.sub, [R.normal(size=(3, 4)), R.normal(size=(3, 4))]),
    "mul": (F.mul, [R.normal(size=(3, 4)), R.normal(size=(4,))]),
    "scale": (lambda a: F.scale(a, -2.5), [R.normal(size=(2, 5))]),
    "matmul": (F.matmul, [R.normal(size=(4, 5)), R.normal(size=(5, 3))]),
    "matmul_batched_weight": (F.matmul, [R.normal(size=(2, 3, 5)), R.normal(size=(5, 4))]),
    "matmul_batched": (F.matmul, [R.normal(size=(2, 3, 5)), R.normal(size=(2, 5, 3))]),
    "concat_cols": (lambda a, b: F.concat_cols([a, b]), [R.normal(size=(3, 2)), R.normal(size=(3, 4))]),
    "reshape": (lambda a: F.reshape(a, (6, 2)), [R.normal(size=(3, 4))]),
    "transpose": (lambda a: F.transpose(a, (1, 0, 2)), [R.normal(size=(2, 3, 4))]),
    "swap_last": (F.swap_last, [R.normal(size=(2, 3, 4))]),
    "sum": (lambda a: F.sum(a, axis=1), [R.normal(size=(3, 4))]),
    "mean": (lambda a: F.mean(a, axis=0, keepdims=True), [R.normal(size=(3, 4))]),
    "row_mean_pool": (F.row_mean_pool, [R.normal(size=(2, 5, 3))]),
    "diagonal": (F.diagonal, [R.normal(size=(4, 4))]),
    "tanh": (F.tanh, [R.normal(size=(3, 4))]),
    "sigmoid": (F.sigmoid, [R.normal(size=(3, 4))]),
    "log": (F.log, [R.uniform(0.5, 3, size=(3, 4))]),
    "glu": (F.glu, [R.normal(size=(3, 6))]),
    "layer_norm": (F.layer_norm, [R.normal(size=(4, 5)), R.normal(size=5), R.normal(size=5)]),
    "softmax_rows": (lambda a: F.softmax_rows(a, 0.7), [R.normal(size=(3, 5))]),
    "log_softmax_rows": (lambda a: F.log_softmax_rows(a, 0.2), [R.normal(size=(3, 5))]),
    "l2_normalize": (F.l2_normalize, [R.normal(size=(3, 5))]),
    "batch_norm_train": (_bn_train, [R.normal(size=(6, 3))]),
    "batch_norm_eval": (_bn_eval, [R.normal(size=(6, 3))]),
    "dropout": (_dropout_fixed, [R.normal(size=(4, 5))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients(name):
    fn, arrays = GRAD_CASES[name]
    assert op_gradient_error(fn, arrays) < OP_TOL


def test_matmul_gradient_tight():
    rng = _rng(5)
    assert op_gradient_error(F.matmul, [rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]) < 1e-6
