"""Shared finite-difference helpers for the test suite."""

import numpy as np

from deepela import tensor as F
from deepela.tensor import Tape, Tensor, max_relative_error, numerical_grad


def op_gradient_error(fn, arrays, seed: int = 0, h: float = 1e-6) -> float:
    """Max relative error of analytic vs central-difference gradients of sum(w * fn(*inputs))."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(seed).uniform(0.5, 1.5, out_shape) * np.random.default_rng(seed + 1).choice([-1, 1], out_shape)

    with Tape() as tape:
        loss = F.sum(F.mul(fn(*ts), Tensor(w)))
    tape.backward(loss)
    worst = 0.0
    for t, a in zip(ts, arrays):
        def f():
            return float(np.sum(fn(*[Tensor(x) for x in arrays]).data * w))
        num = numerical_grad(f, a, h)
        worst = max(worst, max_relative_error(t.grad, num))
    return worst


def e2e_gradient_error(model, x: np.ndarray, j: int, tau: float = 0.05, per_tensor: int = 12,
                       h: float = 1e-4, seed: int = 0) -> tuple[float, int]:
    """Check the full student loss gradient on a random subset of coordinates of every parameter.

    Teacher targets carry no gradient, so they are computed once and held
    fixed. Dropout masks and batch-norm running statistics are frozen by
    restoring the model rng and the batch-norm states before every evaluation.
    Returns the max relative error and the number of coordinates checked.
    """
    from deepela.pretrain import contrastive_loss

    rng_state = model.rng.bit_generator.state
    bn = (model.bn_student.copy(), model.bn_teacher.copy())

    def restore():
        model.rng.bit_generator.state = rng_state
        model.bn_student, model.bn_teacher = bn[0].copy(), bn[1].copy()

    from deepela.pretrain import _l2, _project

    restore()
    Q1, Q2 = _project(model, model.trunk(Tensor(x), training=True), teacher=True, split=j)
    targets = (_l2(Q1.data), _l2(Q2.data))

    def loss_value() -> float:
        restore()
        return float(contrastive_loss(model, Tensor(x), j, tau, targets=targets)[0].data)

    restore()
    model.zero_grad()
    with Tape() as tape:
        loss = contrastive_loss(model, Tensor(x), j, tau, targets=targets)[0]
    tape.backward(loss)
    pick = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for p in model.parameters():
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        g = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, max_relative_error(np.array([g[i]]), np.array([num])))
            checked += 1
    restore()
    return worst, checked
