import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepela.benchmarks import bbob, random_rotation
from deepela.model import DeepELA, preset
from deepela.pretrain import (
    AugmentationSpec,
    TrainConfig,
    TrainState,
    alignment_report,
    info_nce,
    learning_rate,
    make_views,
    resume,
    save_training_checkpoint,
    symmetric_loss,
    train,
    train_step,
    write_metrics,
)
from deepela.problem import Sample
from deepela.randgen import GeneratorConfig, generate_corpus
from deepela.sampling import uniform_sample
from deepela.tensor import Tape, Tensor
from deepela.tokenizer import tokenize

from _helpers import op_gradient_error

OFF = AugmentationSpec(False, False, False, False)


def _closed_form_info_nce(P, T, tau):
    """Loop-based oracle: 2 tau * mean_i -log(exp(s_ii) / sum_k exp(s_ik))."""
    j = len(P)
    total = 0.0
    for i in range(j):
        s = [sum(P[i][c] * T[k][c] for c in range(len(P[i]))) / tau for k in range(j)]
        top = max(s)
        denom = sum(np.exp(v - top) for v in s)
        total += -(s[i] - top - np.log(denom))
    return 2 * tau * total / j


class TestInfoNCE:
    def test_single_row_zero(self):
        assert float(info_nce(np.array([[0.3, -1.0]]), np.array([[2.0, 0.5]])).data) == 0.0

    def test_identity_fixture(self):
        L = float(info_nce(np.eye(2), np.eye(2), 0.05).data)
        expected = 2 * 0.05 * np.log1p(np.exp(-20.0))
        assert abs(L - expected) < 1e-10
        assert L == pytest.approx(2.06e-10, rel=1e-3)

    def test_uniform_fixture(self):
        P = np.ones((2, 3))
        L = float(info_nce(P, P, 0.05).data)
        assert abs(L - 0.1 * np.log(2)) < 1e-10
        assert L == pytest.approx(0.0693, abs=1e-4)

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            j, p, tau = rng.integers(1, 6), rng.integers(1, 5), rng.uniform(0.01, 0.3)
            P, T = rng.normal(size=(j, p)), rng.normal(size=(j, p))
            assert float(info_nce(P, T, tau).data) == pytest.approx(_closed_form_info_nce(P, T, tau), abs=1e-10)

    def test_symmetric_fixture(self):
        P1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        P2 = np.array([[0.6, 0.8], [0.8, -0.6]])
        T1 = np.array([[0.0, 1.0], [1.0, 0.0]])
        T2 = np.array([[1.0, 0.0], [0.6, 0.8]])
        tau = 0.1
        # term 1: S = P1 T2^T / tau = [[10, 6], [0, 8]]
        a = 0.5 * (np.log1p(np.exp(-4.0)) + np.log1p(np.exp(-8.0)))
        # term 2: S = P2 T1^T / tau = [[8, 6], [-6, 8]]
        b = 0.5 * (np.log1p(np.exp(-2.0)) + np.log1p(np.exp(-14.0)))
        expected = 0.5 * (2 * tau * a + 2 * tau * b)
        L = float(symmetric_loss(P1, P2, T1, T2, tau).data)
        assert abs(L - expected) < 1e-12

    def test_symmetric_swap_and_self(self, rng):
        P1, P2, T1, T2 = (rng.normal(size=(5, 4)) for _ in range(4))
        a = float(symmetric_loss(P1, P2, T1, T2).data)
        b = float(symmetric_loss(P2, P1, T2, T1).data)
        assert a == b
        Q = np.eye(4) * 3
        assert float(symmetric_loss(Q, Q, Q, Q).data) < 1e-12

    def test_row_permutation_invariant(self, rng):
        P1, P2, T1, T2 = (rng.normal(size=(6, 3)) for _ in range(4))
        p = rng.permutation(6)
        a = float(symmetric_loss(P1, P2, T1, T2).data)
        b = float(symmetric_loss(P1[p], P2[p], T1[p], T2[p]).data)
        assert a == pytest.approx(b, rel=1e-14, abs=1e-15)

    def test_gradient(self, rng):
        T = rng.normal(size=(5, 4))
        assert op_gradient_error(lambda P: info_nce(P, T, 0.2), [rng.normal(size=(5, 4))]) < 1e-5

    def test_target_gets_no_gradient(self, rng):
        P = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        T = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = info_nce(P, T)
        tape.backward(loss)
        assert P.grad is not None and T.grad is None

    def test_errors(self):
        with pytest.raises(ValueError):
            info_nce(np.ones((2, 3)), np.ones((3, 3)))
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            info_nce(np.array([[np.inf, 0.0], [0.0, 1.0]]), np.eye(2))
        with pytest.raises(ValueError):
            symmetric_loss(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))


@settings(max_examples=200)
@given(seed=st.integers(0, 2**31), j=st.integers(1, 8), p=st.integers(1, 8),
       tau=st.floats(1e-3, 0.3), scale=st.floats(1e-3, 10))
def test_info_nce_nonnegative(seed, j, p, tau, scale):
    rng = np.random.default_rng(seed)
    L = float(info_nce(rng.normal(size=(j, p)) * scale, rng.normal(size=(j, p)) * scale, tau).data)
    assert L >= -1e-12


class TestViews:
    def test_all_off_shared(self, rng):
        inst = bbob(3, 1, 2)
        a, b = make_views(inst, 30, OFF, rng)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y, b.Y)

    def test_inversion_only_changes_signs(self):
        inst = bbob(8, 2, 3)
        spec = AugmentationSpec(False, True, False, False)
        X = uniform_sample(inst.bounds, 30, np.random.default_rng(3))
        a, b = make_views(inst, 30, spec, np.random.default_rng(3))
        np.testing.assert_array_equal(a.Y, b.Y)
        t_raw = tokenize(Sample(X, a.Y), 1, 4).tokens
        t_aug = tokenize(a, 1, 4).tokens
        flipped = np.sign(t_aug[:, :3] * t_raw[:, :3]).mean(axis=0)
        np.testing.assert_allclose(np.abs(flipped), 1.0)
        np.testing.assert_allclose(t_aug, t_raw * np.concatenate([flipped, np.ones(5)]), atol=1e-12)

    def test_rotation_orthogonal(self, rng):
        for d in (2, 3, 5, 10):
            R = random_rotation(d, rng)
            assert np.max(np.abs(R.T @ R - np.eye(d))) < 1e-10

    def test_views_keep_problem(self, rng):
        inst = bbob(1, 0, 2)
        spec = AugmentationSpec(True, True, True, False)
        a, b = make_views(inst, 50, spec, rng)
        # the sphere is rotation, sign and permutation invariant around the origin
        np.testing.assert_allclose(inst.evaluate(a.X), a.Y, atol=1e-9)
        np.testing.assert_allclose(inst.evaluate(b.X), b.Y, atol=1e-9)
        assert not np.allclose(a.X, b.X)

    def test_objective_columns_permuted(self):
        inst = generate_corpus(1, GeneratorConfig(seed=3), [(2, 2)])[0]
        spec = AugmentationSpec(False, False, True, False)
        seen = set()
        for s in range(20):
            a, b = make_views(inst, 20, spec, np.random.default_rng(s))
            seen.add(bool(np.array_equal(a.Y, b.Y)))
            assert np.allclose(np.sort(a.Y, axis=1), np.sort(b.Y, axis=1))
        assert seen == {True, False}


class TestConfig:
    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"tau": 0.31}, {"batch_size": 1}, {"grad_accum": 0},
                                    {"ema_momentum": 0.0}, {"nu": 2},
                                    {"augment": AugmentationSpec(False, False, False, False)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.tau == 0.05 and cfg.ema_momentum == 0.01 and cfg.bn_momentum == 0.1
        assert cfg.steps == 2000
        assert cfg.dims == [(2, 1), (2, 2), (3, 1)]

    def test_warmup(self):
        cfg = TrainConfig(epochs=1, instances_per_epoch=64 * 100, batch_size=64)
        assert [learning_rate(u, cfg) for u in (0, 1)] == [0.5e-3, 1e-3]
        assert learning_rate(50, cfg) == 1e-3


def _small_state(**kw):
    base = dict(batch_size=4, multiplier=5, corpus_size=8, epochs=1, instances_per_epoch=40, seed=2)
    base.update(kw)
    cfg = TrainConfig(**base)
    pool = generate_corpus(8, GeneratorConfig(seed=2), cfg.dims)
    return TrainState(DeepELA(preset("tiny"), seed=1), cfg, pool)


def _snapshot(tensors):
    return {n: t.data.copy() for n, t in tensors.items()}


class TestTrainStep:
    def test_grad_accum(self):
        st = _small_state(grad_accum=2)
        before = _snapshot(st.model.params)
        r1 = train_step(st)
        assert not r1.updated
        for n, v in before.items():
            np.testing.assert_array_equal(st.model.params[n].data, v)
        r2 = train_step(st)
        assert r2.updated
        assert any(not np.array_equal(st.model.params[n].data, v) for n, v in before.items())

    def test_zero_lr_moves_teacher_only(self):
        st = _small_state(lr=0.0, ema_momentum=0.5)
        # make student and teacher differ so the EMA has something to do
        for t in st.model.teacher.values():
            t.data = t.data + 1.0
        before_s, before_t = _snapshot(st.model.params), _snapshot(st.model.teacher)
        train_step(st)
        for n, v in before_s.items():
            np.testing.assert_array_equal(st.model.params[n].data, v)
        for n, v in before_t.items():
            src = st.model.params[n[len("teacher."):]].data
            np.testing.assert_allclose(st.model.teacher[n].data, 0.5 * v + 0.5 * src)

    def test_teacher_never_receives_gradient(self):
        st = _small_state(grad_accum=2)
        train_step(st)
        assert all(t.grad is None for t in st.model.teacher.values())
        assert any(p.grad is not None for p in st.model.params.values())

    def test_deterministic(self):
        a = [train_step(s) for s in [_small_state()] for _ in range(3)]
        b = [train_step(s) for s in [_small_state()] for _ in range(3)]
        assert a == b

    def test_breakdown_fields(self):
        r = train_step(_small_state())
        assert r.loss > 0 and -1 <= r.neg_cos <= 1 and -1 <= r.pos_cos <= 1 and r.lr > 0

    def test_resume_continues(self, tmp_path):
        ref = _small_state()
        train(ref, steps=4)
        st = _small_state()
        path = tmp_path / "ck.dela"
        train(st, steps=2, checkpoint_path=path)
        st2 = resume(path, st.pool)
        assert st2.step == 2
        for n, t in st.model.params.items():
            np.testing.assert_array_equal(st2.model.params[n].data, t.data)
        train(st2, steps=4)
        assert [h.loss for h in st2.history] == [h.loss for h in ref.history]
        for n, t in ref.model.params.items():
            np.testing.assert_array_equal(st2.model.params[n].data, t.data)

    def test_metrics_csv(self, tmp_path):
        st = _small_state()
        train(st, steps=2)
        write_metrics(tmp_path / "m.csv", st.history)
        with open(tmp_path / "m.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "loss", "pos_cos", "neg_cos", "lr"]
        assert float(rows[1]["loss"]) == st.history[1].loss

    def test_nu_mismatch(self):
        cfg = TrainConfig(nu=6)
        with pytest.raises(ValueError):
            TrainState(DeepELA(preset("tiny")), cfg, pool=[])


class TestAlignment:
    def test_identity_augmentation_cosine_one(self):
        model = DeepELA(preset("tiny"), seed=0)
        insts = [bbob(f, 1, 2) for f in (1, 3, 8)]
        rep = alignment_report(model, insts, np.random.default_rng(0), n=30, spec=OFF)
        assert rep.pos_mean == pytest.approx(1.0, abs=1e-12)
        assert rep.n_instances == 3

    def test_needs_two(self):
        with pytest.raises(ValueError):
            alignment_report(DeepELA(preset("tiny")), [bbob(1, 1, 2)], np.random.default_rng(0))
