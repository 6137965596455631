import math

import numpy as np
import pytest

from softneg import kernels
from softneg.encoders import flatten_params, init_model, n_trainable
from softneg.loss import (
    GradientCheckError,
    TargetContractError,
    batch_targets,
    build_batch,
    gradient_check,
    model_loss_and_grad,
    soft_contrastive_loss,
)
from softneg.softlabel import SoftTargetMatrix


def _uniform(b: int) -> np.ndarray:
    return np.full((b, b), 1.0 / b)


class TestLossValues:
    def test_zero_logits_uniform_targets_give_log_b(self):
        rep = soft_contrastive_loss(np.zeros((2, 2)), np.zeros((2, 2)),
                                    _uniform(2), _uniform(2))
        assert rep.total == pytest.approx(math.log(2.0), abs=1e-12)
        assert rep.i2t == pytest.approx(rep.t2i)

    def test_loss_is_nonnegative(self, rng):
        for _ in range(50):
            b = int(rng.integers(1, 6))
            li = rng.normal(size=(b, b))
            rep = soft_contrastive_loss(li, li.T.copy(), _uniform(b), _uniform(b))
            assert rep.total >= 0.0

    def test_sharper_diagonal_lowers_one_hot_loss(self):
        eye = np.eye(3)
        flat = soft_contrastive_loss(np.zeros((3, 3)), np.zeros((3, 3)), eye, eye)
        sharp = soft_contrastive_loss(2.0 * eye, 2.0 * eye, eye, eye)
        assert sharp.total < flat.total

    def test_logit_gradient_matches_softmax_minus_target(self):
        # closed form for soft cross-entropy: d/dlogits = (softmax - T) / B
        logits = np.array([[1.0, 0.0], [0.5, -0.5]])
        t = _uniform(2)
        rep = soft_contrastive_loss(logits, np.zeros((2, 2)), t, _uniform(2))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        want = 0.5 * (p - t) / 2.0
        assert np.allclose(rep.grad[:4].reshape(2, 2), want, atol=1e-12)

    def test_hard_negative_columns_widen_i2t_only(self):
        ti = np.hstack([_uniform(2), np.zeros((2, 2))])
        rep = soft_contrastive_loss(np.zeros((2, 4)), np.zeros((2, 2)),
                                    SoftTargetMatrix(ti, h=2), _uniform(2))
        # the two extra candidates dilute the softmax: -sum(T log p) with
        # p uniform over 4 and T mass on the first two columns
        assert rep.i2t == pytest.approx(math.log(4.0), abs=1e-12)
        assert rep.t2i == pytest.approx(math.log(2.0), abs=1e-12)


class TestTargetContract:
    def test_rejects_negative_targets(self):
        bad = np.array([[1.5, -0.5], [0.5, 0.5]])
        with pytest.raises(TargetContractError):
            soft_contrastive_loss(np.zeros((2, 2)), np.zeros((2, 2)), bad, _uniform(2))

    def test_rejects_unnormalized_rows(self):
        bad = np.array([[0.9, 0.9], [0.5, 0.5]])
        with pytest.raises(TargetContractError):
            soft_contrastive_loss(np.zeros((2, 2)), np.zeros((2, 2)), _uniform(2), bad)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_contrastive_loss(np.zeros((2, 3)), np.zeros((2, 2)),
                                  _uniform(2), _uniform(2))


class TestModelLossAndGrad:
    def test_gradient_layout_and_stop_gradient_block(self, desk_params, small_batch):
        rep = model_loss_and_grad(desk_params, small_batch)
        assert rep.grad.size == flatten_params(desk_params).size
        trainable = n_trainable(desk_params)
        assert np.any(rep.grad[:trainable] != 0.0)
        # graph-encoder slice stays zero: targets are constants
        assert np.all(rep.grad[trainable:] == 0.0)

    def test_want_grad_false_skips_gradient(self, desk_params, small_batch):
        rep = model_loss_and_grad(desk_params, small_batch, want_grad=False)
        assert rep.grad.size == 0
        assert rep.total > 0.0

    def test_loss_matches_frozen_target_path(self, desk_params, small_batch):
        frozen = batch_targets(desk_params, small_batch)
        a = model_loss_and_grad(desk_params, small_batch)
        b = model_loss_and_grad(desk_params, small_batch, targets=frozen)
        assert a.total == pytest.approx(b.total, abs=1e-12)
        assert np.allclose(a.grad, b.grad, atol=1e-12)

    def test_hard_negatives_extend_text_side_only(self, small_corpus, desk_params):
        batch = build_batch(small_corpus[:16], desk_params, hardneg_rate=1.0, seed=0)
        assert batch.h > 0
        assert batch.txt_pooled.shape[0] == 16 + batch.h
        assert batch.img.shape[0] == 16
        assert batch.labels.shape[0] == 16
        t_i2t, t_t2i = batch_targets(desk_params, batch)
        assert t_i2t.t.shape == (16, 16 + batch.h)
        assert t_t2i.shape == (16, 16)


class TestGradientCheck:
    def test_analytic_gradient_matches_finite_differences(self, desk_params, small_batch):
        err = gradient_check(desk_params, small_batch, max_coords=120, coord_seed=0)
        assert err < 1e-4

    def test_epsilon_domain_is_validated(self, desk_params, small_batch):
        for eps in (1e-8, 1e-2, 0.0):
            with pytest.raises(ValueError):
                gradient_check(desk_params, small_batch, epsilon=eps)

    def test_detects_corrupted_backward_pass(self, desk_params, small_batch, monkeypatch):
        true_backward = kernels.mlp2_backward

        def skewed(*args):
            grads = true_backward(*args)
            return (grads[0] * 1.05,) + tuple(grads[1:])

        monkeypatch.setattr(kernels, "mlp2_backward", skewed)
        err = gradient_check(desk_params, small_batch, max_coords=150, coord_seed=1)
        assert err > 1e-3

    def test_full_coordinate_sweep_on_tiny_model(self, small_corpus):
        from softneg.encoders import ModelDims

        params = init_model(5, ModelDims(d_img=16, d_tok=6, hidden=4, d_emb=3,
                                         gcn_hidden=3))
        batch = build_batch(small_corpus[:4], params, hardneg_rate=1.0, seed=2)
        err = gradient_check(params, batch)
        assert err < 1e-4
