"""Coefficient perturbation, branch selection, and the full three-stage step."""

import numpy as np
import pytest

from admix import DivergenceError
from admix import autodiff as ad
from admix import amp
from admix import mixup as mx
from admix import models


def make_batch(rng, n=6, max_len=7, vocab=25, num_classes=3):
    ids = rng.integers(0, vocab, size=(n, max_len))
    vls = rng.integers(1, max_len + 1, size=n)
    label_ids = rng.integers(0, num_classes, size=n)
    rows = np.eye(num_classes)[label_ids]
    return models.Batch(ids, vls, rows, label_ids)


def make_model(rng, dropout=0.0):
    return models.init_embed_mlp(25, 5, 6, 3, rng, dropout=dropout)


class TestClipGrad:
    def test_values_clamped_to_unit_interval(self):
        out = amp.clip_grad(np.array([-3.0, -1.0, -0.2, 0.0, 0.7, 1.0, 5.0]))
        np.testing.assert_array_equal(out, [-1.0, -1.0, -0.2, 0.0, 0.7, 1.0, 1.0])

    def test_infinities_clamp(self):
        out = amp.clip_grad(np.array([-np.inf, np.inf]))
        np.testing.assert_array_equal(out, [-1.0, 1.0])

    def test_nan_raises_divergence(self):
        with pytest.raises(DivergenceError, match="NaN"):
            amp.clip_grad(np.array([0.1, np.nan]))


class TestPerturbLambda:
    def test_exact_arithmetic(self):
        out = amp.perturb_lambda(np.array([0.5]), np.array([0.3]), 0.002)
        np.testing.assert_allclose(out, [0.5006], rtol=0, atol=1e-16)

    def test_zero_epsilon_is_identity_bitwise(self):
        lam = np.array([0.0, 0.25, 1.0, 0.7431])
        out = amp.perturb_lambda(lam, np.array([1.0, -1.0, 0.5, -0.2]), 0.0)
        np.testing.assert_array_equal(out, lam)

    def test_clamped_into_unit_interval(self):
        out = amp.perturb_lambda(np.array([0.9995, 0.0004]), np.array([1.0, -1.0]), 0.002)
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_step_bounded_by_epsilon(self):
        rng = np.random.default_rng(0)
        lam = rng.random(100)
        grad = rng.uniform(-1, 1, 100)
        out = amp.perturb_lambda(lam, grad, 0.002)
        assert np.abs(out - lam).max() <= 0.002 + 1e-15

    def test_rejects_unclipped_gradient_and_bad_epsilon(self):
        with pytest.raises(ValueError, match="clipped"):
            amp.perturb_lambda(np.array([0.5]), np.array([1.5]), 0.002)
        with pytest.raises(ValueError, match="epsilon"):
            amp.perturb_lambda(np.array([0.5]), np.array([0.5]), -0.1)


class TestMaskAndFinalLoss:
    def test_mask_is_strict_improvement_indicator(self):
        loss = np.array([1.0, 1.0, 1.0])
        prime = np.array([1.5, 1.0, 0.5])
        np.testing.assert_array_equal(amp.compute_mask(loss, prime), [1.0, 0.0, 0.0])

    def test_final_loss_selects_per_sample(self):
        loss = ad.Tensor([1.0, 2.0, 3.0])
        prime = ad.Tensor([4.0, 1.0, 5.0])
        mask = np.array([1.0, 0.0, 1.0])
        out = amp.final_loss(loss, prime, mask)
        np.testing.assert_array_equal(out.data, [4.0, 2.0, 5.0])

    def test_final_loss_equals_elementwise_max_under_computed_mask(self):
        rng = np.random.default_rng(1)
        loss = rng.random(50)
        prime = rng.random(50)
        mask = amp.compute_mask(loss, prime)
        out = amp.final_loss(ad.Tensor(loss), ad.Tensor(prime), mask)
        np.testing.assert_array_equal(out.data, np.maximum(loss, prime))

    def test_gradient_flows_only_to_selected_branch(self):
        loss = ad.Tensor([1.0, 2.0], requires_grad=True)
        prime = ad.Tensor([3.0, 1.0], requires_grad=True)
        mask = np.array([1.0, 0.0])
        with ad.Tape() as tape:
            y = ad.reduce_sum(amp.final_loss(loss, prime, mask))
        ad.backward(tape, y)
        np.testing.assert_array_equal(loss.grad, [0.0, 1.0])
        np.testing.assert_array_equal(prime.grad, [1.0, 0.0])


class TestGradLambda:
    def test_requires_reachable_leaf(self):
        model = make_model(np.random.default_rng(2))
        batch = make_batch(np.random.default_rng(3))
        lam_leaf = ad.Tensor(np.full(len(batch), 0.5), requires_grad=True)
        with ad.Tape() as tape:
            logits = models.forward(model, batch)
            loss = ad.reduce_sum(ad.softmax_cross_entropy(logits, batch.label_rows))
        with pytest.raises(ValueError, match="not reachable"):
            amp.grad_lambda(tape, loss, lam_leaf)

    def test_rejects_non_grad_leaf(self):
        lam = ad.Tensor(np.ones(3))
        with pytest.raises(ValueError, match="require"):
            amp.grad_lambda(ad.Tape(), ad.Tensor(0.0), lam)

    def test_self_pairing_gives_exactly_zero(self):
        model = make_model(np.random.default_rng(4))
        batch = make_batch(np.random.default_rng(5))
        cfg = mx.MixConfig(policy="amp")
        with ad.Tape() as tape:
            mix_batch, _, loss = mx.rand_op(
                model, batch, cfg, np.random.default_rng(6),
                j_override=np.arange(len(batch)),
            )
            g = amp.grad_lambda(tape, ad.reduce_sum(loss), mix_batch.lam_leaf)
        np.testing.assert_array_equal(g, np.zeros(len(batch)))

    def test_matches_value_from_full_step(self):
        model = make_model(np.random.default_rng(7))
        batch = make_batch(np.random.default_rng(8))
        cfg = mx.MixConfig(policy="amp", epsilon=0.002)
        with ad.Tape():
            total, bundle = amp.amp_step(model, batch, cfg, np.random.default_rng(9))
        assert np.abs(bundle.grad_lambda).max() <= 1.0
        assert bundle.lambda_prime.shape == bundle.lam.shape


class TestRecomputeLoss:
    def test_unchanged_lambda_reproduces_loss_bitwise(self):
        model = make_model(np.random.default_rng(10), dropout=0.3)
        batch = make_batch(np.random.default_rng(11))
        cfg = mx.MixConfig(policy="amp")
        with ad.Tape():
            mix_batch, _, loss = mx.rand_op(
                model, batch, cfg, np.random.default_rng(12), np.random.default_rng(13)
            )
            again = amp.recompute_loss(model, mix_batch, mix_batch.lam)
        np.testing.assert_array_equal(again.data, loss.data)

    def test_identical_endpoints_make_perturbation_inert(self):
        model = make_model(np.random.default_rng(14))
        batch = make_batch(np.random.default_rng(15))
        # pair every row with itself, so g_i == g_j and y_i == y_j
        cfg = mx.MixConfig(policy="amp")
        with ad.Tape():
            mix_batch, _, loss = mx.rand_op(
                model, batch, cfg, np.random.default_rng(16),
                j_override=np.arange(len(batch)),
            )
            moved = amp.recompute_loss(model, mix_batch, np.clip(mix_batch.lam + 0.3, 0, 1))
        np.testing.assert_allclose(moved.data, loss.data, rtol=1e-12)


class TestAmpStep:
    def run_step(self, seed=20, epsilon=0.002, dropout=0.0, **cfg_kwargs):
        model = make_model(np.random.default_rng(seed), dropout=dropout)
        batch = make_batch(np.random.default_rng(seed + 1))
        cfg = mx.MixConfig(policy="amp", epsilon=epsilon, **cfg_kwargs)
        with ad.Tape() as tape:
            total, bundle = amp.amp_step(
                model, batch, cfg, np.random.default_rng(seed + 2),
                np.random.default_rng(seed + 3),
            )
        return model, tape, total, bundle

    def test_final_loss_is_elementwise_max(self):
        _, _, total, bundle = self.run_step()
        np.testing.assert_array_equal(bundle.loss_final, np.maximum(bundle.loss, bundle.loss_prime))
        np.testing.assert_array_equal(bundle.mask, (bundle.delta > 0.0).astype(float))
        assert total.data == pytest.approx(bundle.loss_final.mean(), rel=1e-15)

    def test_perturbation_contract(self):
        _, _, _, bundle = self.run_step()
        assert np.abs(bundle.grad_lambda).max() <= 1.0
        assert np.abs(bundle.lambda_prime - bundle.lam).max() <= 0.002 + 1e-15
        assert bundle.lambda_prime.min() >= 0.0
        assert bundle.lambda_prime.max() <= 1.0

    def test_zero_epsilon_collapses_to_plain_interpolation(self):
        _, _, total, bundle = self.run_step(epsilon=0.0, dropout=0.4)
        np.testing.assert_array_equal(bundle.loss_prime, bundle.loss)
        np.testing.assert_array_equal(bundle.mask, np.zeros_like(bundle.mask))
        np.testing.assert_array_equal(bundle.loss_final, bundle.loss)
        # bitwise-identical to the expression the plain policy uses
        assert float(total.data) == bundle.loss.sum() * (1.0 / bundle.loss.size)

    def test_force_mask_ones_keeps_perturbed_branch(self):
        _, _, _, bundle = self.run_step(force_mask_ones=True)
        np.testing.assert_array_equal(bundle.mask, np.ones_like(bundle.mask))
        np.testing.assert_array_equal(bundle.loss_final, bundle.loss_prime)

    def test_mean_final_loss_never_below_mean_loss(self):
        for seed in range(30, 40):
            _, _, total, bundle = self.run_step(seed=seed)
            assert float(total.data) >= bundle.loss.mean() - 1e-15

    def test_needs_active_tape(self):
        model = make_model(np.random.default_rng(40))
        batch = make_batch(np.random.default_rng(41))
        with pytest.raises(RuntimeError, match="tape"):
            amp.amp_step(model, batch, mx.MixConfig(policy="amp"), np.random.default_rng(42))

    def test_grads_are_clean_after_step_and_backward_fills_them(self):
        model, tape, total, _ = self.run_step()
        assert all(p.grad is None for p in model.params.values())
        ad.backward(tape, total)
        for name, p in model.trainable_params().items():
            assert p.grad is not None and np.isfinite(p.grad).all(), name

    def test_ascent_direction_raises_loss_on_average(self):
        # the perturbed coefficient should not sit below the original loss:
        # across many steps the mean of L' - L stays positive
        deltas = []
        rng_pool = np.random.default_rng(50)
        for _ in range(200):
            seeds = rng_pool.integers(0, 2**31, size=4)
            model = make_model(np.random.default_rng(seeds[0]))
            batch = make_batch(np.random.default_rng(seeds[1]))
            lam = np.random.default_rng(seeds[2]).uniform(0.05, 0.95, len(batch))
            cfg = mx.MixConfig(policy="amp", epsilon=0.01)
            with ad.Tape():
                _, bundle = amp.amp_step(
                    model, batch, cfg, np.random.default_rng(seeds[3]), lam_override=lam
                )
            deltas.append(bundle.delta.mean())
        assert np.mean(deltas) > 0.0

    def test_label_weights_keep_original_lambda(self):
        # move lambda' far from lambda by hand; if label weights followed
        # lambda', the losses at both interpolants of a label-flipped pair
        # would swap rather than shift
        model = make_model(np.random.default_rng(60))
        batch = make_batch(np.random.default_rng(61))
        cfg = mx.MixConfig(policy="amp")
        with ad.Tape():
            mix_batch, _, _ = mx.rand_op(model, batch, cfg, np.random.default_rng(62))
            swapped = amp.recompute_loss(model, mix_batch, 1.0 - mix_batch.lam)
            relabeled = mx.mixup_loss(
                models.forward_from_layer(
                    model,
                    models.Hidden(
                        "sent",
                        mx.mix_hidden(
                            mix_batch.hidden_i, mix_batch.hidden_j, ad.Tensor(1.0 - mix_batch.lam)
                        ),
                    ),
                ),
                mix_batch.y_i,
                mix_batch.y_j,
                1.0 - mix_batch.lam,
            )
        # same features, different label weights: the two must disagree
        # whenever the pair's labels differ
        differs = np.any(mix_batch.y_i != mix_batch.y_j, axis=1)
        assert np.abs(swapped.data - relabeled.data)[differs].max() > 1e-6
