"""Adversarial perturbation of the mixing coefficient.

One training step runs three stages on a single tape:

1. random stage: a plain interpolation pass (pairing, lambda draw,
   mixed forward) producing per-sample losses L;
2. ascent stage: backprop of sum(L) yields dL/dlambda, which is
   clipped to [-1, 1] and applied as lambda' = lambda + epsilon * grad,
   clamped to [0, 1]. Features are re-mixed at lambda' while the label
   weights keep the original lambda, then the suffix reruns under the
   same dropout mask, giving L';
3. selection stage: per sample, the step keeps whichever loss is
   larger, via mask = 1 when L' - L > 0, so the optimized objective is
   mean(max(L, L')).

With epsilon = 0 the perturbed pass recomputes the same values and the
step reduces to the plain interpolation policy, reproducing it bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mixup as mx
from . import models as md
from .errors import DivergenceError


@dataclass
class LossBundle:
    """Per-sample diagnostics of one step under any policy."""

    loss: np.ndarray  # L, before perturbation
    loss_prime: np.ndarray  # L' after perturbation (equals L when unused)
    delta: np.ndarray  # L' - L
    mask: np.ndarray  # 1.0 where the perturbed branch was kept
    loss_final: np.ndarray  # elementwise max(L, L')
    lam: np.ndarray
    grad_lambda: np.ndarray  # clipped dL/dlambda (zeros when unused)
    lambda_prime: np.ndarray


def grad_lambda(tape: ad.Tape, loss_sum: ad.Tensor, lam_leaf: ad.Tensor) -> np.ndarray:
    """Backprop ``loss_sum`` and return the gradient on the lambda leaf."""
    if not lam_leaf.requires_grad:
        raise ValueError("lambda leaf does not require grad")
    ad.backward(tape, loss_sum)
    if lam_leaf.grad is None:
        raise ValueError("lambda leaf is not reachable from the loss on this tape")
    return lam_leaf.grad.copy()


def clip_grad(grad: np.ndarray) -> np.ndarray:
    """Clamp the raw coefficient gradient into [-1, 1]."""
    grad = np.asarray(grad, dtype=np.float64)
    if np.isnan(grad).any():
        raise DivergenceError("NaN in the mixing-coefficient gradient")
    return np.clip(grad, -1.0, 1.0)


def perturb_lambda(lam: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    """lambda' = clamp(lambda + epsilon * grad, 0, 1)."""
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    grad = np.asarray(grad)
    if np.abs(grad).max(initial=0.0) > 1.0:
        raise ValueError("gradient must be clipped to [-1, 1] before perturbing")
    return np.clip(lam + epsilon * grad, 0.0, 1.0)


def recompute_loss(model: md.Model, mix_batch: mx.MixBatch, lambda_prime: np.ndarray) -> ad.Tensor:
    """Re-mix the saved hidden states at lambda' and rescore.

    The perturbed coefficient enters as a constant (no gradient flows
    back into the ascent step), the label weights stay at the original
    lambda leaf, and the suffix reuses the saved dropout mask, so the
    two passes differ only through the interpolation point.
    """
    lam_p = ad.Tensor(np.asarray(lambda_prime, dtype=np.float64))
    mixed = mx.mix_hidden(mix_batch.hidden_i, mix_batch.hidden_j, lam_p)
    hidden = md.Hidden(mix_batch.layer, mixed, mix_batch.mixed_valid_lens)
    logits = md.forward_from_layer(model, hidden, dropout_mask=mix_batch.dropout_mask)
    return mx.mixup_loss(logits, mix_batch.y_i, mix_batch.y_j, mix_batch.lam_leaf)


def compute_mask(loss: np.ndarray, loss_prime: np.ndarray) -> np.ndarray:
    """1.0 where the perturbation increased the loss, else 0.0."""
    return (np.asarray(loss_prime) - np.asarray(loss) > 0.0).astype(np.float64)


def final_loss(loss: ad.Tensor, loss_prime: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Per-sample loss * (1 - mask) + loss' * mask; equals max(loss, loss')."""
    mask = np.asarray(mask, dtype=np.float64)
    keep = ad.mul(loss, ad.Tensor(1.0 - mask))
    take = ad.mul(loss_prime, ad.Tensor(mask))
    return ad.add(keep, take)


def amp_step(
    model: md.Model,
    batch: md.Batch,
    config: mx.MixConfig,
    rng: np.random.Generator,
    dropout_rng: np.random.Generator | None = None,
    lam_override: np.ndarray | None = None,
    j_override: np.ndarray | None = None,
):
    """Run the full three-stage step on the ambient tape.

    Returns ``(total, bundle)`` where ``total`` is the scalar
    mean(max(L, L')) ready for a backward pass, and ``bundle`` records
    the per-sample quantities. Parameter and lambda grads left by the
    internal ascent backprop are zeroed before returning, so the
    caller's backward starts clean.
    """
    tape = ad.active_tape()
    if tape is None:
        raise RuntimeError("amp_step needs a recording tape")
    mix_batch, _, loss = mx.rand_op(
        model, batch, config, rng, dropout_rng, lam_override=lam_override, j_override=j_override
    )
    n = len(batch)

    g_lam = grad_lambda(tape, ad.reduce_sum(loss), mix_batch.lam_leaf)
    model.zero_grads()
    mix_batch.lam_leaf.grad = None

    g_lam = clip_grad(g_lam)
    lam_prime = perturb_lambda(mix_batch.lam, g_lam, config.epsilon)
    loss_prime = recompute_loss(model, mix_batch, lam_prime)

    if config.force_mask_ones:
        mask = np.ones(n)
    else:
        mask = compute_mask(loss.data, loss_prime.data)
    loss_final = final_loss(loss, loss_prime, mask)
    total = ad.scale(ad.reduce_sum(loss_final), 1.0 / n)

    bundle = LossBundle(
        loss=loss.data.copy(),
        loss_prime=loss_prime.data.copy(),
        delta=loss_prime.data - loss.data,
        mask=mask,
        loss_final=loss_final.data.copy(),
        lam=mix_batch.lam.copy(),
        grad_lambda=g_lam,
        lambda_prime=lam_prime,
    )
    return total, bundle
