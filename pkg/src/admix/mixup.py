"""Beta-distributed interpolation of hidden states and label rows.

A training step under this policy pairs each example with a partner
from the same minibatch, draws a mixing coefficient lambda from
Beta(alpha, alpha), interpolates hidden states at one of the named
backbone cut points, and scores the result against both endpoint labels
weighted by lambda and (1 - lambda).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models as md

POLICIES = ("none", "mixup", "amp")


@dataclass
class MixConfig:
    policy: str = "mixup"
    alpha: float = 1.0
    epsilon: float = 0.002
    layer: str = "sent"
    per_pair_lambda: bool = True
    # ablation switch: always adopt the perturbed branch of the step
    force_mask_ones: bool = False

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.layer not in md.LAYER_NAMES:
            raise ValueError(f"layer must be one of {md.LAYER_NAMES}, got {self.layer!r}")


@dataclass
class MixBatch:
    """Everything a mixed step produces and the perturbation stage reuses."""

    j_index: np.ndarray  # [n] partner for each position
    lam: np.ndarray  # [n] coefficients in [0, 1]
    mixed_hidden: md.Hidden
    mixed_labels: np.ndarray  # [n, C] soft rows
    layer: str
    # wiring for a second pass over the same pairing
    lam_leaf: ad.Tensor = None
    hidden_i: ad.Tensor = None
    hidden_j: ad.Tensor = None
    y_i: np.ndarray = None
    y_j: np.ndarray = None
    mixed_valid_lens: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None


def _gamma_boosted(shape: float, rng: np.random.Generator) -> float:
    """Marsaglia-Tsang gamma draw; shapes below 1 use the power boost."""
    if shape < 1.0:
        # Gamma(a) = Gamma(a + 1) * U^(1/a)
        return _gamma_core(shape + 1.0, rng) * rng.random() ** (1.0 / shape)
    return _gamma_core(shape, rng)


def _gamma_core(shape: float, rng: np.random.Generator) -> float:
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        # cheap squeeze first, log test only on the rare rejects
        if u < 1.0 - 0.0331 * x * x * x * x:
            return d * v
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def sample_lambda(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n coefficients from Beta(alpha, alpha) as a gamma ratio."""
    if alpha <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    out = np.empty(n)
    for i in range(n):
        g1 = _gamma_boosted(alpha, rng)
        g2 = _gamma_boosted(alpha, rng)
        total = g1 + g2
        # both draws can underflow to 0 for tiny alpha; split the tie
        out[i] = 0.5 if total == 0.0 else g1 / total
    return out


def pair_batch(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation (Fisher-Yates) assigning each row a partner."""
    if n < 1:
        raise ValueError(f"batch must be nonempty, got n={n}")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def mix_hidden(g_i: ad.Tensor, g_j: ad.Tensor, lam: ad.Tensor) -> ad.Tensor:
    """lam * g_i + (1 - lam) * g_j with lam broadcast over feature axes.

    Recorded on the active tape, so gradients flow to the hidden states
    and to ``lam`` itself when it is a leaf.
    """
    if g_i.shape != g_j.shape:
        raise ValueError(f"hidden shapes differ: {g_i.shape} vs {g_j.shape}")
    n = g_i.shape[0]
    if lam.shape != (n,):
        raise ValueError(f"lam must have shape ({n},), got {lam.shape}")
    lam_col = ad.reshape(lam, (n,) + (1,) * (g_i.ndim - 1))
    one_minus = ad.add(ad.scale(lam_col, -1.0), 1.0)
    return ad.add(ad.mul(g_i, lam_col), ad.mul(g_j, one_minus))


def mix_labels(y_i: np.ndarray, y_j: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Interpolated label rows; plain arrays, never differentiated."""
    if y_i.shape != y_j.shape:
        raise ValueError(f"label shapes differ: {y_i.shape} vs {y_j.shape}")
    lam_col = np.asarray(lam)[:, None]
    return y_i * lam_col + y_j * (1.0 - lam_col)


def mixup_loss(logits: ad.Tensor, y_i: np.ndarray, y_j: np.ndarray, lam) -> ad.Tensor:
    """Per-sample loss lam * ce(logits, y_i) + (1 - lam) * ce(logits, y_j).

    ``lam`` may be a leaf tensor, in which case the loss is
    differentiable in the mixing coefficient through the label weights.
    By linearity of cross entropy in the target row this equals the
    cross entropy against the interpolated labels.
    """
    lam_t = lam if isinstance(lam, ad.Tensor) else ad.Tensor(np.asarray(lam, dtype=np.float64))
    ce_i = ad.softmax_cross_entropy(logits, y_i)
    ce_j = ad.softmax_cross_entropy(logits, y_j)
    one_minus = ad.add(ad.scale(lam_t, -1.0), 1.0)
    return ad.add(ad.mul(lam_t, ce_i), ad.mul(one_minus, ce_j))


def rand_op(
    model: md.Model,
    batch: md.Batch,
    config: MixConfig,
    rng: np.random.Generator,
    dropout_rng: np.random.Generator | None = None,
    lam_override: np.ndarray | None = None,
    j_override: np.ndarray | None = None,
):
    """One random-interpolation pass: pair, draw lambda, mix, score.

    Returns ``(mix_batch, logits, per_sample_loss)``. The loss tensor
    depends on ``mix_batch.lam_leaf`` through both the mixed hidden
    state and the label weights. Draw order is fixed (partner
    permutation, then lambda, then dropout mask) so policies sharing a
    seed see identical randomness; the override hooks skip no draws
    except the one they replace.
    """
    config.validate()
    n = len(batch)
    if j_override is not None:
        j_index = np.asarray(j_override)
    else:
        j_index = pair_batch(n, rng)
    if lam_override is not None:
        lam = np.asarray(lam_override, dtype=np.float64)
    elif config.per_pair_lambda:
        lam = sample_lambda(config.alpha, n, rng)
    else:
        lam = np.full(n, sample_lambda(config.alpha, 1, rng)[0])

    hidden = md.forward_to_layer(model, batch, config.layer)
    g_i = hidden.tensor
    g_j = ad.gather_rows(g_i, j_index)
    mixed_vls = None
    if hidden.valid_lens is not None:
        mixed_vls = np.maximum(hidden.valid_lens, hidden.valid_lens[j_index])

    lam_leaf = ad.Tensor(lam, requires_grad=True)
    mixed = mix_hidden(g_i, g_j, lam_leaf)
    mixed_hidden = md.Hidden(config.layer, mixed, mixed_vls)

    dropout_mask = md.make_dropout_mask(model, n, dropout_rng)
    logits = md.forward_from_layer(model, mixed_hidden, dropout_mask=dropout_mask)

    y_i = batch.label_rows
    y_j = batch.label_rows[j_index]
    loss = mixup_loss(logits, y_i, y_j, lam_leaf)

    mix_batch = MixBatch(
        j_index=j_index,
        lam=lam,
        mixed_hidden=mixed_hidden,
        mixed_labels=mix_labels(y_i, y_j, lam),
        layer=config.layer,
        lam_leaf=lam_leaf,
        hidden_i=g_i,
        hidden_j=g_j,
        y_i=y_i,
        y_j=y_j,
        mixed_valid_lens=mixed_vls,
        dropout_mask=dropout_mask,
    )
    return mix_batch, logits, loss
