"""Small text-classification backbones with a split forward pass.

Both backbones expose the same two named cut points so hidden states
can be interpolated mid-network:

- ``word``: the embedded token grid, shape [n, max_len, embed_dim]
- ``sent``: the final hidden vector feeding the classifier

``forward_to_layer`` runs the prefix up to a cut point and
``forward_from_layer`` runs the suffix; composing them reproduces the
plain forward pass bitwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LAYER_NAMES = ("word", "sent")


@dataclass
class Batch:
    """Encoded minibatch: padded token ids, lengths, one-hot label rows."""

    token_ids: np.ndarray  # [n, max_len] int64
    valid_lens: np.ndarray  # [n] int64, >= 1
    label_rows: np.ndarray  # [n, num_classes] float64
    label_ids: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class Hidden:
    """Activations at a named cut point, plus what the suffix still needs."""

    layer: str
    tensor: ad.Tensor
    valid_lens: np.ndarray | None = None  # [n], only meaningful at "word"


@dataclass
class Model:
    kind: str  # "embed-mlp" or "text-cnn"
    params: dict[str, ad.Tensor]
    embed_dim: int
    sent_dim: int
    num_classes: int
    dropout: float = 0.0
    embed_frozen: bool = False
    filter_widths: tuple[int, ...] = ()
    layer_names: tuple[str, ...] = LAYER_NAMES

    def trainable_params(self) -> dict[str, ad.Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = state[k].copy()


def _uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=shape)


def init_embed_mlp(
    vocab_size: int,
    embed_dim: int,
    hidden_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    dropout: float = 0.0,
) -> Model:
    """Embedding, mean pooling over valid tokens, one tanh layer, classifier.

    Weights draw from uniform(-0.1, 0.1) in a fixed order (embedding,
    first dense, output dense) so a given rng state yields identical
    parameters; biases start at zero.
    """
    if min(vocab_size, embed_dim, hidden_dim) < 1 or num_classes < 2:
        raise ValueError("all dimensions must be positive and num_classes >= 2")
    params = {
        "embed": ad.Tensor(_uniform(rng, (vocab_size, embed_dim)), requires_grad=True),
        "w_hidden": ad.Tensor(_uniform(rng, (embed_dim, hidden_dim)), requires_grad=True),
        "b_hidden": ad.Tensor(np.zeros(hidden_dim), requires_grad=True),
        "w_out": ad.Tensor(_uniform(rng, (hidden_dim, num_classes)), requires_grad=True),
        "b_out": ad.Tensor(np.zeros(num_classes), requires_grad=True),
    }
    return Model(
        kind="embed-mlp",
        params=params,
        embed_dim=embed_dim,
        sent_dim=hidden_dim,
        num_classes=num_classes,
        dropout=float(dropout),
    )


def init_text_cnn(
    vocab_size: int,
    embed_dim: int,
    filter_widths,
    feature_maps: int,
    num_classes: int,
    rng: np.random.Generator,
    dropout: float = 0.5,
    max_len: int | None = None,
) -> Model:
    """Parallel width-w convolutions with relu and global max pooling.

    The pooled feature vectors concatenate into the sent layer
    (len(filter_widths) * feature_maps wide), which feeds a dropout
    mask and a dense classifier. Filters have no bias.
    """
    widths = tuple(int(w) for w in filter_widths)
    if not widths or min(widths) < 1:
        raise ValueError("filter_widths must be positive integers")
    if max_len is not None and max(widths) > max_len:
        raise ValueError(
            f"filter width {max(widths)} exceeds sequence length {max_len}"
        )
    if feature_maps < 1 or num_classes < 2:
        raise ValueError("feature_maps must be positive and num_classes >= 2")
    sent_dim = len(widths) * feature_maps
    params: dict[str, ad.Tensor] = {
        "embed": ad.Tensor(_uniform(rng, (vocab_size, embed_dim)), requires_grad=True)
    }
    for w in widths:
        params[f"conv{w}"] = ad.Tensor(
            _uniform(rng, (w, embed_dim, feature_maps)), requires_grad=True
        )
    params["w_out"] = ad.Tensor(_uniform(rng, (sent_dim, num_classes)), requires_grad=True)
    params["b_out"] = ad.Tensor(np.zeros(num_classes), requires_grad=True)
    return Model(
        kind="text-cnn",
        params=params,
        embed_dim=embed_dim,
        sent_dim=sent_dim,
        num_classes=num_classes,
        dropout=float(dropout),
        filter_widths=widths,
    )


def freeze_embeddings(model: Model) -> None:
    model.params["embed"].requires_grad = False
    model.embed_frozen = True


def _check_layer(model: Model, layer: str) -> None:
    if layer not in model.layer_names:
        raise ValueError(f"unknown layer {layer!r}, expected one of {model.layer_names}")


def forward_to_layer(model: Model, batch: Batch, layer: str) -> Hidden:
    """Run the network prefix and stop at the named cut point."""
    _check_layer(model, layer)
    grid = ad.embedding_lookup(model.params["embed"], batch.token_ids)
    if layer == "word":
        return Hidden("word", grid, batch.valid_lens.copy())
    return _word_to_sent(model, Hidden("word", grid, batch.valid_lens))


def _word_to_sent(model: Model, hidden: Hidden) -> Hidden:
    if model.kind == "embed-mlp":
        pooled = ad.mean_pool_batch(hidden.tensor, hidden.valid_lens)
        pre = ad.add(ad.matmul(pooled, model.params["w_hidden"]), model.params["b_hidden"])
        return Hidden("sent", ad.tanh(pre))
    if model.kind == "text-cnn":
        length = hidden.tensor.shape[1]
        if length < max(model.filter_widths):
            raise ValueError(
                f"sequence length {length} shorter than widest filter "
                f"{max(model.filter_widths)}"
            )
        feats = [
            ad.conv1d_maxpool_batch(hidden.tensor, model.params[f"conv{w}"])
            for w in model.filter_widths
        ]
        return Hidden("sent", ad.concat(feats, axis=1))
    raise ValueError(f"unknown model kind {model.kind!r}")


def forward_from_layer(
    model: Model, hidden: Hidden, dropout_mask: np.ndarray | None = None
) -> ad.Tensor:
    """Run the network suffix from a cut point down to logits.

    ``dropout_mask`` is a precomputed inverted-dropout mask for the sent
    layer (entries 0 or 1/keep). Passing the same mask to two calls
    makes them share the dropped units; None means evaluation mode.
    """
    _check_layer(model, hidden.layer)
    if hidden.layer == "word":
        hidden = _word_to_sent(model, hidden)
    sent = hidden.tensor
    if dropout_mask is not None:
        if dropout_mask.shape != sent.shape:
            raise ValueError(
                f"dropout mask shape {dropout_mask.shape} does not match sent layer {sent.shape}"
            )
        sent = ad.mul(sent, ad.Tensor(dropout_mask))
    return ad.add(ad.matmul(sent, model.params["w_out"]), model.params["b_out"])


def forward(model: Model, batch: Batch, dropout_mask: np.ndarray | None = None) -> ad.Tensor:
    """Full forward pass, logits [n, num_classes]."""
    return forward_from_layer(model, forward_to_layer(model, batch, "word"), dropout_mask)


def make_dropout_mask(
    model: Model, n: int, rng: np.random.Generator | None
) -> np.ndarray | None:
    """Sample an inverted-dropout mask for the sent layer, or None if off."""
    if model.dropout <= 0.0 or rng is None:
        return None
    keep = 1.0 - model.dropout
    return (rng.random((n, model.sent_dim)) < keep) / keep


def load_pretrained_embeddings(
    path, vocab, rng: np.random.Generator | None = None
) -> ad.Tensor | None:
    """Build an embedding table from a whitespace-separated vectors file.

    Each line is ``token v1 .. vd``; the dimension comes from the first
    line. Tokens present in ``vocab`` take their file vector, everything
    else keeps a uniform(-0.1, 0.1) draw from ``rng``. A file with no
    data lines warns and returns None so the caller keeps its own init.
    """
    token_to_id = vocab.token_to_id if hasattr(vocab, "token_to_id") else dict(vocab)
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            rows.append((lineno, parts[0], parts[1:]))
    vocab_size = max(token_to_id.values()) + 1 if token_to_id else 0
    if not rows:
        warnings.warn(f"no usable vectors in {path}; keeping random init")
        return None
    dim = len(rows[0][2])
    if dim == 0:
        raise ValueError(f"line {rows[0][0]}: no vector components")
    table = _uniform(rng, (vocab_size, dim))
    filled = 0
    for lineno, token, comps in rows:
        if len(comps) != dim:
            raise ValueError(f"line {lineno}: expected {dim} components, got {len(comps)}")
        try:
            vec = np.array([float(c) for c in comps])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        idx = token_to_id.get(token)
        if idx is not None:
            table[idx] = vec
            filled += 1
    if filled == 0:
        warnings.warn(f"no tokens from {path} matched the vocabulary")
    return ad.Tensor(table, requires_grad=True)
