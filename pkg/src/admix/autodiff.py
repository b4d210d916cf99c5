"""Tape-based reverse-mode differentiation over dense float64 arrays.

A forward pass runs inside a recording ``Tape``. Every differentiable
operation appends one node (inputs, output, backward closure) to the
tape in creation order, which is a valid topological order because an
op can only consume tensors that already exist. ``backward`` walks the
node list once in reverse, so its cost is linear in the number of
recorded ops.

All values are stored as float64. Mixing-coefficient perturbations used
elsewhere in this package are on the order of 1e-3, which is too close
to single-precision rounding noise to train reliably in float32.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "matmul",
    "embedding_lookup",
    "gather_rows",
    "mean_pool",
    "mean_pool_batch",
    "conv1d_maxpool",
    "conv1d_maxpool_batch",
    "relu",
    "tanh",
    "add",
    "mul",
    "scale",
    "reshape",
    "concat",
    "reduce_sum",
    "softmax_cross_entropy",
    "backward",
    "zero_grads",
    "finite_diff_check",
]


class Tensor:
    """A float64 array plus gradient slot.

    ``grad`` is populated for ``requires_grad`` leaves by ``backward``
    and accumulates across calls; callers zero it between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops while active as a context manager.

    Tapes nest; ops record onto the innermost active tape. A tape is
    rebuilt for every forward pass (define-by-run), so control flow in
    the recorded program needs no special handling.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # Number of nodes visited by the most recent backward() call.
        # Exposed so tests can assert the one-visit-per-node contract.
        self.last_visit_count = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")

    def record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    """The innermost recording tape, or None outside any ``with Tape()``."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op, inputs, output, backward_fn) -> None:
    tape = active_tape()
    if tape is not None and output.requires_grad:
        tape.record(op, inputs, output, backward_fn)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    _record("matmul", (a, b), out, backward_fn)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; ids may have any shape.

    Output shape is ``ids.shape + (embed_dim,)``. The backward pass
    scatter-adds into the table so repeated ids accumulate.
    """
    if table.ndim != 2:
        raise ValueError(f"embedding table must be 2-d, got shape {table.shape}")
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        if idx.dtype.kind == "f" or idx.dtype == object:
            raise ValueError("ids must be integers")
        idx = idx.astype(np.int64)
    vocab = table.shape[0]
    if idx.size:
        lo = int(idx.min())
        hi = int(idx.max())
        if lo < 0 or hi >= vocab:
            bad = lo if lo < 0 else hi
            raise IndexError(f"id {bad} out of range for vocabulary of size {vocab}")
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record("embedding_lookup", (table,), out, backward_fn)
    return out


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows along axis 0; backward scatter-adds to the source."""
    idx = np.asarray(index)
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise ValueError("gather_rows index must be a 1-d integer array")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for axis of size {n}")
    out = Tensor(x.data[idx], requires_grad=x.requires_grad)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    _record("gather_rows", (x,), out, backward_fn)
    return out


def _check_valid_len(valid_len: int, length: int) -> int:
    vl = int(valid_len)
    if vl < 1 or vl > length:
        raise ValueError(f"valid_len must be in [1, {length}], got {vl}")
    return vl


def mean_pool(x: Tensor, valid_len: int) -> Tensor:
    """Average the first ``valid_len`` rows of a [len, d] sequence."""
    if x.ndim != 2:
        raise ValueError(f"mean_pool expects [len, d], got shape {x.shape}")
    vl = _check_valid_len(valid_len, x.shape[0])
    out = Tensor(x.data[:vl].mean(axis=0), requires_grad=x.requires_grad)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:vl] = g / vl
        return (gx,)

    _record("mean_pool", (x,), out, backward_fn)
    return out


def mean_pool_batch(x: Tensor, valid_lens) -> Tensor:
    """Batched mean_pool: [n, len, d] with per-sample valid lengths -> [n, d]."""
    if x.ndim != 3:
        raise ValueError(f"mean_pool_batch expects [n, len, d], got shape {x.shape}")
    n, length, _ = x.shape
    vls = np.asarray(valid_lens, dtype=np.int64)
    if vls.shape != (n,):
        raise ValueError(f"valid_lens must have shape ({n},), got {vls.shape}")
    if vls.size and (vls.min() < 1 or vls.max() > length):
        raise ValueError(f"valid lengths must be in [1, {length}]")
    # weights[s, t] = 1/vl_s for t < vl_s, else 0
    weights = (np.arange(length)[None, :] < vls[:, None]) / vls[:, None]
    out = Tensor(np.einsum("sl,sld->sd", weights, x.data), requires_grad=x.requires_grad)

    def backward_fn(g):
        return (weights[:, :, None] * g[:, None, :],)

    _record("mean_pool_batch", (x,), out, backward_fn)
    return out


def _conv_forward(x: np.ndarray, f: np.ndarray):
    n, length, d = x.shape
    w = f.shape[0]
    t_out = length - w + 1
    pre = np.zeros((n, t_out, f.shape[2]))
    for u in range(w):
        pre += x[:, u : u + t_out, :] @ f[u]
    act = np.maximum(pre, 0.0)
    argmax = np.argmax(act, axis=1)  # first max wins on ties
    out = np.take_along_axis(act, argmax[:, None, :], axis=1)[:, 0, :]
    return pre, argmax, out


def _conv_backward(g, x, f, pre, argmax, need_x, need_f):
    n = x.shape[0]
    w, _, channels = f.shape
    rows = np.arange(n)
    # route gradient to the argmax window, gated by the relu preactivation
    gate = np.take_along_axis(pre, argmax[:, None, :], axis=1)[:, 0, :] > 0.0
    gp = g * gate
    gx = np.zeros_like(x) if need_x else None
    gf = np.zeros_like(f) if need_f else None
    for ch in range(channels):
        t_star = argmax[:, ch]
        gc = gp[:, ch]
        for u in range(w):
            window = x[rows, t_star + u, :]
            if need_f:
                gf[u, :, ch] += window.T @ gc
            if need_x:
                # sample indices are distinct, so plain fancy-index add is safe
                gx[rows, t_star + u, :] += gc[:, None] * f[u, :, ch]
    return gx, gf


def conv1d_maxpool_batch(x: Tensor, filters: Tensor) -> Tensor:
    """Width-w convolution, relu, then global max over time: [n, len, d] -> [n, c].

    ``filters`` has shape [w, d, c] and the op has no bias term. Ties in
    the max take the earliest position.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d_maxpool_batch expects [n, len, d], got {x.shape}")
    if filters.ndim != 3:
        raise ValueError(f"filters must be [w, d, c], got {filters.shape}")
    n, length, d = x.shape
    w, fd, _ = filters.shape
    if fd != d:
        raise ValueError(f"filter depth {fd} does not match input depth {d}")
    if length < w:
        raise ValueError(f"input length {length} is shorter than filter width {w}")
    pre, argmax, out_data = _conv_forward(x.data, filters.data)
    out = Tensor(out_data, requires_grad=_needs_grad(x, filters))

    def backward_fn(g):
        return _conv_backward(
            g, x.data, filters.data, pre, argmax, x.requires_grad, filters.requires_grad
        )

    _record("conv1d_maxpool_batch", (x, filters), out, backward_fn)
    return out


def conv1d_maxpool(x: Tensor, filters: Tensor) -> Tensor:
    """Single-sequence form of conv1d_maxpool_batch: [len, d] -> [c]."""
    if x.ndim != 2:
        raise ValueError(f"conv1d_maxpool expects [len, d], got {x.shape}")
    if filters.ndim != 3:
        raise ValueError(f"filters must be [w, d, c], got {filters.shape}")
    w = filters.shape[0]
    if x.shape[0] < w:
        raise ValueError(f"input length {x.shape[0]} is shorter than filter width {w}")
    if filters.shape[1] != x.shape[1]:
        raise ValueError(f"filter depth {filters.shape[1]} does not match input depth {x.shape[1]}")
    x3 = x.data[None]
    pre, argmax, out_data = _conv_forward(x3, filters.data)
    out = Tensor(out_data[0], requires_grad=_needs_grad(x, filters))

    def backward_fn(g):
        gx, gf = _conv_backward(
            g[None], x3, filters.data, pre, argmax, x.requires_grad, filters.requires_grad
        )
        return (None if gx is None else gx[0]), gf

    _record("conv1d_maxpool", (x, filters), out, backward_fn)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)

    def backward_fn(g):
        # subgradient 0 at exactly 0
        return (g * (x.data > 0.0),)

    _record("relu", (x,), out, backward_fn)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    _record("tanh", (x,), out, backward_fn)
    return out


def _as_constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum with numpy broadcasting; ``b`` may be a scalar."""
    b = _as_constant(b)
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

    def backward_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    _record("add", (a, b), out, backward_fn)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with numpy broadcasting; ``b`` may be a scalar."""
    b = _as_constant(b)
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    _record("mul", (a, b), out, backward_fn)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad)

    def backward_fn(g):
        return (g * c,)

    _record("scale", (x,), out, backward_fn)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    _record("reshape", (x,), out, backward_fn)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=_needs_grad(*tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    _record("concat", tuple(tensors), out, backward_fn)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)

    def backward_fn(g):
        return (np.full_like(x.data, float(g)),)

    _record("reduce_sum", (x,), out, backward_fn)
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-sample cross entropy against rows of target probabilities.

    ``logits`` is [n, C]; ``targets`` is a plain [n, C] array of
    nonnegative weights (one-hot or soft rows) and is never
    differentiated. Uses max subtraction, so huge logits stay finite.
    """
    if isinstance(targets, Tensor):
        targets = targets.data
    t = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [n, C], got shape {logits.shape}")
    if logits.shape[1] < 2:
        raise ValueError(f"need at least 2 classes, got {logits.shape[1]}")
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and t.min() < 0.0:
        raise ValueError("target weights must be nonnegative")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(-(t * log_probs).sum(axis=1), requires_grad=logits.requires_grad)

    def backward_fn(g):
        softmax = np.exp(log_probs)
        dz = (softmax * t.sum(axis=1, keepdims=True) - t) * g[:, None]
        return (dz,)

    _record("softmax_cross_entropy", (logits,), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    ``root`` must be scalar. Each tape node is visited exactly once, in
    reverse creation order; nodes whose output received no gradient are
    skipped. Leaf gradients add to whatever is already in ``.grad``, so
    callers zero grads between optimization steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}
    visits = 0
    for node in reversed(tape.nodes):
        visits += 1
        out_grad = pending.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if out_grad is None:
            continue
        in_grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
                holders[key] = tensor
    tape.last_visit_count = visits
    # whatever was never produced by a node on this tape is a leaf
    for key, grad in pending.items():
        tensor = holders[key]
        if not tensor.requires_grad:
            continue
        if tensor.grad is None:
            tensor.grad = grad.copy()
        else:
            tensor.grad = tensor.grad + grad


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(f, x: Tensor, h: float = 1e-5, denominator: str = "coordinate") -> float:
    """Max relative error between tape gradient of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor. With the default
    ``coordinate`` denominator the relative error at coordinate i is
    |fd_i - g_i| / (|g_i| + 1e-8); the max over coordinates is
    returned. The ``scale`` denominator divides by max|g| + 1e-8
    instead, for functions whose true partials span many orders of
    magnitude (saturated softmax regions), where a near-zero partial
    would otherwise be compared against pure rounding noise in the
    difference quotient. A function that ignores ``x`` checks out at
    error 0.
    """
    if denominator not in ("coordinate", "scale"):
        raise ValueError(f"denominator must be 'coordinate' or 'scale', got {denominator!r}")
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = float(f(Tensor(x.data)).data)
        flat[i] = keep - h
        lo = float(f(Tensor(x.data)).data)
        flat[i] = keep
        fd[i] = (hi - lo) / (2.0 * h)
    fd = fd.reshape(x.shape)
    if denominator == "scale":
        rel = np.abs(fd - analytic) / (np.abs(analytic).max(initial=0.0) + 1e-8)
    else:
        rel = np.abs(fd - analytic) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
