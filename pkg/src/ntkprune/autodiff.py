"""Dense float32 tensors with reverse-mode automatic differentiation.

Just enough machinery for a decoder-only transformer forward pass and one
scalar backward: no broadcasting beyond what the model needs, no
higher-order derivatives, no sparse tensors. Storage is float32; matmul
reductions and softmax/log-sum-exp accumulate in float64 before casting
back. The tape is rebuilt on every forward (define-by-run) and carries no
global state, so independent forwards can run concurrently.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

MASK_VALUE = -1e9  # additive attention mask; finite so tensors never hold inf


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeNode:
    """One recorded primitive application.

    ``parents`` are the input tensors, ``backward`` maps the output gradient
    to one gradient per parent (None for inputs that need no gradient).
    The saved context lives in the closure.
    """

    __slots__ = ("kind", "parents", "backward")

    def __init__(self, kind: str, parents: tuple, backward: Callable):
        self.kind = kind
        self.parents = parents
        self.backward = backward


class Tensor:
    """Row-major float32 array plus an optional gradient buffer.

    Immutable after creation except for ``grad``. Tensors produced by
    primitives carry a TapeNode linking them to their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(kind: str, out: np.ndarray, parents: Sequence[Tensor],
            backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from primitive '{kind}'")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.requires_grad = False
    t.node = TapeNode(kind, tuple(parents), backward)
    return t


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient over axes that were broadcast in the forward."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """a @ b (or a @ b.T over the last two axes) with float64 accumulation.

    Supports ``(..., n, k) @ (k, m)`` (shared weight matrix) and
    ``(..., n, k) @ (..., k, m)`` with identical leading dims. The float64
    casts of both operands are kept for the backward rule, trading memory
    for fewer conversions.
    """
    b_inner = b.data.shape[-1] if transpose_b else \
        b.data.shape[-2 if b.data.ndim > 1 else 0]
    if a.data.shape[-1] != b_inner:
        raise ShapeError(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims {a.data.shape} @ {b.data.shape}")
    a64 = _f64(a.data)
    b64 = _f64(b.data)
    rhs = b64.swapaxes(-1, -2) if transpose_b else b64
    if b64.ndim == 2 and a64.ndim > 2:
        # one large gemm instead of a broadcast loop
        lead = a64.shape[:-1]
        out64 = (a64.reshape(-1, a64.shape[-1]) @ rhs)
        out = _f32(out64).reshape(lead + (rhs.shape[-1],))
    else:
        out = _f32(np.matmul(a64, rhs))

    def backward(g: np.ndarray):
        g64 = _f64(g)
        if transpose_b:
            # C = A B^T: dA = g B, dB = g^T A
            ga = _f32(np.matmul(g64, b64))
            gb = _f32(np.matmul(g64.swapaxes(-1, -2), a64))
            return ga, gb
        if b64.ndim == 2:
            g2 = g64.reshape(-1, g.shape[-1])
            ga = _f32(g2 @ b64.T).reshape(a64.shape)
            gb = _f32(a64.reshape(-1, a64.shape[-1]).T @ g2)
        else:
            ga = _f32(np.matmul(g64, b64.swapaxes(-1, -2)))
            gb = _f32(np.matmul(a64.swapaxes(-1, -2), g64))
        return ga, gb

    return _result("matmul", out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; second operand may be a constant ndarray.

    Broadcasting follows numpy but only suffix-style broadcasts occur in
    the model (e.g. position table added across the batch axis).
    """
    if isinstance(b, Tensor):
        out = a.data + b.data
        a_shape, b_shape = a.data.shape, b.data.shape

        def backward(g: np.ndarray):
            ga = _unbroadcast(g, a_shape)
            gb = _unbroadcast(g, b_shape)
            if gb is ga:
                # parents must not share one gradient buffer
                gb = gb.copy()
            return ga, gb

        return _result("add", out, (a, b), backward)
    const = np.asarray(b, dtype=np.float32)
    out = a.data + const
    a_shape = a.data.shape

    def backward_const(g: np.ndarray):
        return (_unbroadcast(g, a_shape),)

    return _result("add", out, (a,), backward_const)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    out = a.data * b.data
    ad, bd = a.data, b.data
    a_shape, b_shape = ad.shape, bd.shape

    def backward(g: np.ndarray):
        return _unbroadcast(g * bd, a_shape), _unbroadcast(g * ad, b_shape)

    return _result("elementwise-mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    with np.errstate(over="ignore"):  # overflow is caught by the finite check
        out = _f32(a.data * c)

    def backward(g: np.ndarray):
        return (_f32(g * c),)

    return _result("scale", out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to sigma = 0 exactly
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def swish(a: Tensor) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    sig = _sigmoid(a.data)
    out = a.data * sig
    ad = a.data

    def backward(g: np.ndarray):
        return (g * (sig + ad * sig * (1.0 - sig)),)

    return _result("swish", out, (a,), backward)


def softmax_rows(a: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, max-subtracted, float64 row sums.

    ``additive_mask`` is an optional constant added to the logits first
    (the causal mask); it needs no gradient, so fusing it here keeps one
    full-size temporary off the tape.
    """
    logits = a.data if additive_mask is None else a.data + additive_mask
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = e / _f32(denom)

    def backward(g: np.ndarray):
        gy = g * y
        return (gy - y * _f32(gy.sum(axis=-1, keepdims=True, dtype=np.float64)),)

    return _result("softmax-rows", out=y, parents=(a,), backward=backward)


RMSNORM_EPS = 1e-6


def rmsnorm(a: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if gain.data.shape != a.data.shape[-1:]:
        raise ShapeError(f"rmsnorm gain {gain.data.shape} vs input {a.data.shape}")
    x64 = _f64(a.data)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    normed = x64 * inv
    out = _f32(normed * _f64(gain.data))
    d = a.data.shape[-1]
    ad = a.data

    def backward(g: np.ndarray):
        g64 = _f64(g)
        gs64 = g64 * _f64(gain.data)
        # d/dx of x_j * inv: inv on the diagonal minus x_i x_j inv^3 / d
        dot = (gs64 * x64).sum(axis=-1, keepdims=True)
        gx = _f32(gs64 * inv - x64 * (inv ** 3) * dot / d)
        ggain = _f32((g64 * normed).reshape(-1, d).sum(axis=0))
        return gx, ggain

    return _result("rmsnorm", out, (a, gain), backward)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``; backward scatter-adds into the table.

    The scatter-add runs as a one-hot gemm, which is far faster than
    np.add.at for the id counts the model sees.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding id out of range")
    out = table.data[ids]
    tshape = table.data.shape

    def backward(g: np.ndarray):
        flat_ids = ids.reshape(-1)
        onehot = np.zeros((flat_ids.size, tshape[0]), dtype=np.float64)
        onehot[np.arange(flat_ids.size), flat_ids] = 1.0
        return (_f32(onehot.T @ _f64(g.reshape(-1, tshape[-1]))),)

    return _result("embed-lookup", out, (table,), backward)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all positions, last axis = classes.

    Uses max-subtracted log-sum-exp with float64 accumulation. Returns a
    shape-[1] tensor.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.data.shape}")
    v = logits.data.shape[-1]
    flat = _f64(logits.data.reshape(-1, v))
    t = targets.reshape(-1)
    if t.size == 0:
        raise ShapeError("cross entropy over zero positions")
    if t.min() < 0 or t.max() >= v:
        raise ShapeError("target id out of range")
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    losses = lse - flat[np.arange(t.size), t]
    out = np.array([losses.mean()], dtype=np.float32)
    n = t.size
    lshape = logits.data.shape

    def backward(g: np.ndarray):
        p = np.exp(flat - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return (_f32(p * (float(g[0]) / n)).reshape(lshape),)

    return _result("cross-entropy-mean", out, (logits,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g: np.ndarray):
        return (g.reshape(orig),)

    return _result("reshape", out, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result("transpose", out, (a,), backward)


def take_axis(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Integer gather along one axis; backward scatter-adds (fan-out safe)."""
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)
    ashape = a.data.shape

    def backward(g: np.ndarray):
        ga = np.zeros(ashape, dtype=np.float32)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _result("take-axis", out, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) outside axis "
                         f"of size {a.data.shape[axis]}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()
    ashape = a.data.shape

    def backward(g: np.ndarray):
        ga = np.zeros(ashape, dtype=np.float32)
        ga[index] = g
        return (ga,)

    return _result("narrow", out, (a,), backward)


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along an axis ``repeats`` times, in place order.

    Expands grouped KV heads to query-head count: head a reads group
    a // repeats. Backward sums the gradient over each repeat block.
    """
    out = np.repeat(a.data, repeats, axis=axis)
    ashape = a.data.shape

    def backward(g: np.ndarray):
        shape = ashape[:axis + 1] + (repeats,) + ashape[axis + 1:]
        return (_f32(g.reshape(shape).sum(axis=axis + 1, dtype=np.float64)),)

    return _result("repeat-interleave", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a shape-[1] tensor (float64 accumulation)."""
    out = np.array([_f64(a.data).sum()], dtype=np.float32)
    ashape = a.data.shape

    def backward(g: np.ndarray):
        return (np.full(ashape, g[0], dtype=np.float32),)

    return _result("sum-all", out, (a,), backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "swish": swish,
    "softmax-rows": softmax_rows,
    "rmsnorm": rmsnorm,
    "embed-lookup": embed_lookup,
    "cross-entropy-mean": cross_entropy_mean,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "take-axis": take_axis,
    "narrow": narrow,
    "repeat-interleave": repeat_interleave,
    "sum-all": sum_all,
}


def primitive_forward(kind: str, *inputs) -> Tensor:
    """Dispatch a primitive by kind name. Mostly useful for generic tests."""
    if kind not in _PRIMITIVES:
        raise AutodiffError(f"unknown primitive kind '{kind}'")
    return _PRIMITIVES[kind](*inputs)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(out: Tensor) -> None:
    """Populate .grad on every reachable tensor from a scalar output.

    Visits the tape in reverse topological order exactly once; gradients
    accumulate additively across fan-out.
    """
    if out.data.shape not in ((), (1,)):
        raise ShapeError(f"backward requires a scalar output, got {out.data.shape}")

    # postorder DFS: parents land before children in topo
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    # a define-by-run tape is a DAG by construction; verify anyway so a
    # hand-mutated graph fails loudly instead of producing wrong gradients
    order = {id(t): i for i, t in enumerate(topo)}
    for t in topo:
        if t.node is not None:
            for p in t.node.parents:
                if order[id(p)] >= order[id(t)]:
                    raise AutodiffError("cycle detected in tape")

    out.grad = np.ones_like(out.data)
    for t in reversed(topo):
        if t.node is None or t.grad is None:
            continue
        grads = t.node.backward(t.grad)
        for parent, gp in zip(t.node.parents, grads):
            if gp is None:
                continue
            if not np.all(np.isfinite(gp)):
                raise NonFiniteError(f"non-finite gradient from '{t.node.kind}'")
            if parent.grad is None:
                # backward rules hand over freshly allocated arrays
                parent.grad = gp
            else:
                parent.grad += gp
