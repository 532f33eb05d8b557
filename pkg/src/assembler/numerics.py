"""Minimal dense-tensor engine with reverse-mode differentiation.

Numpy-backed tensors (float32 storage by default, float64 accumulation
in reductions), a recorded-graph backward pass, masked multi-head
attention built from the primitives, a finite-difference validation
harness, Adam, and a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"ASMB1"
CHECKPOINT_VERSION = 1

# Additive stand-in for -inf in masked logits: large enough to zero the
# softmax weight after max subtraction, small enough to avoid inf - inf.
MASK_FILL = -1e30

_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = enabled


def _assert_finite(arr: np.ndarray) -> None:
    if not _finite_checks:
        return
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise FloatingPointError("non-finite value produced by tensor op")


class Tensor:
    """N-d array node in a dynamically recorded computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        _assert_finite(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    dt = x.data.dtype.type
    c, a, half, one = dt(_GELU_C), dt(_GELU_A), dt(0.5), dt(1.0)
    xd = x.data
    th = np.tanh(c * (xd + a * (xd * xd * xd)))
    data = half * xd * (one + th)

    def backward(g):
        du = c * (one + dt(3.0) * a * (xd * xd))
        d = half * (one + th) + half * xd * (one - th * th) * du
        return (g * d,)

    return _node(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last dim with learnable gain/bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {x.shape[-1]}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    data = (y * gain.data + bias.data).astype(x.data.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        dy = gd * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        red = tuple(range(gd.ndim - 1))
        dgain = (gd * y).sum(axis=red)
        dbias = gd.sum(axis=red)
        return (dx.astype(x.data.dtype), dgain.astype(gain.data.dtype),
                dbias.astype(bias.data.dtype))

    return _node(data, (x, gain, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dim, max-subtracted, float64 accumulation."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(e.dtype)
    data = p

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64)
        return (p * (g - inner.astype(g.dtype)),)

    return _node(data, (x,), backward)


def concat(tensors: list, axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), backward)


def slice_axis(x: Tensor, start: int, length: int, axis: int = -2) -> Tensor:
    """Contiguous slice along one axis (token spans use axis=-2)."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(data, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _node(data, (table,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    return _node(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    data = x.data.transpose(axes)
    inverse = np.argsort(axes)
    return _node(data, (x,), lambda g: (g.transpose(inverse),))


def tsum(x: Tensor) -> Tensor:
    data = np.array(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return _node(data, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    data = np.array(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype)
    return _node(data, (x,), lambda g: ((np.broadcast_to(g, x.shape) / n).astype(x.data.dtype),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Attention


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
                     heads: int, w_out: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with a boolean allow-mask.

    q, k, v: (tokens, width) or (batch, tokens, width); mask: broadcastable
    boolean (tokens_q, tokens_k). Disallowed logits get MASK_FILL before
    softmax. Heads are concatenated back to width and optionally projected
    by w_out.
    """
    width = q.shape[-1]
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("isolated token: fully-masked attention row")
    hd = width // heads
    batched = q.data.ndim == 3
    if batched and mask.ndim == 3:
        mask = mask[:, None]  # broadcast over heads

    def split_heads(t):
        t = reshape(t, t.shape[:-1] + (heads, hd))
        axes = (0, 2, 1, 3) if batched else (1, 0, 2)
        return transpose(t, axes)

    qh = split_heads(q)
    kh = split_heads(k)
    vh = split_heads(v)
    logits = scale(matmul(qh, transpose(kh, (0, 1, 3, 2) if batched else (0, 2, 1))),
                   1.0 / np.sqrt(hd))
    bias = np.where(mask, 0.0, MASK_FILL).astype(logits.data.dtype)
    weights = softmax(add(logits, Tensor(bias)))
    ctx = matmul(weights, vh)
    ctx = transpose(ctx, (0, 2, 1, 3) if batched else (1, 0, 2))
    out = reshape(ctx, ctx.shape[:-2] + (width,))
    return matmul(out, w_out) if w_out is not None else out


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss for every reachable requires_grad tensor.

    The recorded graph hanging off `loss` is the tape; gradients
    accumulate additively and the dict is keyed by tensor identity.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        result[node] = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return result


# ---------------------------------------------------------------------------
# Validation harness


def finite_difference_check(fn, points: list, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps a list of float64 Tensors to a scalar Tensor; `points` are
    the numpy arrays at which to check.
    """
    tensors = [Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in points]
    loss = fn(tensors)
    grads = backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn([Tensor(x.data, requires_grad=False, dtype=np.float64)
                           for x in tensors]).data)
            flat[i] = orig - h
            dn = float(fn([Tensor(x.data, requires_grad=False, dtype=np.float64)
                           for x in tensors]).data)
            flat[i] = orig
            num[i] = (up - dn) / (2 * h)
        a, b = analytic.reshape(-1), num
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# Optimizer and checkpoints


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update in place on a name -> Tensor dict."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
        m = state.m.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        m += (1 - state.beta1) * (g - m)
        v += (1 - state.beta2) * (g.astype(np.float64) ** 2 - v)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def save_checkpoint(params: dict, path) -> None:
    """Binary weights: magic, version, count, then name/rank/dims/payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float32)
    return out
