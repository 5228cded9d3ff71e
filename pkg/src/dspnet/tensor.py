"""Dense tensors with reverse-mode autodiff on an explicit gradient tape.

A Tensor is a numpy array plus an optional (tape, node) pair. Ops are free
functions; when any input is attached to a tape the result records a node
holding the backward closure. Leaf parameters are registered on a tape by
name via `Tape.leaf`, and `backward` returns a name -> gradient map.

Tapes are append-only, so node order is already topological and the reverse
sweep visits each node exactly once. One tape belongs to one training step;
mixing tensors from two tapes is an error.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteError
from .backends import active_backend


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Row-major dense array, optionally attached to a gradient tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = _as_float_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar used mostly by tests; the library itself calls the
    # module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class RunningStats:
    """Running mean/variance of one normalization layer."""

    __slots__ = ("mean", "var")

    def __init__(self, num_features: int, dtype=np.float32):
        self.mean = np.zeros(num_features, dtype=dtype)
        self.var = np.ones(num_features, dtype=dtype)

    @classmethod
    def from_arrays(cls, mean, var):
        obj = cls.__new__(cls)
        obj.mean = np.array(mean)
        obj.var = np.array(var)
        return obj

    def copy(self) -> "RunningStats":
        return RunningStats.from_arrays(self.mean, self.var)

    def update(self, batch_mean, batch_var_unbiased, momentum: float):
        m = self.mean.dtype.type(momentum)
        self.mean[...] = (1 - m) * self.mean + m * batch_mean.astype(self.mean.dtype)
        self.var[...] = (1 - m) * self.var + m * batch_var_unbiased.astype(self.var.dtype)


class Tape:
    """Append-only op record for one reverse pass."""

    def __init__(self):
        # node = (tuple of parent ids (None for constants), backward fn or None)
        self.nodes = []
        # name -> (node id, shape, dtype)
        self.leaves = {}

    def _append(self, parents, backward_fn) -> int:
        self.nodes.append((parents, backward_fn))
        return len(self.nodes) - 1

    def leaf(self, name: str, data) -> Tensor:
        """Register a named leaf parameter; returns it as a traced Tensor.

        Re-registering the same name returns the existing node so that the
        two symmetrized forward passes of one step share leaves.
        """
        if name in self.leaves:
            nid, shape, _ = self.leaves[name]
            if tuple(shape) != np.asarray(data).shape:
                raise ContractError(f"leaf {name!r} re-registered with a new shape")
            return Tensor(data, self, nid)
        arr = _as_float_array(data)
        nid = self._append((), None)
        self.leaves[name] = (nid, arr.shape, arr.dtype)
        return Tensor(arr, self, nid)


def _check_finite(arr, op: str):
    # one-pass screen: a sum over finite values is finite (magnitudes here
    # stay far below overflow), and any NaN/Inf poisons it
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values in output of {op}")


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("inputs belong to different tapes")
    return tape


def _lift(x, like: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _result(op, out, inputs, backward_fn) -> Tensor:
    _check_finite(out, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node if (isinstance(t, Tensor) and t.tape is tape) else None
                    for t in inputs)
    if all(p is None for p in parents):
        return Tensor(out)
    nid = tape._append(parents, backward_fn)
    return Tensor(out, tape, nid)


def backward(loss: Tensor, tape: Tape) -> dict:
    """Gradients of a scalar loss for every leaf registered on `tape`.

    Leaves not reachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError("loss must be a scalar tensor")
    if loss.tape is not tape or loss.node is None:
        raise ContractError("loss was not produced on this tape")
    grads = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for nid in range(len(tape.nodes) - 1, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        parents, backward_fn = tape.nodes[nid]
        if backward_fn is None:
            continue
        for pid, pg in zip(parents, backward_fn(g)):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[nid] = None  # free intermediate
    out = {}
    for name, (nid, shape, dtype) in tape.leaves.items():
        g = grads[nid]
        out[name] = Tensor(np.zeros(shape, dtype=dtype) if g is None else g)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b.data if isinstance(b, Tensor) else None)
    b = _lift(b, a.data)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _result("add", out, (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a = _lift(a, b.data if isinstance(b, Tensor) else None)
    b = _lift(b, a.data)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return _result("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a = _lift(a, b.data if isinstance(b, Tensor) else None)
    b = _lift(b, a.data)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _result("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, a.data.dtype.type(0)), (a,),
                   lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, None)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _result("transpose", np.ascontiguousarray(a.data.T), (a,),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _result("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.shape[0], -1))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    return _result("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=False),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dtype = a.data.shape, a.data.dtype
    return _result("mean", np.asarray(a.data.mean(), dtype=dtype), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(dtype, copy=False),))


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C by spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects an NCHW tensor")
    n, c, h, w = x.data.shape
    area = h * w
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        gx = np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w))
        return (gx.astype(g.dtype, copy=False),)

    return _result("global_avg_pool", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, NCHW x OCkk -> N O H' W'."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, width = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh > h + 2 * pad or kw > width + 2 * pad:
        raise DimensionError("kernel larger than padded input")
    if (h + 2 * pad - kh) % stride or (width + 2 * pad - kw) % stride:
        raise DimensionError("non-integer conv output extent")
    backend = active_backend()
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = backend.conv2d_forward(xd, wd, stride, pad)

    def bwd(g):
        g = np.ascontiguousarray(g)
        return (backend.conv2d_backward_input(wd, g, xd.shape, stride, pad),
                backend.conv2d_backward_weight(xd, g, wd.shape, stride, pad))

    return _result("conv2d", out, (x, w), bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               mode: str = "train", momentum: float = 0.1, eps: float = 1e-5,
               update_stats=None) -> Tensor:
    """Per-channel batch normalization with affine transform.

    Train mode normalizes by batch statistics (and optionally folds them
    into `stats`); eval mode normalizes by the running statistics. 2-D
    inputs normalize over the batch axis, 4-D over batch and space.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode must be train|eval, got {mode!r}")
    if x.data.ndim == 2:
        axes = (0,)
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise DimensionError("batch_norm expects a 2-D or 4-D tensor")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm affine parameters must have shape (C,)")
    if update_stats is None:
        update_stats = mode == "train"
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    dtype = x.data.dtype

    if mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatchError("batch_norm train mode needs a batch of >= 2")
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        if update_stats:
            count = int(np.prod([x.data.shape[a] for a in axes]))
            v_unbiased = v * (count / (count - 1))
            stats.update(m, v_unbiased, momentum)
    else:
        m = stats.mean.astype(dtype, copy=False)
        v = stats.var.astype(dtype, copy=False)

    inv = 1.0 / np.sqrt(v + dtype.type(eps))
    xhat = (x.data - m.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    if mode == "train":
        count = int(np.prod([x.data.shape[a] for a in axes]))

        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gamma.data.reshape(bshape)
            t = dxhat.sum(axis=axes).reshape(bshape)
            u = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv.reshape(bshape) / count) * (count * dxhat - t - xhat * u)
            return dx.astype(dtype, copy=False), dgamma, dbeta
    else:

        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dx = g * (gamma.data * inv).reshape(bshape)
            return dx.astype(dtype, copy=False), dgamma, dbeta

    return _result("batch_norm", out, (x, gamma, beta), bwd)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis: v / max(||v||, eps)."""
    if v.data.ndim < 1 or v.data.shape[-1] < 1:
        raise DimensionError("l2_normalize needs at least one element per row")
    dtype = v.data.dtype
    norm = np.sqrt((v.data ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, dtype.type(eps))
    out = v.data / denom
    vd = v.data
    live = norm > eps  # rows where the norm (not eps) is the active denominator

    def bwd(g):
        dot = (g * vd).sum(axis=-1, keepdims=True)
        dv = g / denom - np.where(live, vd * dot / denom ** 3, 0)
        return (dv.astype(dtype, copy=False),)

    return _result("l2_normalize", out, (v,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    if x.data.ndim < 1:
        raise DimensionError("log_softmax expects at least 1-D input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return ((g - sm * g.sum(axis=-1, keepdims=True)).astype(x.data.dtype, copy=False),)

    return _result("log_softmax", out, (x,), bwd)
