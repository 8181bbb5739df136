"""Dense float tensors with reverse-mode automatic differentiation.

Covers exactly what the segmentation networks here need: 2-D cross-correlation
(the deep-learning "convolution", no kernel flip), elementwise arithmetic with
size-1 broadcasting, ReLU/sigmoid, 2x2 max pooling, nearest-neighbour
upsampling, channel concatenation and a few reductions.

Tensors are treated as immutable values once created. Every operation returns
a fresh tensor that remembers its parent tensors and how to push a gradient
back through itself, so a single reverse sweep from a scalar loss populates
the gradients of all reachable leaves. Storage and forward math default to
float32; constructing float64 tensors is supported so numerical checkers can
re-run a forward pass at higher precision.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "conv2d",
    "maxpool2",
    "upsample_nearest2",
    "concat_channels",
    "reduce_sum",
    "reshape",
    "transpose",
    "slice_channels",
    "clamp_min",
    "bce_with_logits",
    "backward",
    "save_tensor",
    "load_tensor",
    "TENSOR_MAGIC",
]

TENSOR_MAGIC = b"SCPTENSR"


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised when backward() is invoked outside its contract."""


Scalar = (int, float, np.integer, np.floating)


class Tensor:
    """An N-d float array with an optional gradient.

    ``data`` is a C-ordered numpy array owned by the tensor; callers must not
    mutate it after construction (optimizers rebind ``data`` between recorded
    forward passes instead of writing in place).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C")
        if not np.issubdtype(arr.dtype, np.floating):
            raise ShapeError(f"tensor dtype must be floating, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(arr: np.ndarray, parents: tuple["Tensor", ...], backward_fn, op: str) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        t.op = op
        if t.requires_grad:
            t._parents = parents
            t._backward = backward_fn
        else:
            t._parents = ()
            t._backward = None
        return t

    @staticmethod
    def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch: {sa} vs {sb} (rank promotion is not supported)")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"incompatible shapes {sa} and {sb}: only size-1 dims broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum the gradient of a broadcast result back down to the operand shape.
    axes = tuple(i for i, (go, so) in enumerate(zip(g.shape, shape)) if so == 1 and go != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b, op: str, fwd, back_a, back_b) -> Tensor:
    """Elementwise binary op. ``b`` may be a python scalar (treated as a constant)."""
    if isinstance(b, Scalar):
        out = fwd(a.data, b)

        def backward_fn(g, a=a, b=float(b)):
            if a.requires_grad:
                a._accumulate(back_a(g, a.data, b))

        return Tensor._wrap(out, (a,), backward_fn, op)
    if not isinstance(b, Tensor):
        raise TypeError(f"{op}: expected Tensor or scalar, got {type(b).__name__}")
    _check_broadcast(a.shape, b.shape)
    out = fwd(a.data, b.data)

    def backward_fn(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(back_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(back_b(g, a.data, b.data), b.shape))

    return Tensor._wrap(out, (a, b), backward_fn, op)


def add(a, b) -> Tensor:
    if isinstance(a, Scalar):
        a, b = b, a
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    if isinstance(a, Scalar):
        # scalar - tensor
        return _binary(b, float(a), "rsub", lambda x, y: y - x, lambda g, x, y: -g, None)
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    if isinstance(a, Scalar):
        a, b = b, a
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    # Division by exact zero propagates inf/nan; documented, not trapped.
    if isinstance(a, Scalar):
        return _binary(
            b, float(a), "rdiv", lambda x, y: y / x, lambda g, x, y: -g * y / (x * x), None
        )
    return _binary(
        a, b, "div",
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g, x=x):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return Tensor._wrap(out, (x,), backward_fn, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Stable two-branch form; never exponentiates a large positive argument.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward_fn(g, x=x, s=s):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return Tensor._wrap(s, (x,), backward_fn, "sigmoid")


# ---------------------------------------------------------------------------
# convolution and spatial ops
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, H', W', k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h_out * w_out)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a (C,H,W) input with a (C_out,C,k,k) kernel, zero padded."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape} and {w.shape}")
    c, h, wth = x.shape
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeError("conv2d padding must be non-negative")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wth + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {k}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, h_out, w_out)  # (C*k*k, H'*W')
    wm = w.data.reshape(c_out, c * k * k)
    out = (wm @ cols).reshape(c_out, h_out, w_out)

    def backward_fn(g, x=x, w=w, cols=cols, wm=wm, shape=(c, h, wth), geo=(k, stride, padding, h_out, w_out)):
        k_, s_, p_, ho, wo = geo
        gm = g.reshape(w.shape[0], ho * wo)
        if w.requires_grad:
            w._accumulate((gm @ cols.T).reshape(w.shape))
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(shape[0], k_, k_, ho, wo)
            hp, wp = shape[1] + 2 * p_, shape[2] + 2 * p_
            gxp = np.zeros((shape[0], hp, wp), dtype=g.dtype)
            for ki in range(k_):
                for kj in range(k_):
                    gxp[:, ki : ki + s_ * ho : s_, kj : kj + s_ * wo : s_] += gcols[:, ki, kj]
            if p_:
                gxp = gxp[:, p_ : hp - p_, p_ : wp - p_]
            x._accumulate(gxp)

    return Tensor._wrap(np.ascontiguousarray(out), (x, w), backward_fn, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; requires even spatial dims."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins ties: deterministic
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g, x=x, idx=idx, dims=(c, h, w)):
        if x.requires_grad:
            c_, h_, w_ = dims
            gw = np.zeros((c_, h_ // 2, w_ // 2, 4), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gx = gw.reshape(c_, h_ // 2, w_ // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c_, h_, w_)
            x._accumulate(gx)

    return Tensor._wrap(np.ascontiguousarray(out), (x,), backward_fn, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward_fn(g, x=x, dims=(c, h, w)):
        if x.requires_grad:
            c_, h_, w_ = dims
            x._accumulate(g.reshape(c_, h_, 2, w_, 2).sum(axis=(2, 4)))

    return Tensor._wrap(out, (x,), backward_fn, "upsample_nearest2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels needs matching (·,H,W), got {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    ca = a.shape[0]

    def backward_fn(g, a=a, b=b, ca=ca):
        if a.requires_grad:
            a._accumulate(g[:ca])
        if b.requires_grad:
            b._accumulate(g[ca:])

    return Tensor._wrap(out, (a, b), backward_fn, "concat_channels")


# ---------------------------------------------------------------------------
# reductions, shape ops, misc
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g, x=x, axis=axis, keepdims=keepdims):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape).astype(g.dtype, copy=False))

    return Tensor._wrap(out, (x,), backward_fn, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = x.data.reshape(shape)  # view when contiguous: values are shared

    def backward_fn(g, x=x):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return Tensor._wrap(out, (x,), backward_fn, "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got {x.shape}")

    def backward_fn(g, x=x):
        if x.requires_grad:
            x._accumulate(g.T)

    return Tensor._wrap(np.ascontiguousarray(x.data.T), (x,), backward_fn, "transpose")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_channels[{start}:{stop}] out of range for {x.shape}")
    out = x.data[start:stop]

    def backward_fn(g, x=x, start=start, stop=stop):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[start:stop] = g
            x._accumulate(gx)

    return Tensor._wrap(out, (x,), backward_fn, "slice_channels")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where the input was above the floor."""
    out = np.maximum(x.data, floor)

    def backward_fn(g, x=x, floor=floor):
        if x.requires_grad:
            x._accumulate(g * (x.data >= floor))

    return Tensor._wrap(out, (x,), backward_fn, "clamp_min")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, in the stable log-sum-exp form.

    ``target`` is a constant array of {0,1} values; no gradient flows to it.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {logits.shape} vs {t.shape}")
    z = logits.data
    t = t.astype(z.dtype, copy=False)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g, logits=logits, z=z, t=t):
        if logits.requires_grad:
            logits._accumulate(g * (_sigmoid(z) - t))

    return Tensor._wrap(out, (logits,), backward_fn, "bce_with_logits")


# ---------------------------------------------------------------------------
# the recorded graph and the reverse sweep
# ---------------------------------------------------------------------------


class Graph:
    """Bookkeeping for one recorded forward/backward pass.

    Forward functions register their trainable leaves via ``watch``; the DAG
    itself lives on the tensors. ``backward`` runs the reverse sweep and logs
    the visited operation records (topologically ordered) into ``nodes``.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)

    def zero_grad(self) -> None:
        for t in self.leaves:
            t.grad = None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        self.nodes.extend(t for t in topo if t._backward is not None)
        # Interior grads are per-sweep scratch; only leaf grads accumulate
        # across repeated backward calls.
        for t in topo:
            if t._backward is not None:
                t.grad = None
        loss._accumulate(np.ones_like(loss.data))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_tensor(path, t: Tensor) -> None:
    """Write the binary tensor format: magic, u32 rank, u32 dims, f32 data (all LE)."""
    arr = np.ascontiguousarray(t.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a tensor file")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(f.read(4 * n), dtype="<f4", count=n).reshape(dims)
    return Tensor(data, requires_grad=requires_grad)
