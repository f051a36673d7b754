"""Dense-tensor reverse-mode automatic differentiation engine.

Define-by-run: every operation records its parents and a backward rule on
the output tensor; ``backward`` topologically sorts the reachable graph,
walks it once in reverse, accumulates gradients into the ``grad`` buffer
of every participating tensor with ``requires_grad``, then frees the
graph records. All arithmetic is float64.

Broadcasting is deliberately restricted: only bias-add inside
``fully_connected``/``conv2d``, the channel-wise affine inside
``batchnorm``, scalar (python float) arithmetic, and the explicit
``broadcast_hw`` op. Everything else demands exact shape matches so shape
bugs fail loudly.

Convolutions use the cross-correlation convention (no kernel flip), with
"same" or "valid" padding and integer stride, via im2col + BLAS matmul.

Checkpoints are a directory with manifest.json (parameter name -> shape
and byte offset, plus free-form meta) and params.bin holding the arrays
as little-endian float64, concatenated in sorted-name order.
"""

from __future__ import annotations

import json
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError


class Tensor:
    """Array node of the autodiff graph.

    Attributes:
        data: float64 ndarray payload (mutable buffer; optimizers update it
            in place).
        requires_grad: whether backward should deposit a gradient here.
        grad: accumulated gradient buffer (allocated by backward) or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a 1-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # Scalar and same-shape convenience arithmetic.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ValidationError("tensor/tensor division is not provided")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


def _make(data, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValidationError(f"{op}: shape {a.data.shape} != {b.data.shape}")


class Graph:
    """Operation records reachable from a root, in topological order."""

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, iter(root._parents))]
        seen.add(id(root))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        self.nodes = order  # parents before children

    def free(self):
        for node in self.nodes:
            node._parents = ()
            node._backward_fn = None


def backward(root: Tensor, seed=None) -> None:
    """Reverse-mode sweep from ``root``.

    Accumulates d(root)/d(tensor) into ``grad`` for every tensor with
    requires_grad reached by the sweep, visiting each node exactly once,
    then frees the graph records (a graph supports a single backward).

    Args:
        root: tensor to differentiate; must be one element unless ``seed``
            supplies an explicit output gradient of matching shape.
        seed: optional gradient seed array.
    """
    if not root.requires_grad:
        raise ValidationError("backward on a tensor with no graph")
    if seed is None:
        if root.data.size != 1:
            raise ValidationError(
                f"backward needs a scalar root or an explicit seed, got {root.shape}"
            )
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise ValidationError(
                f"seed shape {seed.shape} != root shape {root.data.shape}"
            )

    graph = Graph(root)
    flowing: dict = {id(root): seed}
    for node in reversed(graph.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flowing:
                flowing[id(parent)] = flowing[id(parent)] + pg
            else:
                flowing[id(parent)] = pg
    graph.free()


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def sqrt(a: Tensor) -> Tensor:
    """Element-wise square root with subgradient 0 at 0."""
    if np.any(a.data < 0):
        raise ValidationError("sqrt of negative values")
    r = np.sqrt(a.data)
    safe = np.where(r > 0, r, 1.0)
    zero = r == 0

    def bwd(g):
        return (np.where(zero, 0.0, 0.5 * g / safe),)

    return _make(r, (a,), bwd, "sqrt")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def flatten(a: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(rest)] (1-D input becomes [1, n])."""
    if a.data.ndim < 2:
        return reshape(a, (1, a.data.size))
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis: int = 1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValidationError("concat of nothing")
    sizes = [t.data.shape[axis] for t in ts]
    ref = list(ts[0].data.shape)
    for t in ts[1:]:
        other = list(t.data.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)
        ):
            raise ValidationError(
                f"concat: incompatible shapes {ts[0].data.shape} vs {t.data.shape}"
            )
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bwd, "concat")


def slice_rows(a: Tensor, start: int, step: int) -> Tensor:
    """Strided row selection a[start::step] along axis 0 (for pairing)."""
    sl = slice(start, None, step)
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _make(a.data[sl].copy(), (a,), bwd, "slice_rows")


def broadcast_hw(a: Tensor, h: int, w: int) -> Tensor:
    """Tile [B, C, 1, 1] over the spatial grid to [B, C, h, w]."""
    if a.data.ndim != 4 or a.data.shape[2:] != (1, 1):
        raise ValidationError(f"broadcast_hw expects [B, C, 1, 1], got {a.shape}")
    out = np.broadcast_to(a.data, a.data.shape[:2] + (h, w)).copy()
    return _make(
        out, (a,), lambda g: (g.sum(axis=(2, 3), keepdims=True),), "broadcast_hw"
    )


# ---------------------------------------------------------------------------
# reductions


def _reduce_axes(a: Tensor, axis):
    if axis is None:
        return tuple(range(a.data.ndim))
    if isinstance(axis, int):
        return (axis % a.data.ndim,)
    return tuple(ax % a.data.ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _reduce_axes(a, axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(out, (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _reduce_axes(a, axis)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor; subgradient 0 at the origin."""
    return sqrt(sum(mul(a, a)))


# ---------------------------------------------------------------------------
# dense / conv layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValidationError(f"matmul: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            g @ bd.T if need_a else None,
            ad.T @ g if need_b else None,
        )

    return _make(ad @ bd, (a, b), bwd, "matmul")


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [B, D] @ w [D, K] + bias [K] broadcast over rows."""
    if x.data.ndim != 2:
        raise ValidationError(f"fully_connected expects [B, D], got {x.shape}")
    if w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValidationError(
            f"fully_connected: x {x.data.shape} incompatible with w {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValidationError(f"bias must be [{w.data.shape[1]}], got {b.data.shape}")
    xd, wd = x.data, w.data
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def bwd(g):
        return (
            g @ wd.T if need_x else None,
            xd.T @ g if need_w else None,
            g.sum(axis=0) if need_b else None,
        )

    return _make(xd @ wd + b.data[None, :], (x, w, b), bwd, "fully_connected")


def _pad_amounts(size: int, k: int, stride: int, padding: str):
    if padding == "valid":
        return 0, 0
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation of [B, C, H, W] (or [C, H, W]) with [F, C, kh, kw].

    Args:
        x: input tensor; a 3-D input is treated as batch size 1 and the
            output is squeezed back to 3-D.
        w: filter bank [F, C, kh, kw].
        b: optional bias [F], broadcast over batch and space.
        stride: positive step applied in both spatial directions.
        padding: "same" (output ceil(size/stride)) or "valid".

    Raises:
        ValidationError: channel mismatch or a valid window that does not fit.
    """
    if padding not in ("same", "valid"):
        raise ValidationError(f"padding must be same|valid, got {padding!r}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 3
    xin = reshape(x, (1,) + x.data.shape) if squeeze else x
    xd = xin.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ValidationError(
            f"conv2d expects [B, C, H, W] and [F, C, kh, kw], got "
            f"{x.data.shape} and {w.data.shape}"
        )
    bsz, c, h, wd_ = xd.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValidationError(f"conv2d: input has {c} channels, filters expect {cw}")
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(wd_, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValidationError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, c * kh * kw
    )
    wmat = w.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        if b.data.shape != (f,):
            raise ValidationError(f"conv bias must be [{f}], got {b.data.shape}")
        out = out + b.data[None, :, None, None]

    parents = (xin, w) if b is None else (xin, w, b)
    need_x, need_w = xin.requires_grad, w.requires_grad

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, c, kh, kw) if need_w else None
        gx = None
        if need_x:
            # input gradient = full correlation of the (dilated) output
            # gradient with the flipped filters, again as im2col + matmul
            if stride > 1:
                gd = np.zeros((bsz, f, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wing = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            h2, w2 = wing.shape[2], wing.shape[3]
            colsg = np.ascontiguousarray(wing.transpose(0, 2, 3, 1, 4, 5)).reshape(
                bsz * h2 * w2, f * kh * kw
            )
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(c, f * kh * kw)
            gfull = (colsg @ wflip.T).reshape(bsz, h2, w2, c).transpose(0, 3, 1, 2)
            if (h2, w2) != (hp, wp):
                # stride left trailing rows/cols uncovered by any window
                dxp = np.zeros((bsz, c, hp, wp))
                dxp[:, :, :h2, :w2] = gfull
                gfull = dxp
            gx = gfull[:, :, pt : pt + h, pl : pl + wd_]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    res = _make(np.ascontiguousarray(out), parents, bwd, "conv2d")
    return reshape(res, res.data.shape[1:]) if squeeze else res


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: channel mixing without spatial support.

    Accepts filters shaped [F, C] or [F, C, 1, 1].
    """
    wd = w.data
    if wd.ndim == 4:
        if wd.shape[2:] != (1, 1):
            raise ValidationError(f"pointwise filters must be 1x1, got {wd.shape}")
        wmat = wd.reshape(wd.shape[0], wd.shape[1])
    elif wd.ndim == 2:
        wmat = wd
    else:
        raise ValidationError(f"pointwise filters must be [F, C(,1,1)], got {wd.shape}")
    if x.data.ndim != 4:
        raise ValidationError(f"pointwise_conv expects [B, C, H, W], got {x.shape}")
    bsz, c, h, wi = x.data.shape
    f, cw = wmat.shape
    if cw != c:
        raise ValidationError(f"pointwise: input has {c} channels, filters expect {cw}")
    xd = x.data
    out = np.tensordot(wmat, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    if b is not None:
        if b.data.shape != (f,):
            raise ValidationError(f"bias must be [{f}], got {b.data.shape}")
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    need_x, need_w = x.requires_grad, w.requires_grad
    wshape = wd.shape

    def bwd(g):
        gx = (
            np.tensordot(wmat.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
            if need_x
            else None
        )
        gw = (
            np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3])).reshape(wshape)
            if need_w
            else None
        )
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(out), parents, bwd, "pointwise_conv")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.data.ndim != 4:
        raise ValidationError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    _, _, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _make(out, (x,), bwd, "global_avg_pool")


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p).

    Identity when not training or p == 0. The caller owns the RNG, which
    is what makes training runs reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return _make(x.data.copy(), (x,), lambda g: (g,), "dropout_id")
    if rng is None:
        raise ValidationError("dropout in training mode needs an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


CHECKPOINT_FORMAT = "param-checkpoint-v1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays as manifest.json + params.bin.

    Identical inputs produce byte-identical directories (names are sorted,
    blobs are raw little-endian row-major dumps).
    """
    os.makedirs(path, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "dtype": "<f8", "params": {},
                "meta": meta or {}}
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(a.tobytes())
            manifest["params"][name] = {
                "shape": list(a.shape),
                "offset": offset,
                "size": int(a.size),
            }
            offset += a.size
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint directory; returns (arrays, meta).

    Raises:
        ValidationError: missing files, unknown format, or blob size
            disagreeing with the manifest.
    """
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise ValidationError(f"{path}: manifest.json not found")
    with open(mpath, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unknown checkpoint format {manifest.get('format')!r}")
    blob = np.fromfile(os.path.join(path, "params.bin"), dtype="<f8")
    total = 0
    arrays = {}
    for name, rec in manifest["params"].items():
        total += rec["size"]
    if blob.size != total:
        raise ValidationError(
            f"params.bin holds {blob.size} floats, manifest expects {total}"
        )
    for name, rec in manifest["params"].items():
        chunk = blob[rec["offset"] : rec["offset"] + rec["size"]]
        arrays[name] = chunk.reshape(rec["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})


class BatchNormState:
    """Running-moment buffers shared by train and eval passes."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.size)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization for [B, C, H, W] or [B, C] input.

    Training mode normalizes by batch moments (biased variance), updates
    ``state`` in place, and backpropagates through the moments. Eval mode
    normalizes by the running moments.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ValidationError(f"batchnorm expects [B, C] or [B, C, H, W], got {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValidationError(f"gamma/beta must be [{c}]")
    if state.mean.shape != (c,):
        raise ValidationError(f"state holds {state.mean.size} channels, input has {c}")
    axes = (0,) if nd == 2 else (0, 2, 3)
    shape = [1, c] + [1] * (nd - 2)

    def expand(v):
        return v.reshape(shape)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * var
    else:
        mu = state.mean
        var = state.var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mu)) * expand(istd)
    out = expand(gamma.data) * xhat + expand(beta.data)
    m = 1
    for ax in axes:
        m *= x.data.shape[ax]
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            gsum = g.sum(axis=axes)
            gx_sum = (g * xhat).sum(axis=axes)
            dx = (
                expand(gd * istd)
                * (g - expand(gsum) / m - xhat * expand(gx_sum) / m)
            )
        else:
            dx = g * expand(gd * istd)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bwd, "batchnorm")
