"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays in channel-last layout. Every operation records a
backward closure on its output node; ``backward(loss)`` replays the recorded
graph once, in reverse topological order, accumulating ``.grad`` on every
leaf that was created with ``requires_grad=True``.

The op vocabulary is fixed: matmul, softmax over the last axis, layer norm,
three 2-d poolings, dense and depthwise convolution, bilinear upsampling,
elementwise arithmetic, shape ops, scalar reductions and a fused
cross-entropy loss. Non-finite values raise ``NumericError`` at the op that
produced them instead of propagating.

``mac_counter()`` meters the multiply-accumulates actually executed by
matmul / conv ops, which is what the analytic cost model is checked against.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError, UsageError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_grad_enabled = True
_mac_counters: list["MacCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Counts multiply-accumulates performed by matmul/conv while active."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _mac_counters.append(self)
        return self

    def __exit__(self, *exc):
        _mac_counters.remove(self)
        return False


def mac_counter() -> MacCounter:
    return MacCounter()


def _count_macs(n: int):
    for counter in _mac_counters:
        counter.total += int(n)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Data is immutable by convention once the tensor participates in a graph;
    only ``grad`` is accumulated in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # convenience arithmetic used all over the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    # single-pass screen: any NaN/Inf poisons the sum; confirm before raising
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make(out_data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op result, registering the backward closure if recording."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad or t._parents:
        if t.grad is None:
            t.grad = g.astype(t.data.dtype, copy=True)
        else:
            t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Run one reverse pass from a scalar loss.

    Each recorded op is visited exactly once; calling backward again on the
    same graph raises ``UsageError``.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward already ran on this graph; run a new forward first")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._consumed = True
        if node._backward is not None:
            node._backward = None
            node.grad = None if node is not loss else node.grad


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with gradients for both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _count_macs(batch * m * k * n)

    def bwd(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def bwd(g):
        _accumulate(a, g * s)

    return _make(out, (a,), bwd, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    e = erf(x.data * _INV_SQRT2)
    out = 0.5 * x.data * (1.0 + e)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (0.5 * (1.0 + e) + x.data * pdf))

    return _make(out, (x,), bwd, "gelu")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - inner) * out)

    return _make(out, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last (channel) axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        gx = g * gamma.data
        gmean = gx.mean(axis=-1, keepdims=True)
        gxmean = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (gx - gmean - xhat * gxmean))

    return _make(out, (x, gamma, beta), bwd, "layer_norm")


def normalize_lastdim(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm without learnable affine (used on reduced key/value tokens)."""
    c = _as_tensor(x).shape[-1]
    dt = _as_tensor(x).dtype
    return layer_norm(x, Tensor(np.ones(c, dtype=dt)), Tensor(np.zeros(c, dtype=dt)), eps)


# ---------------------------------------------------------------------------
# pooling

def _pool_geometry(h: int, w: int, r: int):
    if r < 1:
        raise ConfigError(f"pooling ratio must be >= 1, got {r}")
    oh = -(-h // r)
    ow = -(-w // r)
    return oh, ow


def _block_view(data: np.ndarray, r: int, oh: int, ow: int, fill: float):
    """Pad to a multiple of r and expose [b, oh, r, ow, r, c] blocks."""
    b, h, w, c = data.shape
    ph, pw = oh * r - h, ow * r - w
    if ph or pw:
        padded = np.full((b, oh * r, ow * r, c), fill, dtype=data.dtype)
        padded[:, :h, :w, :] = data
    else:
        padded = data
    return padded.reshape(b, oh, r, ow, r, c)


def _block_counts(h: int, w: int, r: int, oh: int, ow: int, dtype):
    rows = np.minimum(r, h - np.arange(oh) * r).astype(dtype)
    cols = np.minimum(r, w - np.arange(ow) * r).astype(dtype)
    return rows[:, None] * cols[None, :]


def avg_pool2d(x: Tensor, r: int) -> Tensor:
    """Ceil-mode average pooling; edge blocks divide by their true member count."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects [b,h,w,c], got {x.shape}")
    b, h, w, c = x.shape
    oh, ow = _pool_geometry(h, w, r)
    if r == 1:
        return reshape(x, x.shape)
    blocks = _block_view(x.data, r, oh, ow, 0.0)
    counts = _block_counts(h, w, r, oh, ow, x.dtype)
    out = blocks.sum(axis=(2, 4)) / counts[None, :, :, None]

    def bwd(g):
        spread = (g / counts[None, :, :, None])[:, :, None, :, None, :]
        gx = np.broadcast_to(spread, (b, oh, r, ow, r, c)).reshape(b, oh * r, ow * r, c)
        _accumulate(x, gx[:, :h, :w, :])

    return _make(out, (x,), bwd, "avg_pool2d")


def max_pool2d(x: Tensor, r: int) -> Tensor:
    """Ceil-mode max pooling (first-index tie break, deterministic)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects [b,h,w,c], got {x.shape}")
    b, h, w, c = x.shape
    oh, ow = _pool_geometry(h, w, r)
    if r == 1:
        return reshape(x, x.shape)
    blocks = _block_view(x.data, r, oh, ow, -np.inf)
    flat = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(b, oh, ow, r * r, c)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = gflat.reshape(b, oh, ow, r, r, c).transpose(0, 1, 3, 2, 4, 5)
        gx = gx.reshape(b, oh * r, ow * r, c)
        _accumulate(x, gx[:, :h, :w, :])

    return _make(out, (x,), bwd, "max_pool2d")


def overlapped_avg_pool2d(x: Tensor, r: int) -> Tensor:
    """Overlapping mean pooling: kernel r+1, stride r, mean over in-bounds members.

    Output extents match the other poolings (ceil(h/r) x ceil(w/r)); the pad
    needed to reach them is split as evenly as the odd total allows.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"overlapped_avg_pool2d expects [b,h,w,c], got {x.shape}")
    b, h, w, c = x.shape
    oh, ow = _pool_geometry(h, w, r)
    k = r + 1

    def starts(n, on):
        total_pad = (on - 1) * r + k - n
        return np.arange(on) * r - total_pad // 2

    hs, ws = starts(h, oh), starts(w, ow)
    rows = hs[:, None] + np.arange(k)[None, :]          # [oh, k]
    cols = ws[:, None] + np.arange(k)[None, :]          # [ow, k]
    rvalid = (rows >= 0) & (rows < h)
    cvalid = (cols >= 0) & (cols < w)
    rc = np.clip(rows, 0, h - 1)
    cc = np.clip(cols, 0, w - 1)

    gathered = x.data[:, rc][:, :, :, cc]               # [b, oh, k, ow, k, c]
    mask = (rvalid[:, :, None, None] & cvalid[None, None, :, :]).astype(x.dtype)
    gathered = gathered * mask[None, :, :, :, :, None]
    counts = rvalid.sum(axis=1).astype(x.dtype)[:, None] * cvalid.sum(axis=1).astype(x.dtype)[None, :]
    out = gathered.sum(axis=(2, 4)) / counts[None, :, :, None]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gn = g / counts[None, :, :, None]
        for di in range(k):
            for dj in range(k):
                vr, vc = rvalid[:, di], cvalid[:, dj]
                if not (vr.any() and vc.any()):
                    continue
                # same (di,dj) offset maps outputs to distinct inputs: plain add
                gx[np.ix_(np.arange(b), rows[vr, di], cols[vc, dj])] += gn[:, vr][:, :, vc]
        _accumulate(x, gx)

    return _make(out, (x,), bwd, "overlapped_avg_pool2d")


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [b,h,w,cin] with [kh,kw,cin,cout]."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    sb, sh, sw, sc = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (b, oh, ow, kh, kw, cin), (sb, sh * stride, sw * stride, sh, sw, sc)
    ).reshape(b * oh * ow, kh * kw * cin)
    wmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(b, oh, ow, cout)
    _count_macs(b * oh * ow * kh * kw * cin * cout)

    def bwd(g):
        gflat = g.reshape(b * oh * ow, cout)
        _accumulate(k, (cols.T @ gflat).reshape(kh, kw, cin, cout))
        gcols = (gflat @ wmat.T).reshape(b, oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += gcols[:, :, :, i, j, :]
        _accumulate(x, gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp)

    return _make(out, (x, k), bwd, "conv2d")


def depthwise_conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Per-channel 2-d cross-correlation, stride 1, same padding."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects [b,h,w,c] and [kh,kw,c], got {x.shape}, {k.shape}")
    b, h, w, c = x.shape
    kh, kw, kc = k.shape
    if kc != c:
        raise DimensionError(f"depthwise channel mismatch: input has {c}, kernel has {kc}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + h, j : j + w, :] * k.data[i, j, :]
    _count_macs(b * h * w * kh * kw * c)

    def bwd(g):
        gk = np.empty_like(k.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + h, j : j + w, :]
                gk[i, j, :] = (g * patch).sum(axis=(0, 1, 2))
                gxp[:, i : i + h, j : j + w, :] += g * k.data[i, j, :]
        _accumulate(k, gk)
        _accumulate(x, gxp[:, ph : ph + h, pw : pw + w, :])

    return _make(out, (x, k), bwd, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# resampling

def _interp_matrix(n_out: int, n_in: int, dtype):
    """Row-stochastic half-pixel-center bilinear weights, edges clamped."""
    src = np.clip((np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(mat, (np.arange(n_out), lo), (1.0 - frac).astype(dtype))
    np.add.at(mat, (np.arange(n_out), hi), frac.astype(dtype))
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upscale [b,h,w,c] to [b,out_h,out_w,c] (half-pixel centers, no corner alignment)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects [b,h,w,c], got {x.shape}")
    b, h, w, c = x.shape
    if out_h < h or out_w < w:
        raise ConfigError(f"bilinear_upsample cannot downscale: {h}x{w} -> {out_h}x{out_w}")
    if out_h == h and out_w == w:
        return reshape(x, x.shape)
    wh = _interp_matrix(out_h, h, x.dtype)
    ww = _interp_matrix(out_w, w, x.dtype)
    out = np.einsum("Hh,bhwc->bHwc", wh, x.data, optimize=True)
    out = np.einsum("Ww,bHwc->bHWc", ww, out, optimize=True)

    def bwd(g):
        gh = np.einsum("Ww,bHWc->bHwc", ww, g, optimize=True)
        _accumulate(x, np.einsum("Hh,bHwc->bhwc", wh, gh, optimize=True))

    return _make(out, (x,), bwd, "bilinear_upsample")


# ---------------------------------------------------------------------------
# shape ops, reductions, loss

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        _accumulate(x, g.transpose(inv))

    return _make(out, (x,), bwd, "transpose")


def concat_lastdim(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != base:
            raise DimensionError(
                f"concat_lastdim leading extents differ: {t.shape} vs {tensors[0].shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=-1)):
            _accumulate(t, piece)

    return _make(out, tuple(tensors), bwd, "concat_lastdim")


def reduce_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def bwd(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return _make(out, (x,), bwd, "sum")


def reduce_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.dtype))

    return _make(out, (x,), bwd, "mean")


def cross_entropy_logits(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean cross-entropy of [..., C] logits against integer labels.

    Pixels labelled ``ignore_index`` contribute nothing to loss or gradient.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape[:-1]}"
        )
    ncls = logits.shape[-1]
    flat = logits.data.reshape(-1, ncls)
    lab = labels.reshape(-1).astype(np.int64)
    keep = lab != ignore_index
    if not keep.any():
        raise UsageError("cross_entropy_logits: every label is ignore_index")
    if lab[keep].min() < 0 or lab[keep].max() >= ncls:
        raise ConfigError(f"labels out of range [0, {ncls})")

    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    idx = np.arange(flat.shape[0])
    n = int(keep.sum())
    out = np.asarray(-logp[idx[keep], lab[keep]].sum() / n)

    def bwd(g):
        p = np.exp(logp)
        p[idx[keep], lab[keep]] -= 1.0
        p[~keep] = 0.0
        _accumulate(logits, (float(g) * p / n).reshape(logits.shape).astype(logits.dtype))

    return _make(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# serialization: magic "EFT1", u8 dtype tag (0=f32, 1=f64), u8 rank,
# rank x u64 little-endian extents, then raw row-major values.

_MAGIC = b"EFT1"
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise ConfigError(f"serializable dtypes are f32/f64, got {arr.dtype}")
    f.write(_MAGIC)
    f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(f) -> np.ndarray:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ConfigError(f"bad tensor magic {magic!r}")
    tag, rank = struct.unpack("<BB", f.read(2))
    if tag not in _TAG_DTYPES:
        raise ConfigError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
