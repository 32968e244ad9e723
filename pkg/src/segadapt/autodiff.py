"""Reverse-mode automatic differentiation on float32 numpy arrays.

A ``Tensor`` wraps a float32 ndarray. Gradients are recorded on an explicit
``Tape``: ops append backward closures while a tape is active, and
``Tape.backward(scalar)`` replays them in reverse. With no active tape every
op is a plain forward computation (the no-tape mode used by pseudo-label
passes and inference). Tapes are per forward pass and discarded after use;
the module is single-threaded by contract.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32

_ACTIVE_TAPE = None


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    return a


class Tensor:
    """float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of backward closures for one forward pass.

    Use as a context manager; nesting is not supported. ``backward`` may be
    called once, after which the tape should be dropped.
    """

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, fn):
        self._nodes.append(fn)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and accumulate gradients into leaves."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
        if self._used:
            raise RuntimeError("tape already replayed; build a fresh tape per step")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()


def active_tape():
    return _ACTIVE_TAPE


def _record(out: Tensor, fn):
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.record(fn)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # reduce a broadcast gradient back to the operand's shape
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    _record(out, bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    _record(out, bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, -out.grad)

    _record(out, bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    _record(out, bw)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    _record(out, bw)
    return out


def log(a) -> Tensor:
    """Natural log; the caller guards the domain (see clamp_min)."""
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, out.grad / a.data)

    _record(out, bw)
    return out


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, DTYPE(lo)), a.requires_grad)
    mask = (a.data > lo).astype(DTYPE)

    def bw():
        if out.grad is None:
            return
        _accum(a, out.grad * mask)

    _record(out, bw)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), a.requires_grad)
    mask = (a.data > 0).astype(DTYPE)

    def bw():
        if out.grad is None:
            return
        _accum(a, out.grad * mask)

    _record(out, bw)
    return out


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    # for 0 < alpha < 1 this equals the piecewise form, in two ufunc passes
    out = Tensor(np.maximum(a.data, DTYPE(alpha) * a.data), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, np.where(a.data > 0, out.grad, DTYPE(alpha) * out.grad))

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.data.ndim for i in ax)
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape).astype(DTYPE))

    _record(out, bw)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims, dtype=DTYPE), a.requires_grad)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i % a.data.ndim] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = DTYPE(1.0 / n)

    def bw():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.data.ndim for i in ax)
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape).astype(DTYPE) * inv)

    _record(out, bw)
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        if out.grad is None:
            return
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.data.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(t, out.grad[tuple(idx)])

    _record(out, bw)
    return out


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[idx].copy(), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        g[idx] += out.grad
        _accum(a, g)

    _record(out, bw)
    return out


def flip(a, axis: int) -> Tensor:
    """Reversal along one axis; backward is the same flip."""
    a = as_tensor(a)
    out = Tensor(np.flip(a.data, axis=axis).copy(), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, np.flip(out.grad, axis=axis))

    _record(out, bw)
    return out


def rot90k(a, k: int) -> Tensor:
    """Rotate the last two axes counter-clockwise by k quarter turns."""
    a = as_tensor(a)
    k = k % 4
    out = Tensor(np.rot90(a.data, k, axes=(-2, -1)).copy(), a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, np.rot90(out.grad, -k, axes=(-2, -1)).copy())

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearity over channels


def softmax_channel(a) -> Tensor:
    """Stable softmax over the channel axis (axis 1 for 4-D, axis 0 for 3-D)."""
    a = as_tensor(a)
    if a.data.ndim == 4:
        axis = 1
    elif a.data.ndim == 3:
        axis = 0
    else:
        raise ValueError(f"softmax_channel expects 3-D or 4-D input, got ndim={a.data.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, a.requires_grad)

    def bw():
        if out.grad is None:
            return
        g = out.grad
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - dot))

    _record(out, bw)
    return out


def dropout(a, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout. Mask comes from ``rng`` only; eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    out = Tensor(a.data * keep, a.requires_grad)

    def bw():
        if out.grad is None:
            return
        _accum(a, out.grad * keep)

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# spatial ops


def _check_4d(x: np.ndarray, name: str):
    if x.ndim != 4:
        raise ValueError(f"{name} expects [B,C,H,W], got shape {x.shape}")


def conv2d(x, w, b=None) -> Tensor:
    """2-D convolution, stride 1, odd kernel, zero 'same' padding (k-1)/2.

    x: [B,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout] or None. Output [B,Cout,H,W].
    im2col + one sgemm per call; backward scatters through the same layout.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_4d(x.data, "conv2d input")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be [Cout,Cin,k,k], got {w.data.shape}")
    Cout, Cin, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {kh}x{kw}")
    if x.data.shape[1] != Cin:
        raise ValueError(f"channel mismatch: input {x.data.shape[1]}, weight {Cin}")
    k, p = kh, (kh - 1) // 2
    B, _, H, W = x.data.shape

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # windows: [B, Cin, H, W, k, k] view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [B, H, W, Cout]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    out = Tensor(y.transpose(0, 3, 1, 2), x.requires_grad or w.requires_grad or (b is not None and b.requires_grad))

    def bw():
        if out.grad is None:
            return
        g = out.grad
        if w.requires_grad:
            _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = np.tensordot(g, w.data, axes=([1], [0]))  # [B, H, W, Cin, k, k]
            dxl = np.zeros((B, H + 2 * p, W + 2 * p, Cin), np.float32)
            for i in range(k):
                for j in range(k):
                    dxl[:, i : i + H, j : j + W, :] += dwin[:, :, :, :, i, j]
            dxl = dxl[:, p : p + H, p : p + W, :] if p else dxl
            _accum(x, dxl.transpose(0, 3, 1, 2))

    _record(out, bw)
    return out


def maxpool2d(x) -> Tensor:
    """2x2 stride-2 max pool; ties resolve to the first window position."""
    x = as_tensor(x)
    _check_4d(x.data, "maxpool2d input")
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], x.requires_grad)

    def bw():
        if out.grad is None:
            return
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], out.grad[..., None], axis=-1)
        g = dwin.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accum(x, g)

    _record(out, bw)
    return out


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    x = as_tensor(x)
    _check_4d(x.data, "upsample input")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), x.requires_grad)
    B, C, H, W = x.data.shape

    def bw():
        if out.grad is None:
            return
        _accum(x, out.grad.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5), dtype=DTYPE))

    _record(out, bw)
    return out


class BatchNorm2d:
    """Per-channel batch normalization state (eps 1e-5, momentum 0.1).

    Train mode normalizes with population batch statistics and, unless
    ``update_running`` is off, blends them into the running buffers. Eval mode
    uses the running buffers and refuses to run before any batch has been seen.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.num_batches = 0

    def forward(self, x, train: bool, update_running: bool = True) -> Tensor:
        x = as_tensor(x)
        _check_4d(x.data, "batchnorm input")
        if x.data.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.data.shape[1]}")
        gamma, beta = self.gamma, self.beta
        c = (1, self.channels, 1, 1)
        if train:
            mean = x.data.mean(axis=(0, 2, 3), dtype=np.float32)
            diff = x.data - mean.reshape(c)
            var = np.mean(diff * diff, axis=(0, 2, 3), dtype=np.float32)
            if update_running:
                m = DTYPE(self.momentum)
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * var
                self.num_batches += 1
            invstd = 1.0 / np.sqrt(var + DTYPE(self.eps))
            xhat = diff * invstd.reshape(c)
            out = Tensor(gamma.data.reshape(c) * xhat + beta.data.reshape(c),
                         x.requires_grad or gamma.requires_grad or beta.requires_grad)
            N = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

            def bw():
                if out.grad is None:
                    return
                g = out.grad
                _accum(beta, g.sum(axis=(0, 2, 3)))
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
                if x.requires_grad:
                    dxhat = g * gamma.data.reshape(c)
                    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(c)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(c)
                    dx = (invstd.reshape(c) / N) * (N * dxhat - s1 - xhat * s2)
                    _accum(x, dx.astype(DTYPE))

            _record(out, bw)
            return out
        # eval path
        if self.num_batches == 0:
            raise RuntimeError("batchnorm eval mode before any running statistics exist")
        invstd = 1.0 / np.sqrt(self.running_var + DTYPE(self.eps))
        xhat = (x.data - self.running_mean.reshape(c)) * invstd.reshape(c)
        out = Tensor(gamma.data.reshape(c) * xhat + beta.data.reshape(c),
                     x.requires_grad or gamma.requires_grad or beta.requires_grad)

        def bw_eval():
            if out.grad is None:
                return
            g = out.grad
            _accum(beta, g.sum(axis=(0, 2, 3)))
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accum(x, g * (gamma.data.reshape(c) * invstd.reshape(c)))

        _record(out, bw_eval)
        return out
