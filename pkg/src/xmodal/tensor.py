"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its result eagerly with numpy and, when a Tape is active
and an input is tracked, records a backward rule on that tape.  Calling
``Tape.backward(loss)`` replays the rules in reverse recording order,
accumulating into ``.grad`` buffers.  A tape can be consumed once; backward
never mutates forward values, and double backward is not supported.

All values are checked for finiteness on tensor construction, so an op that
would produce NaN/Inf raises ``NumericsError`` instead of propagating it.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, DimensionError, NumericsError, TapeError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of backward rules for one forward pass.

    Tapes are thread-confined: at most one tape is active per thread, ops on
    other threads do not see it.  After ``backward`` the rule list is cleared
    and the tape refuses further use.
    """

    def __init__(self):
        self._rules = []
        self._spent = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def record(self, rule):
        self._rules.append(rule)

    def __len__(self):
        return len(self._rules)

    def backward(self, loss: "Tensor"):
        """Seed d(loss)=1 and replay all recorded rules in reverse order."""
        if self._spent:
            raise TapeError("tape already consumed; run a new forward pass")
        if loss.data.shape != ():
            raise DimensionError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tracked tensor")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad[...] = 1.0
        for rule in reversed(self._rules):
            rule()
        self._spent = True
        self._rules.clear()


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is allocated iff ``requires_grad`` is set and always has the
    same shape as ``data``.  The array passed in is adopted (cast to a
    contiguous float64 buffer), not defensively copied.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NumericsError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _track(self):
        # promote to gradient-carrying; used on op outputs under a tape.
        # grad stays None until backward first accumulates into it, so ops
        # on dead branches never pay for a buffer
        self.requires_grad = True

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic conveniences; scalars go through scale/shift paths
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(*tensors) -> bool:
    return _active_tape() is not None and any(t.requires_grad for t in tensors)


def _emit(out: Tensor, rule) -> Tensor:
    out._track()
    _active_tape().record(rule)
    return out


def _accum(t: Tensor, val, own: bool = False):
    """Add ``val`` into ``t.grad``, materializing the buffer on first use.

    ``own=True`` promises val is a freshly computed float64 array (or a view
    of one) aliasing no other tensor's buffer, so it can be adopted without a
    copy.  Never pass out.grad itself, or anything that might alias it, as
    owned.
    """
    if t.grad is None:
        t.grad = val if own else np.array(val, dtype=np.float64)
    else:
        t.grad += val


def _accum_neg(t: Tensor, val):
    if t.grad is None:
        t.grad = -np.asarray(val, dtype=np.float64)
    else:
        t.grad -= val


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)
    if not _tracked(a, b):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            red = _unbroadcast(g, a.data.shape)
            _accum(a, red, own=red is not g)
        if b.requires_grad:
            red = _unbroadcast(g, b.data.shape)
            _accum(b, red, own=red is not g)

    return _emit(out, rule)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data)
    if not _tracked(a, b):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            red = _unbroadcast(g, a.data.shape)
            _accum(a, red, own=red is not g)
        if b.requires_grad:
            _accum_neg(b, _unbroadcast(g, b.data.shape))

    return _emit(out, rule)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)
    if not _tracked(a, b):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _emit(out, rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    if not _tracked(a):
        return out

    def rule():
        if out.grad is not None:
            _accum(a, out.grad * c, own=True)

    return _emit(out, rule)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor, guided: bool = False) -> Tensor:
    """Elementwise max(x, 0); subgradient 0 at exactly 0.

    ``guided`` additionally zeroes negative incoming gradients in backward,
    which is only meaningful for saliency rendering, never for training.
    """
    out = Tensor(np.maximum(a.data, 0.0))
    if not _tracked(a):
        return out

    mask = a.data > 0.0

    def rule():
        g = out.grad
        if g is None:
            return
        if guided:
            g = np.where(g > 0.0, g, 0.0)
        _accum(a, g * mask, own=True)

    return _emit(out, rule)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}: {e}") from e
    out = Tensor(out_data)
    if not _tracked(a):
        return out

    def rule():
        if out.grad is not None:
            _accum(a, out.grad.reshape(a.data.shape))

    return _emit(out, rule)


def flatten_rows(a: Tensor) -> Tensor:
    """Collapse all but the leading axis: (N, ...) -> (N, prod(...))."""
    if a.ndim < 2:
        raise DimensionError(f"flatten_rows needs ndim >= 2, got {a.data.shape}")
    return reshape(a, (a.data.shape[0], -1))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    if not _tracked(a):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _emit(out, rule)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    out = Tensor(a.data.mean(axis=axis))
    if not _tracked(a):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / n, own=True)

    return _emit(out, rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if not _tracked(*tensors):
        return out

    sizes = [t.data.shape[axis] for t in tensors]

    def rule():
        g = out.grad
        if g is None:
            return
        start = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                _accum(t, g[tuple(idx)])
            start += n

    return _emit(out, rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.data.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())
    if not _tracked(a):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _emit(out, rule)


def gather_flat(a: Tensor, indices) -> Tensor:
    """Pick entries of the flattened tensor; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.intp)
    flat = a.data.reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= flat.size):
        raise DimensionError(
            f"gather index out of range for {a.data.size} elements"
        )
    out = Tensor(flat[indices].copy())
    if not _tracked(a):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad.reshape(-1), indices, g)

    return _emit(out, rule)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draw happens at op time from the supplied rng."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    if not _tracked(a):
        return out

    def rule():
        if out.grad is not None:
            _accum(a, out.grad * keep, own=True)

    return _emit(out, rule)


# ---------------------------------------------------------------------------
# matmul / conv / batchnorm


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    if not _tracked(a, b):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, own=True)

    return _emit(out, rule)


def _im2col(x: np.ndarray, k: int, stride: int):
    # x: (N, C, H, W) already padded; returns (C*k*k, N*Ho*Wo) plus (Ho, Wo)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, xshape, k: int, stride: int, ho: int, wo: int):
    n, c, hp, wp = xshape
    dx = np.zeros(xshape, dtype=np.float64)
    blocks = dcols.reshape(c, k, k, n, ho, wo)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                blocks[:, di, dj].transpose(1, 0, 2, 3)
            )
    return dx


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Valid cross-correlation with explicit zero padding.

    ``x`` is (C, H, W) or (N, C, H, W); ``kernels`` is (C_out, C_in, k, k).
    Output spatial size is floor((H + 2*padding - k) / stride) + 1.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-D, got {kernels.data.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.data.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.data.shape
    if kh != kw:
        raise DimensionError(f"kernels must be square, got {kernels.data.shape}")
    k = kh
    if ci != c:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernels "
            f"{kernels.data.shape}"
        )
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(
            f"kernel {kernels.data.shape} larger than padded input {x.data.shape}"
        )
    xp = (
        np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else xd
    )
    cols, ho, wo = _im2col(xp, k, stride)
    wm = kernels.data.reshape(co, ci * k * k)
    out2 = wm @ cols  # (C_out, N*Ho*Wo)
    out_data = np.ascontiguousarray(
        out2.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    )
    out = Tensor(out_data[0] if single else out_data)
    if not _tracked(x, kernels):
        return out

    def rule():
        if out.grad is None:
            return
        g = out.grad[None] if single else out.grad
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        if kernels.requires_grad:
            _accum(kernels, (g2 @ cols.T).reshape(kernels.data.shape), own=True)
        if x.requires_grad:
            dcols = wm.T @ g2
            dxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accum(x, dxp[0] if single else dxp, own=True)

    return _emit(out, rule)


class BatchNormState:
    """Running statistics for one batchnorm layer (one entry per channel)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(self.mean.shape[0])
        s.mean[...] = self.mean
        s.var[...] = self.var
        return s


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch (and spatial) axes.

    Train mode uses batch statistics (biased variance) and updates ``state``
    running stats in place with the given momentum (unbiased variance, as is
    conventional); eval mode uses the running stats.  Backward goes through
    the batch statistics in train mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm input must be 2-D or 4-D, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have shape ({c},), got {gamma.data.shape} and "
            f"{beta.data.shape}"
        )
    if state.mean.shape[0] != c:
        raise DimensionError(
            f"running stats track {state.mean.shape[0]} channels, input has {c}"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    red = "nc,nc->c" if x.ndim == 2 else "nchw,nchw->c"
    if mode == "train":
        if x.data.shape[0] < 2:
            raise ConfigError(
                f"batchnorm train mode needs batch >= 2, got {x.data.shape[0]}"
            )
        n = int(np.prod([x.data.shape[i] for i in axes]))
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(shape)
        var = np.einsum(red, xc, xc) / n
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var * n / (n - 1)
    else:
        n = 0
        mu = state.mean
        xc = x.data - mu.reshape(shape)
        var = state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(shape)
    out_data = xhat * gamma.data.reshape(shape)
    out_data += beta.data.reshape(shape)
    out = Tensor(out_data)
    if not _tracked(x, gamma, beta):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if gamma.requires_grad:
            _accum(gamma, np.einsum(red, g, xhat), own=True)
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes), own=True)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if mode == "eval":
                dxhat *= inv_std.reshape(shape)
                _accum(x, dxhat, own=True)
            else:
                m1 = dxhat.mean(axis=axes).reshape(shape)
                m2 = (np.einsum(red, dxhat, xhat) / n).reshape(shape)
                dxhat -= m1
                dxhat -= xhat * m2
                dxhat *= inv_std.reshape(shape)
                _accum(x, dxhat, own=True)

    return _emit(out, rule)


# ---------------------------------------------------------------------------
# distances and classification losses


def _check_eps(epsilon: float):
    if not epsilon > 0.0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")


def cosine_distance(a: Tensor, b: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Bounded distance 1 - <a,b> / (|a|_eps * |b|_eps) for two vectors.

    The epsilon sits inside the square root of each norm, so the distance is
    defined and differentiable everywhere; a zero vector gives exactly 1.
    """
    _check_eps(epsilon)
    if a.ndim != 1 or b.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(
            f"cosine_distance needs two equal-length vectors, got "
            f"{a.data.shape} and {b.data.shape}"
        )
    s = float(a.data @ b.data)
    na = np.sqrt(a.data @ a.data + epsilon)
    nb = np.sqrt(b.data @ b.data + epsilon)
    inv = 1.0 / (na * nb)
    out = Tensor(1.0 - s * inv)
    if not _tracked(a, b):
        return out

    def rule():
        if out.grad is None:
            return
        g = float(out.grad)
        if a.requires_grad:
            _accum(a, g * (s * inv / (na * na) * a.data - inv * b.data),
                   own=True)
        if b.requires_grad:
            _accum(b, g * (s * inv / (nb * nb) * b.data - inv * a.data),
                   own=True)

    return _emit(out, rule)


def cosine_distance_rows(a: Tensor, b: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Row-wise bounded cosine distance of two (B, D) tensors -> (B,)."""
    _check_eps(epsilon)
    if a.ndim != 2 or a.data.shape != b.data.shape:
        raise DimensionError(
            f"cosine_distance_rows needs two equal (B, D) tensors, got "
            f"{a.data.shape} and {b.data.shape}"
        )
    s = (a.data * b.data).sum(axis=1)
    na = np.sqrt((a.data * a.data).sum(axis=1) + epsilon)
    nb = np.sqrt((b.data * b.data).sum(axis=1) + epsilon)
    inv = 1.0 / (na * nb)
    out = Tensor(1.0 - s * inv)
    if not _tracked(a, b):
        return out

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(
                a,
                (g * s * inv / (na * na))[:, None] * a.data
                - (g * inv)[:, None] * b.data,
                own=True,
            )
        if b.requires_grad:
            _accum(
                b,
                (g * s * inv / (nb * nb))[:, None] * b.data
                - (g * inv)[:, None] * a.data,
                own=True,
            )

    return _emit(out, rule)


def euclidean_distance_rows(a: Tensor, b: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Row-wise softened euclidean distance sqrt(|a-b|^2 + eps) -> (B,).

    Unbounded alternative to the cosine distance; kept for comparison runs.
    """
    _check_eps(epsilon)
    if a.ndim != 2 or a.data.shape != b.data.shape:
        raise DimensionError(
            f"euclidean_distance_rows needs two equal (B, D) tensors, got "
            f"{a.data.shape} and {b.data.shape}"
        )
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=1) + epsilon)
    out = Tensor(d)
    if not _tracked(a, b):
        return out

    def rule():
        if out.grad is None:
            return
        g = (out.grad / d)[:, None] * diff
        if a.requires_grad:
            _accum(a, g, own=True)
        if b.requires_grad:
            _accum_neg(b, g)

    return _emit(out, rule)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer labels (N,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match {n} logit rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels must lie in [0, {k}), got range "
                             f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    lse = m[:, 0] + np.log(sez)
    out = Tensor((lse - logits.data[np.arange(n), labels]).mean())
    if not _tracked(logits):
        return out

    def rule():
        if out.grad is None:
            return
        p = ez / sez[:, None]
        p[np.arange(n), labels] -= 1.0
        _accum(logits, float(out.grad) / n * p, own=True)

    return _emit(out, rule)
