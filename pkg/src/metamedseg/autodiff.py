"""Small reverse-mode differentiation engine on top of numpy.

Only the operations needed by the segmentation network and its losses are
provided.  Operations are recorded on the innermost active :class:`Tape`;
outside a tape everything runs in plain inference mode.

    with Tape() as tape:
        out = sigmoid(conv2d(x, w, b, padding=1))
        loss = mean(out)
    tape.backward(loss)
    w.grad
"""
import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

PROB_EPS = 1e-7

_tapes = []


class Tensor:
    """An ndarray with an optional gradient slot.

    ``node_id`` is the position of the producing operation on its tape, or
    ``None`` for leaves and untracked values.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)


class Tape:
    """Ordered record of differentiable operations.

    Each entry holds the output tensor, its input tensors and a backward
    rule mapping the output gradient to one gradient per input.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, out, inputs, backward):
        out.node_id = len(self.entries)
        self.entries.append((out, inputs, backward))

    def backward(self, root, grad=None):
        if root.node_id is None or self.entries[root.node_id][0] is not root:
            raise ConfigurationError("root tensor was not produced on this tape")
        if grad is None:
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.dtype)
        for out, inputs, rule in reversed(self.entries[: root.node_id + 1]):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, rule(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += g
        # intermediate gradients are not needed after the sweep
        for out, _, _ in self.entries:
            out.grad = None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")
    return arr


def _result(data, name, inputs, backward):
    _check_finite(data, name)
    out = Tensor(data)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    dtype = np.result_type(a.dtype, b.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not match") from None
    # python scalars must not upcast float32 data
    if a.data.ndim == 0 and not a.requires_grad and b.data.ndim:
        dtype = b.dtype
    elif b.data.ndim == 0 and not b.requires_grad and a.data.ndim:
        dtype = a.dtype
    return a, b, dtype


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b, dt = _binary_operands(a, b)
    out = (a.data + b.data).astype(dt, copy=False)
    return _result(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b, dt = _binary_operands(a, b)
    out = (a.data - b.data).astype(dt, copy=False)
    return _result(out, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b, dt = _binary_operands(a, b)
    out = (a.data * b.data).astype(dt, copy=False)
    return _result(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b, dt = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = (a.data / b.data).astype(dt, copy=False)
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,),
                   lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x, lo, hi):
    if not lo < hi:
        raise ConfigurationError(f"clamp bounds must satisfy lo < hi, got {lo}, {hi}")
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return _result(out, "clamp", (x,), lambda g: (g * inside,))


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    if p < 1 and np.any(x.data <= 0):
        raise NumericError(f"power {p} needs a strictly positive base")
    out = np.power(x.data, p)
    return _result(out, "power", (x,),
                   lambda g: (g * p * np.power(x.data, p - 1.0),))


def total(x):
    """Sum of all elements as a 0-d tensor."""
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
                   lambda g: (np.broadcast_to(g, x.shape),))


def mean(x):
    x = as_tensor(x)
    n = x.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape),))


# ---------------------------------------------------------------- spatial ops

def _im2col(xp, kh, kw, stride, ho, wo):
    """Patches of padded NCHW input as ``[N, C*kh*kw, ho*wo]``."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _pad(a, ph, pw):
    if not (ph or pw):
        return a
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2D cross-correlation over NCHW input via an im2col matrix product."""
    x = as_tensor(x)
    kernel, bias = as_tensor(kernel, x.data.dtype), as_tensor(bias, x.data.dtype)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} channels, input has {c}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} != ({f},)")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError("conv2d output size is not an integer")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _im2col(_pad(x.data, padding, padding), kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols).reshape(n, f, ho, wo) + bias.data.reshape(1, f, 1, 1)

    def backward(g):
        g3 = g.reshape(n, f, ho * wo)
        dk = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) \
            if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # full correlation of the output gradient with the flipped kernel
            gcols = _im2col(_pad(g, kh - 1 - padding, kw - 1 - padding), kh, kw, 1, h, w)
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = (kflip @ gcols).reshape(n, c, h, w)
        elif x.requires_grad:
            dcols = (kmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dk, db

    return _result(out, "conv2d", (x, kernel, bias), backward)


def instance_norm(x, gain, shift, eps=1e-5):
    """Per-sample, per-channel normalisation; no running statistics."""
    x = as_tensor(x)
    gain, shift = as_tensor(gain, x.data.dtype), as_tensor(shift, x.data.dtype)
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects NCHW input")
    n, c, h, w = x.shape
    m = h * w
    if m < 2:
        raise DimensionError("instance_norm needs planes with at least 2 pixels")
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError("gain/shift must have one entry per channel")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gk = gain.data.reshape(1, c, 1, 1)
    out = xhat * gk + shift.data.reshape(1, c, 1, 1)

    def backward(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gk
        dx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return dx, dgain, dshift

    return _result(out.astype(x.dtype, copy=False), "instance_norm", (x, gain, shift), backward)


def maxpool2(x):
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(g.shape + (4,), dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return _result(out, "maxpool2", (x,), backward)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, "upsample2", (x,),
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------- optimisation

def sgd_step(params, grads, lr, weight_decay=0.0):
    """One SGD step with L2 weight decay: ``p - lr * (g + wd * p)``."""
    p = np.asarray(params)
    g = np.asarray(grads)
    if p.shape != g.shape:
        raise DimensionError(f"params {p.shape} and grads {g.shape} differ")
    return p - lr * (g + weight_decay * p)


# ---------------------------------------------------------------- verification

def numerical_gradient(fn, arrays, index, eps=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(*arrays)
        flat[i] = orig - eps
        down = fn(*arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def gradcheck(op, arrays, eps=1e-5, seed=0):
    """Largest relative error between tape gradients and finite differences.

    ``op`` maps Tensors to a Tensor; the output is contracted with a fixed
    random weighting so every output element contributes.  The relative
    error of each input is ``|analytic - numeric| / max(|analytic|, |numeric|)``
    measured in the 2-norm.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        loss = total(mul(out, weights))
    tape.backward(loss)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        numeric = numerical_gradient(scalar, arrays, i, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale == 0:
            continue
        worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst
