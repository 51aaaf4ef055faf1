"""Tensor algebra with a reverse-mode tape, plus the RMSProp optimizer.

Ops accept optional leading batch dimensions (conv2d takes ``[C,H,W]`` or
``[N,C,H,W]``, affine takes ``[..., n]``). Recording happens only while a
:class:`Tape` is active and at least one input requires a gradient, so
acting-time forward passes cost nothing extra.

Gradients of leaf tensors accumulate into ``tensor.grad``; nothing here zeros
those buffers. Callers own that step (see :meth:`ParameterSet.zero_grad` in
the agent module).
"""
import numpy as np

from . import _kernels


class NumericsError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_produced")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._produced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common cases; all route through the taped ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x):
    return Tensor(as_tensor(x).data)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE = []


class Tape:
    """Ordered log of executed differentiable ops.

    Used as a context manager; nested tapes are allowed and only the innermost
    records.
    """

    def __init__(self):
        self.records = []
        self._outputs = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, inputs, output, backward):
        output.requires_grad = True
        output._produced = True
        self.records.append(_Record(inputs, output, backward))
        self._outputs.add(id(output))

    def backward(self, loss):
        return backward(self, loss)


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def no_grad():
    """Context that suspends recording (pushes an inert tape)."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self):
        _ACTIVE.append(None)

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _emit(data, inputs, backward):
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward)
    return out


def backward(tape, loss):
    """Propagate d(loss)/d(.) through ``tape`` in reverse execution order.

    Leaf tensors with ``requires_grad`` receive their gradient added into
    ``.grad``. Returns the list of leaves that were reached.
    """
    if tape is None or not tape.records:
        raise NumericsError("backward called before any forward op was recorded")
    if loss.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise NumericsError("loss tensor was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    reached = []
    seen = set()
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._produced and id(inp) in tape._outputs:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
                if id(inp) not in seen:
                    seen.add(id(inp))
                    reached.append(inp)
    return reached


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def square(x):
    x = as_tensor(x)
    d = x.data
    return _emit(d * d, (x,), lambda g: (2.0 * g * d,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def slice_last(x, start, stop):
    """x[..., start:stop]."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)
    return _emit(x.data[..., start:stop], (x,), bw)


def take(x, index, axis):
    """x.take(index, axis) for a single integer index (the axis is dropped)."""
    x = as_tensor(x)
    shape = x.shape
    sl = (slice(None),) * axis + (index,)

    def bw(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)
    return _emit(x.data[sl], (x,), bw)


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x):
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def gather_last(x, index):
    """out[..., ] = x[..., index[...]] for an integer index over the last axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)
    return _emit(picked, (x,), bw)


# ---------------------------------------------------------------------------
# layers

def affine(x, weight, bias=None):
    """x @ weight.T (+ bias) over the last axis of x."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise NumericsError(f"affine: input dim {x.shape[-1]} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise NumericsError(f"affine: bias shape {bias.shape} vs out dim {wd.shape[0]}")
        y = y + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _emit(y, inputs, bw)


def conv_output_size(size, k, stride):
    span = size - k
    if span < 0 or span % stride != 0:
        raise NumericsError(
            f"conv geometry: ({size} - {k}) not a non-negative multiple of stride {stride}")
    return span // stride + 1


def conv2d(x, kernels, bias, stride):
    """Valid cross-correlation with per-channel bias."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise NumericsError("conv2d expects [C,H,W] or [N,C,H,W] input and 4-D kernels")
    n, c, h, w = xd.shape
    cout, cin, k, k2 = kernels.shape
    if cin != c or k != k2:
        raise NumericsError(f"conv2d: input channels {c} vs kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise NumericsError(f"conv2d: bias shape {bias.shape} vs {cout} channels")
    oh = conv_output_size(h, k, stride)
    ow = conv_output_size(w, k, stride)

    cols = _kernels.im2col(xd, k, stride)              # [n, P, c*k*k]
    kmat = kernels.data.reshape(cout, -1)
    y = cols @ kmat.T + bias.data                       # [n, P, cout]
    out = y.transpose(0, 2, 1).reshape(n, cout, oh, ow)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gy = g4.reshape(n, cout, oh * ow).transpose(0, 2, 1)   # [n, P, cout]
        gy2 = gy.reshape(-1, cout)
        gk = (gy2.T @ cols.reshape(-1, cols.shape[-1])).reshape(kernels.shape)
        gb = gy2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = _kernels.col2im(gy @ kmat, (n, c, h, w), k, stride)
            if squeeze:
                gx = gx[0]
        return gx, gk, gb
    return _emit(np.ascontiguousarray(out), (x, kernels, bias), bw)


def softmax(x):
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericsError("softmax input contains NaN")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _emit(y, (x,), bw)


def log_softmax(x):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericsError("log_softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _emit(y, (x,), bw)


def weighted_sum(vectors, weights):
    """z[..., d] = sum_i weights[..., i] * vectors[..., i, d]."""
    vectors, weights = as_tensor(vectors), as_tensor(weights)
    vd, wd = vectors.data, weights.data
    if vd.shape[:-1] != wd.shape:
        raise NumericsError(f"weighted_sum: vectors {vd.shape} vs weights {wd.shape}")
    z = np.einsum("...l,...ld->...d", wd, vd)

    def bw(g):
        return (wd[..., None] * g[..., None, :], np.einsum("...d,...ld->...l", g, vd))
    return _emit(z, (vectors, weights), bw)


def lstm_step(x, h_prev, c_prev, w_ih, b_ih, w_hh, b_hh):
    """One LSTM cell step; gate order (input, forget, candidate, output)."""
    hdim = as_tensor(h_prev).shape[-1]
    if as_tensor(w_ih).shape[0] != 4 * hdim or as_tensor(w_hh).shape != (4 * hdim, hdim):
        raise NumericsError("lstm_step: weight shapes do not match hidden size")
    gates = add(affine(x, w_ih, b_ih), affine(h_prev, w_hh, b_hh))
    i = sigmoid(slice_last(gates, 0, hdim))
    f = sigmoid(slice_last(gates, hdim, 2 * hdim))
    g = tanh(slice_last(gates, 2 * hdim, 3 * hdim))
    o = sigmoid(slice_last(gates, 3 * hdim, 4 * hdim))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# optimizers

class RMSProp:
    """RMSProp with momentum.

    ms  <- decay * ms + (1 - decay) * g^2
    mom <- momentum * mom + lr * g / sqrt(ms + eps)
    p   <- p - mom
    """

    def __init__(self, params, lr=0.01, momentum=0.95, decay=0.95, eps=0.01):
        if lr < 0:
            raise NumericsError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise NumericsError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.decay = decay
        self.eps = eps
        self.mean_square = [np.zeros_like(p.data) for p in self.params]
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise NumericsError("gradient list does not match parameter list")
        for p, g, ms, mom in zip(self.params, grads, self.mean_square, self.velocity):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise NumericsError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            mom *= self.momentum
            mom += self.lr * g / np.sqrt(ms + self.eps)
            p.data -= mom

    def state_arrays(self):
        return self.mean_square, self.velocity


class SGD:
    def __init__(self, params, lr=0.01):
        self.params = list(params)
        self.lr = lr

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is not None:
                p.data -= self.lr * g


def rmsprop_step(params, grads, state):
    """Functional form: ``state`` is an :class:`RMSProp` bound to ``params``."""
    if list(state.params) != list(params):
        raise NumericsError("optimizer state bound to different parameters")
    state.step(grads)
    return params


# ---------------------------------------------------------------------------
# sampling

def categorical_sample(probs, rng):
    """Draw one index with P(i) = probs[i] by inverse CDF on one uniform."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise NumericsError("probabilities must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NumericsError("probabilities must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise NumericsError(f"probabilities sum to {total}, expected 1")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, p.size - 1)


def categorical_sample_rows(probs, rng):
    """Row-wise :func:`categorical_sample` for a [N, L] matrix (one uniform per row)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise NumericsError("probabilities must be finite and non-negative")
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)
