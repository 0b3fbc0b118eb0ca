"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations only record history while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)      # w.grad == 2 * w.data

Outside a tape every op is a plain numpy computation, which is how
inference runs.
"""

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_TAPES = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape", "_id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._tape = None
        self._id = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators -----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Nodes are appended as ops execute, so the list is already in
    topological order. A tape may be differentiated once.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, parents, backward_fn):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = self
        out._id = len(self.nodes)
        self.nodes.append(out)

    def backward(self, loss):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already differentiated; run a new forward pass first")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {loss._id: np.ones_like(loss.data)}
        leaf_grads = {}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = parent._id
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    key = id(parent)
                    leaves[key] = parent
                    leaf_grads[key] = leaf_grads[key] + pg if key in leaf_grads else pg
        for key, leaf in leaves.items():
            leaf.grad = leaf_grads[key]
        self.consumed = True
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []


def backward(loss):
    """Differentiate ``loss`` through the tape that recorded it.

    Gradients land in the ``.grad`` of every leaf parameter reachable from
    the loss. A second call without a fresh forward pass raises.
    """
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise ContractError("loss has no recorded history (was it computed inside a Tape?)")
    loss._tape.backward(loss)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
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
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    """``a ** exponent`` for a constant scalar exponent."""
    a = as_tensor(a)
    k = float(exponent)
    if k == 0.0:
        return Tensor(np.ones_like(a.data))
    out = a.data ** k

    def bw(g):
        if k == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = k * a.data ** (k - 1.0)
        # derivative at a zero base is 0 for k > 1
        return (g * np.where(a.data == 0.0, 0.0 if k > 1.0 else d, d),)

    return _result(out, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip_min(a, lo):
    """max(a, lo); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = a.data >= lo
    return _result(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    """Permute axes; the default swaps the two trailing axes."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), bw)


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from None
    if b.ndim == 2 and a.ndim > 2:
        # fold batch dims into rows: one GEMM each way instead of a batched product
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), bw2)
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw)


def sq_dists(a, b):
    """Squared Euclidean distances between the rows of ``a`` (n, d) and ``b`` (m, d).

    Entry (i, j) is computed from the difference a_i - b_j, so
    ``sq_dists(a, b)`` is exactly the transpose of ``sq_dists(b, a)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_dists shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def bw(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _result(out, (a, b), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-9):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _result(out, (x, gain, bias), bw)


def reglu(x):
    """Split the last axis into halves (a, b) and return a * relu(b)."""
    x = as_tensor(x)
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f"reglu needs an even last axis, got {x.shape}")
    h = width // 2
    a, b = x.data[..., :h], x.data[..., h:]
    gate = b > 0
    rb = np.where(gate, b, 0.0)

    def bw(g):
        return (np.concatenate([g * rb, g * a * gate], axis=-1),)

    return _result(a * rb, (x,), bw)


def dropout(x, rate, training, rng):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(fn, param, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.asarray(as_tensor(fn()).data).sum())
        flat[i] = orig - h
        down = float(np.asarray(as_tensor(fn()).data).sum())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn, params, h=1e-5):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` takes no arguments, reads the current values of ``params`` and
    returns a scalar Tensor. Returns ``{param_name_or_index: rel_err}``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    errors = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[p.name or i] = relative_error(analytic, numeric_grad(fn, p, h))
    return errors
