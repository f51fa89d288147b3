"""Differentiable numpy primitives with reverse-mode gradients.

Everything the model needs is built from the small op set below: each op
computes its value eagerly on ``numpy`` arrays and records a closure that
maps the output cotangent back to its inputs.  ``Tensor.backward`` walks
the recorded graph in reverse topological order.  ``grad_check`` compares
the accumulated analytic gradients against central finite differences.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict

import numpy as np

__all__ = [
    "Tensor",
    "ParamTape",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "sqrt",
    "square",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "gather_rows",
    "slice_rows",
    "min_reduce",
    "max_reduce",
    "masked_softmax",
    "conv1d_same",
    "dropout",
    "grad_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    # Operator sugar; all heavy lifting lives in the module-level ops.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate gradients of this scalar into every parameter upstream."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # Own the buffer: a vjp may hand back a view of the
                    # upstream gradient or the same array for two parents.
                    if g.base is None and not np.may_share_memory(g, node.grad):
                        parent.grad = g
                    else:
                        parent.grad = g.copy()
                else:
                    parent.grad += g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _track(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _track(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _track(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _track(ad * bd, (a, b), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _track(ad @ bd, (a, b), vjp)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _track(np.where(mask, x.data, 0.0), (x,), vjp)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _track(out, (x,), vjp)


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _track(out, (x,), vjp)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _track(out, (x,), vjp)


def sqrt(x):
    """Elementwise square root; subgradient 0 where the input is exactly 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _track(out, (x,), vjp)


def square(x):
    x = as_tensor(x)
    d = x.data

    def vjp(g):
        return (2.0 * g * d,)

    return _track(d * d, (x,), vjp)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    xsh = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xsh).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xsh).copy(),)

    return _track(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def reshape(x, shape):
    x = as_tensor(x)
    xsh = x.data.shape

    def vjp(g):
        return (g.reshape(xsh),)

    return _track(x.data.reshape(shape), (x,), vjp)


def gather_rows(table, idx):
    """Index axis 0 of ``table`` with an integer array (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    td = table.data

    def vjp(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _track(td[idx], (table,), vjp)


def slice_rows(x, start, stop=None):
    """Contiguous row slice ``x[start:stop]`` along axis 0."""
    x = as_tensor(x)
    xd = x.data
    sl = slice(start, stop)

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[sl] = g
        return (gx,)

    return _track(xd[sl], (x,), vjp)


def min_reduce(x, axis, valid=None, empty_fill=0.0):
    """Min over ``axis`` restricted to ``valid`` entries.

    Invalid entries never win (treated as +inf).  Slices with no valid
    entry produce ``empty_fill`` and receive no gradient.  Gradient is
    routed to the first argmin, matching the convention of numpy argmin.
    """
    return _extremum_reduce(x, axis, valid, empty_fill, minimum=True)


def max_reduce(x, axis, valid=None, empty_fill=0.0):
    """Max over ``axis`` restricted to ``valid`` entries (see min_reduce)."""
    return _extremum_reduce(x, axis, valid, empty_fill, minimum=False)


def _extremum_reduce(x, axis, valid, empty_fill, minimum):
    x = as_tensor(x)
    d = x.data
    sentinel = np.inf if minimum else -np.inf
    if valid is not None:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), d.shape)
        dv = np.where(valid, d, sentinel)
        any_valid = valid.any(axis=axis)
    else:
        dv = d
        any_valid = np.True_
    idx = dv.argmin(axis=axis) if minimum else dv.argmax(axis=axis)
    out = np.take_along_axis(dv, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    out = np.where(any_valid, out, empty_fill).astype(d.dtype, copy=False)

    def vjp(g):
        gx = np.zeros_like(d)
        gg = np.where(any_valid, g, 0.0)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(gg, axis), axis=axis)
        return (gx,)

    return _track(out, (x,), vjp)


def masked_softmax(scores, mask, axis=-1):
    """Softmax over ``axis`` restricted to ``mask``.

    Masked entries are exactly 0 in the output; unmasked entries sum to 1.
    A slice with no unmasked entry yields all zeros.  Stabilized by
    max-subtraction over the unmasked entries.
    """
    scores = as_tensor(scores)
    d = scores.data
    m = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    neg = np.where(m, d, -np.inf)
    smax = neg.max(axis=axis, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.where(m, np.exp(d - smax), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _track(out, (scores,), vjp)


_CONV_CHUNK_ELEMS = 1 << 24  # cap on im2col scratch size (elements)


def _im2col(x, s):
    """(N, p, cin) -> (N*p, s*cin) patch matrix with same-padding."""
    n, p, cin = x.shape
    pad = (s - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, s, axis=1)  # (N, p, cin, s)
    return win.transpose(0, 1, 3, 2).reshape(n * p, s * cin)


def conv1d_same(x, w, b, apply_relu=True):
    """Length-preserving 1-D convolution over the second-to-last axis.

    ``x`` has shape (..., p, cin); ``w`` has shape (s, cin, cout) with odd
    ``s``; ``b`` has shape (cout,).  The sequence is zero-padded by
    (s-1)//2 on each side so position i maps to position i.  Backward
    recomputes the patch matrix in chunks to bound peak memory.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    s, cin, cout = w.data.shape
    if s % 2 == 0:
        raise ValueError("conv1d_same requires an odd kernel size")
    lead = x.data.shape[:-2]
    p = x.data.shape[-2]
    if x.data.shape[-1] != cin:
        raise ValueError("input channel mismatch")
    xf = x.data.reshape(-1, p, cin)
    n = xf.shape[0]
    w2d = w.data.reshape(s * cin, cout)

    rows_per_chunk = max(1, _CONV_CHUNK_ELEMS // max(1, s * cin))
    pre = np.empty((n * p, cout), dtype=xf.dtype)
    # chunk along whole sequences so padding stays local to each one
    seq_chunk = max(1, rows_per_chunk // max(1, p))
    for lo in range(0, n, seq_chunk):
        hi = min(n, lo + seq_chunk)
        cols = _im2col(xf[lo:hi], s)
        pre[lo * p : hi * p] = cols @ w2d
    pre += b.data
    act_mask = pre > 0 if apply_relu else None
    outf = np.where(act_mask, pre, 0.0) if apply_relu else pre
    out = outf.reshape(*lead, p, cout)

    def vjp(g):
        gf = g.reshape(n * p, cout)
        if apply_relu:
            gf = gf * act_mask
        gb = gf.sum(axis=0)
        gw2d = np.zeros_like(w2d)
        pad = (s - 1) // 2
        gxp = np.zeros((n, p + 2 * pad, cin), dtype=xf.dtype)
        for lo in range(0, n, seq_chunk):
            hi = min(n, lo + seq_chunk)
            cols = _im2col(xf[lo:hi], s)
            gchunk = gf[lo * p : hi * p]
            gw2d += cols.T @ gchunk
            gcols = (gchunk @ w2d.T).reshape(hi - lo, p, s, cin)
            for si in range(s):
                gxp[lo:hi, si : si + p, :] += gcols[:, :, si, :]
        gx = gxp[:, pad : pad + p, :].reshape(x.data.shape)
        return gx, gw2d.reshape(s, cin, cout), gb

    return _track(out, (x, w, b), vjp)


def dropout(x, rate, rng, train):
    """Inverted dropout: scales kept units by 1/(1-rate) at train time."""
    if not train or rate <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    keep /= 1.0 - rate

    def vjp(g):
        return (g * keep,)

    return _track(x.data * keep, (x,), vjp)


class ParamTape:
    """Ordered registry of named parameter tensors with accumulated gradients."""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self):
        return sum(t.data.size for t in self._params.values())

    def global_grad_norm(self):
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def clip_global_norm(self, max_norm):
        norm = self.global_grad_norm()
        if norm > max_norm > 0:
            scale = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


def grad_check(loss_fn, tape, eps=1e-5, coords_per_param=8, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure over ``tape`` (dropout off)
    returning a scalar Tensor.  For each parameter, up to
    ``coords_per_param`` coordinates are sampled and perturbed by +/-eps.
    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    rng = rng or np.random.default_rng(0)
    tape.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    analytic = {}
    for name, t in tape.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    max_rel = 0.0
    for name, t in tape.items():
        flat = t.data.reshape(-1)
        size = flat.size
        coords = rng.choice(size, size=min(coords_per_param, size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                lp = float(loss_fn().item())
            flat[c] = orig - eps
            with no_grad():
                lm = float(loss_fn().item())
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_rel = max(max_rel, rel)
    tape.zero_grad()
    return max_rel
