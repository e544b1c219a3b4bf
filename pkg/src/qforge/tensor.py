"""Dense fp64 arrays with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation records its
inputs and a vector-Jacobian closure so that ``backward`` on a scalar can
push gradients to all contributing leaves. Gradients accumulate additively
when a tensor feeds several operations.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "matmul",
    "cat",
    "where",
    "softmax",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "unfold_patches",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the differentiation graph.

    A tensor with no producing operation is a leaf; ``backward`` writes
    ``grad`` only to leaves that require gradients (or to nodes that called
    ``retain_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retains_grad = False
        self._parents: tuple = ()
        self._vjp = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None

    def retain_grad(self):
        self.retains_grad = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad or p._vjp is not None for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requiring leaf's ``grad``."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad = node.grad + g
                continue
            if node.retains_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._wrap(other)
        data = self.data + other.data
        a, b = self, other
        return Tensor._op(
            data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._op(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        return Tensor._op(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        return Tensor._op(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._op(
            a.data**n, (a,), lambda g: (g * n * a.data ** (n - 1),)
        )

    def __matmul__(self, other):
        return matmul(self, Tensor._wrap(other))

    def __getitem__(self, idx):
        a = self
        data = a.data[idx]

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._op(np.array(data, copy=True), (a,), vjp)

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._op(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
        )

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._op(
            np.ascontiguousarray(a.data.transpose(axes)),
            (a,),
            lambda g: (g.transpose(inv),),
        )

    def swapaxes(self, i, j):
        a = self
        return Tensor._op(
            np.ascontiguousarray(a.data.swapaxes(i, j)),
            (a,),
            lambda g: (g.swapaxes(i, j),),
        )

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gx, a.shape).copy(),)

        return Tensor._op(data, (a,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis=None, keepdims=False):
        a = self
        data = a.data.max(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                m = data
                gx = g
            else:
                m = data if keepdims else np.expand_dims(data, axis)
                gx = g if keepdims else np.expand_dims(g, axis)
            mask = (a.data == m).astype(np.float64)
            # split gradient evenly among ties so finite differences agree
            count = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
            return (mask * gx / count,)

        return Tensor._op(data, (a,), vjp)

    # -- elementwise nonlinearities ------------------------------------------------

    def relu(self):
        a = self
        return Tensor._op(
            np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),)
        )

    def sigmoid(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._op(s, (a,), lambda g: (g * s * (1.0 - s),))

    def exp(self):
        a = self
        e = np.exp(a.data)
        return Tensor._op(e, (a,), lambda g: (g * e,))

    def log(self):
        a = self
        return Tensor._op(np.log(a.data), (a,), lambda g: (g / a.data,))

    def abs(self):
        a = self
        return Tensor._op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- binary / structural functions ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batched-matmul broadcasting (ndim >= 2)."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return (ga, gb)

    return Tensor._op(a.data @ b.data, (a, b), vjp)


def cat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along `axis`; gradient splits back to the inputs."""
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select on a constant condition (not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = Tensor._wrap(a), Tensor._wrap(b)

    def vjp(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return Tensor._op(np.where(cond, a.data, b.data), (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to one."""
    x = Tensor._wrap(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._op(s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine (gain, shift)."""
    x, gain, shift = Tensor._wrap(x), Tensor._wrap(gain), Tensor._wrap(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{shift.shape} do not match last extent {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dshift)

    return Tensor._op(xhat * gain.data + shift.data, (x, gain, shift), vjp)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a [B,C,H,W] batch.

    Training mode normalizes with batch statistics over (B,H,W) and updates
    the running arrays in place (biased variance); eval mode uses the running
    statistics. Training with B=1 is rejected: the batch variance is not a
    usable estimate there.
    """
    x, gamma, beta = Tensor._wrap(x), Tensor._wrap(gamma), Tensor._wrap(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm affine shapes do not match channel count")
    gshape = (1, C, 1, 1)
    if training:
        if B < 2:
            raise ShapeError("batch_norm training mode requires batch size >= 2")
        axes = (0, 2, 3)
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(gshape)) * inv.reshape(gshape)
        n = B * H * W

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(gshape)
            dx = inv.reshape(gshape) * (
                dxhat
                - dxhat.sum(axis=axes, keepdims=True) / n
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / n
            )
            return (dx, dgamma, dbeta)

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(gshape)) * inv.reshape(gshape)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (gamma.data * inv).reshape(gshape)
            return (dx, dgamma, dbeta)

    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    return Tensor._op(out, (x, gamma, beta), vjp)


def _im2col(x: np.ndarray, k: int, s: int):
    B, C, H, W = x.shape
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    sB, sC, sH, sW = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, Ho, Wo, C, k, k),
        strides=(sB, s * sH, s * sW, sC, sH, sW),
        writeable=False,
    )
    return view.reshape(B, Ho * Wo, C * k * k), Ho, Wo


def _col2im(dcols: np.ndarray, xshape, k: int, s: int):
    B, C, H, W = xshape
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    dx = np.zeros(xshape, dtype=np.float64)
    d6 = dcols.reshape(B, Ho, Wo, C, k, k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += d6[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D cross-correlation.

    Output spatial extents are floor((H-k)/stride)+1 per side.
    """
    x, kernel, bias = Tensor._wrap(x), Tensor._wrap(kernel), Tensor._wrap(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects x[B,C,H,W], kernel[O,C,k,k]; got {x.shape}, {kernel.shape}"
        )
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kernel.shape}")
    k = kh
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    if k > H or k > W:
        raise ShapeError(f"kernel {k}x{k} larger than input {H}x{W}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({O},)")
    cols, Ho, Wo = _im2col(x.data, k, stride)
    wf = kernel.data.reshape(O, -1)
    out = cols @ wf.T + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, O, Ho, Wo)

    def vjp(g):
        gm = np.ascontiguousarray(g.reshape(B, O, Ho * Wo).transpose(0, 2, 1))
        dw = np.einsum("bpo,bpc->oc", gm, cols).reshape(kernel.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = gm @ wf
        dx = _col2im(dcols, x.shape, k, stride)
        return (dx, dw, db)

    return Tensor._op(out, (x, kernel, bias), vjp)


def unfold_patches(x: Tensor, p: int) -> Tensor:
    """Cut [B,F,H,W] into non-overlapping p-by-p patches.

    Returns [B, F*N, p*p] with N = floor(H/p)*floor(W/p); trailing rows and
    columns beyond the last full patch are dropped.
    """
    x = Tensor._wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold_patches expects [B,F,H,W], got {x.shape}")
    B, F, H, W = x.shape
    if p > H or p > W:
        raise ShapeError(f"patch size {p} exceeds frame {H}x{W}")
    Hp, Wp = H // p, W // p
    cropped = x.data[:, :, : Hp * p, : Wp * p]
    out = (
        cropped.reshape(B, F, Hp, p, Wp, p)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, F * Hp * Wp, p * p)
    )

    def vjp(g):
        dx = np.zeros(x.shape, dtype=np.float64)
        dx[:, :, : Hp * p, : Wp * p] = (
            g.reshape(B, F, Hp, Wp, p, p)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, F, Hp * p, Wp * p)
        )
        return (dx,)

    return Tensor._op(np.ascontiguousarray(out), (x,), vjp)
