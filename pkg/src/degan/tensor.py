"""Dense tensors with reverse-mode automatic differentiation.

Everything is float64 numpy under the hood. The graph is rebuilt on every
forward pass (define-by-run): each operation returns a new Tensor holding
references to its inputs and a closure that maps the output gradient to
input gradients. ``backward()`` walks the graph once in reverse topological
order and adds the result into ``Tensor.grad``, so repeated calls without a
``zero_grad()`` accumulate additively.

Image tensors use the NCHW layout. Convolution follows the cross-correlation
convention (no kernel flip).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, LabelError

DTYPE = np.float64


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=DTYPE)


class Tensor:
    """An n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        # Subgraphs that cannot influence any tracked tensor are pruned.
        if self.requires_grad and vjp is not None:
            self._parents = tuple(parents)
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        """A view of the same data that is cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every tracked tensor.

        ``self`` must be scalar. Each graph node is visited exactly once.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; deep graphs would blow the recursion limit
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # Per-call gradient staging keeps repeated backward() calls additive:
        # each call contributes exactly one copy of the gradient to .grad.
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return tabs(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and linear algebra -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), vjp=lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects compatible 2-D operands, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, parents=(a, b), vjp=vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, parents=(a,), vjp=lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor(out, parents=tuple(tensors), vjp=vjp)


def tsum(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), parents=(a,), vjp=lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(
        a.data.mean(),
        parents=(a,),
        vjp=lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def tabs(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.data), parents=(a,), vjp=lambda g: (g * np.sign(a.data),))


# -- activations ---------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (a.data > 0.0),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(a.data > 0.0, a.data, slope * a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * np.where(a.data > 0.0, 1.0, slope),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out * (1.0 - out),))


ACTIVATIONS = {"relu": relu, "leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid}


# -- convolution ----------------------------------------------------------


def _check_conv_args(stride, padding):
    if not (isinstance(stride, (int, np.integer)) and stride >= 1):
        raise ContractError(f"stride must be a positive integer, got {stride!r}")
    if not (isinstance(padding, (int, np.integer)) and padding >= 0):
        raise ContractError(f"padding must be a non-negative integer, got {padding!r}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    oh, ow = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into an (N,C,H,W) array."""
    n, c, h, w = out_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    buf = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += patches[
                :, :, i, j, :, :
            ]
    if padding:
        return buf[:, :, padding:-padding, padding:-padding]
    return buf


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (N,C,H,W) with an (F,C,kh,kw) kernel."""
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (gmat.T @ cols).reshape(kernel.shape)
        dx = _col2im(gmat @ kmat, (n, c, h, w), kh, kw, stride, padding)
        return dx, dk

    return Tensor(out, parents=(x, kernel), vjp=vjp)


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of (N,C,H,W) with a (C,F,kh,kw) kernel.

    The forward map is the exact adjoint of conv2d with the same kernel:
    <conv2d(a, k), b> == <a, conv2d_transpose(b, k)>.
    """
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    ck, f, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(
            f"conv2d_transpose channel mismatch: input {x.shape}, kernel {kernel.shape}"
        )
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d_transpose geometry yields non-positive output {oh}x{ow} "
            f"(input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding})"
        )
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    kmat = kernel.data.reshape(c, -1)
    out = _col2im(xmat @ kmat, (n, f, oh, ow), kh, kw, stride, padding)

    def vjp(g):
        gcols = _im2col(g, kh, kw, stride, padding)
        dx = (gcols @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dk = (xmat.T @ gcols).reshape(kernel.shape)
        return dx, dk

    return Tensor(out, parents=(x, kernel), vjp=vjp)


# -- classification loss ---------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over rows, plus the softmax probabilities.

    ``logits`` is (N, K); ``targets`` is one class index per row. Stabilized
    by max-subtraction so saturated logits stay finite.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} logit rows")
    if targets.min() < 0 or targets.max() >= k:
        raise LabelError(f"target classes must lie in [0, {k}), got {targets.min()}..{targets.max()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    denom = ex.sum(axis=1, keepdims=True)
    probs = ex / denom
    nll = np.log(denom[:, 0]) - shifted[np.arange(n), targets]
    loss = nll.mean()

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return Tensor(loss, parents=(logits,), vjp=vjp), probs


# -- gradient verification --------------------------------------------------


def finite_diff_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``point`` to a scalar Tensor and is re-evaluated per coordinate,
    so it must be deterministic. Error per coordinate is
    |analytic - central| / (|central| + 1e-8).
    """
    point.requires_grad = True
    point.zero_grad()
    out = f(point)
    if out.data.size != 1:
        raise ContractError(f"finite_diff_check requires a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = point.grad.copy() if point.grad is not None else np.zeros_like(point.data)

    numeric = np.zeros_like(point.data)
    flat = point.data.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = float(f(point).data)
        flat[i] = saved - eps
        f_minus = float(f(point).data)
        flat[i] = saved
        num_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
