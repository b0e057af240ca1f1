"""A small reverse-mode tensor engine, just large enough for the DeepCount graph.

Feature maps are channels-last, ``(N, H, W, C)``.  Convolution kernels are
``(K1, K2, Cin, Cout)`` for both ordinary and transposed convolutions.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient, the output remembers its parents and a closure mapping the output
gradient to per-parent gradients; :func:`backward` walks that record in
reverse topological order.
"""

import numpy as np

from . import _kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"


class Parameter(Tensor):
    """A named trainable tensor.

    ``learn_rate_scale`` multiplies the base learning rate for this parameter
    (0.5 for the frontend, 1.0 elsewhere).
    """

    __slots__ = ("name", "learn_rate_scale")

    def __init__(self, name, data, learn_rate_scale=1.0, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if not learn_rate_scale > 0:
            raise ValueError(f"learn_rate_scale must be positive, got {learn_rate_scale}")
        self.name = name
        self.learn_rate_scale = float(learn_rate_scale)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv_output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transposed_output_extent(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


def _check_conv_args(x, weight, bias, stride, op):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: input must be NHWC, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"{op}: weight must be K1xK2xCinxCout, got shape {weight.shape}")
    if x.shape[3] != weight.shape[2]:
        raise ValueError(
            f"{op}: input channels {x.shape[3]} do not match weight Cin; "
            f"input shape {x.shape}, weight shape {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match weight shape {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of an NHWC map with a ``K1xK2xCinxCout`` kernel."""
    x = _as_tensor(x)
    _check_conv_args(x, weight, bias, stride, "conv2d")
    n, h, w, cin = x.shape
    k1, k2, _, cout = weight.shape
    out_h = conv_output_extent(h, k1, stride, padding)
    out_w = conv_output_extent(w, k2, stride, padding)
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            f"conv2d: non-positive output extent {out_h}x{out_w} for input {x.shape}, "
            f"kernel {weight.shape}, stride {stride}, padding {padding}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _kernels.im2col(xp, k1, k2, stride, out_h, out_w).reshape(n * out_h * out_w, -1)
    wmat = weight.data.reshape(k1 * k2 * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, out_h, out_w, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)
    hp, wp = xp.shape[1], xp.shape[2]

    def _backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, out_h, out_w, k1, k2, cin)
            gxp = _kernels.col2im(dcols, hp, wp, stride)
            gx = gxp[:, padding : padding + h, padding : padding + w, :]
        gw = (cols.T @ g2).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, _backward, "conv2d")


def conv2d_transposed(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution; the kernel is ``K1xK2xCinxCout`` with Cin = input channels.

    Output extent is ``(H-1)*stride - 2*padding + K1`` (likewise for width).
    """
    x = _as_tensor(x)
    _check_conv_args(x, weight, bias, stride, "conv2d_transposed")
    n, h, w, cin = x.shape
    k1, k2, _, cout = weight.shape
    out_h = conv_transposed_output_extent(h, k1, stride, padding)
    out_w = conv_transposed_output_extent(w, k2, stride, padding)
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            f"conv2d_transposed: non-positive output extent {out_h}x{out_w} for input "
            f"{x.shape}, kernel {weight.shape}, stride {stride}, padding {padding}"
        )
    full_h = (h - 1) * stride + k1
    full_w = (w - 1) * stride + k2
    wt = np.ascontiguousarray(weight.data.transpose(2, 0, 1, 3)).reshape(cin, k1 * k2 * cout)
    x2 = x.data.reshape(n * h * w, cin)
    cols = (x2 @ wt).reshape(n, h, w, k1, k2, cout)
    full = _kernels.col2im(cols, full_h, full_w, stride)
    out = full[:, padding : padding + out_h, padding : padding + out_w, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        gp = g
        if padding:
            gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        dcols = _kernels.im2col(gp, k1, k2, stride, h, w).reshape(n * h * w, k1 * k2 * cout)
        gx = (dcols @ wt.T).reshape(x.shape) if x.requires_grad else None
        gwt = x2.T @ dcols
        gw = gwt.reshape(cin, k1, k2, cout).transpose(1, 2, 0, 3)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return _make(out, parents, _backward, "conv2d_transposed")


# ---------------------------------------------------------------------------
# Pooling, concatenation, activations
# ---------------------------------------------------------------------------

def _check_even(x, op):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: input must be NHWC, got shape {x.shape}")
    h, w = x.shape[1], x.shape[2]
    if h % 2 or w % 2:
        raise ValueError(f"{op}: spatial extents must be even, got {h}x{w}")


def sum_pool2(x):
    """2x2 stride-2 sum pooling; total mass is preserved."""
    x = _as_tensor(x)
    _check_even(x, "sum_pool2")
    n, h, w, c = x.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))

    def _backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2),)

    return _make(out, (x,), _backward, "sum_pool2")


def max_pool2(x):
    """2x2 stride-2 max pooling; ties route the gradient to the first maximum."""
    x = _as_tensor(x)
    _check_even(x, "max_pool2")
    n, h, w, c = x.shape
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gw.reshape(n, h, w, c),)

    return _make(out, (x,), _backward, "max_pool2")


def concat_channels(a, b):
    """Append ``b``'s channels after ``a``'s."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ValueError(f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}")
    ca = a.shape[3]
    out = np.concatenate([a.data, b.data], axis=3)

    def _backward(g):
        return g[..., :ca], g[..., ca:]

    return _make(out, (a, b), _backward, "concat_channels")


def prelu(x, alpha):
    """Leaky activation: ``x`` if x > 0 else ``alpha * x``; slope at 0 is ``alpha``."""
    x = _as_tensor(x)
    if not np.isfinite(alpha):
        raise ValueError(f"prelu: alpha must be finite, got {alpha}")
    pos = x.data > 0
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)
    out = x.data * slope

    def _backward(g):
        return (g * slope,)

    return _make(out, (x,), _backward, "prelu")


def relu(x):
    return prelu(x, 0.0)


def activation(x, mode, alpha):
    if mode == "prelu":
        return prelu(x, alpha)
    if mode == "relu":
        return relu(x)
    raise ValueError(f"unknown activation mode {mode!r}")


# ---------------------------------------------------------------------------
# Dense and reduction ops
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)

    def _backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), _backward, "reshape")


def fully_connected(x, weight, bias=None):
    """Affine map of ``(N, Din)`` rows by a ``(Din, Dout)`` weight."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected: input shape {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected: bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, _backward, "fully_connected")


def l1_loss(pred, target):
    """Sum of absolute differences; the subgradient at a tie is 0."""
    pred = _as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target
    out = np.asarray(np.abs(diff).sum(), dtype=pred.dtype)

    def _backward(g):
        return (np.sign(diff).astype(pred.dtype) * g,)

    return _make(out, (pred,), _backward, "l1_loss")


def total(x):
    """Sum of all elements as a scalar tensor."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape = x.shape

    def _backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), _backward, "sum")


def sum_squares(x):
    x = _as_tensor(x)
    data = x.data
    out = np.asarray(np.vdot(data, data), dtype=x.dtype)

    def _backward(g):
        return (2.0 * g * data,)

    return _make(out, (x,), _backward, "sum_squares")


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.dtype)

    def _backward(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _make(out, (x,), _backward, "scale")


def add(*xs):
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("add needs at least one operand")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"add: shape mismatch {shape} vs {x.shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out = out + x.data

    def _backward(g):
        return tuple(g for _ in xs)

    return _make(out, xs, _backward, "add")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls add into existing ``.grad`` buffers, so separate loss terms
    sharing parameters sum their contributions.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check_finite(g, f"gradient of {getattr(node, 'name', 'leaf')}")
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
