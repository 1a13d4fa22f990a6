"""Dense float32 tensors with a small reverse-mode autodiff engine.

Only the operations needed by the segmentation networks are provided:
convolution, 2x2 transpose convolution, 2x2 max pooling with indices,
max unpooling, ReLU, sigmoid, channel concatenation, addition and the
binary cross-entropy loss (plus a few reductions used by tests).

Every op records its inputs and a gradient rule on the output tensor;
:meth:`Tensor.backward` walks the recorded graph in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32
# Scalar reductions (sum, loss) keep a float64 result: rounding a loss of
# order 1 to float32 would hide differences far larger than the gradients
# of individual pixels. Every tensor-valued op stays in float32.
SCALAR_DTYPE = np.float64
BCE_EPS = 1e-7

# Upper bound on the number of floats in one im2col buffer.
_COLS_BUDGET = 1 << 23

_grad_enabled = True
_corrupted: dict[str, float] = {}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the gradient emitted by every ``op`` node during backward.

    Fault-injection hook for verifying that the gradient checker catches
    a wrong rule. Never used in normal operation.
    """
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "branch", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous or not arr.flags.writeable:
            arr = arr.copy()
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        # which piece of a piecewise op was taken (relu mask, pool argmax)
        self.branch: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
            rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
            branch: np.ndarray | None = None, dtype=DTYPE) -> Tensor:
    out = Tensor(data, op=op, dtype=dtype)
    out.branch = branch
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add onto whatever is already stored; zero them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        factor = _corrupted.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(DTYPE, copy=False)
            if factor is not None:
                pg = pg * DTYPE(factor)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def graph_ops(root: Tensor) -> list[str]:
    """Names of every recorded op reachable from ``root`` (parents first)."""
    return [n.op for n in _graph_nodes(root) if n.op != "leaf"]


def _graph_nodes(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(reversed(node._parents))
    return order[::-1]


# ----------------------------------------------------------------------------
# Convolutions
# ----------------------------------------------------------------------------

def _check_4d(t: Tensor, name: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {t.shape}")


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel sizes, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding), int(padding)
    raise ShapeError(f"padding must be 'same' or a non-negative int, got {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    # (N, Ho, Wo, C, kh, kw) -> rows are output pixels
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _chunks(n: int, per_sample: int) -> Iterable[slice]:
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    _check_4d(x, "input")
    _check_4d(weight, "weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d: stride must be a positive int, got {stride!r}")
    ph, pw = _resolve_padding(padding, kh, kw)
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    wmat = weight.data.reshape(cout, -1)
    out = np.empty((n, cout, ho, wo), dtype=DTYPE)
    per_sample = ho * wo * cin * kh * kw
    for sl in _chunks(n, per_sample):
        cols = _im2col(xp[sl], kh, kw, stride, ho, wo)
        m = sl.stop - sl.start
        out[sl] = (cols @ wmat.T).reshape(m, ho, wo, cout).transpose(0, 3, 1, 2)
    out += bias.data[None, :, None, None]

    def rule(g: np.ndarray):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        for sl in _chunks(n, per_sample):
            m = sl.stop - sl.start
            g2 = g[sl].transpose(0, 2, 3, 1).reshape(m * ho * wo, cout)
            if gw is not None:
                gw += g2.T @ _im2col(xp[sl], kh, kw, stride, ho, wo)
            if gx is not None:
                dcols = (g2 @ wmat).reshape(m, ho, wo, cin, kh, kw)
                gxs = gx[sl]
                for a in range(kh):
                    for b in range(kw):
                        gxs[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += \
                            dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        if gx is not None and (ph or pw):
            gx = gx[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, (gw.reshape(weight.shape) if gw is not None else None), gb

    return _result(out, "conv2d", (x, weight, bias), rule)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Transpose convolution with kernel == stride (disjoint stamps).

    ``weight`` has shape (Cin, Cout, k, k). Output is (N, Cout, k*H, k*W).
    """
    _check_4d(x, "input")
    _check_4d(weight, "weight")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if kh != stride or kw != stride:
        raise ShapeError(
            f"conv2d_transpose only supports kernel == stride, got kernel {kh}x{kw}, stride {stride}"
        )
    if wcin != cin:
        raise ShapeError(f"conv2d_transpose: input has {cin} channels but weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    s = stride
    wmat = weight.data.reshape(cin, cout * s * s)
    xrows = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    stamps = (xrows @ wmat).reshape(n, h, w, cout, s, s)
    out = stamps.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, h * s, w * s)
    out = out + bias.data[None, :, None, None]

    def rule(g: np.ndarray):
        # (N, Cout, H, s, W, s) -> rows per input pixel
        g6 = g.reshape(n, cout, h, s, w, s).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, cout * s * s)
        gx = (g6 @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xrows.T @ g6).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, "conv2d_transpose", (x, weight, bias), rule)


# ----------------------------------------------------------------------------
# Pooling
# ----------------------------------------------------------------------------

def maxpool2d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 / stride-2 max pooling.

    Returns the pooled tensor and an int64 array of flat positions
    (``row * W + col`` within each H x W plane) of every window maximum.
    Ties resolve to the row-major earliest position.
    """
    _check_4d(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * 2 + local // 2
    cols = np.arange(wo)[None, :] * 2 + local % 2
    indices = (rows * w + cols).astype(np.int64)

    def rule(g: np.ndarray):
        gx = np.zeros((n, c, h * w), dtype=DTYPE)
        np.put_along_axis(gx, indices.reshape(n, c, -1), g.reshape(n, c, -1), axis=-1)
        return (gx.reshape(n, c, h, w),)

    return _result(out, "maxpool2d", (x,), rule, branch=indices), indices


def max_unpool2d(x: Tensor, indices: np.ndarray, out_size: tuple[int, int]) -> Tensor:
    """Scatter ``x`` to the positions recorded by :func:`maxpool2d`; zeros elsewhere."""
    _check_4d(x, "input")
    n, c, h, w = x.shape
    oh, ow = out_size
    indices = np.asarray(indices)
    if indices.shape != x.shape:
        raise ShapeError(f"max_unpool2d: indices shape {indices.shape} != input shape {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= oh * ow):
        raise ShapeError(f"max_unpool2d: index out of range for output {oh}x{ow}")
    flat = indices.reshape(n, c, -1)
    out = np.zeros((n, c, oh * ow), dtype=DTYPE)
    np.put_along_axis(out, flat, x.data.reshape(n, c, -1), axis=-1)

    def rule(g: np.ndarray):
        return (np.take_along_axis(g.reshape(n, c, -1), flat, axis=-1).reshape(x.shape),)

    return _result(out.reshape(n, c, oh, ow), "max_unpool2d", (x,), rule)


# ----------------------------------------------------------------------------
# Elementwise / structural
# ----------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, DTYPE(0)), "relu", (x,),
                   lambda g: (g * mask,), branch=mask)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "a")
    _check_4d(b, "b")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.sum(dtype=SCALAR_DTYPE), "sum", (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(DTYPE),), dtype=SCALAR_DTYPE)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps]."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: pred shape {pred.shape} != target shape {target.shape}")
    p = pred.data
    t = target.data
    eps = DTYPE(BCE_EPS)
    inside = (p > eps) & (p < 1 - eps)
    pc = np.clip(p, eps, 1 - eps)
    # the log terms feed a scalar, so evaluate them at scalar precision;
    # 1 - pc in float32 loses digits as pc approaches 1
    pd, td = pc.astype(SCALAR_DTYPE), t.astype(SCALAR_DTYPE)
    terms = -(td * np.log(pd) + (1 - td) * np.log1p(-pd))
    count = p.size
    loss = terms.sum() / count

    def rule(g: np.ndarray):
        gp = (pc - t) / (pc * (1 - pc)) / DTYPE(count) * inside
        gt = (np.log(1 - pc) - np.log(pc)) / DTYPE(count)
        return g * gp, g * gt

    return _result(loss, "bce_loss", (pred, target), rule, branch=inside, dtype=SCALAR_DTYPE)


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------

def grad_check(forward_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between backward() and central differences.

    ``forward_fn`` must rebuild the graph from ``params`` on every call and
    return a scalar tensor. The denominator per element is
    ``max(|analytic|, |numeric|, 1e-6)``. See :func:`grad_check_detail`.
    """
    return grad_check_detail(forward_fn, params, eps)[0]


def grad_check_detail(forward_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-3) -> tuple[float, int, int]:
    """Like :func:`grad_check` but returns ``(max_err, checked, skipped)``.

    An element is skipped when its +/-eps perturbation changes a ReLU sign
    pattern, a max-pool argmax or the BCE clamp region: the central
    difference then straddles a kink and says nothing about the gradient.
    """
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = forward_fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar objective, got shape {loss.shape}")
    base_sig = _branch_signature(loss)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = orig + DTYPE(eps)
            lo = orig - DTYPE(eps)
            flat[i] = hi
            out_hi = forward_fn()
            flat[i] = lo
            out_lo = forward_fn()
            flat[i] = orig
            if not (_same_branches(base_sig, _branch_signature(out_hi))
                    and _same_branches(base_sig, _branch_signature(out_lo))):
                skipped += 1
                continue
            # divide by the step actually representable in float32
            numeric = (float(out_hi.data) - float(out_lo.data)) / (float(hi) - float(lo))
            a = float(gflat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


def _branch_signature(root: Tensor) -> list[np.ndarray]:
    return [n.branch for n in _graph_nodes(root) if n.branch is not None]


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
