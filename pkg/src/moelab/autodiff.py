"""Reverse-mode automatic differentiation over dense f64 tensors.

Provides exactly the operation set the transformer stack needs: matmul with
stacked leading dimensions, row softmax, ReLU, RMS norm, rotary rotation,
embedding gather, row gather/scatter (for token-choice routing), reductions
and a masked cross-entropy head.

Gradients accumulate until explicitly zeroed, which supports multi-loss
training (task loss + auxiliary load loss). A Tape is a per-training-job
object: ops record onto the innermost active tape of the *current thread*,
so independent jobs may run concurrently on separate threads as long as no
tape is shared.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "add_n",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "rms_norm",
    "rope",
    "embedding",
    "take_rows",
    "scatter_rows",
    "take_along_last",
    "reshape",
    "swapaxes",
    "sum_all",
    "sum_axis0",
    "cross_entropy_masked",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class Tensor:
    """Dense f64 array with optional gradient buffer.

    Treat instances as immutable after construction; ``data`` is only mutated
    by the optimizer, which owns its parameters exclusively.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values (NaN/Inf)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} holds non-finite values")

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        """Accumulate a gradient buffer the caller promises not to reuse."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("out", "inputs", "bw")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], bw: Callable[[np.ndarray], None]):
        self.out = out
        self.inputs = inputs
        self.bw = bw


_ACTIVE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts exited out of order"

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw: Callable[[np.ndarray], None]) -> Tensor:
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        tape = stack[-1]
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, inputs, bw))
    return out


def _raw(out_data: np.ndarray) -> Tensor:
    return Tensor(out_data, _checked=True)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls without zeroing accumulate. Deterministic: the tape is
    replayed in strict reverse recording order.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is not attached to a tape (no recorded operations)")
    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is not None:
            node.bw(g)
            # non-leaf grads are transient; freeing them means a repeated
            # backward call accumulates exactly one extra gradient into leaves
            node.out.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- primitive operations ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry stacked leading dimensions.

    The common activations @ weights case ([..., T, d] @ [d, k]) is folded
    into a single GEMM in both directions.
    """
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    folded = a.data.ndim > 2 and b.data.ndim == 2
    if folded:
        out_data = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(
            a.data.shape[:-1] + (b.data.shape[1],)
        )
    else:
        out_data = np.matmul(a.data, b.data)
    out = _raw(out_data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            if folded:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.data.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
            a._accumulate_owned(ga)
        if b.requires_grad:
            if folded:
                gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
            b._accumulate_owned(gb)

    return _record(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _raw(a.data + b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors in one node (keeps MoE scatter tapes short)."""
    out_data = tensors[0].data.copy()
    for t in tensors[1:]:
        out_data += t.data
    out = _raw(out_data)

    def bw(g: np.ndarray) -> None:
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(g)

    return _record(out, tuple(tensors), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _raw(a.data * b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    out = _raw(x.data * c)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_owned(g * c)

    return _record(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is fixed to 0."""
    out = _raw(np.maximum(x.data, 0.0))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_owned(g * (x.data > 0.0))

    return _record(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if x.data.shape[-1] < 1:
        raise ValueError("softmax_rows needs at least one column")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    out = _raw(z)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            y = out.data
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate_owned(y * (g - dot))

    return _record(out, (x,), bw)


_RMS_EPS = 1e-8


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """Scale-only RMS normalization over the last axis: gain * x / rms(x)."""
    d = x.data.shape[-1]
    ss = np.einsum("...i,...i->...", x.data, x.data)[..., None]
    inv = np.power(ss / d + _RMS_EPS, -0.5)
    out = _raw(x.data * inv * gain.data)

    def bw(g: np.ndarray) -> None:
        if gain.requires_grad:
            gg = np.einsum("nd,nd->d", g.reshape(-1, d), (x.data * inv).reshape(-1, d))
            gain._accumulate_owned(gg)
        if x.requires_grad:
            gy = g * gain.data
            dot = np.einsum("...i,...i->...", gy, x.data)[..., None]
            gx = inv * gy - (inv**3 / d) * dot * x.data
            x._accumulate_owned(gx)

    return _record(out, (x, gain), bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation on the last axis (half-split convention).

    ``cos``/``sin`` have shape [T, dh/2] and broadcast against x[..., T, dh].
    The rotation is orthogonal, so the backward pass rotates by the negated
    angle.
    """
    d = x.data.shape[-1]
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out_data = np.empty_like(x.data)
    np.multiply(x1, cos, out=out_data[..., :h])
    out_data[..., :h] -= x2 * sin
    np.multiply(x1, sin, out=out_data[..., h:])
    out_data[..., h:] += x2 * cos
    out = _raw(out_data)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            g1, g2 = g[..., :h], g[..., h:]
            gx = np.empty_like(g)
            np.multiply(g1, cos, out=gx[..., :h])
            gx[..., :h] += g2 * sin
            np.multiply(g2, cos, out=gx[..., h:])
            gx[..., h:] -= g1 * sin
            x._accumulate_owned(gx)

    return _record(out, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of vocabulary (max {table.data.shape[0] - 1})")
    out = _raw(table.data[ids])

    def bw(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate_owned(gt)

    return _record(out, (table,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor."""
    out = _raw(x.data[idx])

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate_owned(gx)

    return _record(out, (x,), bw)


def scatter_rows(values: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of ``values`` at positions ``idx`` of a zero [num_rows, d] tensor.

    Duplicate indices accumulate, which is what top-k routing needs when the
    same token receives several expert contributions.
    """
    out_data = np.zeros((num_rows, values.data.shape[1]), dtype=np.float64)
    np.add.at(out_data, idx, values.data)
    out = _raw(out_data)

    def bw(g: np.ndarray) -> None:
        if values.requires_grad:
            values._accumulate_owned(g[idx])

    return _record(out, (values,), bw)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis (router logits -> selected logits)."""
    out = _raw(np.take_along_axis(x.data, idx, axis=-1))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (np.arange(idx.shape[0])[:, None], idx), g)
            x._accumulate_owned(gx)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _raw(x.data.reshape(shape))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _record(out, (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = _raw(np.swapaxes(x.data, a, b).copy())

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.swapaxes(g, a, b))

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = _raw(np.asarray(x.data.sum()))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_owned(np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bw)


def sum_axis0(x: Tensor) -> Tensor:
    out = _raw(x.data.sum(axis=0))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_owned(np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bw)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    ``logits`` is [..., V]; ``targets``/``mask`` match the leading shape.
    An all-false mask yields 0 with no gradient flow.
    """
    vocab = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    t = np.asarray(targets).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if t.shape[0] != flat.shape[0] or m.shape[0] != flat.shape[0]:
        raise ValueError("targets/mask shape does not match logits")
    if t[m].size and (t[m].min() < 0 or t[m].max() >= vocab):
        raise IndexError(f"target id out of vocabulary (V={vocab})")
    rows = np.nonzero(m)[0]
    if rows.size == 0:
        return _raw(np.asarray(0.0))

    sel = flat[rows]
    zmax = sel.max(axis=1, keepdims=True)
    shifted = sel - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = sel[np.arange(rows.size), t[rows]]
    out = _raw(np.asarray((lse - picked).mean()))

    def bw(g: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(rows.size), t[rows]] -= 1.0
            gl = np.zeros_like(flat)
            gl[rows] = probs * (float(g) / rows.size)
            logits._accumulate_owned(gl.reshape(logits.data.shape))

    return _record(out, (logits,), bw)


# --- gradient checking --------------------------------------------------------


class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    def __init__(self, max_rel_err: float, num_checked: int, tol: float):
        self.max_rel_err = max_rel_err
        self.num_checked = num_checked
        self.tol = tol

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
            f"checked={self.num_checked}, tol={self.tol:g})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tol: float = 1e-5,
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central finite differences with step ``eps``.

    When ``max_entries`` is given, a random subset of coordinates is probed
    (useful for large parameter tensors); otherwise every entry is checked.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        # wrap in sum_all even for scalars so f = identity still tapes a node
        out = sum_all(f(probe))
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.copy()

    flat = probe.data.reshape(-1)
    n = flat.size
    if max_entries is not None and max_entries < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        entries = np.sort(gen.choice(n, size=max_entries, replace=False))
    else:
        entries = np.arange(n)

    def eval_at(vals: np.ndarray) -> float:
        t = Tensor(vals.reshape(probe.data.shape), _checked=True)
        r = f(t)
        return float(r.data.sum())

    max_rel = 0.0
    base = flat.copy()
    for i in entries:
        orig = base[i]
        base[i] = orig + eps
        fp = eval_at(base)
        base[i] = orig - eps
        fm = eval_at(base)
        base[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        denom = max(abs(a), abs(numeric), 1e-3)
        max_rel = max(max_rel, abs(a - numeric) / denom)

    return GradCheckReport(max_rel, len(entries), tol)
