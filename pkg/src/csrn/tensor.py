"""Rank-4 tensors with taped reverse-mode differentiation.

Everything is a dense (batch, channels, rows, cols) array; scalars are
represented as 1x1x1x1 tensors. Forward ops optionally record themselves on a
:class:`Tape`, which replays them in reverse to produce gradients for watched
leaf tensors. Convolutions use cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """A tensor axis does not match what an operation requires."""


class GeometryError(ValueError):
    """Convolution geometry (stride/kernel/padding) does not divide evenly."""


class Tensor:
    """Immutable dense rank-4 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise DimensionError(f"expected rank-4 data, got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def scalar(cls, value: float, dtype=np.float64) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=dtype))

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        watched = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{watched})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolutional layer: Conv(out_channels, kernel, stride)."""

    out_channels: int
    kernel: int
    stride: int
    padding: int = 0
    bias_enabled: bool = True

    def out_size(self, size: int) -> int:
        span = size + 2 * self.padding - self.kernel
        if span < 0 or span % self.stride != 0:
            raise GeometryError(
                f"size {size} with kernel {self.kernel}, stride {self.stride}, "
                f"padding {self.padding} does not produce an integral output size"
            )
        return span // self.stride + 1


class Tape:
    """Record of forward operations, replayed backwards for gradients.

    A tape lives for one forward/backward pass. Leaf tensors are registered
    with :meth:`watch`; ops involving a watched tensor (directly or through
    other recorded tensors) append a backward closure. Recording order is the
    topological order, so one reverse sweep suffices.
    """

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], object]] = []
        self._leaves: list[tuple[int, tuple[int, ...], np.dtype]] = []
        self._next_id = 0

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf parameter; returns a tensor recorded on this tape."""
        nid = self._fresh_id()
        self._leaves.append((nid, tensor.shape, tensor.dtype))
        return Tensor(tensor.data, tape=self, node_id=nid)

    def _record(self, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        nid = self._fresh_id()
        self._ops.append((nid, tuple(t.node_id for t in inputs), backward))
        return Tensor(out_data, tape=self, node_id=nid)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar loss for every watched leaf (zeros if unreachable).

        Consumes the tape: the recorded graph is dropped afterwards so the
        (large) arrays captured by the backward closures are freed without
        waiting for the cycle collector. A tape supports one backward pass.
        """
        if loss.shape != (1, 1, 1, 1):
            raise DimensionError(f"loss must be scalar (1,1,1,1), got {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1, 1, 1), dtype=loss.dtype)}
        for out_id, in_ids, backward in reversed(self._ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, gin in zip(in_ids, backward(g)):
                if in_id is None or gin is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + gin
                else:
                    grads[in_id] = gin
        out: dict[int, Tensor] = {}
        for nid, shape, dtype in self._leaves:
            g = grads.get(nid)
            out[nid] = Tensor(g if g is not None else np.zeros(shape, dtype=dtype))
        self._ops.clear()
        return out


def _joint_tape(inputs: tuple[Tensor, ...]) -> Tape | None:
    tapes = {t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError("inputs are recorded on different tapes")
    return tapes.pop() if tapes else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _joint_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, inputs, backward)


# im2col / col2im machinery shared by the conv forward and backward passes.
# Column layout is (n, c*k*k, oh*ow) so that both directions are k*k
# contiguous slice copies plus one batched matmul, with no transposes.

def _im2col(x: np.ndarray, k: int, s: int, p: int):
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + oh * s : s, j : j + ow * s : s]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, x_shape, k: int, s: int, p: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * p, w + 2 * p
    oh = (hp - k) // s + 1
    ow = (wp - k) // s + 1
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    blocks = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + oh * s : s, j : j + ow * s : s] += blocks[:, :, i, j]
    if p:
        dx = dx[:, :, p : p + h, p : p + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Strided cross-correlation with optional per-channel bias.

    `weight` is (out_channels, in_channels, k, k); `bias` is (1, out_channels, 1, 1).
    """
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if kh != spec.kernel or kw != spec.kernel or oc != spec.out_channels:
        raise DimensionError(f"weight shape {weight.shape} disagrees with spec {spec}")
    if ic != c:
        raise DimensionError(f"input has {c} channels, weight expects {ic}")
    if bias is not None and bias.shape != (1, oc, 1, 1):
        raise DimensionError(f"bias shape {bias.shape} is not (1,{oc},1,1)")
    if bias is not None and not spec.bias_enabled:
        raise DimensionError("bias tensor given but spec disables bias")
    oh = spec.out_size(h)
    ow = spec.out_size(w)

    if spec.kernel == 1 and spec.stride == 1 and spec.padding == 0:
        cols = x.data.reshape(n, c, h * w)  # 1x1 conv is a channel matmul
    else:
        cols, _, _ = _im2col(x.data, spec.kernel, spec.stride, spec.padding)
    wmat = weight.data.reshape(oc, -1)
    out = (wmat[None] @ cols).reshape(n, oc, oh, ow)  # (n, oc, oh*ow)
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        gm = g.reshape(n, oc, oh * ow)
        dw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(weight.shape)
        dcols = wmat.T[None] @ gm  # (n, c*k*k, oh*ow)
        if spec.kernel == 1 and spec.stride == 1 and spec.padding == 0:
            dx = dcols.reshape(x.shape)
        else:
            dx = _col2im(dcols, x.shape, spec.kernel, spec.stride, spec.padding)
        db = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1) if bias is not None else None
        if bias is None:
            return dx, dw
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward)


def pixel_shuffle(x: Tensor, u: int) -> Tensor:
    """Rearrange (n, c*u^2, h, w) into (n, c, h*u, w*u); pure permutation."""
    n, c, h, w = x.shape
    if u < 1:
        raise DimensionError(f"upscale factor must be >= 1, got {u}")
    if c % (u * u) != 0:
        raise DimensionError(f"{c} channels not divisible by u^2 = {u * u}")
    co = c // (u * u)
    out = (
        x.data.reshape(n, co, u, u, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * u, w * u)
    )

    def backward(g: np.ndarray):
        dx = (
            g.reshape(n, co, h, u, w, u)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return _emit(np.ascontiguousarray(out), (x,), backward)


def pixel_unshuffle(x: Tensor, u: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle` (used by tests and gradients)."""
    n, c, h, w = x.shape
    if h % u or w % u:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by {u}")
    out = (
        x.data.reshape(n, c, h // u, u, w // u, u)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * u * u, h // u, w // u)
    )

    def backward(g: np.ndarray):
        dx = (
            g.reshape(n, c, u, u, h // u, w // u)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return _emit(np.ascontiguousarray(out), (x,), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g: np.ndarray):
        return (g * mask,)

    return _emit(out, (x,), backward)


def concat_channels(inputs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all inputs must agree spatially."""
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise DimensionError(
                f"concat input shape {t.shape} disagrees with {inputs[0].shape} "
                "on a non-channel axis"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _emit(out, tuple(inputs), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray):
        return g, g

    return _emit(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)

    def backward(g: np.ndarray):
        return (g * x.data.dtype.type(factor),)

    return _emit(out, (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference, as a scalar tensor."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.mean(diff * diff, dtype=diff.dtype).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray):
        da = g.reshape(()) * diff.dtype.type(2.0 / n) * diff
        return da, -da

    return _emit(val, (a, b), backward)


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central finite differences."""

    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(op, inputs: list[Tensor], eps: float = 1e-4, tol: float = 1e-5,
               tape_grad_scale: float = 1.0) -> GradCheckReport:
    """Check the tape gradient of ``mean(op(inputs)^2)`` against finite differences.

    ``op`` maps tensors to one tensor. ``tape_grad_scale`` deliberately scales
    the tape gradient before comparison; values other than 1.0 serve as a
    negative control for the checker itself.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def loss_value(arrays) -> float:
        out = op(*[Tensor(a) for a in arrays]).data
        return float(np.mean(out.astype(np.float64) ** 2))

    tape = Tape()
    watched = [tape.watch(t) for t in inputs]
    out = op(*watched)
    loss = mse(out, Tensor(np.zeros_like(out.data)))
    grads = tape.backward(loss)

    per_input = []
    arrays = [t.data.astype(np.float64) for t in inputs]
    for idx, t in enumerate(inputs):
        analytic = grads[watched[idx].node_id].data.astype(np.float64) * tape_grad_scale
        numeric = np.zeros_like(arrays[idx])
        flat = numeric.reshape(-1)
        base = arrays[idx].reshape(-1)
        for j in range(base.size):
            orig = base[j]
            base[j] = orig + eps
            up = loss_value(arrays)
            base[j] = orig - eps
            down = loss_value(arrays)
            base[j] = orig
            flat[j] = (up - down) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        per_input.append(float(np.max(np.abs(analytic - numeric) / denom)))
    return GradCheckReport(max_rel_error=max(per_input), tol=tol, per_input=per_input)
