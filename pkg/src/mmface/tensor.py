"""Minimal reverse-mode autodiff kernel on NumPy arrays.

Provides exactly the differentiable operations the fusion model needs:
dilated causal 1-D convolution, pointwise (1x1) convolution, leaky ReLU,
a modality-axis softmax, and the elementwise/reduction plumbing around
them.  Every operation records a backward rule on an explicit ``Tape``;
``backward`` replays the tape in reverse.  Gradients are verified against
central finite differences via ``grad_check``.

Precision is a process-global mode: float64 for tests and oracles,
float32 for fast training.  Modes are never mixed within a run.
"""

from __future__ import annotations

import numpy as np

_PRECISION = "float64"
_DTYPES = {"float64": np.float64, "float32": np.float32}


class NonFiniteError(ArithmeticError):
    """An operation produced a NaN or infinity; message names the op."""


def set_precision(mode: str) -> None:
    """Select the global compute precision: 'float64' or 'float32'."""
    global _PRECISION
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    _PRECISION = mode


def get_precision() -> str:
    return _PRECISION


def default_dtype():
    return _DTYPES[_PRECISION]


class precision:
    """Context manager pinning the precision mode for a block."""

    def __init__(self, mode: str):
        self.mode = mode
        self._saved = None

    def __enter__(self):
        self._saved = _PRECISION
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


class Tensor:
    """A shaped array of reals, immutable after creation by an op.

    ``requires_grad`` marks optimizable leaves; intermediate tensors
    receive gradients transiently during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        nm = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{nm}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def dump(self, path) -> None:
        """Write values as a text matrix for external oracle comparison."""
        arr = self.data
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim > 2:
            arr = arr.reshape(arr.shape[0], -1)
        np.savetxt(path, arr, fmt="%.17g")


class Tape:
    """Ordered record of executed operations and their backward rules.

    Records are appended in execution order, which is automatically a
    topological order of the compute graph.  A tape has a single owner;
    independent tapes may run concurrently but one tape must not be
    shared across executors.
    """

    def __init__(self):
        self.ops = []       # (name, backward thunk)
        self.tensors = []   # every tensor touched, for grad reset
        self._seen = set()

    def record(self, name, bw_thunk, tensors) -> None:
        self.ops.append((name, bw_thunk))
        for t in tensors:
            if id(t) not in self._seen:
                self._seen.add(id(t))
                self.tensors.append(t)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by operation '{name}'")


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _finish(tape, name, out_data, bw, inputs) -> Tensor:
    """Wrap op output in a Tensor and record its backward rule."""
    _check_finite(name, out_data)
    result = Tensor.__new__(Tensor)
    result.data = out_data
    result.requires_grad = False
    result.grad = None
    result.name = None
    if tape is not None:
        def thunk():
            # outputs never used downstream (diagnostic-only terms) get no grad
            if result.grad is not None:
                bw(result)

        tape.record(name, thunk, list(inputs) + [result])
    return result


# ---------------------------------------------------------------------------
# convolution ops


def conv1d_dilated(tape, x: Tensor, kernel: Tensor, dilation: int = 1,
                   lookahead: int = 0) -> Tensor:
    """Dilated 1-D convolution over (C_in, T) with zero padding, length-preserving.

    With ``lookahead == 0`` the convolution is causal: output frame t
    depends only on input frames <= t and left padding is zero-valued.
    A positive lookahead lets frame t see up to that many future frames
    (offline mode only).
    """
    k = kernel.data
    if k.ndim != 3:
        raise ValueError("kernel must be (C_out, C_in, K)")
    c_out, c_in, K = k.shape
    if x.data.ndim != 2 or x.data.shape[0] != c_in:
        raise ValueError(
            f"input shape {x.data.shape} incompatible with kernel C_in={c_in}")
    if K < 1 or dilation < 1:
        raise ValueError("kernel length and dilation must be >= 1")
    T = x.data.shape[1]
    span = (K - 1) * dilation
    left = span - lookahead
    if left < 0:
        raise ValueError("lookahead exceeds kernel span")
    xp = np.zeros((c_in, T + span), dtype=x.data.dtype)
    xp[:, left:left + T] = x.data
    out = np.zeros((c_out, T), dtype=x.data.dtype)
    for tap in range(K):
        out += k[:, :, tap] @ xp[:, tap * dilation:tap * dilation + T]

    def bw(result):
        g = result.grad
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for tap in range(K):
            sl = slice(tap * dilation, tap * dilation + T)
            gxp[:, sl] += k[:, :, tap].T @ g
            gk[:, :, tap] = g @ xp[:, sl].T
        _accum(x, gxp[:, left:left + T])
        _accum(kernel, gk)

    return _finish(tape, "conv1d_dilated", out, bw, (x, kernel))


def pointwise_conv(tape, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: out[c, t] = sum_i W[c, i] * x[i, t] + b[c]."""
    w, b = weights.data, bias.data
    if x.data.ndim != 2 or w.ndim != 2 or w.shape[1] != x.data.shape[0]:
        raise ValueError(f"pointwise shapes disagree: W{w.shape} x{x.data.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    out = w @ x.data + b[:, None]

    def bw(result):
        g = result.grad
        _accum(x, w.T @ g)
        _accum(weights, g @ x.data.T)
        _accum(bias, g.sum(axis=1))

    return _finish(tape, "pointwise_conv", out, bw, (x, weights, bias))


def bias_add(tape, x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector (C,) to a (C, T) map."""
    if bias.data.shape != (x.data.shape[0],):
        raise ValueError("bias length must equal channel count")
    out = x.data + bias.data[:, None]

    def bw(result):
        _accum(x, result.grad)
        _accum(bias, result.grad.sum(axis=1))

    return _finish(tape, "bias_add", out, bw, (x, bias))


# ---------------------------------------------------------------------------
# elementwise ops


def leaky_relu(tape, x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise x if x >= 0 else slope * x, with slope in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def bw(result):
        _accum(x, result.grad * np.where(mask, 1.0, slope).astype(x.data.dtype))

    return _finish(tape, "leaky_relu", out, bw, (x,))


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("add requires matching shapes")

    def bw(result):
        _accum(a, result.grad)
        _accum(b, result.grad)

    return _finish(tape, "add", a.data + b.data, bw, (a, b))


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("sub requires matching shapes")

    def bw(result):
        _accum(a, result.grad)
        _accum(b, -result.grad)

    return _finish(tape, "sub", a.data - b.data, bw, (a, b))


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("mul requires matching shapes")

    def bw(result):
        _accum(a, result.grad * b.data)
        _accum(b, result.grad * a.data)

    return _finish(tape, "mul", a.data * b.data, bw, (a, b))


def add_scalar(tape, x: Tensor, c: float) -> Tensor:
    def bw(result):
        _accum(x, result.grad)

    return _finish(tape, "add_scalar", x.data + x.data.dtype.type(c), bw, (x,))


def mul_scalar(tape, x: Tensor, c: float) -> Tensor:
    def bw(result):
        _accum(x, result.grad * x.data.dtype.type(c))

    return _finish(tape, "mul_scalar", x.data * x.data.dtype.type(c), bw, (x,))


def exp(tape, x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(result):
        _accum(x, result.grad * out)

    return _finish(tape, "exp", out, bw, (x,))


def log(tape, x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive input")

    def bw(result):
        _accum(x, result.grad / x.data)

    return _finish(tape, "log", np.log(x.data), bw, (x,))


def square(tape, x: Tensor) -> Tensor:
    def bw(result):
        _accum(x, result.grad * 2.0 * x.data)

    return _finish(tape, "square", x.data * x.data, bw, (x,))


def sqrt(tape, x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(x.data)

    def bw(result):
        _accum(x, result.grad * 0.5 / np.maximum(out, 1e-300))

    return _finish(tape, "sqrt", out, bw, (x,))


def clamp(tape, x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclipped entries."""
    inside = (x.data > lo) & (x.data < hi)

    def bw(result):
        _accum(x, result.grad * inside)

    return _finish(tape, "clamp", np.clip(x.data, lo, hi), bw, (x,))


# ---------------------------------------------------------------------------
# shape ops


def transpose2d(tape, x: Tensor) -> Tensor:
    def bw(result):
        _accum(x, result.grad.T)

    return _finish(tape, "transpose2d", np.ascontiguousarray(x.data.T), bw, (x,))


def reshape(tape, x: Tensor, shape) -> Tensor:
    def bw(result):
        _accum(x, result.grad.reshape(x.data.shape))

    return _finish(tape, "reshape", x.data.reshape(shape), bw, (x,))


def swap_last2(tape, x: Tensor) -> Tensor:
    """Transpose the last two axes of a rank-3 tensor."""
    if x.data.ndim != 3:
        raise ValueError("swap_last2 expects a rank-3 tensor")

    def bw(result):
        _accum(x, result.grad.transpose(0, 2, 1))

    out = np.ascontiguousarray(x.data.transpose(0, 2, 1))
    return _finish(tape, "swap_last2", out, bw, (x,))


def concat_rows(tape, xs) -> Tensor:
    """Stack (C_i, T) maps along the channel axis into (sum C_i, T)."""
    if len({x.data.shape[1] for x in xs}) != 1:
        raise ValueError("concat_rows requires equal time lengths")
    sizes = [x.data.shape[0] for x in xs]

    def bw(result):
        ofs = 0
        for x, c in zip(xs, sizes):
            _accum(x, result.grad[ofs:ofs + c])
            ofs += c

    out = np.concatenate([x.data for x in xs], axis=0)
    return _finish(tape, "concat_rows", out, bw, tuple(xs))


def stack(tape, xs) -> Tensor:
    """Stack M equal-shape tensors into one with a new leading axis."""

    def bw(result):
        for m, x in enumerate(xs):
            _accum(x, result.grad[m])

    out = np.stack([x.data for x in xs], axis=0)
    return _finish(tape, "stack", out, bw, tuple(xs))


def index_first(tape, x: Tensor, m: int) -> Tensor:
    """Select slice m along the leading axis."""

    def bw(result):
        g = np.zeros_like(x.data)
        g[m] = result.grad
        _accum(x, g)

    return _finish(tape, "index_first", np.ascontiguousarray(x.data[m]), bw, (x,))


# ---------------------------------------------------------------------------
# softmax and reductions


def softmax_over_modalities(tape, logits: Tensor) -> Tensor:
    """Softmax along the leading (modality) axis of an (M, ...) tensor.

    Stabilized by max subtraction; outputs are positive and sum to one
    over the modality axis for every trailing coordinate.
    """
    z = logits.data
    if z.ndim < 1 or z.shape[0] < 1:
        raise ValueError("need at least one modality")
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)

    def bw(result):
        g = result.grad
        dot = (g * out).sum(axis=0, keepdims=True)
        _accum(logits, out * (g - dot))

    return _finish(tape, "softmax_over_modalities", out, bw, (logits,))


def mean_all(tape, x: Tensor) -> Tensor:
    n = x.data.size

    def bw(result):
        _accum(x, np.full_like(x.data, result.grad / n))

    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _finish(tape, "mean_all", out, bw, (x,))


def sum_all(tape, x: Tensor) -> Tensor:
    def bw(result):
        _accum(x, np.full_like(x.data, result.grad))

    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _finish(tape, "sum_all", out, bw, (x,))


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(tape: Tape, out: Tensor) -> dict:
    """Propagate gradients from a scalar output back through the tape.

    Returns a map from every requires_grad leaf tensor to its gradient
    array (also stored on ``tensor.grad``).  Deterministic for a fixed
    tape: each recorded op is visited exactly once, in reverse order.
    """
    if out.data.size != 1:
        raise ValueError("backward requires a scalar output")
    for t in tape.tensors:
        t.grad = None
    out.grad = np.ones_like(out.data)
    for _name, bw_thunk in reversed(tape.ops):
        bw_thunk()
    return {t: t.grad for t in tape.tensors if t.requires_grad and t.grad is not None}


def grad_check(build_loss, params, epsilon: float = 1e-5, samples: int = 6,
               rng=None) -> float:
    """Compare analytic gradients with central finite differences.

    ``build_loss`` must construct a fresh tape and return ``(loss, tape)``;
    it is re-invoked for every perturbed evaluation.  Returns the max over
    sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    loss, tape = build_loss()
    backward(tape, loss)
    analytic_grads = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic_grads):
        if not p.requires_grad:
            continue
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(samples, n), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = build_loss()[0].item()
            flat[i] = orig - epsilon
            dn = build_loss()[0].item()
            flat[i] = orig
            numeric = (up - dn) / (2 * epsilon)
            analytic = grad.reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
