"""Differentiable operations recorded on a :class:`~h3kit.numcore.tape.Tape`.

Every op takes :class:`Tensor` inputs (plain arrays and scalars are lifted to
constants) and returns a new Tensor.  Gradients of complex intermediates use
the convention ``g = dL/dRe + i*dL/dIm``, so the cotangent of ``z = a*b`` with
respect to ``a`` is ``g * conj(b)``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .. import fft as _fft
from .tape import ShapeError, Tape, Tensor

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class FlopCounter:
    """Tallies forward work by category and the elements of every op output.

    Categories: ``matmul`` (real multiply-adds in matmul/einsum), ``fft``
    (complex multiplies of FFT convolutions) and ``elementwise`` (one per
    output element of every other op).
    """

    def __init__(self):
        self.counts = {"matmul": 0, "fft": 0, "elementwise": 0}
        self.elements = 0

    @property
    def total(self) -> int:
        return int(np.add.reduce(list(self.counts.values())))


_counter: FlopCounter | None = None


@contextlib.contextmanager
def count_flops():
    global _counter
    prev, _counter = _counter, FlopCounter()
    try:
        yield _counter
    finally:
        _counter = prev


def _emit(tape: Tape, op: str, out, inputs, vjp, work: int | None = None, kind: str = "elementwise"):
    if _counter is not None:
        _counter.counts[kind] += int(np.size(out) if work is None else work)
        _counter.elements += int(np.size(out))
    return tape.record(op, out, inputs, vjp)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return Tape(grad=False)


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.result_type(x, np.float64)), tape, None)


def _args(*xs):
    tape = _tape_of(*xs)
    return tape, [_lift(x, tape) for x in xs]


def _cj(a: np.ndarray) -> np.ndarray:
    return np.conj(a) if np.iscomplexobj(a) else a


def _fit(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Sum out broadcast dimensions and drop the imaginary part for real inputs."""
    shape = like.shape
    if g.shape != shape:
        lead = g.ndim - len(shape)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
    if np.iscomplexobj(g) and not np.iscomplexobj(like):
        g = g.real
    return g


def _check_broadcast(op, *arrays):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = " vs ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op}: cannot broadcast shapes {shapes}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    tape, (a, b) = _args(a, b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data
    return _emit(tape, "add", out, (a, b), lambda g: (_fit(g, a.data), _fit(g, b.data)))


def sub(a, b) -> Tensor:
    tape, (a, b) = _args(a, b)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data
    return _emit(tape, "sub", out, (a, b), lambda g: (_fit(g, a.data), _fit(-g, b.data)))


def mul(a, b) -> Tensor:
    tape, (a, b) = _args(a, b)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    return _emit(tape, 
        "mul", out, (a, b),
        lambda g: (_fit(g * _cj(b.data), a.data), _fit(g * _cj(a.data), b.data)),
    )


def div(a, b) -> Tensor:
    tape, (a, b) = _args(a, b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        ga = g / _cj(b.data)
        return _fit(ga, a.data), _fit(-ga * _cj(out), b.data)

    return _emit(tape, "div", out, (a, b), vjp)


def neg(a) -> Tensor:
    tape, (a,) = _args(a)
    return _emit(tape, "neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    tape, (a,) = _args(a)
    out = np.exp(a.data)
    return _emit(tape, "exp", out, (a,), lambda g: (g * _cj(out),))


def log(a) -> Tensor:
    tape, (a,) = _args(a)
    return _emit(tape, "log", np.log(a.data), (a,), lambda g: (g / _cj(a.data),))


def maximum(a, floor: float) -> Tensor:
    """Clamp from below; the gradient is blocked where the clamp is active."""
    tape, (a,) = _args(a)
    keep = a.data > floor
    out = np.where(keep, a.data, floor)
    return _emit(tape, "maximum", out, (a,), lambda g: (g * keep,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU, as in GPT-2."""
    tape, (a,) = _args(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit(tape, "gelu", out, (a,), vjp)


def elu_plus_one(a) -> Tensor:
    """elu(x) + 1, a positive feature map."""
    tape, (a,) = _args(a)
    x = a.data
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(pos, x + 1.0, ex)
    return _emit(tape, "elu1", out, (a,), lambda g: (g * np.where(pos, 1.0, ex),))


def exprel(a) -> Tensor:
    """(exp(z) - 1) / z, with value 1 and slope 1/2 at z = 0."""
    tape, (a,) = _args(a)
    z = a.data
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    ez = np.exp(zs)
    out = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, (ez - 1.0) / zs)
    slope = np.where(small, 0.5 + z / 3.0, (zs * ez - ez + 1.0) / (zs * zs))
    return _emit(tape, "exprel", out, (a,), lambda g: (g * _cj(slope),))


# ---------------------------------------------------------------------------
# complex helpers (kernel generation only)
# ---------------------------------------------------------------------------

def complex_(re, im) -> Tensor:
    tape, (re, im) = _args(re, im)
    _check_broadcast("complex", re.data, im.data)
    out = re.data + 1j * im.data
    return _emit(tape, "complex", out, (re, im), lambda g: (_fit(g.real, re.data), _fit(g.imag, im.data)))


def real(a) -> Tensor:
    tape, (a,) = _args(a)
    return _emit(tape, "real", np.real(a.data).copy(), (a,), lambda g: (g.astype(np.complex128),))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    tape, (a, b) = _args(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ _cj(np.swapaxes(b.data, -1, -2))
        gb = _cj(np.swapaxes(a.data, -1, -2)) @ g
        return _fit(ga, a.data), _fit(gb, b.data)

    work = out.size * a.shape[-1]
    return _emit(tape, "matmul", out, (a, b), vjp, work=work, kind="matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum in explicit ``'ab,bc->ac'`` form.

    Every index of an operand must appear in the other operand or the output.
    """
    tape, (a, b) = _args(a, b)
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out_s), (sb, sa + out_s)):
        if any(c not in other for c in s):
            raise ValueError(f"einsum {spec!r}: summed-out index unique to one operand")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=False)
    except ValueError as err:
        raise ShapeError(f"einsum {spec!r}: {a.shape}, {b.shape}: {err}") from None

    def vjp(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, _cj(b.data))
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, _cj(a.data))
        return _fit(ga, a.data), _fit(gb, b.data)

    dims = {}
    for subs, arr in ((sa, a.data), (sb, b.data)):
        dims.update(zip(subs, arr.shape))
    work = int(np.prod(list(dims.values())))
    return _emit(tape, "einsum", out, (a, b), vjp, work=work, kind="matmul")


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    tape, (a,) = _args(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(tape, "reshape", out, (a,), lambda g: (g.reshape(a.shape),), work=0)


def split_heads(a, heads: int) -> Tensor:
    """(..., d) -> (..., heads, d // heads)."""
    d = a.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    return reshape(a, a.shape[:-1] + (heads, d // heads))


def merge_heads(a) -> Tensor:
    return reshape(a, a.shape[:-2] + (a.shape[-2] * a.shape[-1],))


def transpose(a, axes) -> Tensor:
    tape, (a,) = _args(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(tape, "transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), work=0)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    tape, (a,) = _args(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(tape, "sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int) -> Tensor:
    tape, (a,) = _args(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _emit(tape, "cumsum", out, (a,), vjp)


def take(a, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (dropping that axis)."""
    tape, (a,) = _args(a)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit(tape, "take", out, (a,), vjp)


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def embedding(table, ids) -> Tensor:
    tape, (table,) = _args(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range for vocabulary of {table.shape[0]}")
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(tape, "embedding", out, (table,), vjp)


def layernorm(x, gamma=None, beta=None, floor: float = 1e-24) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map.

    The variance is clamped from below at ``floor`` rather than shifted by an
    epsilon, so rows with any real spread come out with unit variance.
    """
    tape, (x,) = _args(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt(np.maximum((xc * xc).mean(axis=-1, keepdims=True), floor))
    xhat = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    out = _emit(tape, "layernorm", xhat, (x,), vjp)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax; positions where ``mask`` is False get probability zero."""
    tape, (a,) = _args(a)
    z = a.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(tape, "softmax", p, (a,), vjp)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


def fftconv(u, f, backend: str = "numpy") -> Tensor:
    """Causal convolution along axis -2: ``y[..., i, c] = sum_j f[j, c] u[..., i-j, c]``.

    ``f`` has shape (N, C) (or broadcasts against ``u``).  The backward pass
    reuses the FFT: the cotangents are correlations computed with conjugated
    spectra of the zero-padded operands.
    """
    tape, (u, f) = _args(u, f)
    if u.shape[-2] != f.shape[-2]:
        raise ShapeError(f"fftconv: sequence lengths differ, {u.shape} vs {f.shape}")
    _check_broadcast("fftconv", u.data, f.data)
    channels = int(np.prod(np.broadcast_shapes(u.shape, f.shape))) // u.shape[-2]
    work = channels * _fft.fft_conv_flops(u.shape[-2])
    if backend == "numpy":
        return _fftconv_numpy(tape, u, f, work)
    ut = np.swapaxes(u.data, -1, -2)
    ft = np.swapaxes(f.data, -1, -2)
    y = np.swapaxes(_fft.causal_conv(ut, ft, backend=backend), -1, -2)

    def vjp(g):
        gt = np.swapaxes(g, -1, -2)
        du, df = _fft.causal_conv_vjp(ut, ft, gt, backend=backend)
        return (_fit(np.swapaxes(du, -1, -2), u.data), _fit(np.swapaxes(df, -1, -2), f.data))

    return _emit(tape, "fftconv", y, (u, f), vjp, work=work, kind="fft")


def _fftconv_numpy(tape, u: Tensor, f: Tensor, work: int) -> Tensor:
    # Real FFTs along the time axis in place; the forward spectra are kept for
    # the backward pass so each direction costs three transforms.
    N = u.shape[-2]
    L = _fft.next_pow2(2 * N)
    U = np.fft.rfft(u.data, L, axis=-2)
    F = np.fft.rfft(f.data, L, axis=-2)
    y = np.fft.irfft(U * F, L, axis=-2)[..., :N, :]

    def vjp(g):
        G = np.fft.rfft(g, L, axis=-2)
        du = np.fft.irfft(np.conj(F) * G, L, axis=-2)[..., :N, :]
        df = np.fft.irfft(np.conj(U) * G, L, axis=-2)[..., :N, :]
        return _fit(du, u.data), _fit(df, f.data)

    return _emit(tape, "fftconv", y, (u, f), vjp, work=work, kind="fft")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax rows of ``logits``."""
    tape, (logits,) = _args(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: {targets.shape} targets for {logits.shape} logits")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target id out of range for {V} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = max(targets.size, 1)
    out = np.asarray(-picked.sum() / n)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (g * p / n,)

    return _emit(tape, "cross_entropy", out, (logits,), vjp)


def cross_entropy_last_token(logits, target) -> Tensor:
    """Loss on the final position only: ``-log softmax(logits[..., -1, :])[target]``."""
    logits = logits if isinstance(logits, Tensor) else _lift(logits, Tape(grad=False))
    if logits.ndim < 2:
        raise ShapeError(f"expected (..., N, V) logits, got {logits.shape}")
    last = take(logits, logits.shape[-2] - 1, axis=-2)
    return cross_entropy(last, np.asarray(target))


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "gelu": gelu,
    "layernorm": layernorm,
    "softmax": softmax,
    "embedding": embedding,
    "fftconv": fftconv,
    "reshape": reshape,
    "split_heads": split_heads,
    "merge_heads": merge_heads,
    "transpose": transpose,
    "einsum": einsum,
    "sum": sum,
    "cumsum": cumsum,
    "exp": exp,
    "real": real,
}


def forward_op(tape: Tape, op_kind: str, *inputs, **kwargs) -> Tensor:
    """Run ``op_kind`` on ``inputs``, recording it on ``tape``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    lifted = [tape.constant(x) if isinstance(x, np.ndarray) else x for x in inputs]
    return fn(*lifted, **kwargs)
