"""Discrete Fourier transforms and causal FFT convolution.

Complex buffers are plain ``complex128`` arrays; every transform acts on the
last axis and broadcasts over leading axes.

Three transform routes are provided and cross-checked in the tests:

* ``dft_direct``  -- the O(N^2) definition, used as the oracle.
* ``fft``/``ifft`` -- iterative radix-2 Cooley-Tukey for power-of-two N.
* ``block_fft``   -- the four-step factorisation
  ``F_N = P (I_{N2} x F_{N1}) P^T D (I_{N1} x F_{N2}) P`` where the block
  transforms are explicit dense matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np


class FFTSizeError(ValueError):
    pass


def _as_complex(x) -> np.ndarray:
    return np.asarray(x, dtype=np.complex128)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


@lru_cache(maxsize=None)
def dft_matrix(n: int) -> np.ndarray:
    """Dense DFT matrix ``F[k, j] = exp(-2 pi i jk / n)`` (read-only)."""
    jk = np.outer(np.arange(n), np.arange(n)) % n
    F = np.exp(-2j * np.pi * jk / n)
    F.setflags(write=False)
    return F


def dft_direct(x) -> np.ndarray:
    """``X[k] = sum_j x[j] exp(-2 pi i jk/N)`` by the definition."""
    x = _as_complex(x)
    n = x.shape[-1]
    k = np.arange(n)
    out = np.zeros_like(x)
    # explicit O(N^2) accumulation; deliberately not a library FFT
    for j in range(n):
        out += x[..., j, None] * np.exp(-2j * np.pi * ((j * k) % n) / n)
    return out


def idft_direct(X) -> np.ndarray:
    X = _as_complex(X)
    return np.conj(dft_direct(np.conj(X))) / X.shape[-1]


# ---------------------------------------------------------------------------
# radix-2
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _half_twiddles(m: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


def fft(x) -> np.ndarray:
    """Radix-2 decimation-in-time FFT over the last axis."""
    x = _as_complex(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise FFTSizeError(f"radix-2 fft needs a power-of-two length, got {n}; use a block plan or pad")
    lead = x.shape[:-1]
    y = x[..., _bit_reversal(n)]
    h = 1
    while h < n:
        y = y.reshape(lead + (n // (2 * h), 2, h))
        even = y[..., 0, :]
        odd = y[..., 1, :] * _half_twiddles(2 * h)
        y = np.stack((even + odd, even - odd), axis=-2)
        h *= 2
    return y.reshape(lead + (n,))


def ifft(X) -> np.ndarray:
    """Inverse of :func:`fft`, scaled by 1/N."""
    X = _as_complex(X)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def fft_flops(n: int) -> dict:
    """Operation count of one radix-2 transform of length ``n``."""
    stages = n.bit_length() - 1
    return {"complex_mults": (n // 2) * stages, "complex_adds": n * stages}


# ---------------------------------------------------------------------------
# block (four-step) FFT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockFFTPlan:
    """Precomputed pieces of the four-step factorisation for one size.

    ``perm`` realises P (``(P x)[i] = x[perm[i]]``) and ``perm_t`` realises
    P^T.  ``twiddle`` is the diagonal of D, laid out so that entry
    ``k*N2 + j`` holds ``exp(-2 pi i jk/N)``.  For more than two factors the
    length-``N2`` block transform is itself a plan (``inner``).
    """

    N: int
    factors: tuple
    N1: int
    N2: int
    perm: np.ndarray = field(repr=False)
    perm_t: np.ndarray = field(repr=False)
    twiddle: np.ndarray = field(repr=False)
    F1: np.ndarray = field(repr=False)
    F2: Optional[np.ndarray] = field(repr=False, default=None)
    inner: Optional["BlockFFTPlan"] = None

    def flops(self) -> dict:
        """Complex multiply-adds in the block matmuls and twiddle multiplies."""
        if self.inner is None:
            inner_macs, inner_tw = self.N1 * self.N2 * self.N2, 0
        else:
            sub = self.inner.flops()
            inner_macs, inner_tw = self.N1 * sub["matmul_macs"], self.N1 * sub["twiddle_mults"]
        macs = inner_macs + self.N2 * self.N1 * self.N1
        tw = inner_tw + self.N
        return {"matmul_macs": macs, "twiddle_mults": tw, "total": macs + tw}


def make_block_plan(N: int, factors) -> BlockFFTPlan:
    factors = tuple(int(f) for f in factors)
    if len(factors) < 2:
        raise ValueError("a block plan needs at least two factors")
    if any(f < 2 for f in factors):
        raise ValueError(f"every factor must be >= 2, got {factors}")
    if int(np.prod(factors)) != N:
        raise ValueError(f"factors {factors} multiply to {int(np.prod(factors))}, not {N}")
    N1 = factors[0]
    N2 = N // N1
    inner = make_block_plan(N2, factors[1:]) if len(factors) > 2 else None
    n1 = np.arange(N1)[:, None]
    n2 = np.arange(N2)[None, :]
    perm = (n1 + N1 * n2).reshape(-1)
    perm_t = np.argsort(perm)
    twiddle = np.exp(-2j * np.pi * ((n1 * n2) % N) / N).reshape(-1)
    for a in (perm, perm_t, twiddle):
        a.setflags(write=False)
    return BlockFFTPlan(
        N=N, factors=factors, N1=N1, N2=N2, perm=perm, perm_t=perm_t, twiddle=twiddle,
        F1=dft_matrix(N1), F2=None if inner else dft_matrix(N2), inner=inner,
    )


def _rows_transform(a: np.ndarray, plan: BlockFFTPlan) -> np.ndarray:
    """I_{N1} x F_{N2}: transform each contiguous length-N2 row."""
    if plan.inner is None:
        return a @ plan.F2  # DFT matrices are symmetric
    return block_fft(a, plan.inner)


def block_fft(x, plan: BlockFFTPlan) -> np.ndarray:
    x = _as_complex(x)
    if x.shape[-1] != plan.N:
        raise FFTSizeError(f"plan is for length {plan.N}, input has {x.shape[-1]}")
    lead = x.shape[:-1]
    N1, N2 = plan.N1, plan.N2
    a = x[..., plan.perm].reshape(lead + (N1, N2))          # P
    a = _rows_transform(a, plan).reshape(lead + (plan.N,))   # I_{N1} x F_{N2}
    a = a * plan.twiddle                                     # D
    a = a[..., plan.perm_t].reshape(lead + (N2, N1))         # P^T
    a = (a @ plan.F1).reshape(lead + (plan.N,))              # I_{N2} x F_{N1}
    return a[..., plan.perm]                                 # P


def block_ifft(X, plan: BlockFFTPlan) -> np.ndarray:
    X = _as_complex(X)
    return np.conj(block_fft(np.conj(X), plan)) / plan.N


# ---------------------------------------------------------------------------
# causal convolution
# ---------------------------------------------------------------------------

def direct_conv(u, f) -> np.ndarray:
    """O(N^2) causal convolution ``y[i] = sum_{j<=i} f[j] u[i-j]`` over the last axis."""
    u = np.asarray(u)
    f = np.asarray(f)
    n = u.shape[-1]
    y = np.zeros(np.broadcast_shapes(u.shape, f.shape), dtype=np.result_type(u, f))
    for j in range(n):
        y[..., j:] += f[..., j, None] * u[..., : n - j]
    return y


def _transforms(n: int, backend: str, plan: Optional[BlockFFTPlan]):
    """(size, forward, inverse) for a zero-padded linear convolution of length n."""
    if backend == "numpy":
        size = next_pow2(2 * n)
        return size, (lambda a: np.fft.rfft(a, size)), (lambda A: np.fft.irfft(A, size))
    if backend == "radix":
        size = next_pow2(2 * n)
        pad = lambda a: np.concatenate([a, np.zeros(a.shape[:-1] + (size - n,))], axis=-1)  # noqa: E731
        return size, (lambda a: fft(pad(a))), ifft
    if backend == "block":
        if plan is None:
            raise ValueError("block backend needs a plan")
        if plan.N < 2 * n - 1:
            raise FFTSizeError(f"plan of length {plan.N} too short for causal conv of length {n}")
        size = plan.N
        pad = lambda a: np.concatenate([a, np.zeros(a.shape[:-1] + (size - n,))], axis=-1)  # noqa: E731
        return size, (lambda a: block_fft(pad(a), plan)), (lambda A: block_ifft(A, plan))
    raise ValueError(f"unknown fft backend {backend!r}")


def _check_real(y: np.ndarray, backend: str) -> np.ndarray:
    if backend == "numpy":
        return y
    scale = max(1.0, float(np.abs(y.real).max(initial=0.0)))
    resid = float(np.abs(y.imag).max(initial=0.0))
    if resid > 1e-8 * scale:
        raise FloatingPointError(f"imaginary residue {resid:.3e} after inverse FFT of a real convolution")
    return y.real


def causal_conv(u, f, backend: str = "radix", plan: Optional[BlockFFTPlan] = None) -> np.ndarray:
    """Batched causal convolution over the last axis; ``u`` and ``f`` broadcast."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    n = u.shape[-1]
    _, fwd, inv = _transforms(n, backend, plan)
    y = inv(fwd(u) * fwd(f))
    return _check_real(y, backend)[..., :n]


def causal_conv_vjp(u, f, dy, backend: str = "radix", plan: Optional[BlockFFTPlan] = None):
    """Cotangents (du, df) of ``y = causal_conv(u, f)`` for upstream ``dy``.

    Both are correlations: ``df = iFFT(conj(FFT(u')) FFT(dy'))[:N]`` and
    symmetrically for ``du``, where primes denote zero padding.  Returned with
    the broadcast shape of ``dy``; callers reduce over broadcast axes.
    """
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    n = u.shape[-1]
    _, fwd, inv = _transforms(n, backend, plan)
    DY = fwd(dy)
    df = _check_real(inv(np.conj(fwd(u)) * DY), backend)[..., :n]
    du = _check_real(inv(np.conj(fwd(f)) * DY), backend)[..., :n]
    return du, df


def fft_conv(u, f, backend: str = "radix", plan: Optional[BlockFFTPlan] = None) -> np.ndarray:
    """Causal linear convolution of two equal-length real signals via zero-padded FFTs."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if u.shape[-1] != f.shape[-1]:
        raise ValueError(f"fft_conv: length mismatch {u.shape[-1]} vs {f.shape[-1]}")
    return causal_conv(u, f, backend=backend, plan=plan)


def fft_conv_grad(u, f, dy, D=0.0, backend: str = "radix", plan: Optional[BlockFFTPlan] = None):
    """Gradients of ``y = fft_conv(u, f) + D*u`` with respect to u, f and D."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if not (u.shape[-1] == f.shape[-1] == dy.shape[-1]):
        raise ValueError(f"fft_conv_grad: lengths differ {u.shape[-1]}, {f.shape[-1]}, {dy.shape[-1]}")
    du, df = causal_conv_vjp(u, f, dy, backend=backend, plan=plan)
    du = du + np.asarray(D)[..., None] * dy
    dD = (dy * u).sum(axis=-1)
    return du, df, dD


def fft_conv_flops(n: int, plan: Optional[BlockFFTPlan] = None) -> int:
    """Complex multiplies for one causal conv (two forward, one inverse, one pointwise)."""
    if plan is None:
        size = next_pow2(2 * n)
        per = fft_flops(size)["complex_mults"]
    else:
        size = plan.N
        per = plan.flops()["total"]
    return 3 * per + size
