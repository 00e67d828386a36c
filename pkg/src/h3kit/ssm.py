"""Discrete state-space models: shift SSMs and diagonal (S4D-style) SSMs.

Both model kinds evaluate two ways: as a causal convolution with a
materialised kernel ``f = [CB, CAB, CA^2B, ...]`` and as the step-by-step
recurrence ``x_i = A x_{i-1} + B u_i``, ``y_i = C x_i + D u_i``.  Parameters
may carry leading batch axes (one SSM per channel); inputs broadcast against
them with time on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fft as _fft
from .numcore.rng import stream


@dataclass(frozen=True)
class ShiftSSM:
    """SSM whose A is the lower shift matrix (never stored densely)."""

    C: np.ndarray
    B: np.ndarray = None
    D: np.ndarray = 0.0

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        if C.ndim == 0 or C.shape[-1] < 1:
            raise ValueError("shift SSM needs a state size m >= 1")
        B = np.zeros_like(C) if self.B is None else np.asarray(self.B, dtype=np.float64)
        if self.B is None:
            B[..., 0] = 1.0
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", np.asarray(self.D, dtype=np.float64))

    @property
    def m(self) -> int:
        return self.C.shape[-1]

    def step_matrix(self) -> np.ndarray:
        """Dense A, for oracles only."""
        return np.eye(self.m, k=-1)


@dataclass(frozen=True)
class DiagSSM:
    """SSM with diagonal complex A, discretised by zero-order hold.

    With ``paired=True`` (the default) each stored mode stands for a
    conjugate pair, so a state size of ``m`` keeps ``m // 2`` modes and the
    output takes ``2 * Re``.  With ``paired=False`` every mode is used as is
    and the output takes ``Re``; that is the form for real diagonal A.
    """

    a_re: np.ndarray
    a_im: np.ndarray
    log_dt: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray = 0.0
    paired: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("a_re", "a_im", "log_dt", "D"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("B", "C"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.complex128))
        if np.any(self.a_re > 0):
            raise FloatingPointError("diagonal SSM has Re(a) > 0; its kernel grows without bound")

    @property
    def m(self) -> int:
        return self.a_re.shape[-1] * (2 if self.paired else 1)

    @property
    def a(self) -> np.ndarray:
        return self.a_re + 1j * self.a_im

    def discretize(self):
        """(A_bar, B_bar) with A_bar = exp(dt a), B_bar = (A_bar - 1)/a * B."""
        if "zoh" not in self._cache:
            dt = np.exp(self.log_dt)[..., None]
            dtA = dt * self.a
            Abar = np.exp(dtA)
            self._cache["zoh"] = (Abar, dt * exprel(dtA) * self.B)
        return self._cache["zoh"]

    @classmethod
    def from_discrete(cls, Abar, Bbar, C, D=0.0, paired=True) -> "DiagSSM":
        """Build the record whose ZOH discretisation (dt = 1) is (Abar, Bbar)."""
        Abar = np.asarray(Abar, dtype=np.complex128)
        if np.any(Abar == 0):
            raise ValueError("A_bar entries must be nonzero")
        a = np.log(Abar)
        B = np.asarray(Bbar, dtype=np.complex128) / exprel(a)
        return cls(a.real, a.imag, np.zeros(Abar.shape[:-1]), B, C, D, paired)

    def _scale(self) -> float:
        return 2.0 if self.paired else 1.0


def exprel(z) -> np.ndarray:
    """(exp(z) - 1) / z with the removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=np.complex128)
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, (np.exp(zs) - 1.0) / zs)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def shift_kernel(ssm: ShiftSSM, N: int) -> np.ndarray:
    """``f[k] = sum_i C[i+k] B[i]`` for k < m, zero beyond."""
    m = ssm.m
    f = np.zeros(np.broadcast_shapes(ssm.C.shape, ssm.B.shape)[:-1] + (N,))
    for k in range(min(m, N)):
        f[..., k] = (ssm.C[..., k:] * ssm.B[..., : m - k]).sum(axis=-1)
    return f


def vandermonde(Abar: np.ndarray, N: int) -> np.ndarray:
    """``V[..., n, k] = Abar[..., n] ** k`` for k < N."""
    k = np.arange(N)
    logA = np.log(Abar.astype(np.complex128))
    return np.exp(logA[..., None] * k)


def diag_kernel(ssm: DiagSSM, N: int) -> np.ndarray:
    """``f[k] = 2 Re sum_n C_n B_bar_n A_bar_n^k`` (``Re`` for unpaired modes)."""
    Abar, Bbar = ssm.discretize()
    if np.any(np.abs(Abar) > 1.0 + 1e-12):
        raise FloatingPointError("diagonal SSM is unstable (|A_bar| > 1)")
    V = vandermonde(Abar, N)
    f = ssm._scale() * np.einsum("...n,...nk->...k", ssm.C * Bbar, V).real
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("non-finite diagonal SSM kernel")
    return f


def kernel(ssm, N: int) -> np.ndarray:
    if isinstance(ssm, ShiftSSM):
        return shift_kernel(ssm, N)
    return diag_kernel(ssm, N)


def s4d_init(m: int, seed: int = 0, dt_min: float = 1e-3, dt_max: float = 1e-1, batch=()) -> DiagSSM:
    """S4D-Lin initialisation: ``a_n = -1/2 + i pi n`` for ``n < m/2``, B = 1,
    C complex standard normal, log dt uniform in ``[ln dt_min, ln dt_max]``."""
    if m < 2 or m % 2:
        raise ValueError(f"S4D init needs an even state size, got {m}")
    rng = stream(seed, "init")
    batch = tuple(batch)
    half = m // 2
    a_re = np.full(batch + (half,), -0.5)
    a_im = np.broadcast_to(np.pi * np.arange(half), batch + (half,)).copy()
    log_dt = rng.uniform(np.log(dt_min), np.log(dt_max), size=batch)
    C = (rng.normal(size=batch + (half,)) + 1j * rng.normal(size=batch + (half,))) / np.sqrt(2.0)
    B = np.ones(batch + (half,), dtype=np.complex128)
    return DiagSSM(a_re, a_im, log_dt, B, C, 0.0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def ssm_apply_conv(f, u, D=0.0, backend: str = "radix") -> np.ndarray:
    """``y = f * u + D u`` (zero initial state)."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return _fft.fft_conv(f, u, backend=backend) + np.asarray(D)[..., None] * u


def zero_state(ssm) -> np.ndarray:
    if isinstance(ssm, ShiftSSM):
        return np.zeros(ssm.C.shape)
    return np.zeros(ssm.C.shape, dtype=np.complex128)


def advance_state(ssm, x: np.ndarray) -> np.ndarray:
    """``A x`` without forming A."""
    if isinstance(ssm, ShiftSSM):
        out = np.zeros_like(x)
        out[..., 1:] = x[..., :-1]
        return out
    return ssm.discretize()[0] * x


def readout(ssm, x: np.ndarray) -> np.ndarray:
    """``C x`` (real part, doubled for paired modes)."""
    if isinstance(ssm, ShiftSSM):
        return (ssm.C * x).sum(axis=-1)
    return ssm._scale() * (ssm.C * x).sum(axis=-1).real


def ssm_apply_recurrent(ssm, u, x0=None):
    """Run the recurrence step by step; returns ``(y, x_N)``.

    For diagonal SSMs the state holds one complex entry per stored mode.
    """
    u = np.asarray(u, dtype=np.float64)
    x = zero_state(ssm) if x0 is None else np.array(x0, dtype=zero_state(ssm).dtype)
    Bin = ssm.B if isinstance(ssm, ShiftSSM) else ssm.discretize()[1]
    lead = np.broadcast_shapes(u.shape[:-1], x.shape[:-1])
    x = np.broadcast_to(x, lead + x.shape[-1:]).copy()
    y = np.empty(lead + u.shape[-1:])
    D = np.asarray(ssm.D)
    for i in range(u.shape[-1]):
        ui = u[..., i, None]
        x = advance_state(ssm, x) + Bin * ui
        y[..., i] = readout(ssm, x) + D * u[..., i]
    return y, x
