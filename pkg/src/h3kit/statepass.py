"""Chunked SSM evaluation by state passing.

A length-N input is split into chunks of length N'.  Each chunk is convolved
with the length-N' kernel, the contribution of the state carried in from the
previous chunk is added through ``M_xy``, and the carried state is advanced
with ``A^{N'}`` and ``M_ux``.  Only FFTs of size 2N' are ever taken.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fft as _fft
from .ssm import ShiftSSM, advance_state, kernel, zero_state


@dataclass(frozen=True)
class ChunkPlan:
    """Precomputed operators for one SSM and chunk length.

    ``M_ux`` has columns ``[A^{N'-1}B, ..., AB, B]`` and ``M_xy`` rows
    ``[C; CA; ...; CA^{N'-1}]``.  Because the recurrence applies A before
    reading out, the carried state enters chunk output ``j`` as
    ``C A^{j+1} x``, so ``M_xy`` is applied to the advanced state ``A x``.
    For diagonal SSMs ``A_pow`` is the vector of diagonal powers and the
    matrices hold one column/row per stored mode.
    """

    Nprime: int
    A_pow: np.ndarray
    M_ux: np.ndarray
    M_xy: np.ndarray
    kernel: np.ndarray
    block_plan: Optional[_fft.BlockFFTPlan] = None


def _factor_for_block(n: int) -> Optional[tuple]:
    """Near-balanced factorisation of a padded FFT size, or None if n is prime/small."""
    if n < 4:
        return None
    best = None
    for a in range(2, int(np.sqrt(n)) + 1):
        if n % a == 0:
            best = a
    if best is None:
        return None
    return (best, n // best)


def precompute_chunk_plan(ssm, Nprime: int, use_block_fft: bool = True) -> ChunkPlan:
    if Nprime < 1:
        raise ValueError("chunk length must be >= 1")
    f = kernel(ssm, Nprime)
    block = None
    if use_block_fft:
        size = _fft.next_pow2(2 * Nprime)
        factors = _factor_for_block(size)
        if factors is not None:
            block = _fft.make_block_plan(size, factors)
    if isinstance(ssm, ShiftSSM):
        A = ssm.step_matrix()
        B = np.broadcast_to(ssm.B, ssm.C.shape)
        powers_B = [B]                       # A^j B, j = 0..N'-1
        powers_C = [ssm.C]                   # C A^j
        for _ in range(1, Nprime):
            powers_B.append(powers_B[-1] @ A.T)
            powers_C.append(powers_C[-1] @ A)
        M_ux = np.stack(powers_B[::-1], axis=-1)             # (..., m, N')
        M_xy = np.stack(powers_C, axis=-2)                   # (..., N', m)
        A_pow = np.linalg.matrix_power(A, Nprime)
        return ChunkPlan(Nprime, A_pow, M_ux, M_xy, f, block)
    Abar, Bbar = ssm.discretize()
    j = np.arange(Nprime)
    logA = np.log(Abar)
    P = np.exp(logA[..., None] * j)                          # (..., n, N'): A^j
    M_ux = Bbar[..., None] * P[..., ::-1]
    M_xy = np.swapaxes(ssm.C[..., None] * P, -1, -2)         # (..., N', n)
    A_pow = np.exp(logA * Nprime)
    return ChunkPlan(Nprime, A_pow, M_ux, M_xy, f, block)


def _carry_out(ssm, plan: ChunkPlan, x: np.ndarray) -> np.ndarray:
    """``M_xy (A x)``: contribution of the carried state to the chunk output."""
    ax = advance_state(ssm, x)
    if isinstance(ssm, ShiftSSM):
        return np.einsum("...jm,...m->...j", plan.M_xy, ax)
    scale = 2.0 if ssm.paired else 1.0
    return scale * np.einsum("...jn,...n->...j", plan.M_xy, ax).real


def _update(ssm, plan: ChunkPlan, x: np.ndarray, uc: np.ndarray) -> np.ndarray:
    if isinstance(ssm, ShiftSSM):
        xa = np.einsum("ab,...b->...a", plan.A_pow, x)
        return xa + np.einsum("...mj,...j->...m", plan.M_ux, uc)
    return plan.A_pow * x + np.einsum("...nj,...j->...n", plan.M_ux, uc)


def state_passing_apply(ssm, u, Nprime: int, plan: Optional[ChunkPlan] = None,
                        backend: Optional[str] = None, return_states: bool = False):
    """Evaluate the SSM on ``u`` (time on the last axis) chunk by chunk.

    When N is not a multiple of N', ``u`` is zero-padded and the output
    truncated; causality makes the padding invisible.
    """
    u = np.asarray(u, dtype=np.float64)
    N = u.shape[-1]
    if Nprime > N:
        raise ValueError(f"chunk length {Nprime} exceeds sequence length {N}")
    if plan is None:
        plan = precompute_chunk_plan(ssm, Nprime)
    elif plan.Nprime != Nprime:
        raise ValueError("plan was built for a different chunk length")
    if backend is None:
        backend = "block" if plan.block_plan is not None else "radix"
    n_chunks = -(-N // Nprime)
    pad = n_chunks * Nprime - N
    if pad:
        u = np.concatenate([u, np.zeros(u.shape[:-1] + (pad,))], axis=-1)
    D = np.asarray(ssm.D)[..., None]
    x = zero_state(ssm)
    lead = np.broadcast_shapes(u.shape[:-1], x.shape[:-1], plan.kernel.shape[:-1])
    x = np.broadcast_to(x, lead + x.shape[-1:]).copy()
    y = np.empty(lead + (u.shape[-1],))
    states = []
    for c in range(n_chunks):
        sl = slice(c * Nprime, (c + 1) * Nprime)
        uc = u[..., sl]
        conv = _fft.causal_conv(uc, plan.kernel, backend=backend, plan=plan.block_plan)
        y[..., sl] = _carry_out(ssm, plan, x) + conv + D * uc
        x = _update(ssm, plan, x, uc)
        if return_states:
            states.append(x.copy())
    y = y[..., :N]
    return (y, states) if return_states else y


def state_passing_flops(N: int, Nprime: int, m: int, block: bool = False) -> int:
    """Multiply count for one channel: per chunk, one conv, M_xy, M_ux and the A^{N'} step."""
    bplan = None
    if block:
        size = _fft.next_pow2(2 * Nprime)
        fac = _factor_for_block(size)
        bplan = _fft.make_block_plan(size, fac) if fac else None
    chunks = -(-N // Nprime)
    per = _fft.fft_conv_flops(Nprime, bplan) + 2 * m * Nprime + m * m + Nprime
    return chunks * per
