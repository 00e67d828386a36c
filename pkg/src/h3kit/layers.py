"""Sequence-mixing layers on the autodiff tape.

Inputs are ``(batch, N, d)`` tensors.  Every mixer is causal.

* :func:`h3_mixer` -- the H3 layer: Q/K/V projections, a shift SSM on K, a
  per-head diagonal SSM over the batched outer products ``K_bar V^T``, and a
  final contraction with Q.
* :func:`attention_mixer` -- multi-head causal softmax attention.
* :func:`linear_attention_mixer` -- causal linear attention in its recurrent
  (cumulative-sum) form with feature map ``elu(x) + 1``.
* :func:`s4d_mixer` -- a per-channel diagonal SSM followed by GELU and an
  output projection, with no multiplicative interactions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ssm as _ssm
from .numcore import ops
from .numcore.tape import Tape, Tensor

log = logging.getLogger(__name__)

LINEAR_ATTN_MIN_DENOM = 1e-6


# ---------------------------------------------------------------------------
# SSM kernels as tape ops
# ---------------------------------------------------------------------------

def _shift_table(m: int, N: int) -> np.ndarray:
    """S[i, j, k] = 1 iff j == i + k (and k < N)."""
    S = np.zeros((m, m, N))
    for i in range(m):
        for k in range(min(N, m - i)):
            S[i, i + k, k] = 1.0
    return S


def shift_kernel_t(C: Tensor, N: int, B: Tensor | None = None) -> Tensor:
    """Shift-SSM kernels for a bank of channels: C, B of shape (ch, m) -> (N, ch).

    With ``B`` omitted it is fixed to e_1 and the kernel is C itself
    (truncated or zero-padded to N).
    """
    m = C.shape[-1]
    S = _shift_table(m, N)
    if B is None:
        f = ops.matmul(C, S[0])
    else:
        outer = ops.einsum("ci,cj->cij", B, C)
        f = ops.einsum("cij,ijk->ck", outer, S)
    return ops.transpose(f, (1, 0))


def diag_kernel_t(a_re: Tensor, a_im: Tensor, log_dt: Tensor, B: Tensor, C: Tensor,
                  N: int, paired: bool = True) -> Tensor:
    """Diagonal-SSM kernels for ``H`` groups sharing A, B, dt.

    Shapes: a_re, a_im, B -> (H, n); log_dt -> (H,); C -> (H, c, n).
    Returns (N, H*c).  Discretisation is zero-order hold and the powers of
    A_bar are accumulated as a Vandermonde product.
    """
    H, c, n = C.shape
    dt = ops.reshape(ops.exp(log_dt), (H, 1))
    dtA = ops.mul(dt, ops.complex_(a_re, a_im))
    Bbar = ops.mul(ops.mul(dt, ops.exprel(dtA)), B)
    K = ops.mul(C, ops.reshape(Bbar, (H, 1, n)))
    powers = ops.exp(ops.mul(ops.reshape(dtA, (H, n, 1)), np.arange(N, dtype=np.float64)))
    f = ops.real(ops.einsum("hcn,hnk->hck", K, powers))
    if paired:
        f = ops.mul(f, 2.0)
    return ops.transpose(ops.reshape(f, (H * c, N)), (1, 0))


# ---------------------------------------------------------------------------
# mixers
# ---------------------------------------------------------------------------

def h3_core(u: Tensor, W_Q, W_K, W_V, W_O, shift_f, shift_D, diag_f, diag_D, H: int) -> Tensor:
    """H3 with precomputed kernels; ``diag_f`` has ``H * d_h**2`` channels."""
    Bsz, N, d = u.shape
    if d % H:
        raise ValueError(f"model width {d} is not divisible by {H} heads")
    dh = d // H
    q = ops.matmul(u, W_Q)
    k = ops.matmul(u, W_K)
    v = ops.matmul(u, W_V)
    kbar = ops.add(ops.fftconv(k, shift_f), ops.mul(k, shift_D))
    if dh == 1:
        kv_in = ops.mul(kbar, v)
    else:
        kh = ops.reshape(kbar, (Bsz, N, H, dh))
        vh = ops.reshape(v, (Bsz, N, H, dh))
        kv_in = ops.reshape(ops.einsum("bnhi,bnhj->bnhij", kh, vh), (Bsz, N, H * dh * dh))
    kv = ops.add(ops.fftconv(kv_in, diag_f), ops.mul(kv_in, diag_D))
    if dh == 1:
        o = ops.mul(q, kv)
    else:
        qh = ops.reshape(q, (Bsz, N, H, dh))
        kvh = ops.reshape(kv, (Bsz, N, H, dh, dh))
        o = ops.reshape(ops.einsum("bnhi,bnhij->bnhj", qh, kvh), (Bsz, N, d))
    return ops.matmul(o, W_O)


def h3_head_outputs(u: Tensor, W_Q, W_K, W_V, shift_f, shift_D, diag_f, diag_D, H: int) -> Tensor:
    """Per-head outputs ``O^(h)`` before the output projection, (batch, N, H, d_h)."""
    Bsz, N, d = u.shape
    eye = np.eye(d)
    o = h3_core(u, W_Q, W_K, W_V, eye, shift_f, shift_D, diag_f, diag_D, H)
    return ops.reshape(o, (Bsz, N, H, d // H))


def h3_kernels(p: dict, N: int, H: int, paired: bool = True):
    """(shift kernel, diag kernel) from a parameter dict with raw ``diag_a_re``."""
    shift_f = shift_kernel_t(p["shift_C"], N, p.get("shift_B"))
    diag_B = ops.complex_(p["diag_B_re"], p["diag_B_im"])
    diag_C = ops.complex_(p["diag_C_re"], p["diag_C_im"])
    diag_f = diag_kernel_t(p["diag_a_re"], p["diag_a_im"], p["diag_log_dt"], diag_B, diag_C, N, paired)
    return shift_f, diag_f


def h3_mixer(p: dict, u: Tensor, H: int, paired: bool = True) -> Tensor:
    N = u.shape[1]
    shift_f, diag_f = h3_kernels(p, N, H, paired)
    return h3_core(u, p["W_Q"], p["W_K"], p["W_V"], p["W_O"], shift_f, p["shift_D"], diag_f, p["diag_D"], H)


def s4d_mixer(p: dict, u: Tensor) -> Tensor:
    """Per-channel diagonal SSM -> GELU -> output projection."""
    N = u.shape[1]
    d = u.shape[2]
    B = ops.complex_(p["diag_B_re"], p["diag_B_im"])
    C = ops.complex_(p["diag_C_re"], p["diag_C_im"])
    f = diag_kernel_t(p["diag_a_re"], p["diag_a_im"], p["diag_log_dt"], B, C, N)
    assert f.shape == (N, d)
    y = ops.add(ops.fftconv(u, f), ops.mul(u, p["diag_D"]))
    return ops.add(ops.matmul(ops.gelu(y), p["W_O"]), p["b_O"])


def _heads(x: Tensor, H: int) -> Tensor:
    Bsz, N, d = x.shape
    return ops.transpose(ops.reshape(x, (Bsz, N, H, d // H)), (0, 2, 1, 3))


def _unheads(x: Tensor) -> Tensor:
    Bsz, H, N, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (Bsz, N, H * dh))


def attention_mixer(p: dict, u: Tensor, H: int) -> Tensor:
    """Causal softmax attention with scale 1/sqrt(d_h)."""
    Bsz, N, d = u.shape
    if d % H:
        raise ValueError(f"model width {d} is not divisible by {H} heads")
    q = _heads(ops.matmul(u, p["W_Q"]), H)
    k = _heads(ops.matmul(u, p["W_K"]), H)
    v = _heads(ops.matmul(u, p["W_V"]), H)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // H))
    causal = np.tril(np.ones((N, N), dtype=bool))
    att = ops.softmax(scores, axis=-1, mask=causal)
    o = ops.matmul(att, v)
    return ops.matmul(_unheads(o), p["W_O"])


def linear_attention_mixer(p: dict, u: Tensor, H: int) -> Tensor:
    """``O_i = phi(Q_i)^T S_i / phi(Q_i)^T z_i`` with running sums S, z."""
    Bsz, N, d = u.shape
    if d % H:
        raise ValueError(f"model width {d} is not divisible by {H} heads")
    dh = d // H
    shape = (Bsz, N, H, dh)
    q = ops.elu_plus_one(ops.reshape(ops.matmul(u, p["W_Q"]), shape))
    k = ops.elu_plus_one(ops.reshape(ops.matmul(u, p["W_K"]), shape))
    v = ops.reshape(ops.matmul(u, p["W_V"]), shape)
    S = ops.cumsum(ops.einsum("bnhi,bnhj->bnhij", k, v), axis=1)
    z = ops.cumsum(k, axis=1)
    num = ops.einsum("bnhi,bnhij->bnhj", q, S)
    den = ops.sum(ops.mul(q, z), axis=-1, keepdims=True)
    if np.any(den.data <= LINEAR_ATTN_MIN_DENOM):
        log.warning("linear attention denominator clamped at %g", LINEAR_ATTN_MIN_DENOM)
    den = ops.maximum(den, LINEAR_ATTN_MIN_DENOM)
    o = ops.reshape(ops.div(num, den), (Bsz, N, d))
    return ops.matmul(o, p["W_O"])


# ---------------------------------------------------------------------------
# standalone H3 layer
# ---------------------------------------------------------------------------

@dataclass
class H3LayerParams:
    """Weights of one H3 layer in plain numpy form.

    ``shift`` is a bank of ``d`` shift SSMs; ``diag`` is a bank of diagonal
    SSMs with parameter arrays shaped ``(H, n)`` for A/B/dt and
    ``(H, d_h**2, n)`` for C, i.e. A is shared within a head and C is per
    channel.  Weight matrices act on row vectors (``Q = u @ W_Q``).
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    H: int
    shift: _ssm.ShiftSSM
    diag: _ssm.DiagSSM
    diag_D: np.ndarray = None

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
        if d % self.H:
            raise ValueError(f"model width {d} is not divisible by {self.H} heads")
        if self.diag_D is None:
            self.diag_D = np.zeros(self.H * self.d_h**2)

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_h(self) -> int:
        return self.d // self.H

    def tensors(self, tape: Tape) -> dict:
        g = self.diag
        shift_B = None
        if not np.allclose(self.shift.B, np.eye(1, self.shift.m)):
            shift_B = tape.param(np.broadcast_to(self.shift.B, self.shift.C.shape).copy(), "shift_B")
        p = {
            "W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O,
            "shift_C": self.shift.C,
            "shift_D": np.broadcast_to(self.shift.D, (self.d,)).copy(),
            "diag_a_re": g.a_re, "diag_a_im": g.a_im, "diag_log_dt": g.log_dt,
            "diag_B_re": g.B.real, "diag_B_im": g.B.imag,
            "diag_C_re": g.C.real, "diag_C_im": g.C.imag,
            "diag_D": self.diag_D,
        }
        out = {k: tape.param(np.asarray(v, dtype=np.float64), k) for k, v in p.items()}
        if shift_B is not None:
            out["shift_B"] = shift_B
        return out


def h3_forward(params: H3LayerParams, u, tape: Tape | None = None, heads_only: bool = False) -> Tensor:
    """Run one H3 layer on ``u`` of shape (N, d) or (batch, N, d)."""
    tape = Tape(grad=False) if tape is None else tape
    u = u if isinstance(u, Tensor) else tape.constant(np.asarray(u, dtype=np.float64))
    squeeze = u.ndim == 2
    if squeeze:
        u = ops.reshape(u, (1,) + u.shape)
    if u.shape[-1] != params.d:
        raise ValueError(f"input width {u.shape[-1]} does not match layer width {params.d}")
    p = params.tensors(tape)
    shift_f, diag_f = h3_kernels(p, u.shape[1], params.H, params.diag.paired)
    if heads_only:
        out = h3_head_outputs(u, p["W_Q"], p["W_K"], p["W_V"], shift_f, p["shift_D"], diag_f, p["diag_D"], params.H)
    else:
        out = h3_core(u, p["W_Q"], p["W_K"], p["W_V"], p["W_O"], shift_f, p["shift_D"], diag_f, p["diag_D"], params.H)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out
