import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h3kit import fft as F


def crand(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def all_plans(N):
    """Every ordered two- and three-factor plan for N (factors >= 2)."""
    plans = []
    for a in range(2, N):
        if N % a == 0 and N // a >= 2:
            plans.append((a, N // a))
            rest = N // a
            for b in range(2, rest):
                if rest % b == 0 and rest // b >= 2:
                    plans.append((a, b, rest // b))
    return plans


# --- direct DFT ----------------------------------------------------------------

def test_dft_impulse():
    np.testing.assert_allclose(F.dft_direct([1, 0, 0, 0]), np.ones(4), atol=1e-15)


@pytest.mark.parametrize("N", [1, 3, 8])
def test_dft_constant(N):
    out = F.dft_direct(np.full(N, 2.5))
    assert out[0] == pytest.approx(N * 2.5)
    np.testing.assert_allclose(out[1:], 0, atol=1e-13)


def test_dft_inverse_roundtrip():
    x = crand(np.random.default_rng(0), 8)
    np.testing.assert_allclose(F.idft_direct(F.dft_direct(x)), x, atol=1e-12)


# --- radix-2 -------------------------------------------------------------------

def test_fft_impulse():
    np.testing.assert_allclose(F.fft(np.eye(1, 16)[0]), np.ones(16), atol=1e-15)


def test_fft_matches_dft_n64():
    x = crand(np.random.default_rng(1), 64)
    assert np.abs(F.fft(x) - F.dft_direct(x)).max() <= 1e-10


@settings(max_examples=30, deadline=None)
@given(p=st.integers(0, 10), seed=st.integers(0, 2**32 - 1))
def test_fft_properties(p, seed):
    n = 2**p
    x = crand(np.random.default_rng(seed), n)
    X = F.fft(x)
    ref = F.dft_direct(x)
    assert np.abs(X - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
    np.testing.assert_allclose(F.ifft(X), x, atol=1e-10)
    # Parseval
    assert np.sum(np.abs(x) ** 2) == pytest.approx(np.sum(np.abs(X) ** 2) / n, rel=1e-10)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(F.FFTSizeError):
        F.fft(np.ones(12))


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
def test_conjugate_reversal_for_real_input(p, seed):
    n = 2**p
    x = np.random.default_rng(seed).normal(size=n)
    X = F.fft(x)
    np.testing.assert_allclose(np.conj(X), X[(-np.arange(n)) % n], atol=1e-10)


def test_fft_batched_last_axis():
    x = crand(np.random.default_rng(2), 3, 2, 16)
    np.testing.assert_allclose(F.fft(x), np.fft.fft(x, axis=-1), atol=1e-12)


# --- block FFT -----------------------------------------------------------------

def test_block_plan_impulse_n4():
    plan = F.make_block_plan(4, (2, 2))
    np.testing.assert_allclose(F.block_fft([1, 0, 0, 0], plan), np.ones(4), atol=1e-15)


def test_block_plan_n16_vs_dft():
    x = crand(np.random.default_rng(3), 16)
    got = F.block_fft(x, F.make_block_plan(16, (4, 4)))
    assert np.abs(got - F.dft_direct(x)).max() <= 1e-10


def test_block_plan_n4096_vs_fft():
    x = crand(np.random.default_rng(4), 4096)
    got = F.block_fft(x, F.make_block_plan(4096, (16, 16, 16)))
    assert np.abs(got - F.fft(x)).max() <= 1e-9


def test_block_plan_n512_three_factors_vs_fft():
    x = crand(np.random.default_rng(5), 512)
    got = F.block_fft(x, F.make_block_plan(512, (8, 8, 8)))
    np.testing.assert_allclose(got, F.fft(x), atol=1e-9)


@pytest.mark.parametrize("N", [4, 8, 16, 64, 256, 1024])
def test_block_fft_all_plans_random_inputs(N):
    rng = np.random.default_rng(N)
    xs = crand(rng, 100, N)                      # >= 100 random inputs per plan
    ref = F.dft_direct(xs)
    scale = np.abs(ref).max(axis=-1)
    for fac in all_plans(N):
        got = F.block_fft(xs, F.make_block_plan(N, fac))
        rel = (np.abs(got - ref).max(axis=-1) / scale).max()
        assert rel <= 1e-9, (fac, rel)
        np.testing.assert_allclose(F.block_ifft(got, F.make_block_plan(N, fac)), xs, atol=1e-9)


def test_block_plan_invariants():
    plan = F.make_block_plan(64, (4, 4, 4))
    assert np.allclose(np.abs(plan.twiddle), 1.0)
    for p in (plan.perm, plan.perm_t):
        assert sorted(p.tolist()) == list(range(64))
    assert np.array_equal(plan.perm[plan.perm_t], np.arange(64))
    # twiddle at k * N2 + j is exp(-2 pi i jk / N)
    N1, N2 = plan.N1, plan.N2
    k, j = 3, 5
    assert plan.twiddle[k * N2 + j] == pytest.approx(np.exp(-2j * np.pi * j * k / 64))
    with pytest.raises(ValueError):
        plan.twiddle[0] = 1


@pytest.mark.parametrize("N,factors", [(16, (4, 5)), (16, (1, 16)), (16, (16,))])
def test_block_plan_rejects_bad_factors(N, factors):
    with pytest.raises(ValueError):
        F.make_block_plan(N, factors)


def test_block_fft_size_mismatch():
    with pytest.raises(F.FFTSizeError):
        F.block_fft(np.ones(8), F.make_block_plan(16, (4, 4)))


@pytest.mark.parametrize("r,p", [(2, 2), (2, 6), (4, 3), (8, 3), (8, 4), (16, 3)])
def test_block_flops_follow_r_log_formula(r, p):
    N = r**p
    counted = F.make_block_plan(N, (r,) * p).flops()
    formula = N * r * math.log(N) / math.log(r)
    assert counted["matmul_macs"] == pytest.approx(formula, rel=1e-12)
    # one twiddle pass per recursion level, a lower-order term
    assert counted["twiddle_mults"] == N * (p - 1)


# --- convolution ---------------------------------------------------------------

@pytest.mark.parametrize("backend", ["radix", "numpy"])
def test_conv_identity_and_delay(backend):
    u = np.random.default_rng(6).normal(size=10)
    np.testing.assert_allclose(F.fft_conv(u, np.eye(1, 10)[0], backend), u, atol=1e-12)
    np.testing.assert_allclose(F.fft_conv(u, np.eye(1, 10, 1)[0], backend),
                               np.r_[0.0, u[:-1]], atol=1e-12)


@pytest.mark.parametrize("backend", ["radix", "numpy", "block"])
def test_conv_n33_vs_direct(backend):
    rng = np.random.default_rng(7)
    u, f = rng.normal(size=33), rng.normal(size=33)
    plan = F.make_block_plan(128, (8, 16)) if backend == "block" else None
    got = F.fft_conv(u, f, backend, plan)
    assert np.abs(got - F.direct_conv(u, f)).max() <= 1e-10


def test_conv_length_mismatch():
    with pytest.raises(ValueError):
        F.fft_conv(np.ones(4), np.ones(5))


def test_block_conv_needs_long_enough_plan():
    with pytest.raises(F.FFTSizeError):
        F.fft_conv(np.ones(16), np.ones(16), "block", F.make_block_plan(16, (4, 4)))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 64), seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_linear_and_commutative(n, seed, a, b):
    rng = np.random.default_rng(seed)
    u, v, f = rng.normal(size=(3, n))
    y = F.fft_conv(u, f)
    np.testing.assert_allclose(y, F.fft_conv(f, u), atol=1e-10)
    np.testing.assert_allclose(F.fft_conv(a * u + b * v, f), a * y + b * F.fft_conv(v, f), atol=1e-9)


# --- backward ------------------------------------------------------------------

def test_conv_grad_zero_upstream():
    rng = np.random.default_rng(8)
    du, df, dD = F.fft_conv_grad(rng.normal(size=8), rng.normal(size=8), np.zeros(8), D=0.7)
    assert not du.any() and not df.any() and dD == 0


def test_conv_grad_identity_filter():
    rng = np.random.default_rng(9)
    dy = rng.normal(size=8)
    du, _, _ = F.fft_conv_grad(rng.normal(size=8), np.eye(1, 8)[0], dy, D=0.3)
    np.testing.assert_allclose(du, dy + 0.3 * dy, atol=1e-12)


def _fd_conv_grads(u, f, D, w, eps=1e-5):
    def L(u_, f_, D_):
        return float(np.dot(w, F.direct_conv(u_, f_) + D_ * u_))

    du = np.array([(L(u + eps * e, f, D) - L(u - eps * e, f, D)) / (2 * eps) for e in np.eye(len(u))])
    df = np.array([(L(u, f + eps * e, D) - L(u, f - eps * e, D)) / (2 * eps) for e in np.eye(len(u))])
    dD = (L(u, f, D + eps) - L(u, f, D - eps)) / (2 * eps)
    return du, df, dD


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def test_conv_grad_n8_matches_fd():
    rng = np.random.default_rng(10)
    u, f, w = rng.normal(size=(3, 8))
    du, df, _ = F.fft_conv_grad(u, f, w)
    du_n, df_n, _ = _fd_conv_grads(u, f, 0.0, w)
    assert rel(du, du_n) <= 1e-7 and rel(df, df_n) <= 1e-7


@pytest.mark.parametrize("backend", ["radix", "numpy", "block"])
def test_conv_grad_50_random_triples(backend):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 65))
        u, f, dy = rng.normal(size=(3, n))
        D = rng.normal()
        L = max(4, F.next_pow2(2 * n))
        plan = F.make_block_plan(L, (2, L // 2)) if backend == "block" else None
        got = F.fft_conv_grad(u, f, dy, D=D, backend=backend, plan=plan)
        want = _fd_conv_grads(u, f, D, dy)
        worst = max(worst, rel(got[0], want[0]), rel(got[1], want[1]), abs(got[2] - want[2]) / abs(want[2]))
    assert worst <= 1e-7


def test_conv_grad_length_mismatch():
    with pytest.raises(ValueError):
        F.fft_conv_grad(np.ones(4), np.ones(4), np.ones(3))
