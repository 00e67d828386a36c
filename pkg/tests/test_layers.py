import numpy as np
import pytest

from h3kit import layers
from h3kit.fft import direct_conv
from h3kit.layers import H3LayerParams, h3_forward
from h3kit.model import ModelConfig, build_model
from h3kit.numcore import Tape
from h3kit.ssm import DiagSSM, ShiftSSM


def random_h3(d, H, m=4, n=3, seed=0, paired=True):
    rng = np.random.default_rng(seed)
    dh = d // H
    W = [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]
    shift = ShiftSSM(C=rng.normal(size=(d, m)), D=rng.normal(size=d))
    diag = DiagSSM(-rng.uniform(0.1, 1.0, size=(H, n)), rng.normal(size=(H, n)) * 2,
                   rng.uniform(-3, 0, size=H),
                   rng.normal(size=(H, n)) + 1j * rng.normal(size=(H, n)),
                   rng.normal(size=(H, dh * dh, n)) + 1j * rng.normal(size=(H, dh * dh, n)),
                   paired=paired)
    return H3LayerParams(*W, H=H, shift=shift, diag=diag, diag_D=rng.normal(size=H * dh * dh))


def recurrent_h3(p: H3LayerParams, u):
    """The H3 layer one timestep at a time: explicit shift registers and diagonal states."""
    N, d = u.shape
    H, dh = p.H, p.d_h
    Abar, Bbar = p.diag.discretize()                     # (H, n)
    scale = 2.0 if p.diag.paired else 1.0
    C = p.diag.C.reshape(H, dh, dh, -1)
    Dd = p.diag_D.reshape(H, dh, dh)
    reg = np.zeros((d, p.shift.m))
    X = np.zeros((H, dh, dh, Abar.shape[-1]), dtype=complex)
    out = np.zeros((N, d))
    for t in range(N):
        q, k, v = u[t] @ p.W_Q, u[t] @ p.W_K, u[t] @ p.W_V
        reg = np.roll(reg, 1, axis=1)
        reg[:, 0] = 0
        reg += p.shift.B * k[:, None]
        kbar = (p.shift.C * reg).sum(axis=1) + p.shift.D * k
        o = np.zeros(d)
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            kv_in = np.outer(kbar[sl], v[sl])
            X[h] = Abar[h] * X[h] + Bbar[h] * kv_in[..., None]
            KV = scale * (C[h] * X[h]).sum(axis=-1).real + Dd[h] * kv_in
            o[sl] = q[sl] @ KV
        out[t] = o @ p.W_O
    return out


# --- H3 ------------------------------------------------------------------------

def test_h3_zero_query_gives_zero():
    p = random_h3(4, 2)
    p.W_Q = np.zeros((4, 4))
    out = h3_forward(p, np.random.default_rng(1).normal(size=(6, 4))).data
    assert not out.any()


@pytest.mark.parametrize("seed", range(5))
def test_h3_closed_form_dh1(seed):
    d, N = 6, 37
    p = random_h3(d, d, seed=seed)
    u = np.random.default_rng(100 + seed).normal(size=(N, d))
    q, k, v = u @ p.W_Q, u @ p.W_K, u @ p.W_V
    # closed form with explicit direct convolutions (no FFT)
    fs = np.array([np.r_[c, np.zeros(N - len(c))][:N] for c in p.shift.C])
    kbar = direct_conv(fs, k.T).T + p.shift.D * k
    Abar, Bbar = p.diag.discretize()
    fd = 2 * np.einsum("hn,hnk->hk", p.diag.C[:, 0] * Bbar, Abar[..., None] ** np.arange(N)).real
    x = kbar * v
    kv = direct_conv(fd, x.T).T + p.diag_D * x
    want = (q * kv) @ p.W_O
    assert np.abs(h3_forward(p, u).data - want).max() <= 1e-10


@pytest.mark.parametrize("d,H,paired", [(4, 2, True), (4, 4, True), (4, 1, False), (6, 3, True)])
def test_h3_matches_recurrent_reference(d, H, paired):
    p = random_h3(d, H, seed=d + H, paired=paired)
    u = np.random.default_rng(7).normal(size=(6, d))
    assert np.abs(h3_forward(p, u).data - recurrent_h3(p, u)).max() <= 1e-9


def test_h3_learned_shift_B_recurrent():
    p = random_h3(4, 2, seed=3)
    rng = np.random.default_rng(4)
    p.shift = ShiftSSM(C=p.shift.C, B=rng.normal(size=(4, 4)), D=p.shift.D)
    u = rng.normal(size=(9, 4))
    assert np.abs(h3_forward(p, u).data - recurrent_h3(p, u)).max() <= 1e-9


@pytest.mark.parametrize("H", [1, 2, 4, 8])
def test_h3_output_shape_for_every_head_count(H):
    p = random_h3(8, H)
    u = np.random.default_rng(0).normal(size=(3, 10, 8))
    assert h3_forward(p, u).shape == (3, 10, 8)
    assert h3_forward(p, u, heads_only=True).shape == (3, 10, H, 8 // H)


def test_h3_rejects_bad_heads_and_width():
    with pytest.raises(ValueError):
        random_h3(6, 4)
    with pytest.raises(ValueError):
        h3_forward(random_h3(4, 2), np.ones((3, 5)))


def test_h3_batch_equals_loop():
    p = random_h3(4, 2)
    u = np.random.default_rng(2).normal(size=(3, 8, 4))
    batched = h3_forward(p, u).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], h3_forward(p, u[b]).data, atol=1e-12)


# --- attention -----------------------------------------------------------------

def attn_params(d, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(size=(d, d)) * scale / np.sqrt(d) for k in ("W_Q", "W_K", "W_V", "W_O")}


def run(mixer, p, u, *args):
    tape = Tape(grad=False)
    P = {k: tape.param(v, k) for k, v in p.items()}
    return mixer(P, tape.constant(u), *args).data


def attention_loop(p, u, H):
    N, d = u.shape
    dh = d // H
    q, k, v = u @ p["W_Q"], u @ p["W_K"], u @ p["W_V"]
    o = np.zeros((N, d))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(N):
            s = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(i + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            o[i, sl] = sum(w[j] * v[j, sl] for j in range(i + 1))
    return o @ p["W_O"]


def test_attention_single_position():
    p = attn_params(8)
    u = np.random.default_rng(1).normal(size=(1, 1, 8))
    np.testing.assert_allclose(run(layers.attention_mixer, p, u, 2)[0, 0], u[0, 0] @ p["W_V"] @ p["W_O"], atol=1e-12)


def test_attention_uniform_scores_average_prefix():
    p = attn_params(4)
    p["W_Q"] = np.zeros((4, 4))
    p["W_O"] = np.eye(4)
    u = np.random.default_rng(2).normal(size=(1, 7, 4))
    v = u[0] @ p["W_V"]
    want = np.cumsum(v, axis=0) / np.arange(1, 8)[:, None]
    np.testing.assert_allclose(run(layers.attention_mixer, p, u, 2)[0], want, atol=1e-12)


@pytest.mark.parametrize("H", [1, 2, 4])
def test_attention_vs_loop(H):
    p = attn_params(8, seed=H, scale=2.0)
    u = np.random.default_rng(3).normal(size=(1, 9, 8))
    np.testing.assert_allclose(run(layers.attention_mixer, p, u, H)[0], attention_loop(p, u[0], H), atol=1e-10)


# --- linear attention ----------------------------------------------------------

def phi(x):
    return np.where(x > 0, x + 1.0, np.exp(x))


def linear_attention_double_sum(p, u, H):
    N, d = u.shape
    dh = d // H
    q, k, v = phi(u @ p["W_Q"]), phi(u @ p["W_K"]), u @ p["W_V"]
    o = np.zeros((N, d))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(N):
            w = np.array([q[i, sl] @ k[j, sl] for j in range(i + 1)])
            o[i, sl] = (w[:, None] * v[: i + 1, sl]).sum(axis=0) / w.sum()
    return o @ p["W_O"]


def test_linear_attention_single_position():
    p = attn_params(4)
    p["W_O"] = np.eye(4)
    u = np.random.default_rng(4).normal(size=(1, 1, 4))
    np.testing.assert_allclose(run(layers.linear_attention_mixer, p, u, 2)[0, 0], u[0, 0] @ p["W_V"], atol=1e-12)


@pytest.mark.parametrize("H", [1, 4])
def test_linear_attention_vs_double_sum(H):
    p = attn_params(8, seed=5 + H, scale=2.0)
    u = np.random.default_rng(5).normal(size=(1, 16, 8))
    np.testing.assert_allclose(run(layers.linear_attention_mixer, p, u, H)[0],
                               linear_attention_double_sum(p, u[0], H), atol=1e-10)


def test_linear_attention_equal_keys_average():
    p = attn_params(4)
    p["W_K"] = np.zeros((4, 4))
    p["W_O"] = np.eye(4)
    u = np.random.default_rng(6).normal(size=(1, 10, 4))
    v = u[0] @ p["W_V"]
    want = np.cumsum(v, axis=0) / np.arange(1, 11)[:, None]
    np.testing.assert_allclose(run(layers.linear_attention_mixer, p, u, 2)[0], want, atol=1e-12)


# --- all mixers ----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["h3", "attention", "s4d", "linear-attention"])
def test_causality(kind):
    model = build_model(ModelConfig(layer_kind=kind, n_layers=2, d=16, m=8, mlp_dim=32, vocab=7, max_len=12), seed=1)
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 7, size=(1, 12))
    base = model.logits(tokens)
    for t in (0, 5, 11):
        probe = tokens.copy()
        probe[0, t] = (probe[0, t] + 1) % 7
        diff = np.abs(model.logits(probe) - base).max(axis=-1)[0]
        # FFT convolutions leak only roundoff into earlier positions
        assert np.all(diff[:t] <= 1e-12), (kind, t)
        assert diff[t] > 1e-6


@pytest.mark.parametrize("kind", ["h3", "attention", "linear-attention"])
@pytest.mark.parametrize("H", [1, 2, 4, 8])
def test_mixer_output_shape(kind, H):
    model = build_model(ModelConfig(layer_kind=kind, n_layers=1, d=8, H=H, m=4, vocab=5, max_len=9))
    assert model.logits(np.zeros((2, 9), dtype=int)).shape == (2, 9, 5)
