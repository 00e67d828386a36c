"""Quick oracle checks behind ``h3kit selftest``."""

from __future__ import annotations

import numpy as np

from . import fft as _fft
from .construct import verify_construction
from .numcore import Tape, check_gradients, ops
from .numcore.rng import stream
from .ssm import ShiftSSM, kernel, s4d_init, ssm_apply_conv, ssm_apply_recurrent
from .statepass import state_passing_apply


def _fft_checks(rng):
    x = rng.normal(size=64) + 1j * rng.normal(size=64)
    err = np.abs(_fft.fft(x) - _fft.dft_direct(x)).max()
    for N, fac in ((16, (4, 4)), (512, (8, 8, 8))):
        y = rng.normal(size=N) + 1j * rng.normal(size=N)
        ref = _fft.dft_direct(y)
        got = _fft.block_fft(y, _fft.make_block_plan(N, fac))
        err = max(err, np.abs(got - ref).max() / np.abs(ref).max())
    return err, 1e-9


def _conv_checks(rng):
    u, f = rng.normal(size=(3, 33)), rng.normal(size=(3, 33))
    ref = _fft.direct_conv(u, f)
    return max(np.abs(_fft.fft_conv(u, f, backend=b) - ref).max() for b in ("radix", "numpy")), 1e-10


def _duality(rng, seed):
    diag = s4d_init(8, seed=seed, batch=(3,))
    shift = ShiftSSM(C=rng.normal(size=(3, 5)), B=rng.normal(size=(3, 5)), D=rng.normal(size=3))
    u = rng.normal(size=(3, 40))
    err = 0.0
    for s in (diag, shift):
        y_conv = ssm_apply_conv(kernel(s, 40), u, s.D)
        err = max(err, np.abs(y_conv - ssm_apply_recurrent(s, u)[0]).max())
    return err, 1e-9


def _state_passing(rng, seed):
    ssm = s4d_init(8, seed=seed, batch=(2,))
    u = rng.normal(size=(2, 64))
    ref = ssm_apply_conv(kernel(ssm, 64), u, ssm.D)
    return max(np.abs(state_passing_apply(ssm, u, n) - ref).max() for n in (1, 16, 64, 24)), 1e-9


def _gradients(rng):
    params = {"W": rng.normal(size=(4, 4)), "f": rng.normal(size=(6, 4)), "g": rng.normal(size=4) + 1.5}

    def build(tape, P):
        x = tape.constant(stream(1, "verify").normal(size=(2, 6, 4)))
        h = ops.gelu(ops.fftconv(ops.matmul(x, P["W"]), P["f"]))
        h = ops.layernorm(h, P["g"])
        return ops.cross_entropy(h, np.zeros((2, 6), dtype=int))

    errs = check_gradients(build, params)
    return max(errs.values()), 1e-6


def run_selftest(seed: int = 0) -> dict:
    rng = stream(seed, "verify")
    checks = {
        "fft": _fft_checks(rng),
        "fft_conv": _conv_checks(rng),
        "ssm_duality": _duality(rng, seed),
        "state_passing": _state_passing(rng, seed),
        "gradients": _gradients(rng),
    }
    out = {k: {"max_err": float(e), "tol": t, "ok": bool(e <= t)} for k, (e, t) in checks.items()}
    con = verify_construction(50, seed=seed)
    out["construction"] = {"max_err": float(1.0 - con["accuracy"]), "tol": 0.0, "ok": con["accuracy"] == 1.0}
    return {"seed": seed, "ok": all(v["ok"] for v in out.values()), "checks": out}
