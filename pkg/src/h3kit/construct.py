"""A hand-set H3 layer that solves associative recall over 4 keys and 4
values, and a verifier that runs it through the ordinary forward pass.

Vocabulary: keys k_1..k_4 are ids 0..3, values v_1..v_4 are ids 4..7, and
the embedding is the identity on R^8.  Each head owns one key: Q and K of
head i fire only on k_i, the shift SSM delays K by one step so K_bar fires
on the token right after k_i (its value), V carries a 2-bit code of the value
to every head, and the diagonal SSM (A_bar = 1) accumulates K_bar V^T.  At
the query k_i only head i has a nonzero Q, so its output is a positive
multiple of the code of f(k_i); every other head outputs exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .layers import H3LayerParams, h3_forward
from .numcore.rng import stream
from .ssm import DiagSSM, ShiftSSM
from .synth import Dataset, TaskSpec, gen_assoc_recall

D_MODEL, STATE, HEADS = 8, 2, 4
N_KEYS = 4

W_QK = np.zeros((8, 8))
for _i in range(4):
    W_QK[_i, 2 * _i:2 * _i + 2] = 1.0

W_V = np.zeros((8, 8))
W_V[5] = [0, 1, 0, 1, 0, 1, 0, 1]
W_V[6] = [1, 0, 1, 0, 1, 0, 1, 0]
W_V[7] = 1.0

# value v_j (id 4 + j) -> its 2-bit code as read from one head of W_V
CODES = np.array([W_V[4 + j, :2] for j in range(4)])


class ConstructionFailure(AssertionError):
    """Raised with the offending example attached as ``counterexample``."""

    def __init__(self, message: str, counterexample: dict):
        super().__init__(message)
        self.counterexample = counterexample

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.counterexample, fh, indent=2)


@dataclass
class LambdaConstruction:
    embedding: np.ndarray
    layer: H3LayerParams

    @property
    def head_dim(self) -> int:
        return self.layer.d_h

    def embed(self, tokens) -> np.ndarray:
        return self.embedding[np.asarray(tokens)]


def build_lambda_construction() -> LambdaConstruction:
    d, m, H = D_MODEL, STATE, HEADS
    dh = d // H
    e1 = np.eye(1, m)[0]
    shift = ShiftSSM(C=np.tile([0.0, 1.0], (d, 1)), B=np.tile(e1, (d, 1)), D=0.0)
    # A_bar = 1 on every mode, B_bar = C = e_1, used as is (no conjugate pairing)
    diag = DiagSSM.from_discrete(
        Abar=np.ones((H, m)),
        Bbar=np.tile(e1, (H, 1)),
        C=np.tile(e1, (H, dh * dh, 1)),
        paired=False,
    )
    layer = H3LayerParams(W_Q=W_QK.copy(), W_K=W_QK.copy(), W_V=W_V.copy(), W_O=np.eye(d),
                          H=H, shift=shift, diag=diag, diag_D=np.zeros(H * dh * dh))
    return LambdaConstruction(np.eye(d), layer)


def gen_lambda(seed: int, N: int, n: int = 1) -> Dataset:
    """``n`` sequences of N key/value tokens plus a query (length N + 1)."""
    spec = TaskSpec("associative_recall", seq_len=N, vocab_size=2 * N_KEYS, seed=seed)
    return gen_assoc_recall(spec, n, stream(seed, "verify"))


def decode(head_out: np.ndarray, tol: float = 1e-9) -> int:
    """Value id from a head output: bit b is set iff component b > 0.

    Components are integers in exact arithmetic (the smallest nonzero one is
    d_h), so anything within ``tol`` of zero is FFT round-off and reads as 0.
    """
    bits = (np.asarray(head_out) > tol).astype(int)
    return N_KEYS + 2 * bits[0] + bits[1]


def verify_construction(n_samples: int = 500, seed: int = 0, N: int = 20,
                        atol: float = 1e-9) -> dict:
    """Run the construction on sampled sequences and check every head.

    For query k_i: head i must equal ``d_h * count_i * code(f(k_i))`` and all
    other heads must be zero.  (The factor d_h comes from Q^(i) = [1, ..., 1]
    summing the d_h identical rows of K_bar V^T.)
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    con = build_lambda_construction()
    ds = gen_lambda(seed, N, n_samples)
    heads = h3_forward(con.layer, con.embed(ds.tokens), heads_only=True).data[:, -1]  # (n, H, d_h)
    correct = 0
    worst_inactive = 0.0
    for s in range(n_samples):
        toks = ds.tokens[s]
        q = int(toks[-1])
        count = int((toks[0:-1:2] == q).sum())
        expected = con.head_dim * count * CODES[ds.targets[s] - N_KEYS]
        inactive = np.delete(heads[s], q, axis=0)
        inactive_norm = float(np.abs(inactive).max())
        worst_inactive = max(worst_inactive, inactive_norm)
        trace = {
            "sample": s, "tokens": toks.tolist(), "target": int(ds.targets[s]),
            "query_head": q, "count": count, "expected": expected.tolist(),
            "head_outputs": heads[s].tolist(),
        }
        if inactive_norm > 1e-12:
            raise ConstructionFailure(f"inactive heads nonzero ({inactive_norm:.3e})", trace)
        if not np.allclose(heads[s, q], expected, rtol=0, atol=atol):
            raise ConstructionFailure("active head is not count x code", trace)
        correct += int(decode(heads[s, q]) == ds.targets[s])
    return {
        "n_samples": n_samples,
        "accuracy": correct / n_samples,
        "max_inactive_head_norm": worst_inactive,
    }
