"""Pre-norm language models built from the mixers in :mod:`h3kit.layers`.

Layout: token embedding (+ learned positions for attention models) ->
embedding dropout -> n x [x + mixer(LN(x)); x + MLP(LN(x))] -> LN -> untied
output head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fft as _fft
from . import layers
from .numcore import ops
from .numcore.rng import stream
from .numcore.tape import Tape, Tensor

LAYER_KINDS = ("h3", "attention", "s4d", "linear-attention")
CHECKPOINT_FORMAT = "h3kit-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class UnsupportedLength(ValueError):
    pass


@dataclass
class ModelConfig:
    """Model hyperparameters.

    ``layer_kind`` is one kind for every block or a list with one per block.
    ``H`` defaults per kind: d heads (d_h = 1) for H3, d/8 for attention.
    """

    layer_kind: str | list = "h3"
    n_layers: int = 2
    d: int = 32
    H: Optional[int] = None
    m: int = 64
    mlp_dim: int = 128
    vocab: int = 20
    max_len: int = 64
    embed_dropout: float = 0.1
    resid_dropout: float = 0.0
    shift_learn_B: bool = False
    pos_embedding: Optional[bool] = None

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        kinds = self.kinds
        bad = [k for k in kinds if k not in LAYER_KINDS]
        if bad:
            raise ConfigError(f"unknown layer kind(s) {bad}; expected one of {LAYER_KINDS}")
        if len(kinds) != self.n_layers:
            raise ConfigError(f"{len(kinds)} layer kinds given for {self.n_layers} layers")
        for kind in set(kinds):
            if self.d % self.heads(kind):
                raise ConfigError(f"d={self.d} is not divisible by H={self.heads(kind)} ({kind})")
        if self.m < 2 or self.m % 2:
            raise ConfigError("SSM state size m must be even and >= 2")

    @property
    def kinds(self) -> list:
        if isinstance(self.layer_kind, str):
            return [self.layer_kind] * self.n_layers
        return list(self.layer_kind)

    def heads(self, kind: str) -> int:
        if self.H is not None:
            return self.H
        if kind == "h3":
            return self.d
        return max(1, self.d // 8)

    @property
    def uses_positions(self) -> bool:
        if self.pos_embedding is not None:
            return self.pos_embedding
        return any(k in ("attention", "linear-attention") for k in self.kinds)

    def to_dict(self) -> dict:
        return asdict(self)


def _mixer_shapes(cfg: ModelConfig, kind: str) -> dict:
    d, n = cfg.d, cfg.m // 2
    if kind in ("attention", "linear-attention"):
        return {k: ("dense", (d, d)) for k in ("W_Q", "W_K", "W_V", "W_O")}
    if kind == "s4d":
        return {
            "diag_log_a_re": ("s4d_log_a_re", (d, n)), "diag_a_im": ("s4d_a_im", (d, n)),
            "diag_log_dt": ("log_dt", (d,)),
            "diag_B_re": ("ones", (d, n)), "diag_B_im": ("zeros", (d, n)),
            "diag_C_re": ("cnormal", (d, 1, n)), "diag_C_im": ("cnormal", (d, 1, n)),
            "diag_D": ("normal", (d,)),
            "W_O": ("dense", (d, d)), "b_O": ("zeros", (d,)),
        }
    H = cfg.heads("h3")
    c = (d // H) ** 2
    shapes = {k: ("dense", (d, d)) for k in ("W_Q", "W_K", "W_V", "W_O")}
    shapes.update({
        "shift_C": ("normal", (d, cfg.m)), "shift_D": ("normal", (d,)),
        "diag_log_a_re": ("s4d_log_a_re", (H, n)), "diag_a_im": ("s4d_a_im", (H, n)),
        "diag_log_dt": ("log_dt", (H,)),
        "diag_B_re": ("ones", (H, n)), "diag_B_im": ("zeros", (H, n)),
        "diag_C_re": ("cnormal", (H, c, n)), "diag_C_im": ("cnormal", (H, c, n)),
        "diag_D": ("normal", (H * c,)),
    })
    if cfg.shift_learn_B:
        shapes["shift_B"] = ("e1", (d, cfg.m))
    return shapes


def param_shapes(cfg: ModelConfig) -> dict:
    """name -> (initialiser, shape), in a fixed order."""
    d = cfg.d
    out = {"embed.tok": ("dense", (cfg.vocab, d))}
    if cfg.uses_positions:
        out["embed.pos"] = ("dense", (cfg.max_len, d))
    for i, kind in enumerate(cfg.kinds):
        pre = f"layers.{i}."
        out[pre + "norm1.g"] = ("ones", (d,))
        out[pre + "norm1.b"] = ("zeros", (d,))
        for k, v in _mixer_shapes(cfg, kind).items():
            out[pre + "mixer." + k] = v
        out[pre + "norm2.g"] = ("ones", (d,))
        out[pre + "norm2.b"] = ("zeros", (d,))
        out[pre + "mlp.W1"] = ("dense", (d, cfg.mlp_dim))
        out[pre + "mlp.b1"] = ("zeros", (cfg.mlp_dim,))
        out[pre + "mlp.W2"] = ("dense", (cfg.mlp_dim, d))
        out[pre + "mlp.b2"] = ("zeros", (d,))
    out["norm_f.g"] = ("ones", (d,))
    out["norm_f.b"] = ("zeros", (d,))
    out["head.W"] = ("dense", (d, cfg.vocab))
    out["head.b"] = ("zeros", (cfg.vocab,))
    return out


def _init(kind: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if kind == "dense":
        return rng.normal(0.0, INIT_STD, size=shape)
    if kind == "normal":
        return rng.normal(size=shape)
    if kind == "cnormal":
        return rng.normal(size=shape) / math.sqrt(2.0)
    if kind == "ones":
        return np.ones(shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "e1":
        out = np.zeros(shape)
        out[..., 0] = 1.0
        return out
    if kind == "s4d_log_a_re":
        return np.full(shape, math.log(0.5))
    if kind == "s4d_a_im":
        return np.broadcast_to(math.pi * np.arange(shape[-1]), shape).copy()
    if kind == "log_dt":
        return rng.uniform(math.log(1e-3), math.log(1e-1), size=shape)
    raise ValueError(kind)


def decays(name: str) -> bool:
    """Weight decay applies to projection matrices and embeddings only."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("W") or name.startswith("embed.")


class Model:
    """Parameters plus the forward pass; parameters are a dict of f64 arrays."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, tokens, tape: Optional[Tape] = None, dropout_rng=None,
                last_only: bool = False):
        """Logits for ``tokens`` of shape (batch, N); returns (logits, leaf tensors)."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        N = tokens.shape[1]
        if cfg.uses_positions and N > cfg.max_len:
            raise UnsupportedLength(
                f"sequence length {N} exceeds the positional table ({cfg.max_len}); "
                "attention models cannot run past max_len"
            )
        tape = Tape(grad=False) if tape is None else tape
        P = {k: tape.param(v, k) for k, v in self.params.items()}
        x = ops.embedding(P["embed.tok"], tokens)
        if cfg.uses_positions:
            pos = ops.embedding(P["embed.pos"], np.arange(N))
            x = ops.add(x, pos)
        x = ops.dropout(x, cfg.embed_dropout, dropout_rng)
        for i, kind in enumerate(cfg.kinds):
            pre = f"layers.{i}."
            h = ops.layernorm(x, P[pre + "norm1.g"], P[pre + "norm1.b"])
            mp = {k[len(pre) + 6:]: v for k, v in P.items() if k.startswith(pre + "mixer.")}
            h = self._mixer(kind, mp, h)
            x = ops.add(x, ops.dropout(h, cfg.resid_dropout, dropout_rng))
            if last_only and i == cfg.n_layers - 1:
                # the MLP is position-wise, so only the final position is needed
                x = ops.reshape(ops.take(x, N - 1, axis=1), (x.shape[0], 1, cfg.d))
            h = ops.layernorm(x, P[pre + "norm2.g"], P[pre + "norm2.b"])
            h = ops.add(ops.matmul(h, P[pre + "mlp.W1"]), P[pre + "mlp.b1"])
            h = ops.add(ops.matmul(ops.gelu(h), P[pre + "mlp.W2"]), P[pre + "mlp.b2"])
            x = ops.add(x, ops.dropout(h, cfg.resid_dropout, dropout_rng))
        x = ops.layernorm(x, P["norm_f.g"], P["norm_f.b"])
        logits = ops.add(ops.matmul(x, P["head.W"]), P["head.b"])
        return logits, P

    def _mixer(self, kind: str, p: dict, h: Tensor) -> Tensor:
        cfg = self.config
        if kind in ("h3", "s4d"):
            p = dict(p)
            p["diag_a_re"] = ops.neg(ops.exp(p.pop("diag_log_a_re")))
        if kind == "h3":
            return layers.h3_mixer(p, h, cfg.heads(kind))
        if kind == "s4d":
            return layers.s4d_mixer(p, h)
        if kind == "attention":
            return layers.attention_mixer(p, h, cfg.heads(kind))
        return layers.linear_attention_mixer(p, h, cfg.heads(kind))

    def logits(self, tokens) -> np.ndarray:
        return self.forward(tokens)[0].data

    def predict_last(self, tokens) -> np.ndarray:
        logits, _ = self.forward(tokens, last_only=True)
        return logits.data[:, -1, :].argmax(axis=-1)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        """Write a JSON checkpoint: config plus row-major f64 parameter lists."""
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": {
                k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Model":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an h3kit checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        cfg = ModelConfig(**doc["config"])
        params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc["params"].items()
        }
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            raise ValueError("checkpoint parameters do not match its config")
        return cls(cfg, params)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = stream(seed, "init")
    params = {name: _init(kind, shape, rng) for name, (kind, shape) in param_shapes(config).items()}
    return Model(config, params)


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------

def h3_layer_params(d: int, H: int, m: int = 64, seed: int = 0) -> dict:
    """Random H3-mixer parameters keyed as the model stores them."""
    cfg = ModelConfig(layer_kind="h3", n_layers=1, d=d, H=H, m=m)
    rng = stream(seed, "init")
    return {k: _init(kind, shape, rng) for k, (kind, shape) in _mixer_shapes(cfg, "h3").items()}


def h3_complexity(N: int, d: int, H: int, m: int = 64, seed: int = 0):
    """(time_flops, space_elems, counter) of one instrumented H3 forward.

    Kernel generation is excluded: it depends only on parameters and N, not
    on the input.  ``space_elems`` sums the sizes of all intermediate tensors.
    """
    raw = h3_layer_params(d, H, m, seed)
    tape = Tape(grad=False)
    p = {k: tape.param(v, k) for k, v in raw.items()}
    p["diag_a_re"] = ops.neg(ops.exp(p.pop("diag_log_a_re")))
    shift_f, diag_f = layers.h3_kernels(p, N, H)
    u = tape.constant(stream(seed, "data").normal(size=(1, N, d)))
    with ops.count_flops() as counter:
        layers.h3_core(u, p["W_Q"], p["W_K"], p["W_V"], p["W_O"], shift_f, p["shift_D"],
                       diag_f, p["diag_D"], H)
    return counter.total, counter.elements, counter


def h3_complexity_formula(N: int, d: int, H: int) -> dict:
    """Hand count of the same forward, category by category."""
    dh = d // H
    conv = _fft.fft_conv_flops(N)
    matmul = 4 * N * d * d
    if dh > 1:
        matmul += 2 * N * H * dh * dh
    fftw = (d + H * dh * dh) * conv
    # shift: D*k, add; diag: D*kv, add; dh == 1: two elementwise products
    elementwise = 2 * N * d + 2 * N * H * dh * dh
    if dh == 1:
        elementwise += 2 * N * d   # K_bar * V and Q * KV
    return {"matmul": matmul, "fft": fftw, "elementwise": elementwise}
