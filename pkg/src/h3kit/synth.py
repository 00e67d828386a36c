"""Synthetic in-context tasks (induction head, associative recall) and the
train / evaluate loop for last-token prediction."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model
from .numcore import AdamW, Tape, ops
from .numcore.rng import stream

log = logging.getLogger(__name__)

TASKS = ("induction_head", "associative_recall")
DEFAULTS = {"induction_head": (30, 20), "associative_recall": (20, 10)}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TaskSpec:
    """``seq_len`` is the full length for induction head and the number of
    key/value tokens (before the query) for associative recall."""

    kind: str = "induction_head"
    seq_len: Optional[int] = None
    vocab_size: Optional[int] = None
    n_train: int = 5000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        n, v = DEFAULTS[self.kind]
        self.seq_len = n if self.seq_len is None else int(self.seq_len)
        self.vocab_size = v if self.vocab_size is None else int(self.vocab_size)
        if self.kind == "induction_head":
            if self.seq_len < 4:
                raise ValueError("induction head needs seq_len >= 4")
            if self.vocab_size < 2:
                raise ValueError("induction head needs at least one ordinary token and the marker")
        else:
            if self.seq_len < 2 or self.seq_len % 2:
                raise ValueError("associative recall needs an even number (>= 2) of key/value tokens")
            if self.vocab_size < 2 or self.vocab_size % 2:
                raise ValueError("associative recall needs an even vocabulary (keys | values)")

    @property
    def marker(self) -> int:
        """Id of the induction-head marker token (the last id)."""
        return self.vocab_size - 1

    @property
    def n_keys(self) -> int:
        return self.vocab_size // 2

    @property
    def total_len(self) -> int:
        return self.seq_len + (1 if self.kind == "associative_recall" else 0)

    def chance(self) -> float:
        """Accuracy of a uniform guess over the possible answers."""
        if self.kind == "induction_head":
            return 1.0 / self.vocab_size
        return 1.0 / (self.vocab_size - self.n_keys)


@dataclass
class Dataset:
    tokens: np.ndarray   # (n, length) int64
    targets: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.targets)

    def dump(self, path) -> None:
        lines = (json.dumps({"tokens": t.tolist(), "target": int(y)})
                 for t, y in zip(self.tokens, self.targets))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        rows = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
        if not rows:
            raise ValueError(f"{path} holds no examples")
        return cls(np.array([r["tokens"] for r in rows], dtype=np.int64),
                   np.array([r["target"] for r in rows], dtype=np.int64))


def gen_induction_head(spec: TaskSpec, n: int, rng: np.random.Generator) -> Dataset:
    """Random ordinary tokens, one marker at a uniform position in
    [1, N-3], the answer right after it, and a final marker."""
    N, mk = spec.seq_len, spec.marker
    toks = rng.integers(0, mk, size=(n, N))
    pos = rng.integers(1, N - 2, size=n)
    rows = np.arange(n)
    toks[rows, pos] = mk
    toks[:, -1] = mk
    return Dataset(toks, toks[rows, pos + 1].copy())


def gen_assoc_recall(spec: TaskSpec, n: int, rng: np.random.Generator) -> Dataset:
    """Strict key/value alternation with a per-example random map from keys
    (ids < n_keys) to values (ids >= n_keys), then a previously seen key."""
    pairs, K = spec.seq_len // 2, spec.n_keys
    V = spec.vocab_size - K
    keys = rng.integers(0, K, size=(n, pairs))
    fmap = K + rng.integers(0, V, size=(n, K))
    vals = np.take_along_axis(fmap, keys, axis=1)
    query = np.take_along_axis(keys, rng.integers(0, pairs, size=(n, 1)), axis=1)
    toks = np.empty((n, spec.seq_len + 1), dtype=np.int64)
    toks[:, 0:-1:2] = keys
    toks[:, 1:-1:2] = vals
    toks[:, -1] = query[:, 0]
    return Dataset(toks, np.take_along_axis(fmap, query, axis=1)[:, 0])


def generate(spec: TaskSpec, split: str = "train", n: Optional[int] = None) -> Dataset:
    """Deterministic split of ``spec``; train and test use separate streams."""
    if split not in ("train", "test"):
        raise ValueError(split)
    n = (spec.n_train if split == "train" else spec.n_test) if n is None else n
    rng = stream(spec.seed, f"data-{split}")
    gen = gen_induction_head if spec.kind == "induction_head" else gen_assoc_recall
    return gen(spec, n, rng)


def check_rule(spec: TaskSpec, ds: Dataset) -> np.ndarray:
    """Boolean mask of examples whose target follows the task rule."""
    t = ds.tokens
    if spec.kind == "induction_head":
        mk = spec.marker
        ok = (t[:, -1] == mk) & ((t[:, :-1] == mk).sum(axis=1) == 1)
        first = np.argmax(t == mk, axis=1)
        return ok & (first <= spec.seq_len - 3) & (t[np.arange(len(t)), first + 1] == ds.targets)
    K = spec.n_keys
    keys, vals, q = t[:, 0:-1:2], t[:, 1:-1:2], t[:, -1]
    ok = (keys < K).all(axis=1) & (vals >= K).all(axis=1) & (q < K)
    for i in range(len(t)):
        seen = {}
        for k, v in zip(keys[i], vals[i]):
            if seen.setdefault(k, v) != v:
                ok[i] = False
        ok[i] &= seen.get(q[i]) == ds.targets[i]
    return ok


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    schedule: str = "constant"   # or "cosine"
    seed: int = 0

    def lr_at(self, step: int, total: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "cosine":
            t = (step - self.warmup_steps) / max(1, total - self.warmup_steps)
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * t))
        return self.lr


@dataclass
class TrainReport:
    config: dict
    per_epoch_loss: list
    test_accuracy: float
    seed: int
    wall_time_s: float
    eval_lengths: dict = field(default_factory=dict)

    def to_json(self, timing: bool = True) -> str:
        d = asdict(self)
        if not timing:
            d.pop("wall_time_s")
        return json.dumps(d, indent=2, sort_keys=True)


def loss_and_grads(model: Model, tokens, targets, dropout_rng=None):
    tape = Tape()
    logits, P = model.forward(tokens, tape, dropout_rng=dropout_rng, last_only=True)
    loss = ops.cross_entropy(logits, np.asarray(targets)[:, None])
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[t] for k, t in P.items()}


def train(model: Model, train_set: Dataset, test_set: Optional[Dataset] = None,
          cfg: Optional[TrainConfig] = None, progress=None) -> TrainReport:
    """Minibatch AdamW on the final-token cross entropy."""
    from .model import decays

    cfg = cfg or TrainConfig()
    opt = AdamW(model.params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps,
                weight_decay=cfg.weight_decay, decay={k for k in model.params if decays(k)})
    shuffle = stream(cfg.seed, "shuffle")
    drop = stream(cfg.seed, "dropout")
    n = len(train_set)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    losses = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        acc = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = loss_and_grads(model, train_set.tokens[idx], train_set.targets[idx], drop)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            opt.step(grads, lr=cfg.lr_at(step, total))
            acc += loss * len(idx)
            step += 1
        losses.append(acc / n)
        if progress:
            progress(epoch, losses[-1])
    test_acc = eval_last_token(model, test_set) if test_set is not None else float("nan")
    return TrainReport(
        config={"model": model.config.to_dict(), "train": asdict(cfg)},
        per_epoch_loss=losses,
        test_accuracy=test_acc,
        seed=cfg.seed,
        wall_time_s=time.perf_counter() - t0,
    )


def eval_last_token(model, ds: Dataset, batch_size: int = 250) -> float:
    """Fraction of examples whose final-position argmax equals the target.

    ``model`` is anything with ``predict_last(tokens) -> ids``.
    """
    hits = 0
    for s in range(0, len(ds), batch_size):
        pred = model.predict_last(ds.tokens[s:s + batch_size])
        hits += int((np.asarray(pred) == ds.targets[s:s + batch_size]).sum())
    return hits / len(ds)


def run_experiment(task: str, layer: str, seed: int = 0, epochs: int = 200,
                   eval_lens=(), spec_overrides: Optional[dict] = None,
                   model_overrides: Optional[dict] = None, train_overrides: Optional[dict] = None,
                   progress=None):
    """Generate data, build, train and evaluate one model; returns (report, model).

    ``eval_lens`` lists extra sequence lengths to test on after training
    (fresh test sets from the same seed); their accuracies land in
    ``report.eval_lengths``.
    """
    from .model import ModelConfig, build_model

    spec = TaskSpec(task, seed=seed, **(spec_overrides or {}))
    train_set, test_set = generate(spec, "train"), generate(spec, "test")
    mkw = {"layer_kind": layer, "vocab": spec.vocab_size, "max_len": spec.total_len}
    mkw.update(model_overrides or {})
    model = build_model(ModelConfig(**mkw), seed)
    tcfg = TrainConfig(epochs=epochs, seed=seed, **(train_overrides or {}))
    report = train(model, train_set, test_set, tcfg, progress=progress)
    report.config["task"] = asdict(spec)
    for n in eval_lens:
        longer = TaskSpec(task, seq_len=n, vocab_size=spec.vocab_size, n_test=spec.n_test, seed=seed)
        report.eval_lengths[str(n)] = eval_last_token(model, generate(longer, "test"))
    return report, model
