"""Wall-clock and FLOP scaling of the sequence-mixing primitives.

Each algorithm is first checked against a quadratic oracle at the smallest
length, then timed (median over repeats, after warmup, with plan
construction outside the timed region).  Log-log slopes of time against N
summarise the scaling.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import fft as _fft
from .numcore.rng import stream
from .ssm import kernel, s4d_init
from .statepass import precompute_chunk_plan, state_passing_apply, state_passing_flops

ALGORITHMS = ("naive_conv", "fftconv", "block_fftconv", "state_passing", "attention_forward")
CSV_COLUMNS = ("algorithm", "N", "batch", "d", "median_ms", "flops")
ATTN_BLOCK = 512


def _default_lens():
    return [256 * 2**i for i in range(8)]   # 256 .. 32768


@dataclass
class BenchConfig:
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    seq_lens: list = field(default_factory=_default_lens)
    batch: int = 8
    d: int = 64
    repeats: int = 5
    warmup: int = 1
    seed: int = 0
    chunk: int = 1024          # state-passing chunk length N' (capped at N)
    m: int = 64                # SSM state size
    min_time_s: float = 2e-3   # a timed sample shorter than this is repeated in a loop
    parallel_checks: bool = False

    def __post_init__(self):
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithm(s) {bad}; expected a subset of {ALGORITHMS}")
        if not self.algorithms:
            raise ValueError("no algorithms selected")
        if not self.seq_lens or list(self.seq_lens) != sorted(self.seq_lens):
            raise ValueError("seq_lens must be a non-empty ascending list")
        if min(self.seq_lens) < 2:
            raise ValueError("sequence lengths must be >= 2")
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        if self.batch < 1 or self.d < 1 or self.warmup < 0:
            raise ValueError("batch and d must be positive, warmup non-negative")


@dataclass
class BenchReport:
    config: dict
    version: str
    rows: list          # dicts keyed by CSV_COLUMNS plus "bytes"
    slopes: dict        # algorithm -> log-log slope of time vs N
    flop_slopes: dict
    checks: dict        # algorithm -> max relative error vs the oracle

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["algorithm"], r["N"], r["batch"], r["d"], f"{r['median_ms']:.6f}", r["flops"]])
        return buf.getvalue()

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("slopes")
            d["rows"] = [{k: v for k, v in r.items() if k != "median_ms"} for r in d["rows"]]
        return d


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("HIPPO_THREADS", "1")))
    except ValueError:
        return 1


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# algorithms
# ---------------------------------------------------------------------------

def naive_conv(u, f):
    """Direct O(N^2) causal convolution, one channel at a time."""
    N = u.shape[-1]
    y = np.empty(np.broadcast_shapes(u.shape, f.shape))
    fb = np.broadcast_to(f, y.shape)
    ub = np.broadcast_to(u, y.shape)
    for idx in np.ndindex(y.shape[:-1]):
        y[idx] = np.convolve(ub[idx], fb[idx])[:N]
    return y


@functools.lru_cache(maxsize=4)
def _future_mask(block: int) -> np.ndarray:
    m = np.triu(np.ones((block, block), dtype=bool), k=1)
    m.flags.writeable = False
    return m


def attention_forward(x, W_Q, W_K, W_V, W_O, block: int = ATTN_BLOCK):
    """Single-head causal softmax attention, processed in query blocks so
    memory stays O(block * N)."""
    B, N, d = x.shape
    q, k, v = x @ W_Q, x @ W_K, x @ W_V
    kT = np.ascontiguousarray(k.transpose(0, 2, 1))   # keeps the matmul on BLAS
    out = np.empty_like(q)
    scale = 1.0 / np.sqrt(d)
    future = _future_mask(block)
    for s in range(0, N, block):
        e = min(N, s + block)
        scores = (q[:, s:e] @ kT[:, :, :e]) * scale
        # only the diagonal square can see the future; masked entries are
        # kept out of exp, whose -inf path is several times slower
        fut = future[: e - s, : e - s]
        past, diag = scores[:, :, :s], scores[:, :, s:e]
        np.copyto(diag, -np.inf, where=fut)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(past, out=past)
        np.exp(diag, out=diag, where=~fut)
        np.copyto(diag, 0.0, where=fut)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[:, s:e] = scores @ v[:, :e]
    return out @ W_O


def attention_reference(x, W_Q, W_K, W_V, W_O):
    """Per-position loop over the prefix; the O(N^2 d) definition."""
    B, N, d = x.shape
    q, k, v = x @ W_Q, x @ W_K, x @ W_V
    out = np.empty_like(q)
    for b in range(B):
        for i in range(N):
            s = k[b, : i + 1] @ q[b, i] / np.sqrt(d)
            w = np.exp(s - s.max())
            out[b, i] = (w / w.sum()) @ v[b, : i + 1]
    return out @ W_O


def radix_factors(size: int, r: int = 16) -> tuple:
    """Split a power of two into factors of ``r`` (plus one smaller factor), so
    the block FFT recurses to depth log_r(size) and stays O(N log N)."""
    factors = []
    while size > r:
        factors.append(r)
        size //= r
    if size > 1:
        factors.append(size)
    if len(factors) == 1:
        f = factors[0]
        factors = [2, f // 2]
    return tuple(factors)


def attention_flops(N: int, d: int) -> int:
    return 4 * N * d * d + N * (N + 1) * d


class _Case:
    """Inputs, plans and the callable for one (algorithm, N) cell."""

    def __init__(self, algo: str, N: int, cfg: BenchConfig):
        rng = stream(cfg.seed, "bench")
        B, d = cfg.batch, cfg.d
        self.algo, self.N = algo, N
        if algo == "attention_forward":
            self.x = rng.normal(size=(B, N, d))
            self.W = [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]
            self.flops = B * attention_flops(N, d)
            self.bytes = 8 * B * (4 * N * d + min(N, ATTN_BLOCK) * N)
            self.run = lambda: attention_forward(self.x, *self.W)
            return
        ssm = s4d_init(cfg.m, seed=cfg.seed, batch=(d,))
        self.u = rng.normal(size=(B, d, N))
        self.f = kernel(ssm, N)
        self.bytes = 8 * B * d * N * 2
        if algo == "naive_conv":
            self.flops = B * d * N * (N + 1) // 2
            self.run = lambda: naive_conv(self.u, self.f)
        elif algo == "fftconv":
            self.flops = B * d * _fft.fft_conv_flops(N)
            self.run = lambda: _fft.fft_conv(self.u, self.f, backend="radix")
        elif algo == "block_fftconv":
            size = _fft.next_pow2(2 * N)
            plan = _fft.make_block_plan(size, radix_factors(size))
            self.flops = B * d * _fft.fft_conv_flops(N, plan)
            self.run = lambda: _fft.fft_conv(self.u, self.f, backend="block", plan=plan)
        else:
            Np = min(N, cfg.chunk)
            # the conv oracle has D = 0, so compare against the SSM with D = 0
            cplan = precompute_chunk_plan(ssm, Np)
            self.flops = B * d * state_passing_flops(N, Np, cfg.m, block=cplan.block_plan is not None)
            self.run = lambda: state_passing_apply(ssm, self.u, Np, plan=cplan)

    def oracle(self):
        if self.algo == "attention_forward":
            return attention_reference(self.x, *self.W)
        return _fft.direct_conv(self.u, self.f)


def _check(case: _Case) -> float:
    got, ref = case.run(), case.oracle()
    return float(np.abs(got - ref).max() / max(1.0, np.abs(ref).max()))


def _time(fn, repeats: int, warmup: int, min_time: float) -> float:
    """Median seconds per call; short calls are looped until ``min_time``."""
    for _ in range(warmup):
        fn()
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        dt = time.perf_counter() - t0
        if dt >= min_time or loops >= 1 << 16:
            break
        loops *= 2
    samples = [dt / loops]
    for _ in range(repeats - 1):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - t0) / loops)
    return float(np.median(samples))


def loglog_slope(N, values) -> float:
    return float(np.polyfit(np.log(np.asarray(N, float)), np.log(np.asarray(values, float)), 1)[0])


def run_bench(cfg: BenchConfig, check_tol: float = 1e-8, progress=None) -> BenchReport:
    small = cfg.seq_lens[0]
    cases = [_Case(a, small, cfg) for a in cfg.algorithms]
    if cfg.parallel_checks and worker_count() > 1:
        with ThreadPoolExecutor(worker_count()) as ex:
            errs = list(ex.map(_check, cases))
    else:
        errs = [_check(c) for c in cases]
    checks = dict(zip(cfg.algorithms, errs))
    failed = {a: e for a, e in checks.items() if not e <= check_tol}
    if failed:
        raise AssertionError(f"benchmark cross-check failed at N={small}: {failed}")
    rows = []
    for algo in cfg.algorithms:
        for N in cfg.seq_lens:
            case = _Case(algo, N, cfg)
            t = _time(case.run, cfg.repeats, cfg.warmup, cfg.min_time_s)
            rows.append({"algorithm": algo, "N": N, "batch": cfg.batch, "d": cfg.d,
                         "median_ms": 1e3 * t, "flops": int(case.flops), "bytes": int(case.bytes)})
            if progress:
                progress(rows[-1])
    slopes, flop_slopes = {}, {}
    for algo in cfg.algorithms:
        rs = [r for r in rows if r["algorithm"] == algo]
        if len(rs) >= 2:
            slopes[algo] = loglog_slope([r["N"] for r in rs], [r["median_ms"] for r in rs])
            flop_slopes[algo] = loglog_slope([r["N"] for r in rs], [r["flops"] for r in rs])
    return BenchReport(config=asdict(cfg), version=version_string(), rows=rows,
                       slopes=slopes, flop_slopes=flop_slopes, checks=checks)


def write_report(report: BenchReport, out: Path) -> None:
    """``out`` gets the CSV; a ``.json`` sibling gets the full report."""
    out = Path(out)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    csv_text = report.to_csv()
    out.with_suffix(".json").write_text(payload)
    out.write_text(csv_text)
