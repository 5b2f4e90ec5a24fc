"""Transformer workload arithmetic: kernels, chunk plans, KV bytes, traces.

Per-layer work is decomposed into four kernel groups (QKV projection,
attention, output projection, MLP up-gate + down) with FLOP and byte
counts in the style of analytical LLM cost models.  GEMMs use a
128x128 output-tile grid rule and attention one block per (head,
128-token query tile); both are configurable, since real kernels vary.
Element-wise and normalization traffic is folded into the adjacent
groups' byte counts rather than modeled as separate kernels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .perf_model import KernelDesc


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape; MoE models are approximated by `activated_fraction`."""

    name: str
    num_layers: int
    hidden: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    intermediate: int
    dtype_bytes: int = 2
    activated_fraction: float = 1.0

    def __post_init__(self) -> None:
        counts = (self.num_layers, self.hidden, self.num_heads, self.num_kv_heads,
                  self.head_dim, self.intermediate, self.dtype_bytes)
        if any(c < 1 for c in counts):
            raise InvalidArgumentError("all model counts must be >= 1")
        if self.hidden != self.num_heads * self.head_dim:
            raise InvalidArgumentError(
                f"hidden ({self.hidden}) != num_heads*head_dim "
                f"({self.num_heads}*{self.head_dim})")
        if self.num_heads % self.num_kv_heads != 0:
            raise InvalidArgumentError("num_kv_heads must divide num_heads")
        if not 0 < self.activated_fraction <= 1:
            raise InvalidArgumentError("activated_fraction must be in (0, 1]")

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def qkv_out_dim(self) -> int:
        return self.hidden + 2 * self.kv_dim

    def weight_bytes(self) -> int:
        """Resident weight footprint (attention dense, MLP fully materialized)."""
        per_layer = (self.hidden * self.qkv_out_dim + self.hidden * self.hidden
                     + 3 * self.hidden * self.intermediate)
        return per_layer * self.num_layers * self.dtype_bytes


MODEL_PRESETS = {
    "llama3-8b": ModelSpec("llama3-8b", num_layers=32, hidden=4096, num_heads=32,
                           num_kv_heads=8, head_dim=128, intermediate=14336),
    "llama3-70b": ModelSpec("llama3-70b", num_layers=80, hidden=8192, num_heads=64,
                            num_kv_heads=8, head_dim=128, intermediate=28672),
    "qwen3-32b": ModelSpec("qwen3-32b", num_layers=64, hidden=5120, num_heads=64,
                           num_kv_heads=8, head_dim=80, intermediate=25600),
    # Sparse-MoE approximation: per-token compute is a fraction of the dense shape.
    "moe-a22b": ModelSpec("moe-a22b", num_layers=94, hidden=4096, num_heads=64,
                          num_kv_heads=4, head_dim=64, intermediate=12288,
                          activated_fraction=0.1),
}


@dataclass(frozen=True)
class KernelTiling:
    """Grid-shape rules; defaults reproduce common 128-tile launch behavior."""

    gemm_tile_m: int = 128
    gemm_tile_n: int = 128
    attn_q_tile: int = 128
    blocks_per_sm: int = 1


DEFAULT_TILING = KernelTiling()


@dataclass(frozen=True)
class ChunkPlan:
    n_iters: int
    chunk_sizes: tuple[int, ...]
    reload_events: int
    reprocessed_tokens: int


@dataclass(frozen=True)
class Request:
    id: int
    arrival_s: float
    input_len: int
    output_len: int

    def __post_init__(self) -> None:
        if self.input_len < 1 or self.output_len < 1:
            raise InvalidArgumentError(f"request {self.id}: lengths must be >= 1")
        if self.arrival_s < 0:
            raise InvalidArgumentError(f"request {self.id}: arrival must be >= 0")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def layer_kernels(model: ModelSpec, phase: str, new_tokens: int,
                  ctx_lens: Sequence[int], prior_lens: Sequence[int] | None = None,
                  tiling: KernelTiling = DEFAULT_TILING) -> list[KernelDesc]:
    """Kernel list for one transformer layer of a batched pass.

    prefill: ``ctx_lens`` holds each sequence's new-token count for this pass
    (summing to ``new_tokens``); ``prior_lens`` holds already-cached context
    per sequence (all zeros when absent), whose KV is re-read by attention —
    this is where chunked-prefill reload overhead shows up.

    decode: one token per sequence; ``ctx_lens`` holds attended context
    lengths and ``new_tokens`` must equal the batch size.
    """
    s = model.dtype_bytes
    h = model.hidden
    f = model.activated_fraction
    tm, tn, b = tiling.gemm_tile_m, tiling.gemm_tile_n, tiling.blocks_per_sm

    if phase == "prefill":
        if new_tokens < 1:
            raise InvalidArgumentError("prefill requires new_tokens >= 1")
        if not ctx_lens:
            raise InvalidArgumentError("prefill requires at least one sequence")
        if sum(ctx_lens) != new_tokens:
            raise InvalidArgumentError(
                f"prefill per-sequence tokens {sum(ctx_lens)} != new_tokens {new_tokens}")
        news = [int(t) for t in ctx_lens]
        priors = [0] * len(news) if prior_lens is None else [int(p) for p in prior_lens]
        if len(priors) != len(news):
            raise InvalidArgumentError("prior_lens length mismatch")
        t_total = new_tokens
    elif phase == "decode":
        if not ctx_lens:
            raise InvalidArgumentError("decode requires a non-empty context batch")
        if new_tokens != len(ctx_lens):
            raise InvalidArgumentError("decode processes one token per sequence")
        t_total = len(ctx_lens)
    else:
        raise InvalidArgumentError(f"unknown phase {phase!r}")

    kernels: list[KernelDesc] = []

    # QKV projection; includes the pre-attention norm's read/write traffic.
    qkv_flops = 2.0 * t_total * model.qkv_out_dim * h
    qkv_bytes = (h * model.qkv_out_dim * s
                 + t_total * h * s + t_total * model.qkv_out_dim * s
                 + 2 * t_total * h * s)
    kernels.append(KernelDesc("qkv", qkv_flops, qkv_bytes,
                              _ceil_div(t_total, tm) * _ceil_div(model.qkv_out_dim, tn), b))

    # Attention: per-sequence FLOPs/bytes summed into one batched kernel.
    attn_flops = 0.0
    attn_bytes = 0.0
    attn_blocks = 0
    if phase == "prefill":
        for t_i, p_i in zip(news, priors):
            # Full attention over the cached prefix, causal over the new span.
            attn_flops += 4.0 * t_i * p_i * h + 2.0 * t_i * t_i * h
            kv_read = (p_i + t_i) * 2 * model.kv_dim * s
            kv_write = t_i * 2 * model.kv_dim * s
            attn_bytes += kv_read + kv_write + 2 * t_i * h * s
            attn_blocks += model.num_heads * _ceil_div(t_i, tiling.attn_q_tile)
    else:
        for c_i in ctx_lens:
            attn_flops += 4.0 * c_i * h
            attn_bytes += c_i * 2 * model.kv_dim * s + 2 * model.kv_dim * s + 2 * h * s
            attn_blocks += model.num_heads
    kernels.append(KernelDesc("attn", attn_flops, attn_bytes, attn_blocks, b))

    kernels.append(KernelDesc(
        "o_proj", 2.0 * t_total * h * h,
        h * h * s + 2 * t_total * h * s,
        _ceil_div(t_total, tm) * _ceil_div(h, tn), b))

    # MLP: up-gate then down; weights and intermediate activations scale with
    # the activated expert fraction, token-side activations do not.
    inter = model.intermediate
    up_flops = 4.0 * t_total * inter * h * f
    up_bytes = (2 * h * inter * s * f
                + t_total * h * s + 2 * t_total * inter * s * f
                + 2 * t_total * h * s)
    kernels.append(KernelDesc("mlp_up_gate", up_flops, up_bytes,
                              _ceil_div(t_total, tm) * _ceil_div(2 * inter, tn), b))
    down_flops = 2.0 * t_total * h * inter * f
    down_bytes = (h * inter * s * f
                  + t_total * inter * s * f + t_total * h * s)
    kernels.append(KernelDesc("mlp_down", down_flops, down_bytes,
                              _ceil_div(t_total, tm) * _ceil_div(h, tn), b))
    return kernels


def hybrid_kernels(model: ModelSpec, chunks: Sequence[tuple[int, int]],
                   decode_ctx_lens: Sequence[int],
                   tiling: KernelTiling = DEFAULT_TILING) -> list[KernelDesc]:
    """Kernels for one lockstep hybrid-batch iteration (one layer).

    ``chunks`` holds (new_tokens, prior_context) per co-batched prefill
    sequence; decode sequences contribute one token each.  Linear kernels see
    the concatenated token stream, attention keeps per-sequence accounting.
    """
    chunk_tokens = sum(t for t, _ in chunks)
    dbs = len(decode_ctx_lens)
    total = chunk_tokens + dbs
    if total < 1:
        raise InvalidArgumentError("hybrid batch is empty")

    merged: dict[str, KernelDesc] = {}

    def _absorb(parts: list[KernelDesc]) -> None:
        for k in parts:
            prev = merged.get(k.name)
            if prev is None:
                merged[k.name] = k
            else:
                merged[k.name] = KernelDesc(k.name, prev.flops + k.flops,
                                            prev.mem_bytes + k.mem_bytes,
                                            prev.grid_blocks + k.grid_blocks,
                                            k.blocks_per_sm)
    if chunk_tokens > 0:
        _absorb(layer_kernels(model, "prefill", chunk_tokens,
                              [t for t, _ in chunks], [p for _, p in chunks], tiling))
    if dbs > 0:
        _absorb(layer_kernels(model, "decode", dbs, list(decode_ctx_lens), tiling=tiling))

    # Re-derive linear-kernel grids from the fused token count: a hybrid batch
    # launches one GEMM over the concatenation, not one per phase.
    out = []
    for name, k in merged.items():
        if name == "attn":
            out.append(k)
            continue
        n_dim = {"qkv": model.qkv_out_dim, "o_proj": model.hidden,
                 "mlp_up_gate": 2 * model.intermediate, "mlp_down": model.hidden}[name]
        grid = _ceil_div(total, tiling.gemm_tile_m) * _ceil_div(n_dim, tiling.gemm_tile_n)
        out.append(KernelDesc(name, k.flops, k.mem_bytes, grid, k.blocks_per_sm))
    return out


def chunk_plan(sl: int, cs: int, ds: int) -> ChunkPlan:
    """Iteration plan for prefilling ``sl`` tokens under a ``cs`` token budget
    shared with ``ds`` decode tokens.

    Each chunk re-reads every earlier chunk's KV cache, so N chunks cost
    N(N+1)/2 cache passes and re-read ``reprocessed_tokens`` prior tokens.
    """
    if sl < 1:
        raise InvalidArgumentError(f"sl must be >= 1, got {sl}")
    if ds < 0 or cs <= ds:
        raise InvalidArgumentError(
            f"chunk budget cs={cs} must exceed decode share ds={ds}")
    residual = cs - ds
    n = _ceil_div(sl, residual)
    sizes = [residual] * (n - 1) + [sl - residual * (n - 1)]
    reprocessed = sum(sum(sizes[:i]) for i in range(n))
    return ChunkPlan(n_iters=n, chunk_sizes=tuple(sizes),
                     reload_events=n * (n + 1) // 2,
                     reprocessed_tokens=reprocessed)


def kv_bytes(model: ModelSpec, tokens: int) -> int:
    """KV-cache footprint of ``tokens`` cached positions across all layers."""
    if tokens < 0:
        raise InvalidArgumentError(f"tokens must be >= 0, got {tokens}")
    return 2 * model.num_layers * tokens * model.kv_dim * model.dtype_bytes


def batch_intensity(kernels: Sequence[KernelDesc]) -> float:
    """Aggregate arithmetic intensity (FLOP/byte) of a kernel batch."""
    if not kernels:
        raise InvalidArgumentError("batch_intensity requires a non-empty batch")
    return sum(k.flops for k in kernels) / sum(k.mem_bytes for k in kernels)


@dataclass(frozen=True)
class LengthDist:
    """Sampler spec for one length axis: fixed | uniform | lognormal | empirical."""

    kind: str
    value: int = 0
    lo: int = 1
    hi: int = 1 << 20
    median: float = 0.0
    sigma: float = 0.0
    bins: tuple[tuple[int, float], ...] = ()

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        if self.kind == "lognormal":
            raw = rng.lognormal(mean=math.log(self.median), sigma=self.sigma)
            return int(min(self.hi, max(self.lo, round(raw))))
        if self.kind == "empirical":
            lens = [l for l, _ in self.bins]
            probs = np.array([p for _, p in self.bins], dtype=float)
            probs = probs / probs.sum()
            return int(rng.choice(lens, p=probs))
        raise InvalidArgumentError(f"unknown length distribution {self.kind!r}")

    @classmethod
    def from_dict(cls, spec: dict) -> "LengthDist":
        kind = spec.get("kind")
        if kind == "fixed":
            return cls("fixed", value=int(spec["value"]))
        if kind == "uniform":
            return cls("uniform", lo=int(spec["lo"]), hi=int(spec["hi"]))
        if kind == "lognormal":
            return cls("lognormal", median=float(spec["median"]), sigma=float(spec["sigma"]),
                       lo=int(spec.get("lo", 1)), hi=int(spec.get("hi", 1 << 20)))
        if kind == "empirical":
            return cls("empirical", bins=load_histogram(spec["path"]))
        raise InvalidArgumentError(f"unknown length distribution {kind!r}")


def load_histogram(path) -> tuple[tuple[int, float], ...]:
    """Read an empirical length histogram CSV with columns `len,probability`."""
    bins: list[tuple[int, float]] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bins.append((int(row["len"]), float(row["probability"])))
    if not bins:
        raise InvalidArgumentError(f"empty histogram file {path}")
    return tuple(bins)


# Workload presets loosely shaped like public serving datasets: conversational
# (balanced), code completion (long in, short out), long-document summarization.
TRACE_PRESETS: dict[str, tuple[LengthDist, LengthDist]] = {
    "sharegpt-like": (LengthDist("lognormal", median=512, sigma=1.0, lo=16, hi=8192),
                      LengthDist("lognormal", median=256, sigma=0.8, lo=16, hi=2048)),
    "code-like": (LengthDist("lognormal", median=3000, sigma=0.9, lo=64, hi=32768),
                  LengthDist("lognormal", median=40, sigma=0.6, lo=4, hi=512)),
    "summary-like": (LengthDist("lognormal", median=6000, sigma=0.7, lo=256, hi=32768),
                     LengthDist("lognormal", median=150, sigma=0.5, lo=16, hi=1024)),
}


def gen_poisson_trace(rate: float, duration_s: float,
                      input_dist: LengthDist, output_dist: LengthDist,
                      seed: int) -> list[Request]:
    """Poisson arrivals over ``duration_s`` with sampled input/output lengths.

    The same (rate, duration, distributions, seed) always yields an identical,
    arrival-sorted trace; rate 0 yields an empty one.
    """
    if rate < 0 or duration_s <= 0:
        raise InvalidArgumentError("rate must be >= 0 and duration > 0")
    rng = np.random.default_rng(seed)
    requests: list[Request] = []
    if rate == 0:
        return requests
    t = 0.0
    rid = 0
    while True:
        t += float(rng.exponential(1.0 / rate))
        if t >= duration_s:
            break
        requests.append(Request(id=rid, arrival_s=t,
                                input_len=input_dist.sample(rng),
                                output_len=output_dist.sample(rng)))
        rid += 1
    return requests


def save_trace(requests: Sequence[Request], path) -> None:
    with open(path, "w") as fh:
        for r in requests:
            fh.write(json.dumps({"id": r.id, "arrival_s": r.arrival_s,
                                 "input_len": r.input_len, "output_len": r.output_len}) + "\n")


def load_trace(path) -> list[Request]:
    requests = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            requests.append(Request(id=int(rec["id"]), arrival_s=float(rec["arrival_s"]),
                                    input_len=int(rec["input_len"]),
                                    output_len=int(rec["output_len"])))
    requests.sort(key=lambda r: (r.arrival_s, r.id))
    return requests
