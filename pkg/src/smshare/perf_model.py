"""Analytical GPU latency model for spatially partitioned execution.

The model answers one question: how long does a batch of transformer
kernels take when it may only use ``n_p`` of the GPU's ``N`` streaming
multiprocessors?  Three layers build on each other:

1. Wave-quantization accounting (`wave_stats`): grids whose thread-block
   count is not a multiple of ``b * N`` leave a partially filled tail
   wave of idle SMs.
2. An SM-scaling roofline (`srm_latency`): compute peak scales linearly
   with the SM fraction, memory/network bandwidth scales linearly only
   up to inflection SM counts (``n_d``, ``n_w``) and plateaus after.
3. Calibration (`calibrate`, `CalibrationStore`, `estimate_latency`):
   measured/predicted ratios ("alpha") sampled at a few configurations
   are interpolated over (phase, SM count, total tokens), and a
   contention table substitutes the attainable memory bandwidth for the
   decode side while a prefill runs on the remaining SMs.

Everything here is pure arithmetic on plain floats; the hot path
(`estimate_latency`) is deliberately numpy-free so a single invocation
stays in the tens of microseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .errors import InvalidArgumentError

# Clamps applied when extrapolating outside the sampled hull.
ALPHA_MIN = 0.1
ALPHA_MAX = 20.0


@dataclass(frozen=True)
class GpuSpec:
    """Hardware envelope: SM count, peak rates, bandwidth inflection points."""

    name: str
    num_sms: int
    c_peak: float  # FLOP/s
    d_peak: float  # bytes/s
    w_peak: float  # bytes/s
    n_d: int  # SM count where memory bandwidth saturates
    n_w: int  # SM count where network bandwidth saturates

    def __post_init__(self) -> None:
        if self.num_sms < 1:
            raise InvalidArgumentError(f"num_sms must be >= 1, got {self.num_sms}")
        if min(self.c_peak, self.d_peak, self.w_peak) <= 0:
            raise InvalidArgumentError("peak rates must be positive")
        for label, n in (("n_d", self.n_d), ("n_w", self.n_w)):
            if not 1 <= n <= self.num_sms:
                raise InvalidArgumentError(f"{label}={n} outside [1, {self.num_sms}]")


GPU_PRESETS = {
    # Measured-peak style numbers for common serving parts.
    "a100": GpuSpec("a100", num_sms=108, c_peak=312e12, d_peak=2.039e12,
                    w_peak=20e9, n_d=30, n_w=8),
    "h100": GpuSpec("h100", num_sms=132, c_peak=989e12, d_peak=3.35e12,
                    w_peak=600e9, n_d=36, n_w=8),
    "h20": GpuSpec("h20", num_sms=78, c_peak=148e12, d_peak=4.0e12,
                   w_peak=400e9, n_d=24, n_w=8),
}


@dataclass(frozen=True, slots=True)
class KernelDesc:
    """One kernel's work signature: FLOPs, memory traffic, and grid shape."""

    name: str
    flops: float
    mem_bytes: float
    grid_blocks: int
    blocks_per_sm: int = 1

    def __post_init__(self) -> None:
        if self.flops < 0:
            raise InvalidArgumentError(f"{self.name}: flops must be >= 0")
        if self.mem_bytes <= 0:
            raise InvalidArgumentError(f"{self.name}: mem_bytes must be > 0")
        if self.grid_blocks < 1 or self.blocks_per_sm < 1:
            raise InvalidArgumentError(f"{self.name}: grid/blocks-per-SM must be >= 1")

    @property
    def intensity(self) -> float:
        return self.flops / self.mem_bytes


@dataclass(frozen=True, slots=True)
class WaveStats:
    waves: int
    tail_sms: int
    idle_ratio: float


@dataclass(frozen=True, slots=True)
class ScaledPeaks:
    c_p: float
    d_p: float
    w_p: float


@dataclass(frozen=True)
class ExecutionState:
    """The six co-execution factors: per-phase token shapes and SM shares.

    Either side may be empty/zero, meaning that phase is inactive.
    """

    prefill_lens: tuple[int, ...] = ()
    prefill_sms: int = 0
    decode_ctx_lens: tuple[int, ...] = ()
    decode_sms: int = 0

    @property
    def prefill_batch(self) -> int:
        return len(self.prefill_lens)

    @property
    def decode_batch(self) -> int:
        return len(self.decode_ctx_lens)

    @property
    def prefill_tokens(self) -> int:
        return sum(self.prefill_lens)

    @property
    def decode_tokens(self) -> int:
        return sum(self.decode_ctx_lens)


class ContentionBandwidth(NamedTuple):
    """Attainable decode-side bandwidth; `fallback` flags an empty table."""

    bytes_per_s: float
    fallback: bool


@dataclass
class LatencyEstimate:
    """Per-layer prefill latency and per-step (all layers) decode latency."""

    prefill_layer_s: float | None = None
    decode_step_s: float | None = None
    contention_fallback: bool = False


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def wave_stats(g: int, b: int, n: int) -> WaveStats:
    """Wave count, tail-wave SM occupancy and idle-cycle ratio for a grid.

    A grid of ``g`` blocks with ``b`` resident blocks per SM on ``n`` SMs
    runs in ``ceil(g / (b*n))`` waves; the final wave occupies only
    ``ceil(g/b - n*(waves-1))`` SMs, idling the rest.
    """
    if g < 1 or b < 1 or n < 1:
        raise InvalidArgumentError(f"wave_stats requires positive g, b, N (got {g}, {b}, {n})")
    waves = _ceil_div(g, b * n)
    tail = _ceil_div(g - b * n * (waves - 1), b)
    idle = (n - tail) / (n * waves)
    return WaveStats(waves=waves, tail_sms=tail, idle_ratio=idle)


def scaled_peaks(gpu: GpuSpec, n_p: int) -> ScaledPeaks:
    """Peak rates attainable on a partition of ``n_p`` SMs."""
    if not 1 <= n_p <= gpu.num_sms:
        raise InvalidArgumentError(f"n_p={n_p} outside [1, {gpu.num_sms}]")
    return ScaledPeaks(
        c_p=gpu.c_peak * n_p / gpu.num_sms,
        d_p=gpu.d_peak * min(1.0, n_p / gpu.n_d),
        w_p=gpu.w_peak * min(1.0, n_p / gpu.n_w),
    )


def srm_latency(kernel: KernelDesc, gpu: GpuSpec, n_p: int, *,
                d_p_override: float | None = None) -> float:
    """Roofline latency of one kernel on ``n_p`` SMs.

    ``d_p_override`` substitutes a contended memory bandwidth for the
    partition's nominal one (used for the decode side of co-execution).
    """
    peaks = scaled_peaks(gpu, n_p)
    d_p = peaks.d_p if d_p_override is None else d_p_override
    if kernel.flops == 0:
        # Pure-copy degenerate case: no compute roof to divide by.
        return kernel.mem_bytes / d_p
    attainable = min(kernel.intensity * d_p, peaks.c_p)
    return kernel.flops / attainable


def calibrate(measured_s: float, predicted_s: float) -> float:
    """Scaling factor mapping a roofline prediction onto a measurement."""
    if predicted_s <= 0:
        raise InvalidArgumentError(f"predicted latency must be > 0, got {predicted_s}")
    if measured_s <= 0:
        raise InvalidArgumentError(f"measured latency must be > 0, got {measured_s}")
    return measured_s / predicted_s


def _interp_1d(points: Sequence[tuple[float, float]], x: float) -> float:
    """Piecewise-linear interpolation with linear extrapolation beyond the hull.

    ``points`` must be sorted by x and non-empty; a single point is constant.
    """
    if len(points) == 1:
        return points[0][1]
    if x <= points[0][0]:
        (x0, y0), (x1, y1) = points[0], points[1]
    elif x >= points[-1][0]:
        (x0, y0), (x1, y1) = points[-2], points[-1]
    else:
        lo, hi = 0, len(points) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if points[mid][0] <= x:
                lo = mid
            else:
                hi = mid
        (x0, y0), (x1, y1) = points[lo], points[hi]
    if x1 == x0:
        return y0
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def _interp_axes(axes: Sequence[tuple[float, Sequence[tuple[float, float]]]],
                 a: float, b: float) -> float:
    """Axis-by-axis linear interpolation over pre-sorted (a, [(b, v)]) groups.

    Values are first interpolated along the second axis within each
    first-axis group, then across first-axis groups.
    """
    outer = [(ka, _interp_1d(pts, b)) for ka, pts in axes]
    return _interp_1d(outer, a)


def _interp_2d(table: dict[tuple[int, int], float], a: float, b: float) -> float:
    """As `_interp_axes`, building the sorted groups from a scattered table."""
    groups: dict[int, list[tuple[float, float]]] = {}
    for (ka, kb), v in table.items():
        groups.setdefault(ka, []).append((float(kb), v))
    axes = sorted((float(ka), sorted(pts)) for ka, pts in groups.items())
    return _interp_axes(axes, a, b)


@dataclass
class CalibrationStore:
    """Sampled alpha factors plus a contention-bandwidth table.

    ``alpha_samples`` is keyed by (phase, SM count, total tokens); lookups
    off the sampled keys interpolate linearly per axis within the phase and
    extrapolate linearly beyond the hull, clamped to [0.1, 20].  The
    contention table maps (decode SM count, co-running prefill length) to
    attainable bytes/s, clamped to (0, d_peak].

    Lookups cache sorted interpolation axes; mutate the tables through
    `update_online` / the provided loaders (or before the first lookup) so
    the cache stays coherent.
    """

    alpha_samples: dict[tuple[str, int, int], float] = field(default_factory=dict)
    contention_bw: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._axes_cache: dict = {}

    def _invalidate(self) -> None:
        self._axes_cache.clear()

    def _axes(self, table_key: str):
        cached = self._axes_cache.get(table_key)
        if cached is None:
            groups: dict[int, list[tuple[float, float]]] = {}
            if table_key == "contention":
                for (a, b), v in self.contention_bw.items():
                    groups.setdefault(a, []).append((float(b), v))
            else:
                for (p, a, b), v in self.alpha_samples.items():
                    if p == table_key:
                        groups.setdefault(a, []).append((float(b), v))
            cached = sorted((float(a), sorted(pts)) for a, pts in groups.items())
            self._axes_cache[table_key] = cached
        return cached

    def alpha_for(self, phase: str, sms: int, tokens: int) -> float:
        exact = self.alpha_samples.get((phase, sms, tokens))
        if exact is not None:
            return exact
        axes = self._axes(phase)
        if not axes:
            return 1.0
        value = _interp_axes(axes, float(sms), float(tokens))
        return min(ALPHA_MAX, max(ALPHA_MIN, value))

    def contention_for(self, gpu: GpuSpec, n_p: int,
                       co_prefill_len: int) -> ContentionBandwidth:
        if n_p < 1:
            raise InvalidArgumentError(f"n_p must be >= 1, got {n_p}")
        uncontended = scaled_peaks(gpu, n_p).d_p
        if co_prefill_len <= 0:
            return ContentionBandwidth(uncontended, False)
        if not self.contention_bw:
            return ContentionBandwidth(uncontended, True)
        raw = _interp_axes(self._axes("contention"), float(n_p), float(co_prefill_len))
        clamped = min(gpu.d_peak, max(raw, 1e-6 * gpu.d_peak))
        return ContentionBandwidth(clamped, False)

    def clone(self) -> "CalibrationStore":
        return CalibrationStore(dict(self.alpha_samples), dict(self.contention_bw))

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for (phase, sms, tokens), alpha in sorted(self.alpha_samples.items()):
                fh.write(json.dumps({"phase": phase, "sms": sms, "tokens": tokens,
                                     "measured_s": alpha, "predicted_s": 1.0}) + "\n")
            for (sms, sl), bw in sorted(self.contention_bw.items()):
                fh.write(json.dumps({"kind": "contention_bw", "sms": sms,
                                     "prefill_len": sl, "bytes_per_s": bw}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "CalibrationStore":
        store = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec.get("kind") == "contention_bw":
                    store.contention_bw[(int(rec["sms"]), int(rec["prefill_len"]))] = \
                        float(rec["bytes_per_s"])
                else:
                    alpha = calibrate(float(rec["measured_s"]), float(rec["predicted_s"]))
                    store.alpha_samples[(rec["phase"], int(rec["sms"]), int(rec["tokens"]))] = alpha
        return store


def contention_bandwidth(store: CalibrationStore, gpu: GpuSpec, n_p: int,
                         co_prefill_len: int) -> ContentionBandwidth:
    """Attainable memory bandwidth for ``n_p`` SMs next to an ``sl``-token prefill.

    With no co-running prefill this is the uncontended partition bandwidth.
    An empty table falls back to the uncontended value, flagged in the result.
    """
    return store.contention_for(gpu, n_p, co_prefill_len)


def _sum_srm(kernels: Iterable[KernelDesc], gpu: GpuSpec, n_p: int,
             d_p_override: float | None = None) -> float:
    peaks = scaled_peaks(gpu, n_p)
    d_p = peaks.d_p if d_p_override is None else d_p_override
    c_p = peaks.c_p
    total = 0.0
    for k in kernels:
        if k.flops == 0.0:
            total += k.mem_bytes / d_p
        else:
            total += k.flops / min(k.flops / k.mem_bytes * d_p, c_p)
    return total


def srm_prefill_layer_s(es: ExecutionState, model, gpu: GpuSpec) -> float:
    """Uncalibrated per-layer roofline latency of the prefill side of an ES."""
    from .workload import layer_kernels

    kernels = layer_kernels(model, "prefill", es.prefill_tokens, list(es.prefill_lens))
    return _sum_srm(kernels, gpu, es.prefill_sms)


def srm_decode_step_s(es: ExecutionState, model, gpu: GpuSpec,
                      d_p_override: float | None = None) -> float:
    """Uncalibrated per-step (all layers) roofline latency of the decode side."""
    from .workload import layer_kernels

    kernels = layer_kernels(model, "decode", es.decode_batch, list(es.decode_ctx_lens))
    return model.num_layers * _sum_srm(kernels, gpu, es.decode_sms, d_p_override)


def estimate_latency(es: ExecutionState, model, gpu: GpuSpec,
                     store: CalibrationStore) -> LatencyEstimate:
    """Calibrated latency estimate for an execution state.

    Prefill kernels are evaluated on the prefill partition; decode kernels on
    the decode partition with the contention-table bandwidth substituted while
    a prefill runs concurrently.  Each side is scaled by the interpolated
    alpha at (phase, SMs, total tokens).
    """
    prefill_active = es.prefill_batch > 0 and es.prefill_sms >= 1
    decode_active = es.decode_batch > 0 and es.decode_sms >= 1
    if not prefill_active and not decode_active:
        raise InvalidArgumentError("execution state has no active phase")

    out = LatencyEstimate()
    if prefill_active:
        raw = srm_prefill_layer_s(es, model, gpu)
        alpha = store.alpha_for("prefill", es.prefill_sms, es.prefill_tokens)
        out.prefill_layer_s = raw * alpha
    if decode_active:
        d_override = None
        if prefill_active:
            bw = contention_bandwidth(store, gpu, es.decode_sms, es.prefill_tokens)
            d_override = bw.bytes_per_s
            out.contention_fallback = bw.fallback
        raw = srm_decode_step_s(es, model, gpu, d_override)
        alpha = store.alpha_for("decode", es.decode_sms, es.decode_tokens)
        out.decode_step_s = raw * alpha
    return out


def update_online(store: CalibrationStore, phase: str, es: ExecutionState,
                  measured_s: float, predicted_s: float) -> CalibrationStore:
    """Record a fresh measured/predicted pair at the state's alpha key.

    ``predicted_s`` must be the raw roofline prediction (alpha-free) so that
    a subsequent estimate at the same key reproduces ``measured_s`` exactly.
    Re-inserting at an existing key overwrites it.
    """
    alpha = calibrate(measured_s, predicted_s)
    if phase == "prefill":
        key = (phase, es.prefill_sms, es.prefill_tokens)
    elif phase == "decode":
        key = (phase, es.decode_sms, es.decode_tokens)
    else:
        raise InvalidArgumentError(f"unknown phase {phase!r}")
    store.alpha_samples[key] = alpha
    store._invalidate()
    return store


class PerfEstimator:
    """Convenience wrapper binding a model, GPU and calibration store.

    The scheduler and simulator query latencies through this object; it is
    cheap to construct and safe to share across read-only users.
    """

    def __init__(self, model, gpu: GpuSpec, store: CalibrationStore):
        self.model = model
        self.gpu = gpu
        self.store = store

    def estimate(self, es: ExecutionState) -> LatencyEstimate:
        return estimate_latency(es, self.model, self.gpu, self.store)

    def prefill_layer_s(self, lens: Sequence[int], pm: int) -> float:
        if not lens or pm < 1:
            return math.inf
        es = ExecutionState(prefill_lens=tuple(lens), prefill_sms=pm)
        return self.estimate(es).prefill_layer_s

    def prefill_exec_s(self, lens: Sequence[int], pm: int, layers: int | None = None) -> float:
        n_layers = self.model.num_layers if layers is None else layers
        return n_layers * self.prefill_layer_s(lens, pm)

    def decode_step_s(self, ctx_lens: Sequence[int], dm: int,
                      co_prefill_tokens: int = 0) -> float:
        if not ctx_lens:
            return 0.0
        if dm < 1:
            return math.inf
        prefill = (co_prefill_tokens,) if co_prefill_tokens > 0 else ()
        es = ExecutionState(prefill_lens=prefill, prefill_sms=0,
                            decode_ctx_lens=tuple(ctx_lens), decode_sms=dm)
        d_override = None
        if co_prefill_tokens > 0:
            bw = contention_bandwidth(self.store, self.gpu, dm, co_prefill_tokens)
            d_override = bw.bytes_per_s
        raw = srm_decode_step_s(es, self.model, self.gpu, d_override)
        return raw * self.store.alpha_for("decode", dm, es.decode_tokens)

    def ridge_intensity(self, n_p: int) -> float:
        """Compute/memory boundary (FLOP per byte) on an ``n_p``-SM partition."""
        peaks = scaled_peaks(self.gpu, n_p)
        return peaks.c_p / peaks.d_p
