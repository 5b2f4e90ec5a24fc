"""Deterministic discrete-event simulation of concurrent prefill/decode serving.

One simulated GPU hosts two logical engines over a shared KV pool.  Under
the dynamic policy ("bullet") the prefill engine advances a fixed number
of layers per event and runs one SLO-aware scheduling cycle at every step
boundary; the decode engine advances one whole-model step per event and
merges freshly prefilled requests at step boundaries.  SM repartitions
take effect at the first kernel boundary after a small reconfiguration
delay.  Baseline policies reuse the same loop with the decisions frozen
(`static`, `nopartition`) or replace it with lockstep hybrid batches
(`chunked`).

Ground truth is a synthetic oracle: the same SM-scaling roofline as the
scheduler's estimator, multiplied by a smooth efficiency surface
alpha(phase, SMs, tokens) and a contention surface D(SMs, prefill_len),
optionally with seeded lognormal noise.  The scheduler's estimator never
sees the surfaces, only a sparse set of sampled points plus its own
online refinements, which keeps the estimation problem honest.

Everything is reproducible: identical (config, trace) pairs give
byte-identical reports.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .perf_model import (
    CalibrationStore,
    ContentionBandwidth,
    ExecutionState,
    GpuSpec,
    PerfEstimator,
    scaled_peaks,
    srm_decode_step_s,
    srm_latency,
    srm_prefill_layer_s,
    update_online,
)
from .scheduler import (
    PrefillState,
    ReqView,
    SchedulerConfig,
    SloSpec,
    SystemState,
    min_decode_sms,
    p90,
    projected_suspension_p90,
    schedule_decode,
    schedule_prefill,
    transition_handoff,
    _form_batch,
)
from .workload import ModelSpec, Request, hybrid_kernels, kv_bytes


@dataclass(frozen=True)
class OracleConfig:
    """Coefficients of the synthetic ground-truth surfaces.

    alpha(phase, p, tokens) = a0 + a1*(p/N) + a2*log(1+tokens).  The default
    negative token coefficient makes small passes proportionally less
    efficient than large ones (tail waves, launch overheads), which is the
    regime small chunked batches live in; values keep alpha > 1 over the
    supported token range.  The contention surface scales the partition
    bandwidth down as the co-running prefill grows, saturating at
    `contention_max_loss`.
    """

    prefill_alpha: tuple[float, float, float] = (2.6, 0.3, -0.18)
    decode_alpha: tuple[float, float, float] = (1.7, 0.25, -0.05)
    contention_max_loss: float = 0.3
    contention_half_tokens: float = 8192.0


@dataclass(frozen=True)
class CalibrationBudget:
    """Which oracle points the scheduler's estimator is allowed to see.

    Default token samples land roughly twice per decade and span the whole
    supported batch-token range, so lookups interpolate rather than
    extrapolate.
    """

    mode: str = "grid"  # grid | all | none
    prefill_sms: tuple[int, ...] = (54, 108)
    prefill_tokens: tuple[int, ...] = (512, 1024, 4096, 16384, 32768)
    decode_sms: tuple[int, ...] = (30, 108)
    decode_tokens: tuple[int, ...] = (256, 1024, 4096, 16384, 65536,
                                      262144, 1048576, 4194304, 8388608)
    contention_sms: tuple[int, ...] = (8, 16, 32, 64, 108)
    contention_prefill_lens: tuple[int, ...] = (1024, 8192, 32768)


@dataclass(frozen=True)
class PolicySpec:
    name: str  # bullet | chunked | static | nopartition
    chunk_size: int = 1024
    static_pm: int = 108

    def __post_init__(self) -> None:
        if self.name not in ("bullet", "chunked", "static", "nopartition"):
            raise InvalidArgumentError(f"unknown policy {self.name!r}")
        if self.name == "chunked" and self.chunk_size < 1:
            raise InvalidArgumentError("chunk_size must be >= 1")
        if self.name == "static" and self.static_pm < 0:
            raise InvalidArgumentError("static_pm must be >= 0")


@dataclass
class SimConfig:
    gpu: GpuSpec
    model: ModelSpec
    slo: SloSpec
    sched: SchedulerConfig = field(default_factory=SchedulerConfig)
    policy: PolicySpec = field(default_factory=lambda: PolicySpec("bullet"))
    # Device memory granted to weights + KV; the KV budget is what remains
    # after the resident weights.
    kv_pool_bytes: int = 60 * 1024**3
    seed: int = 0
    noise_sigma: float = 0.0
    reconfig_s: float = 4.1e-6
    overlap_penalty: float = 0.0
    metadata_overhead_s: float = 2.1e-4
    predict_overhead_s: float = 1.02e-5
    oracle: OracleConfig = field(default_factory=OracleConfig)
    calibration: CalibrationBudget = field(default_factory=CalibrationBudget)

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if self.kv_pool_bytes <= self.model.weight_bytes():
            raise InvalidArgumentError(
                f"kv_pool_bytes must exceed the model weight footprint "
                f"({self.model.weight_bytes()} bytes)")


@dataclass
class RequestRecord:
    request: Request
    state: str = "queued"  # queued | prefilling | decoding | finished
    prefill_done_s: float | None = None
    decode_start_s: float | None = None
    token_times: list[float] = field(default_factory=list)
    ctx_len: int = 0
    emitted: int = 0


class GroundTruthOracle:
    """Stand-in for hardware measurement: roofline x smooth surfaces x noise."""

    def __init__(self, model: ModelSpec, gpu: GpuSpec, coeffs: OracleConfig,
                 noise_sigma: float = 0.0, seed: int = 0):
        self.model = model
        self.gpu = gpu
        self.coeffs = coeffs
        self.noise_sigma = noise_sigma
        self._rng = np.random.default_rng(seed)

    def alpha(self, phase: str, sms: int, tokens: int) -> float:
        a0, a1, a2 = (self.coeffs.prefill_alpha if phase == "prefill"
                      else self.coeffs.decode_alpha)
        value = a0 + a1 * (sms / self.gpu.num_sms) + a2 * math.log1p(max(0, tokens))
        return max(1e-2, value)

    def contention_bw(self, sms: int, co_prefill_len: int) -> float:
        base = scaled_peaks(self.gpu, sms).d_p
        if co_prefill_len <= 0:
            return base
        sl = float(co_prefill_len)
        loss = self.coeffs.contention_max_loss * sl / (sl + self.coeffs.contention_half_tokens)
        return base * (1.0 - loss)

    def _noise(self) -> float:
        if self.noise_sigma == 0:
            return 1.0
        return float(self._rng.lognormal(0.0, self.noise_sigma))

    def prefill_layer_s(self, es: ExecutionState) -> float:
        raw = srm_prefill_layer_s(es, self.model, self.gpu)
        return raw * self.alpha("prefill", es.prefill_sms, es.prefill_tokens) * self._noise()

    def decode_step_s(self, es: ExecutionState) -> float:
        d_override = None
        if es.prefill_tokens > 0:
            d_override = self.contention_bw(es.decode_sms, es.prefill_tokens)
        raw = srm_decode_step_s(es, self.model, self.gpu, d_override)
        return raw * self.alpha("decode", es.decode_sms, es.decode_tokens) * self._noise()

    def hybrid_iteration_s(self, chunks: Sequence[tuple[int, int]],
                           decode_ctx_lens: Sequence[int], sms: int) -> float:
        kernels = hybrid_kernels(self.model, chunks, decode_ctx_lens)
        raw = self.model.num_layers * sum(
            srm_latency(k, self.gpu, sms) for k in kernels)
        chunk_tokens = sum(t for t, _ in chunks)
        phase = "prefill" if chunk_tokens > 0 else "decode"
        tokens = chunk_tokens + len(decode_ctx_lens)
        return raw * self.alpha(phase, sms, tokens) * self._noise()


class OracleBackedStore(CalibrationStore):
    """Calibration store wired straight to the oracle surfaces ("all" budget)."""

    def __init__(self, oracle: GroundTruthOracle):
        super().__init__()
        self._oracle = oracle

    def alpha_for(self, phase: str, sms: int, tokens: int) -> float:
        return self._oracle.alpha(phase, sms, tokens)

    def contention_for(self, gpu: GpuSpec, n_p: int,
                       co_prefill_len: int) -> ContentionBandwidth:
        return ContentionBandwidth(self._oracle.contention_bw(n_p, co_prefill_len), False)

    def clone(self) -> "OracleBackedStore":
        return OracleBackedStore(self._oracle)


def canonical_decode_es(tokens: int, dm: int) -> ExecutionState:
    """Representative decode shape for a total-token budget: moderate batch,
    equal contexts.  Used for drawing and evaluating calibration samples."""
    bs = max(1, min(256, tokens // 1024))
    ctx = max(1, tokens // bs)
    lens = [ctx] * (bs - 1) + [max(1, tokens - ctx * (bs - 1))]
    return ExecutionState(decode_ctx_lens=tuple(lens), decode_sms=dm)


def build_calibration_store(oracle: GroundTruthOracle, budget: CalibrationBudget) -> CalibrationStore:
    """Draw the budgeted sample points from the oracle (noise-free surfaces)."""
    if budget.mode == "all":
        return OracleBackedStore(oracle)
    store = CalibrationStore()
    if budget.mode == "none":
        return store
    model, gpu = oracle.model, oracle.gpu
    for sms in budget.prefill_sms:
        for tokens in budget.prefill_tokens:
            es = ExecutionState(prefill_lens=(tokens,), prefill_sms=sms)
            raw = srm_prefill_layer_s(es, model, gpu)
            update_online(store, "prefill", es, raw * oracle.alpha("prefill", sms, tokens), raw)
    for sms in budget.decode_sms:
        for tokens in budget.decode_tokens:
            es = canonical_decode_es(tokens, sms)
            raw = srm_decode_step_s(es, model, gpu)
            update_online(store, "decode", es,
                          raw * oracle.alpha("decode", sms, es.decode_tokens), raw)
    for sms in budget.contention_sms:
        for sl in budget.contention_prefill_lens:
            store.contention_bw[(sms, sl)] = oracle.contention_bw(sms, sl)
    return store


@dataclass
class MetricsReport:
    per_request: list[dict]
    aggregates: dict
    queue_timeline: list[tuple[float, int]]
    partition_timeline: list[tuple[float, int, int, int, int]]
    decision_log: list[dict]

    def to_json(self) -> str:
        return json.dumps(self.aggregates, indent=2, sort_keys=True)

    def summary_line(self) -> str:
        a = self.aggregates
        return (f"throughput {a['throughput_rps']:.4f} req/s | "
                f"TTFT mean {a['ttft_mean_s']:.4f}s p90 {a['ttft_p90_s']:.4f}s | "
                f"TPOT mean {a['tpot_mean_ms']:.3f}ms | "
                f"SLO attainment {a['slo_attainment']:.4f} | "
                f"finished {a['finished']}/{a['n_requests']}")


def compute_metrics(records: Sequence[RequestRecord], slo: SloSpec,
                    makespan_s: float = 0.0,
                    mean_prefill_sms: float = 0.0,
                    mean_decode_sms: float = 0.0) -> MetricsReport:
    """Per-request latency metrics and SLO aggregates over finished requests.

    TTFT is first-token time minus arrival; TPOT averages the decode gaps;
    a request attains the SLO when both normalized TTFT and TPOT are within
    their targets.  Unfinished requests are excluded from latency aggregates
    and tallied separately.
    """
    per_request = []
    ttfts, norms, tpots, attained = [], [], [], 0
    finished = 0
    for rec in records:
        req = rec.request
        done = rec.state == "finished"
        row = {"id": req.id, "arrival_s": req.arrival_s, "finished": done,
               "ttft_s": None, "norm_ttft_ms_per_tok": None, "tpot_ms": None}
        if rec.token_times:
            ttft = rec.token_times[0] - req.arrival_s
            row["ttft_s"] = ttft
            row["norm_ttft_ms_per_tok"] = 1e3 * ttft / req.input_len
            if len(rec.token_times) >= 2:
                tpot = (rec.token_times[-1] - rec.token_times[0]) / (len(rec.token_times) - 1)
            else:
                tpot = 0.0
            row["tpot_ms"] = 1e3 * tpot
            if done:
                finished += 1
                ttfts.append(ttft)
                norms.append(ttft / req.input_len)
                tpots.append(tpot)
                if (ttft / req.input_len <= slo.norm_ttft_s_per_token
                        and tpot <= slo.tpot_s):
                    attained += 1
        per_request.append(row)

    def pct(vals, q):
        return float(np.percentile(vals, q)) if vals else 0.0

    aggregates = {
        "n_requests": len(per_request),
        "finished": finished,
        "incomplete": len(per_request) - finished,
        "makespan_s": makespan_s,
        "throughput_rps": finished / makespan_s if makespan_s > 0 else 0.0,
        "ttft_mean_s": float(np.mean(ttfts)) if ttfts else 0.0,
        "ttft_p90_s": pct(ttfts, 90),
        "ttft_p99_s": pct(ttfts, 99),
        "norm_ttft_mean_ms_per_tok": 1e3 * float(np.mean(norms)) if norms else 0.0,
        "norm_ttft_p90_ms_per_tok": 1e3 * pct(norms, 90),
        "tpot_mean_ms": 1e3 * float(np.mean(tpots)) if tpots else 0.0,
        "tpot_p90_ms": 1e3 * pct(tpots, 90),
        "tpot_p99_ms": 1e3 * pct(tpots, 99),
        "slo_attainment": attained / finished if finished else 0.0,
        "mean_prefill_sms": mean_prefill_sms,
        "mean_decode_sms": mean_decode_sms,
    }
    return MetricsReport(per_request, aggregates, [], [], [])


class _ConcurrentSim:
    """Event loop for the bullet, static and nopartition policies."""

    def __init__(self, cfg: SimConfig, trace: Sequence[Request]):
        if any(b.arrival_s < a.arrival_s for a, b in zip(trace, trace[1:])):
            raise InvalidArgumentError("trace must be arrival-sorted")
        self.cfg = cfg
        self.gpu, self.model = cfg.gpu, cfg.model
        self.n = cfg.gpu.num_sms
        self.dynamic = cfg.policy.name == "bullet"
        self.oracle = GroundTruthOracle(cfg.model, cfg.gpu, cfg.oracle,
                                        cfg.noise_sigma, cfg.seed)
        self.store = build_calibration_store(self.oracle, cfg.calibration)
        self.estimator = PerfEstimator(cfg.model, cfg.gpu, self.store)
        self.records = {r.id: RequestRecord(r) for r in trace}
        self.trace = list(trace)

        self.queue: list[int] = []
        self.inflight: list[int] = []
        self.layers_done = 0
        self.decode_running: list[int] = []
        self.decode_ready: list[int] = []
        if cfg.policy.name == "nopartition":
            self.pm, self.dm = self.n, self.n
        elif cfg.policy.name == "static":
            self.pm, self.dm = cfg.policy.static_pm, self.n
        else:
            self.pm, self.dm = self.n, 0
        self.partition_target = (self.pm, self.dm)
        self.pending_partition: list[tuple[float, int, int]] = []
        self.suspended = False
        self.in_transition = False
        self.kv_used = 0
        self.kv_budget = cfg.kv_pool_bytes - cfg.model.weight_bytes()
        self.tpot_window: deque = deque(maxlen=cfg.sched.p90_window)
        self.last_decode_event_t = 0.0

        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.makespan = 0.0
        self.prefill_busy = False
        self.decode_busy = False
        self.occ_prefill = 0.0
        self.occ_decode = 0.0
        self.queue_timeline: list[tuple[float, int]] = []
        self.partition_timeline: list[tuple[float, int, int, int, int]] = []
        self.decision_log: list[dict] = []

    # -- event plumbing -----------------------------------------------------

    def _push(self, t: float, kind: str, payload=None) -> None:
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def run(self) -> MetricsReport:
        for r in self.trace:
            self._push(r.arrival_s, "arrival", r.id)
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            self.now = t
            self.makespan = max(self.makespan, t)
            self._apply_partitions(t)
            if kind == "arrival":
                self._on_arrival(t, payload)
            elif kind == "prefill_step":
                self._on_prefill_step(t, payload)
            elif kind == "decode_step":
                self._on_decode_step(t, payload)
            elif kind == "reconfig":
                # A fresh mask may unblock a phase that had no SMs.
                self._snapshot(t)
                if not self.prefill_busy and self.inflight:
                    self._launch_prefill(t)
                self._maybe_launch_decode(t)
        mk = self.makespan
        return self._finalize(compute_metrics(
            [self.records[r.id] for r in self.trace], self.cfg.slo, mk,
            self.occ_prefill / mk if mk > 0 else 0.0,
            self.occ_decode / mk if mk > 0 else 0.0))

    def _finalize(self, report: MetricsReport) -> MetricsReport:
        report.queue_timeline = self.queue_timeline
        report.partition_timeline = self.partition_timeline
        report.decision_log = self.decision_log
        return report

    def _snapshot(self, t: float) -> None:
        self.queue_timeline.append((t, len(self.queue)))
        self.partition_timeline.append(
            (t, self._prefill_sms_now(), self._decode_sms_now(),
             len(self.queue), len(self.decode_running)))

    # -- partition management -----------------------------------------------

    def _apply_partitions(self, t: float) -> None:
        applied = [p for p in self.pending_partition if p[0] <= t]
        if applied:
            _, self.pm, self.dm = applied[-1]
            self.pending_partition = [p for p in self.pending_partition if p[0] > t]

    def _request_partition(self, t: float, pm: int, dm: int) -> None:
        if (pm, dm) == self.partition_target:
            return
        self.partition_target = (pm, dm)
        eff = t + self.cfg.reconfig_s
        self.pending_partition.append((eff, pm, dm))
        self._push(eff, "reconfig")

    def _prefill_sms_now(self) -> int:
        if self.cfg.policy.name == "static":
            return self.cfg.policy.static_pm
        if self.cfg.policy.name == "nopartition":
            return self.n
        return self.pm

    def _decode_sms_now(self) -> int:
        if self.cfg.policy.name == "static":
            # Decode may expand into SMs the fixed prefill share is not using.
            return self.n - self.cfg.policy.static_pm if self.inflight else self.n
        if self.cfg.policy.name == "nopartition":
            return self.n
        return self.dm

    # -- KV pool --------------------------------------------------------------

    def _kv_need(self, rid: int) -> int:
        req = self.records[rid].request
        return kv_bytes(self.model, req.input_len + req.output_len)

    def _kv_blocked(self) -> frozenset[int]:
        free = self.kv_budget - self.kv_used
        return frozenset(r for r in self.queue if self._kv_need(r) > free)

    # -- scheduler interface --------------------------------------------------

    def _system_state(self) -> SystemState:
        reqs = {}
        for rid in (*self.queue, *self.inflight, *self.decode_running,
                    *self.decode_ready):
            rec = self.records[rid]
            reqs[rid] = ReqView(rid, rec.request.arrival_s, rec.request.input_len,
                                rec.ctx_len)
        es = ExecutionState(
            prefill_lens=tuple(self.records[r].request.input_len for r in self.inflight),
            prefill_sms=self._prefill_sms_now(),
            decode_ctx_lens=tuple(self.records[r].ctx_len for r in self.decode_running),
            decode_sms=self._decode_sms_now())
        return SystemState(es=es,
                           ps=PrefillState(list(self.queue), list(self.inflight),
                                           self.layers_done),
                           requests=reqs, sim_time=self.now,
                           tpot_window=tuple(self.tpot_window),
                           decode_running=tuple(self.decode_running),
                           decode_ready=tuple(self.decode_ready),
                           kv_blocked=self._kv_blocked(),
                           decode_last_step_s=self.last_decode_event_t)

    # -- event handlers ---------------------------------------------------------

    def _on_arrival(self, t: float, rid: int) -> None:
        self.queue.append(rid)
        self._snapshot(t)
        if not self.prefill_busy:
            self._prefill_cycle(t)
        if not self.decode_busy:
            self._maybe_launch_decode(t)

    def _prefill_cycle(self, t: float) -> None:
        """One scheduling cycle: decide, repartition, and launch a layer step."""
        if self.prefill_busy:
            return
        sched = self.cfg.sched
        if self.dynamic:
            state = self._system_state()
            if self.suspended:
                # Resume early rather than eat into the SLO buffer.
                proj = projected_suspension_p90(state, self.cfg.slo, self.estimator,
                                                sched, [])
                if proj > 0.9 * self.cfg.slo.tpot_s:
                    self._resume_decode(t)
            in_window = (self.inflight and not self.queue
                         and sched.transition_layers > 0
                         and self.layers_done >= self.model.num_layers - sched.transition_layers
                         and (self.decode_running or self.decode_ready))
            if in_window:
                decision = transition_handoff(state, sched, self.n, self.model.num_layers)
                self.in_transition = True
            else:
                decision = schedule_prefill(state, self.cfg.slo, self.estimator, sched)
            self.queue = [r for r in decision.queue_order if r in set(self.queue)] or self.queue
            if decision.decode_suspended and not self.suspended:
                self.suspended = True
            if decision.branch != "noop" and (decision.decode_suspended or not self.suspended):
                self._request_partition(t, decision.new_prefill_sms, decision.new_decode_sms)
            tasks = list(decision.next_tasks)
            # In-memory entries carry audit fields beyond the on-disk schema.
            entry = {
                "t": t, "pm": decision.new_prefill_sms, "dm": decision.new_decode_sms,
                "branch": decision.branch, "batch": tasks,
                "layers": decision.layers_to_run,
                "tpot_p90": p90(self.tpot_window) if self.tpot_window else None,
            }
            if decision.decode_suspended:
                entry["suspend_proj"] = projected_suspension_p90(
                    state, self.cfg.slo, self.estimator, sched,
                    [self.records[r].request.input_len for r in tasks])
            self.decision_log.append(entry)
        else:
            if self.inflight:
                tasks = list(self.inflight)
            else:
                state = self._system_state()
                tasks = _form_batch(state, self.estimator, self.queue,
                                    sched.intensity_saturation)
            self.decision_log.append({
                "t": t, "pm": self._prefill_sms_now(), "dm": self._decode_sms_now(),
                "branch": self.cfg.policy.name, "batch": tasks,
                "layers": self.layers_done + sched.l_step})
        self._snapshot(t)
        if not self.inflight and tasks:
            admitted = []
            for rid in tasks:
                need = self._kv_need(rid)
                if self.kv_used + need <= self.kv_budget:
                    self.kv_used += need
                    admitted.append(rid)
                    self.records[rid].state = "prefilling"
            self.queue = [r for r in self.queue if r not in set(admitted)]
            self.inflight = admitted
            self.layers_done = 0
        if self.inflight:
            self._launch_prefill(t)
        if self.suspended and not self.inflight:
            # Suspension with nothing actually running (e.g. the batch could
            # not be admitted into the KV pool) would stall decode forever.
            self._resume_decode(t)

    def _launch_prefill(self, t: float) -> None:
        pm = self._prefill_sms_now()
        if pm < 1:
            return  # no SMs provisioned; retried at the next boundary
        layers = min(self.cfg.sched.l_step, self.model.num_layers - self.layers_done)
        es = ExecutionState(
            prefill_lens=tuple(self.records[r].request.input_len for r in self.inflight),
            prefill_sms=pm,
            decode_ctx_lens=tuple(self.records[r].ctx_len for r in self.decode_running),
            decode_sms=self._decode_sms_now() if self.decode_running else 0)
        layer_s = self.oracle.prefill_layer_s(es)
        if self.in_transition:
            layer_s *= 1.0 + self.cfg.overlap_penalty
        step_s = layers * layer_s + self.cfg.metadata_overhead_s + self.cfg.predict_overhead_s
        self.prefill_busy = True
        self.occ_prefill += pm * step_s
        self._push(t + step_s, "prefill_step",
                   {"layers": layers, "layer_s": layer_s, "es": es})

    def _on_prefill_step(self, t: float, p: dict) -> None:
        self.prefill_busy = False
        self.layers_done += p["layers"]
        update_online(self.store, "prefill", p["es"], p["layer_s"],
                      srm_prefill_layer_s(p["es"], self.model, self.gpu))
        if self.layers_done >= self.model.num_layers:
            for rid in self.inflight:
                rec = self.records[rid]
                rec.prefill_done_s = t
                rec.token_times.append(t)
                rec.emitted = 1
                rec.ctx_len = rec.request.input_len + 1
                if rec.emitted >= rec.request.output_len:
                    self._finish(rid)
                else:
                    rec.state = "decoding"
                    self.decode_ready.append(rid)
            self.inflight = []
            self.layers_done = 0
            self.in_transition = False
            if self.suspended:
                self._resume_decode(t)
            if self.dynamic and not self.queue:
                self._request_partition(t, 0, self.n)
            self._maybe_launch_decode(t)
        self._prefill_cycle(t)

    def _finish(self, rid: int) -> None:
        rec = self.records[rid]
        rec.state = "finished"
        self.kv_used -= self._kv_need(rid)

    def _resume_decode(self, t: float) -> None:
        self.suspended = False
        self.decision_log.append({"t": t, "pm": self.pm, "dm": self.dm,
                                  "branch": "resume", "batch": [], "layers": 0})
        self._maybe_launch_decode(t)

    def _maybe_launch_decode(self, t: float) -> None:
        if self.decode_busy or self.suspended:
            return
        if not self.decode_running and not self.decode_ready:
            return
        state = self._system_state()
        decision = schedule_decode(state, self.cfg.slo, self.estimator, self.cfg.sched)
        batch = list(decision.next_tasks)
        if not batch:
            return
        newly = [r for r in batch if r in set(self.decode_ready)]
        dm = self._decode_sms_now()
        if dm < 1:
            if self.dynamic and self.partition_target[1] < 1:
                # Decode turning active with no mask pending: provision the
                # minimal share meeting the TPOT target, then wake after the
                # mask lands.
                state.decode_running = tuple(batch)
                state.es = ExecutionState(
                    prefill_lens=state.es.prefill_lens, prefill_sms=state.es.prefill_sms,
                    decode_ctx_lens=tuple(self.records[r].ctx_len for r in batch),
                    decode_sms=0)
                dm_new = min_decode_sms(state, self.cfg.slo, self.estimator, self.cfg.sched)
                if self.inflight or self.queue:
                    dm_new = min(dm_new, self.n - self.cfg.sched.sm_step)
                self._request_partition(t, self.n - dm_new, dm_new)
            return
        for rid in newly:
            self.records[rid].decode_start_s = t
        self.decode_ready = [r for r in self.decode_ready if r not in set(newly)]
        self.decode_running = batch
        es = ExecutionState(
            prefill_lens=tuple(self.records[r].request.input_len for r in self.inflight),
            prefill_sms=self._prefill_sms_now() if self.inflight else 0,
            decode_ctx_lens=tuple(self.records[r].ctx_len for r in batch),
            decode_sms=dm)
        step_s = self.oracle.decode_step_s(es)
        if self.in_transition:
            step_s *= 1.0 + self.cfg.overlap_penalty
        self.decode_busy = True
        self.last_decode_event_t = t  # a running step is not a stall
        self.occ_decode += dm * step_s
        self._push(t + step_s, "decode_step", {"batch": batch, "step_s": step_s, "es": es})

    def _on_decode_step(self, t: float, p: dict) -> None:
        self.decode_busy = False
        self.last_decode_event_t = t
        keep = []
        for rid in p["batch"]:
            rec = self.records[rid]
            rec.token_times.append(t)
            rec.emitted += 1
            rec.ctx_len += 1
            if rec.emitted >= rec.request.output_len:
                self._finish(rid)
            else:
                keep.append(rid)
        self.decode_running = keep
        self.tpot_window.append(p["step_s"])
        es = p["es"]
        d_override = None
        if es.prefill_tokens > 0:
            d_override = self.store.contention_for(self.gpu, es.decode_sms,
                                                   es.prefill_tokens).bytes_per_s
        update_online(self.store, "decode", es, p["step_s"],
                      srm_decode_step_s(es, self.model, self.gpu, d_override))
        self._snapshot(t)
        # The prefill scheduler cycles at decode boundaries only while it has
        # work to coordinate; a fully idle prefill engine leaves the partition
        # to decode rather than accumulating a reserve nothing will use.
        if not self.prefill_busy and (self.queue or self.inflight):
            self._prefill_cycle(t)
        self._maybe_launch_decode(t)


class _ChunkedSim:
    """Lockstep hybrid-batch baseline: decode tokens first, prefill chunks
    fill the remaining budget, everything on the full GPU."""

    def __init__(self, cfg: SimConfig, trace: Sequence[Request]):
        self.cfg = cfg
        self.cs = cfg.policy.chunk_size
        self.model, self.gpu = cfg.model, cfg.gpu
        self.oracle = GroundTruthOracle(cfg.model, cfg.gpu, cfg.oracle,
                                        cfg.noise_sigma, cfg.seed)
        self.records = {r.id: RequestRecord(r) for r in trace}
        self.trace = list(trace)
        self.queue: list[int] = []
        self.prefill_fifo: list[int] = []  # admitted, KV reserved
        self.progress: dict[int, int] = {}
        self.decode_running: list[int] = []
        self.decode_ready: list[int] = []
        self.kv_used = 0
        self.kv_budget = cfg.kv_pool_bytes - cfg.model.weight_bytes()
        self.heap: list = []
        self.seq = 0
        self.busy = False
        self.makespan = 0.0
        self.occ_prefill = 0.0
        self.occ_decode = 0.0
        self.queue_timeline: list[tuple[float, int]] = []
        self.partition_timeline: list[tuple[float, int, int, int, int]] = []

    def _push(self, t, kind, payload=None):
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def run(self) -> MetricsReport:
        for r in self.trace:
            self._push(r.arrival_s, "arrival", r.id)
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            self.makespan = max(self.makespan, t)
            if kind == "arrival":
                self.queue.append(payload)
                self._log(t)
                if not self.busy:
                    self._start_iteration(t)
            else:
                self._on_iteration(t, payload)
        mk = self.makespan
        report = compute_metrics([self.records[r.id] for r in self.trace],
                                 self.cfg.slo, mk,
                                 self.occ_prefill / mk if mk > 0 else 0.0,
                                 self.occ_decode / mk if mk > 0 else 0.0)
        report.queue_timeline = self.queue_timeline
        report.partition_timeline = self.partition_timeline
        report.decision_log = []
        return report

    def _log(self, t):
        qlen = len(self.queue) + len(self.prefill_fifo)
        self.queue_timeline.append((t, qlen))
        self.partition_timeline.append(
            (t, self.gpu.num_sms, self.gpu.num_sms, qlen, len(self.decode_running)))

    def _kv_need(self, rid):
        req = self.records[rid].request
        return kv_bytes(self.model, req.input_len + req.output_len)

    def _start_iteration(self, t: float) -> None:
        if self.busy:
            return
        for rid in self.decode_ready:
            self.records[rid].decode_start_s = t
        self.decode_running.extend(self.decode_ready)
        self.decode_ready = []

        ds = len(self.decode_running)
        budget = max(0, self.cs - ds)
        chunks: list[tuple[int, int, int]] = []  # (rid, take, prior)
        for rid in self.prefill_fifo:
            if budget <= 0:
                break
            rem = self.records[rid].request.input_len - self.progress[rid]
            take = min(budget, rem)
            if take > 0:
                chunks.append((rid, take, self.progress[rid]))
                budget -= take
        while budget > 0 and self.queue:
            nxt = next((r for r in self.queue
                        if self.kv_used + self._kv_need(r) <= self.kv_budget), None)
            if nxt is None:
                break
            self.queue.remove(nxt)
            self.kv_used += self._kv_need(nxt)
            self.prefill_fifo.append(nxt)
            self.progress[nxt] = 0
            self.records[nxt].state = "prefilling"
            take = min(budget, self.records[nxt].request.input_len)
            chunks.append((nxt, take, 0))
            budget -= take

        if not chunks and not self.decode_running:
            return
        ctxs = [self.records[r].ctx_len for r in self.decode_running]
        step_s = self.oracle.hybrid_iteration_s(
            [(take, prior) for _, take, prior in chunks], ctxs, self.gpu.num_sms)
        step_s += self.cfg.metadata_overhead_s
        chunk_tokens = sum(take for _, take, _ in chunks)
        total = chunk_tokens + ds
        if total > 0:
            self.occ_prefill += self.gpu.num_sms * step_s * chunk_tokens / total
            self.occ_decode += self.gpu.num_sms * step_s * ds / total
        self.busy = True
        self._push(t + step_s, "iteration",
                   {"chunks": chunks, "decode": list(self.decode_running),
                    "step_s": step_s})

    def _on_iteration(self, t: float, p: dict) -> None:
        self.busy = False
        keep = []
        for rid in p["decode"]:
            rec = self.records[rid]
            rec.token_times.append(t)
            rec.emitted += 1
            rec.ctx_len += 1
            if rec.emitted >= rec.request.output_len:
                rec.state = "finished"
                self.kv_used -= self._kv_need(rid)
            else:
                keep.append(rid)
        self.decode_running = keep
        for rid, take, _ in p["chunks"]:
            self.progress[rid] += take
            rec = self.records[rid]
            if self.progress[rid] >= rec.request.input_len:
                self.prefill_fifo.remove(rid)
                rec.prefill_done_s = t
                rec.token_times.append(t)
                rec.emitted = 1
                rec.ctx_len = rec.request.input_len + 1
                if rec.emitted >= rec.request.output_len:
                    rec.state = "finished"
                    self.kv_used -= self._kv_need(rid)
                else:
                    rec.state = "decoding"
                    self.decode_ready.append(rid)
        self._log(t)
        self._start_iteration(t)


def run(cfg: SimConfig, trace: Sequence[Request]) -> MetricsReport:
    """Simulate one policy over a trace; dispatches on ``cfg.policy.name``."""
    if cfg.policy.name == "chunked":
        return _ChunkedSim(cfg, trace).run()
    return _ConcurrentSim(cfg, trace).run()


def run_chunked(cfg: SimConfig, trace: Sequence[Request]) -> MetricsReport:
    if cfg.policy.name != "chunked":
        raise InvalidArgumentError("run_chunked requires a chunked policy")
    return _ChunkedSim(cfg, trace).run()


def run_static(cfg: SimConfig, trace: Sequence[Request]) -> MetricsReport:
    if cfg.policy.name != "static":
        raise InvalidArgumentError("run_static requires a static policy")
    return _ConcurrentSim(cfg, trace).run()


# -- calibration evaluation ----------------------------------------------------


def mape(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean absolute relative error of (measured, predicted) pairs."""
    if not pairs:
        raise InvalidArgumentError("mape of empty sample")
    return float(np.mean([abs(m - p) / m for m, p in pairs]))


def decode_mape_sm_axis(oracle: GroundTruthOracle, estimator: PerfEstimator,
                        tokens: int, sm_grid: Sequence[int]) -> float:
    """Estimator error across the SM axis at a fixed decode token scale."""
    pairs = []
    for dm in sm_grid:
        es = canonical_decode_es(tokens, dm)
        measured = oracle.decode_step_s(es)
        predicted = estimator.decode_step_s(list(es.decode_ctx_lens), dm)
        pairs.append((measured, predicted))
    return mape(pairs)


def decode_mape_grid(oracle: GroundTruthOracle, estimator: PerfEstimator,
                     ctx_lens: Sequence[int], batch_sizes: Sequence[int],
                     sm_grid: Sequence[int]) -> float:
    """Estimator error across a (context length, batch size, SMs) grid."""
    pairs = []
    for cl in ctx_lens:
        for bs in batch_sizes:
            ctxs = [cl] * bs
            for dm in sm_grid:
                es = ExecutionState(decode_ctx_lens=tuple(ctxs), decode_sms=dm)
                measured = oracle.decode_step_s(es)
                predicted = estimator.decode_step_s(ctxs, dm)
                pairs.append((measured, predicted))
    return mape(pairs)


def prefill_mape_grid(oracle: GroundTruthOracle, estimator: PerfEstimator,
                      seq_lens: Sequence[int], sm_grid: Sequence[int]) -> float:
    pairs = []
    for sl in seq_lens:
        for pm in sm_grid:
            es = ExecutionState(prefill_lens=(sl,), prefill_sms=pm)
            measured = oracle.prefill_layer_s(es)
            predicted = estimator.prefill_layer_s([sl], pm)
            pairs.append((measured, predicted))
    return mape(pairs)


# -- report serialization -------------------------------------------------------


def write_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Emit metrics JSON, per-request CSV, decision log and timeline CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.json",
        "per_request": out / "per_request.csv",
        "decisions": out / "decisions.jsonl",
        "timeline": out / "timeline.csv",
    }
    paths["metrics"].write_text(report.to_json() + "\n")
    with open(paths["per_request"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "arrival_s", "ttft_s", "norm_ttft_ms_per_tok",
                    "tpot_ms", "finished"])
        for row in report.per_request:
            w.writerow([row["id"], row["arrival_s"], row["ttft_s"],
                        row["norm_ttft_ms_per_tok"], row["tpot_ms"],
                        int(row["finished"])])
    log_fields = ("t", "pm", "dm", "branch", "batch", "layers")
    with open(paths["decisions"], "w") as fh:
        for entry in report.decision_log:
            fh.write(json.dumps({k: entry[k] for k in log_fields if k in entry}) + "\n")
    with open(paths["timeline"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "pm", "dm", "queue_len", "decode_batch"])
        for row in report.partition_timeline:
            w.writerow(row)
    return paths


def load_metrics(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
