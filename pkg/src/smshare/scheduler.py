"""SLO-aware prefill/decode scheduling and SM-partition decisions.

The prefill scheduler runs once per layer-step cycle.  Each cycle it
refreshes projected time-to-first-token for every queued and in-flight
request, reorders the queue by ascending predicted latency where doing
so provably creates no new SLO violation, batches queued requests until
the batch's arithmetic intensity reaches the partition's compute/memory
ridge, and then adjusts the SM split:

* both SLOs projected violated -> globally re-balance (`set_balanced_sm`);
* decode P90 TPOT within SLO  -> shift `sm_step` SMs decode->prefill,
  suspending decode outright when the projected post-suspension TPOT P90
  still meets the SLO;
* otherwise                    -> shift `sm_step` SMs prefill->decode.

The decode scheduler is deliberately boring: FCFS token emission, new
requests merge at step boundaries, no reordering.  All functions are
pure decisions over `SystemState` except that refreshed TTFT estimates
are written back into the state's estimate buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidArgumentError
from .perf_model import ExecutionState, PerfEstimator
from .workload import batch_intensity, layer_kernels


@dataclass(frozen=True)
class SloSpec:
    """Latency targets: normalized TTFT (s per input token) and TPOT (s)."""

    norm_ttft_s_per_token: float
    tpot_s: float

    def __post_init__(self) -> None:
        if self.norm_ttft_s_per_token <= 0 or self.tpot_s <= 0:
            raise InvalidArgumentError("SLO targets must be positive")


@dataclass(frozen=True)
class SchedulerConfig:
    l_step: int = 4
    sm_step: int = 2
    p90_window: int = 64
    transition_layers: int = 4
    # Prefill batching stops once aggregate intensity reaches this multiple of
    # the partition ridge.  At the ridge itself (factor 1) a single mid-sized
    # prefill already qualifies and batching degenerates; the default keeps
    # appending until the pass is deep enough to run near peak efficiency.
    intensity_saturation: float = 16.0

    def __post_init__(self) -> None:
        if self.l_step < 1 or self.sm_step < 1:
            raise InvalidArgumentError("l_step and sm_step must be >= 1")
        if self.p90_window < 10:
            raise InvalidArgumentError("p90_window must be >= 10")
        if self.transition_layers < 0:
            raise InvalidArgumentError("transition_layers must be >= 0")
        if self.intensity_saturation <= 0:
            raise InvalidArgumentError("intensity_saturation must be > 0")


@dataclass
class ReqView:
    """Scheduler-visible request facts."""

    id: int
    arrival_s: float
    input_len: int
    ctx_len: int = 0  # attended context once decoding


@dataclass
class PrefillState:
    queue: list[int] = field(default_factory=list)
    in_flight: list[int] = field(default_factory=list)
    layers_done: int = 0


@dataclass
class SystemState:
    es: ExecutionState
    ps: PrefillState
    requests: dict[int, ReqView]
    sim_time: float
    tpot_window: Sequence[float] = ()
    ttft_estimates: dict[int, float] = field(default_factory=dict)
    decode_running: tuple[int, ...] = ()
    decode_ready: tuple[int, ...] = ()
    kv_blocked: frozenset[int] = frozenset()
    decode_last_step_s: float = 0.0  # when decode last emitted tokens


@dataclass
class ScheduleDecision:
    next_tasks: list[int]
    layers_to_run: int
    new_prefill_sms: int
    new_decode_sms: int
    decode_suspended: bool = False
    branch: str = "noop"
    queue_order: tuple[int, ...] = ()
    predicted_step_s: float = 0.0


def quantile(values: Sequence[float], q: float) -> float:
    """Linear-interpolated empirical quantile (numpy 'linear' method)."""
    if not values:
        raise InvalidArgumentError("quantile of empty sample")
    vals = sorted(values)
    if len(vals) == 1:
        return vals[0]
    pos = q * (len(vals) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (pos - lo) * (vals[hi] - vals[lo])


def p90(values: Sequence[float]) -> float:
    return quantile(values, 0.9)


def _own_exec_s(state: SystemState, estimator: PerfEstimator, rid: int, pm: int) -> float:
    return estimator.prefill_exec_s([state.requests[rid].input_len], pm)


def refresh_ttft_estimates(state: SystemState, estimator: PerfEstimator,
                           queue_order: Sequence[int] | None = None) -> dict[int, float]:
    """Projected TTFT for every request in P and Q at the current partition.

    Queued requests assume FCFS service behind the in-flight batch and the
    queue entries ahead of them, each executing at the current prefill SMs.
    The refreshed map is written into ``state.ttft_estimates``.
    """
    pm = state.es.prefill_sms
    t = state.sim_time
    num_layers = estimator.model.num_layers
    estimates: dict[int, float] = {}
    ahead = 0.0
    if state.ps.in_flight:
        lens = [state.requests[r].input_len for r in state.ps.in_flight]
        remaining = num_layers - state.ps.layers_done
        ahead = remaining * estimator.prefill_layer_s(lens, pm)
        for rid in state.ps.in_flight:
            estimates[rid] = (t - state.requests[rid].arrival_s) + ahead
    for rid in (state.ps.queue if queue_order is None else queue_order):
        own = _own_exec_s(state, estimator, rid, pm)
        estimates[rid] = (t - state.requests[rid].arrival_s) + ahead + own
        ahead += own
    state.ttft_estimates = estimates
    return estimates


def _norm_ttft(state: SystemState, estimates: dict[int, float], rid: int) -> float:
    return estimates[rid] / state.requests[rid].input_len


def reorder_queue(state: SystemState, slo: SloSpec,
                  estimator: PerfEstimator) -> list[int]:
    """Sort the queue by ascending predicted execution time without creating
    a new TTFT violation for any displaced request."""
    q = list(state.ps.queue)
    if len(q) < 2:
        return q
    pm = state.es.prefill_sms
    t = state.sim_time
    own = {rid: _own_exec_s(state, estimator, rid, pm) for rid in q}
    ahead0 = 0.0
    if state.ps.in_flight:
        lens = [state.requests[r].input_len for r in state.ps.in_flight]
        remaining = estimator.model.num_layers - state.ps.layers_done
        ahead0 = remaining * estimator.prefill_layer_s(lens, pm)
    for _ in range(len(q)):
        swapped = False
        ahead = ahead0
        for i in range(len(q) - 1):
            x, y = q[i], q[i + 1]
            if own[y] < own[x]:
                rx = state.requests[x]
                displaced_ttft = (t - rx.arrival_s) + ahead + own[y] + own[x]
                if displaced_ttft <= slo.norm_ttft_s_per_token * rx.input_len:
                    q[i], q[i + 1] = y, x
                    swapped = True
            ahead += own[q[i]]
        if not swapped:
            break
    return q


def _form_batch(state: SystemState, estimator: PerfEstimator,
                order: Sequence[int],
                saturation: float = SchedulerConfig().intensity_saturation) -> list[int]:
    """Pop queued requests until the batch's aggregate arithmetic intensity
    saturates the partition; KV-blocked requests are skipped, not popped."""
    pm = max(1, state.es.prefill_sms)
    threshold = saturation * estimator.ridge_intensity(pm)
    batch: list[int] = []
    lens: list[int] = []
    for rid in order:
        if rid in state.kv_blocked:
            continue
        batch.append(rid)
        lens.append(state.requests[rid].input_len)
        kernels = layer_kernels(estimator.model, "prefill", sum(lens), lens)
        if batch_intensity(kernels) >= threshold:
            break
    return batch


def _prefill_ttft_ratio(state: SystemState, slo: SloSpec, estimator: PerfEstimator,
                        pm: int, order: Sequence[int]) -> float:
    """Worst (in-flight) or P90 (queued) projected normalized TTFT over Γ_p."""
    if pm < 1:
        return math.inf
    t = state.sim_time
    num_layers = estimator.model.num_layers
    norms: list[float] = []
    ahead = 0.0
    if state.ps.in_flight:
        lens = [state.requests[r].input_len for r in state.ps.in_flight]
        remaining = num_layers - state.ps.layers_done
        ahead = remaining * estimator.prefill_layer_s(lens, pm)
        worst = max((t - state.requests[r].arrival_s + ahead) / state.requests[r].input_len
                    for r in state.ps.in_flight)
        return worst / slo.norm_ttft_s_per_token
    for rid in order:
        own = _own_exec_s(state, estimator, rid, pm)
        est = (t - state.requests[rid].arrival_s) + ahead + own
        norms.append(est / state.requests[rid].input_len)
        ahead += own
    if not norms:
        return 0.0
    return p90(norms) / slo.norm_ttft_s_per_token


def set_balanced_sm(state: SystemState, slo: SloSpec, estimator: PerfEstimator,
                    cfg: SchedulerConfig) -> tuple[int, int]:
    """Grid-search the SM split minimizing the worse of the two SLO ratios.

    Ties break toward larger prefill share (smaller decode share).
    """
    n = estimator.gpu.num_sms
    step = cfg.sm_step
    order = list(state.ps.queue)
    ctxs = list(state.es.decode_ctx_lens)
    co_tokens = state.es.prefill_tokens if state.ps.in_flight else (
        sum(state.requests[r].input_len for r in order[:1]))
    best: tuple[int, int] | None = None
    best_cost = math.inf
    for dm in range(step, n, step):
        pm = n - dm
        r_p = _prefill_ttft_ratio(state, slo, estimator, pm, order)
        r_d = (estimator.decode_step_s(ctxs, dm, co_tokens) / slo.tpot_s) if ctxs else 0.0
        cost = max(r_p, r_d)
        if cost < best_cost:
            best_cost = cost
            best = (pm, dm)
    assert best is not None
    return best


def min_decode_sms(state: SystemState, slo: SloSpec, estimator: PerfEstimator,
                   cfg: SchedulerConfig) -> int:
    """Smallest decode share on the sm_step grid whose projected TPOT meets
    the SLO under current contention; the full GPU if none does."""
    n = estimator.gpu.num_sms
    ctxs = list(state.es.decode_ctx_lens)
    if not ctxs:
        return cfg.sm_step
    co = state.es.prefill_tokens
    for dm in range(cfg.sm_step, n + 1, cfg.sm_step):
        if estimator.decode_step_s(ctxs, dm, co) <= slo.tpot_s:
            return dm
    return n


def projected_suspension_p90(state: SystemState, slo: SloSpec,
                             estimator: PerfEstimator, cfg: SchedulerConfig,
                             batch_lens: Sequence[int]) -> float:
    """TPOT P90 if decode pauses until the pending prefill work completes.

    The stalled step is modeled as one window sample covering the gap since
    decode last emitted tokens, the full-GPU prefill completion time and a
    resumed decode step; repeated suspensions therefore pay for stall time
    they have already accrued.
    """
    n = estimator.gpu.num_sms
    num_layers = estimator.model.num_layers
    if state.ps.in_flight:
        remaining = num_layers - state.ps.layers_done
        lens = [state.requests[r].input_len for r in state.ps.in_flight]
    else:
        remaining = num_layers
        lens = list(batch_lens)
    if not lens:
        return 0.0
    stall = remaining * estimator.prefill_layer_s(lens, n)
    if state.decode_running:
        stall += max(0.0, state.sim_time - state.decode_last_step_s)
    resume_dm = max(state.es.decode_sms, cfg.sm_step)
    resume_step = estimator.decode_step_s(list(state.es.decode_ctx_lens), resume_dm)
    window = list(state.tpot_window) + [stall + resume_step]
    return p90(window)


def schedule_prefill(state: SystemState, slo: SloSpec, estimator: PerfEstimator,
                     cfg: SchedulerConfig) -> ScheduleDecision:
    """One SLO-aware prefill scheduling cycle; see the module docstring."""
    es = state.es
    n = estimator.gpu.num_sms
    pm, dm = es.prefill_sms, es.decode_sms
    num_layers = estimator.model.num_layers
    decode_active = es.decode_batch > 0 or bool(state.decode_ready)

    order = tuple(reorder_queue(state, slo, estimator))
    estimates = refresh_ttft_estimates(state, estimator, order)
    tpot_p90 = p90(state.tpot_window) if state.tpot_window else None
    tpot_ok = tpot_p90 is None or tpot_p90 <= slo.tpot_s

    if not state.ps.in_flight and not order and not decode_active and not state.decode_ready:
        return ScheduleDecision([], state.ps.layers_done, pm, dm, False, "noop", order)

    gamma_p = slo.norm_ttft_s_per_token
    if state.ps.in_flight:
        satisfy = all(_norm_ttft(state, estimates, r) <= gamma_p
                      for r in state.ps.in_flight)
        next_tasks = list(state.ps.in_flight)
    elif order:
        satisfy = p90([_norm_ttft(state, estimates, r) for r in order]) <= gamma_p
        next_tasks = _form_batch(state, estimator, order, cfg.intensity_saturation)
    else:
        satisfy = True
        next_tasks = []

    prefill_pending = bool(next_tasks or order or state.ps.in_flight)
    suspended = False
    if not satisfy and not tpot_ok:
        new_pm, new_dm = set_balanced_sm(state, slo, estimator, cfg)
        branch = "balanced"
    elif tpot_ok:
        if not decode_active:
            new_pm, new_dm = n, 0
            branch = "reduce_decode" if (new_pm, new_dm) != (pm, dm) else "noop"
        else:
            batch_lens = [state.requests[r].input_len for r in next_tasks]
            if (prefill_pending and projected_suspension_p90(
                    state, slo, estimator, cfg, batch_lens) <= slo.tpot_s):
                new_pm, new_dm, suspended = n, 0, True
                branch = "suspend"
            elif dm < 1:
                # Decode is being handed the GPU (activation or transition);
                # there is nothing to take from it yet.
                new_pm, new_dm = pm, dm
                branch = "noop"
            else:
                new_dm = max(dm - cfg.sm_step, cfg.sm_step)
                new_pm = n - new_dm
                branch = "reduce_decode" if (new_pm, new_dm) != (pm, dm) else "noop"
    else:
        cap = n - cfg.sm_step if prefill_pending else n
        new_dm = min(dm + cfg.sm_step, cap)
        new_pm = n - new_dm
        branch = "reduce_prefill" if (new_pm, new_dm) != (pm, dm) else "noop"

    layers_to_run = min(state.ps.layers_done + cfg.l_step, num_layers)
    return ScheduleDecision(next_tasks, layers_to_run, new_pm, new_dm,
                            suspended, branch, order)


def schedule_decode(state: SystemState, slo: SloSpec, estimator: PerfEstimator,
                    cfg: SchedulerConfig) -> ScheduleDecision:
    """Merge freshly prefilled requests and predict the next step's latency.

    Token emission is FCFS: the running batch is never reordered, and merge
    candidates whose KV does not fit stay on the ready list.
    """
    merged = list(state.decode_running)
    for rid in state.decode_ready:
        if rid not in state.kv_blocked:
            merged.append(rid)
    if not merged:
        return ScheduleDecision([], estimator.model.num_layers, state.es.prefill_sms,
                                state.es.decode_sms, False, "noop")
    ctxs = [max(1, state.requests[r].ctx_len or state.requests[r].input_len)
            for r in merged]
    co = state.es.prefill_tokens if state.ps.in_flight else 0
    predicted = estimator.decode_step_s(ctxs, max(state.es.decode_sms, 1), co)
    return ScheduleDecision(merged, estimator.model.num_layers, state.es.prefill_sms,
                            state.es.decode_sms, False, "decode",
                            predicted_step_s=predicted)


def transition_handoff(state: SystemState, cfg: SchedulerConfig,
                       num_sms: int, num_layers: int) -> ScheduleDecision:
    """End-of-prefill SM handoff: grant decode the full GPU for the last
    `transition_layers` of the final in-flight batch, then everything."""
    if not state.ps.in_flight:
        return ScheduleDecision([], state.ps.layers_done, 0, num_sms,
                                False, "transition")
    if state.ps.layers_done < num_layers - cfg.transition_layers:
        raise InvalidArgumentError("handoff called before the transition window")
    layers_to_run = min(state.ps.layers_done + cfg.l_step, num_layers)
    return ScheduleDecision(list(state.ps.in_flight), layers_to_run,
                            state.es.prefill_sms, num_sms, False, "transition")
