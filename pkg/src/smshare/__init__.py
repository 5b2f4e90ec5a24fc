"""smshare: latency modeling and simulation of SM-partitioned LLM serving."""

from .errors import ConfigError, InvalidArgumentError
from .perf_model import (
    CalibrationStore,
    ExecutionState,
    GpuSpec,
    KernelDesc,
    PerfEstimator,
    calibrate,
    contention_bandwidth,
    estimate_latency,
    scaled_peaks,
    srm_latency,
    update_online,
    wave_stats,
)
from .workload import (
    ChunkPlan,
    ModelSpec,
    Request,
    batch_intensity,
    chunk_plan,
    gen_poisson_trace,
    kv_bytes,
    layer_kernels,
)

__version__ = "0.1.0"
