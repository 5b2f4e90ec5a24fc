"""Command-line front end.

Subcommands: wave | gen-trace | simulate | sweep | calibrate | diff.
Experiments are described by a TOML config file (see README for the full
key reference); unknown keys are rejected with their location.  Every
command is deterministic given its arguments and seeds.  Exit codes:
0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version shim
    import tomli as tomllib

from .engine import (
    CalibrationBudget,
    GroundTruthOracle,
    OracleConfig,
    PolicySpec,
    SimConfig,
    build_calibration_store,
    decode_mape_grid,
    decode_mape_sm_axis,
    load_metrics,
    prefill_mape_grid,
    run,
    write_report,
)
from .errors import ConfigError, InvalidArgumentError
from .perf_model import GPU_PRESETS, GpuSpec, PerfEstimator, wave_stats
from .scheduler import SchedulerConfig, SloSpec
from .workload import (
    MODEL_PRESETS,
    TRACE_PRESETS,
    LengthDist,
    ModelSpec,
    gen_poisson_trace,
    layer_kernels,
    load_trace,
    save_trace,
)

_DIST_SCHEMA = {"kind": str, "value": int, "lo": int, "hi": int,
                "median": float, "sigma": float, "path": str}

CONFIG_SCHEMA = {
    "gpu": {"preset": str, "name": str, "num_sms": int, "c_peak": float,
            "d_peak": float, "w_peak": float, "n_d": int, "n_w": int},
    "model": {"preset": str, "name": str, "num_layers": int, "hidden": int,
              "num_heads": int, "num_kv_heads": int, "head_dim": int,
              "intermediate": int, "dtype_bytes": int, "activated_fraction": float},
    "slo": {"norm_ttft_ms_per_token": float, "tpot_ms": float},
    "sched": {"l_step": int, "sm_step": int, "p90_window": int,
              "transition_layers": int, "intensity_saturation": float},
    "engine": {"policy": str, "chunk_size": int, "static_pm": int,
               "kv_pool_gb": float, "seed": int, "noise_sigma": float,
               "reconfig_us": float, "overlap_penalty": float,
               "metadata_overhead_ms": float, "predict_overhead_us": float},
    "oracle": {"prefill_alpha": list, "decode_alpha": list,
               "contention_max_loss": float, "contention_half_tokens": float},
    "calibration": {"mode": str, "prefill_sms": list, "prefill_tokens": list,
                    "decode_sms": list, "decode_tokens": list,
                    "contention_sms": list, "contention_prefill_lens": list},
    "trace": {"source": str, "path": str, "rate": float, "duration_s": float,
              "preset": str, "seed": int,
              "input_len": _DIST_SCHEMA, "output_len": _DIST_SCHEMA},
    "output": {"dir": str},
}


def _check_schema(node: dict, schema: dict, where: str) -> None:
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"{where}{key}: unknown key")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key}: expected a table")
            _check_schema(value, expected, f"{where}{key}.")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}{key}: expected a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}{key}: expected an integer")
        elif not isinstance(value, expected):
            raise ConfigError(f"{where}{key}: expected {expected.__name__}")


class ExperimentConfig:
    """Validated experiment description: simulation, trace source, output dir."""

    def __init__(self, raw: dict):
        _check_schema(raw, CONFIG_SCHEMA, "")
        self.raw = raw

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                return cls(tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")

    def gpu(self) -> GpuSpec:
        sec = dict(self.raw.get("gpu", {}))
        preset = sec.pop("preset", "a100")
        if preset not in GPU_PRESETS:
            raise ConfigError(f"gpu.preset: unknown preset {preset!r} "
                              f"(have {sorted(GPU_PRESETS)})")
        base = GPU_PRESETS[preset]
        if not sec:
            return base
        fields = {k: getattr(base, k) for k in
                  ("name", "num_sms", "c_peak", "d_peak", "w_peak", "n_d", "n_w")}
        fields.update(sec)
        return GpuSpec(**fields)

    def model(self) -> ModelSpec:
        sec = dict(self.raw.get("model", {}))
        preset = sec.pop("preset", "llama3-8b")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"model.preset: unknown preset {preset!r} "
                              f"(have {sorted(MODEL_PRESETS)})")
        base = MODEL_PRESETS[preset]
        if not sec:
            return base
        fields = {k: getattr(base, k) for k in
                  ("name", "num_layers", "hidden", "num_heads", "num_kv_heads",
                   "head_dim", "intermediate", "dtype_bytes", "activated_fraction")}
        fields.update(sec)
        return ModelSpec(**fields)

    def sim_config(self, policy_override: str | None = None,
                   seed_override: int | None = None) -> SimConfig:
        slo_sec = self.raw.get("slo", {})
        slo = SloSpec(
            norm_ttft_s_per_token=slo_sec.get("norm_ttft_ms_per_token", 1.5) * 1e-3,
            tpot_s=slo_sec.get("tpot_ms", 200.0) * 1e-3)
        sched = SchedulerConfig(**self.raw.get("sched", {}))
        eng = self.raw.get("engine", {})
        policy_name = policy_override or eng.get("policy", "bullet")
        policy = PolicySpec(policy_name,
                            chunk_size=eng.get("chunk_size", 1024),
                            static_pm=eng.get("static_pm", self.gpu().num_sms))
        ora = self.raw.get("oracle", {})
        oracle = OracleConfig(
            prefill_alpha=tuple(ora.get("prefill_alpha", OracleConfig.prefill_alpha)),
            decode_alpha=tuple(ora.get("decode_alpha", OracleConfig.decode_alpha)),
            contention_max_loss=ora.get("contention_max_loss",
                                        OracleConfig.contention_max_loss),
            contention_half_tokens=ora.get("contention_half_tokens",
                                           OracleConfig.contention_half_tokens))
        cal = self.raw.get("calibration", {})
        budget = CalibrationBudget(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in cal.items()})
        seed = seed_override if seed_override is not None else eng.get("seed", 0)
        try:
            return SimConfig(
                gpu=self.gpu(), model=self.model(), slo=slo, sched=sched,
                policy=policy,
                kv_pool_bytes=int(eng.get("kv_pool_gb", 60.0) * 1024**3),
                seed=seed,
                noise_sigma=eng.get("noise_sigma", 0.0),
                reconfig_s=eng.get("reconfig_us", 4.1) * 1e-6,
                overlap_penalty=eng.get("overlap_penalty", 0.0),
                metadata_overhead_s=eng.get("metadata_overhead_ms", 0.21) * 1e-3,
                predict_overhead_s=eng.get("predict_overhead_us", 10.2) * 1e-6,
                oracle=oracle, calibration=budget)
        except (InvalidArgumentError, TypeError) as exc:
            raise ConfigError(str(exc))

    def trace(self, seed_override: int | None = None):
        sec = self.raw.get("trace", {})
        source = sec.get("source", "generate")
        if source == "file":
            if "path" not in sec:
                raise ConfigError("trace.path: required when trace.source = 'file'")
            return load_trace(sec["path"])
        if source != "generate":
            raise ConfigError(f"trace.source: expected 'file' or 'generate', got {source!r}")
        ins, outs = _resolve_dists(sec)
        seed = seed_override if seed_override is not None else sec.get("seed", 0)
        return gen_poisson_trace(sec.get("rate", 1.0), sec.get("duration_s", 60.0),
                                 ins, outs, seed)

    def out_dir(self, override=None) -> Path:
        if override:
            return Path(override)
        return Path(self.raw.get("output", {}).get("dir", "out"))


def _resolve_dists(sec: dict) -> tuple[LengthDist, LengthDist]:
    preset = sec.get("preset")
    if preset is not None:
        if preset not in TRACE_PRESETS:
            raise ConfigError(f"trace.preset: unknown preset {preset!r} "
                              f"(have {sorted(TRACE_PRESETS)})")
        ins, outs = TRACE_PRESETS[preset]
    else:
        ins, outs = TRACE_PRESETS["sharegpt-like"]
    try:
        if "input_len" in sec:
            ins = LengthDist.from_dict(sec["input_len"])
        if "output_len" in sec:
            outs = LengthDist.from_dict(sec["output_len"])
    except (KeyError, InvalidArgumentError) as exc:
        raise ConfigError(f"trace length distribution: {exc}")
    return ins, outs


# -- wave ---------------------------------------------------------------------


def _wave_rows(model: ModelSpec, gpu: GpuSpec, seq_lens):
    rows = []
    for sl in seq_lens:
        kernels = layer_kernels(model, "prefill", sl, [sl])
        idle = {k.name: wave_stats(k.grid_blocks, k.blocks_per_sm, gpu.num_sms).idle_ratio
                for k in kernels}
        flops = {k.name: k.flops for k in kernels}

        def weighted(names):
            tot = sum(flops[n] for n in names)
            return sum(flops[n] * idle[n] for n in names) / tot

        rows.append({
            "seq_len": sl,
            "qkv": idle["qkv"],
            "attn": idle["attn"],
            "o_proj": idle["o_proj"],
            "mlp": weighted(["mlp_up_gate", "mlp_down"]),
            "layer_total": weighted(list(flops)),
        })
    return rows


def cmd_wave(args) -> int:
    if args.config:
        exp = ExperimentConfig.load(args.config)
        model, gpu = exp.model(), exp.gpu()
    else:
        if args.model not in MODEL_PRESETS:
            raise ConfigError(f"--model: unknown preset {args.model!r}")
        if args.gpu not in GPU_PRESETS:
            raise ConfigError(f"--gpu: unknown preset {args.gpu!r}")
        model, gpu = MODEL_PRESETS[args.model], GPU_PRESETS[args.gpu]
    seq_lens = [int(s) for s in args.seq_lens.split(",") if s]
    if not seq_lens:
        raise ConfigError("--seq-lens: at least one sequence length required")
    rows = _wave_rows(model, gpu, seq_lens)
    cols = ["seq_len", "qkv", "attn", "o_proj", "mlp", "layer_total"]
    if not args.quiet:
        print(f"# SM idle ratio (%) from wave quantization, {model.name} on {gpu.name}")
        print(" ".join(f"{c:>12s}" for c in cols))
        for r in rows:
            print(f"{r['seq_len']:>12d} " + " ".join(
                f"{100 * r[c]:>12.1f}" for c in cols[1:]))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([r["seq_len"]] + [f"{100 * r[c]:.4f}" for c in cols[1:]])
    return 0


# -- gen-trace ------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    if not args.out:
        raise ConfigError("gen-trace: --out is required")
    if args.config:
        exp = ExperimentConfig.load(args.config)
        sec = dict(exp.raw.get("trace", {}))
    else:
        sec = {}
    if args.dist:
        sec["preset"] = args.dist
    ins, outs = _resolve_dists(sec)
    rate = args.rate if args.rate is not None else sec.get("rate", 1.0)
    duration = args.duration if args.duration is not None else sec.get("duration_s", 60.0)
    seed = args.seed if args.seed is not None else sec.get("seed", 0)
    try:
        trace = gen_poisson_trace(rate, duration, ins, outs, seed)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc))
    save_trace(trace, args.out)
    if not args.quiet:
        print(f"wrote {len(trace)} requests to {args.out}")
    return 0


# -- simulate ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    exp = ExperimentConfig.load(args.config)
    cfg = exp.sim_config(policy_override=args.policy, seed_override=args.seed)
    trace = exp.trace()
    report = run(cfg, trace)
    out = exp.out_dir(args.out)
    write_report(report, out)
    if not args.quiet:
        print(report.summary_line())
        print(f"reports in {out}")
    return 0


# -- sweep -------------------------------------------------------------------------


_AXIS_TARGETS = {
    "pm": ("engine", "static_pm"),
    "cs": ("engine", "chunk_size"),
    "rate": ("trace", "rate"),
    "seed": ("engine", "seed"),
    "noise": ("engine", "noise_sigma"),
}


def _parse_axis(spec: str):
    if "=" not in spec:
        raise ConfigError(f"axis {spec!r}: expected key=values")
    key, _, body = spec.partition("=")
    key = key.strip()
    body = body.strip().strip("{}")
    if not body:
        raise ConfigError(f"axis {key}: empty value list")
    if ".." in body:
        lo_s, _, rest = body.partition("..")
        hi_s, _, step_s = rest.partition(":")
        lo, hi = int(lo_s), int(hi_s)
        step = int(step_s) if step_s else 1
        if step < 1 or hi < lo:
            raise ConfigError(f"axis {key}: bad range {body!r}")
        values = list(range(lo, hi + 1, step))
    else:
        values = [float(v) if "." in v else int(v) for v in body.split(",") if v]
    if not values:
        raise ConfigError(f"axis {key}: empty value list")
    if key not in _AXIS_TARGETS:
        raise ConfigError(f"axis {key}: unknown key (have {sorted(_AXIS_TARGETS)})")
    return key, values


def _sweep_one(packed):
    raw, assignment, out_dir = packed
    exp = ExperimentConfig(raw)
    cfg = exp.sim_config()
    trace = exp.trace()
    report = run(cfg, trace)
    write_report(report, out_dir)
    row = dict(assignment)
    row.update(report.aggregates)
    return row


def cmd_sweep(args) -> int:
    exp = ExperimentConfig.load(args.config)
    axes = [_parse_axis(s) for s in args.axis]
    if not axes:
        raise ConfigError("at least one --axis required")
    out = exp.out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        assignment = {key: val for (key, _), val in zip(axes, combo)}
        raw = json.loads(json.dumps(exp.raw))  # deep, independent copy
        for key, val in assignment.items():
            section, field_name = _AXIS_TARGETS[key]
            raw.setdefault(section, {})[field_name] = val
            if key == "pm":
                raw["engine"]["policy"] = "static"
            elif key == "cs":
                raw["engine"]["policy"] = "chunked"
        tag = "-".join(f"{k}{v}" for k, v in assignment.items())
        jobs.append((raw, assignment, out / f"run-{tag}"))
    threads = int(os.environ.get("SMSHARE_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    csv_path = out / "sweep.csv"
    axis_names = [k for k, _ in axes]
    metric_names = [c for c in rows[0] if c not in axis_names]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(axis_names + metric_names)
        for row in rows:
            w.writerow([row[c] for c in axis_names + metric_names])
    if not args.quiet:
        print(f"{len(rows)} runs -> {csv_path}")
    return 0


# -- calibrate ------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    exp = ExperimentConfig.load(args.config)
    cfg = exp.sim_config(seed_override=args.seed)
    budget = cfg.calibration
    if budget.mode == "grid":
        n_prefill = len(budget.prefill_sms) * len(budget.prefill_tokens)
        n_decode = len(budget.decode_sms) * len(budget.decode_tokens)
        if n_prefill < 2 or n_decode < 2:
            raise ConfigError(
                "calibration: at least 2 samples per phase are required "
                "(interpolation needs two points)")
    oracle = GroundTruthOracle(cfg.model, cfg.gpu, cfg.oracle, 0.0, cfg.seed)
    store = build_calibration_store(oracle, budget)
    estimator = PerfEstimator(cfg.model, cfg.gpu, store)
    sm_grid = list(range(cfg.sched.sm_step, cfg.gpu.num_sms + 1, cfg.sched.sm_step))
    report = {
        "n_alpha_samples": len(store.alpha_samples),
        "n_contention_samples": len(store.contention_bw),
        "decode": {
            "sm_axis_mape": {
                str(tokens): decode_mape_sm_axis(oracle, estimator, tokens, sm_grid)
                for tokens in budget.decode_tokens},
            "grid_mape": decode_mape_grid(
                oracle, estimator,
                ctx_lens=[1024, 2048, 4096, 8192, 16384, 32768],
                batch_sizes=[1, 8, 32, 128, 256],
                sm_grid=[8, 30, 54, 78, 108]),
        },
        "prefill": {
            "grid_mape": prefill_mape_grid(
                oracle, estimator,
                seq_lens=[512, 1024, 4096, 8192, 16384, 32768],
                sm_grid=[8, 30, 54, 78, 108]),
        },
    }
    out = exp.out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.dump_jsonl(out / "calibration.jsonl")
    (out / "mape.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"decode grid MAPE {100 * report['decode']['grid_mape']:.2f}% | "
              f"prefill grid MAPE {100 * report['prefill']['grid_mape']:.2f}%")
        print(f"artifacts in {out}")
    return 0


# -- diff -----------------------------------------------------------------------------


def cmd_diff(args) -> int:
    rows = []
    for d in (args.dir_a, args.dir_b):
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise ConfigError(f"{path}: no metrics.json found")
        rows.append(load_metrics(path))
    a, b = rows
    from .engine import MetricsReport
    print(f"A ({args.dir_a}): " + MetricsReport([], a, [], [], []).summary_line())
    print(f"B ({args.dir_b}): " + MetricsReport([], b, [], [], []).summary_line())
    keys = ["throughput_rps", "ttft_mean_s", "ttft_p90_s", "tpot_mean_ms",
            "tpot_p90_ms", "slo_attainment"]
    print(f"{'metric':24s} {'A':>12s} {'B':>12s} {'B/A':>8s}")
    for k in keys:
        ratio = b[k] / a[k] if a[k] else float("inf")
        print(f"{k:24s} {a[k]:12.4f} {b[k]:12.4f} {ratio:8.3f}")
    return 0


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smshare",
        description="Latency modeling and simulation of SM-partitioned LLM serving")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", default=None, help="output path/directory")
    common.add_argument("--quiet", action="store_true", help="suppress chatter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wave", parents=[common],
                       help="wave-quantization idle-ratio table")
    p.add_argument("--model", default="llama3-8b")
    p.add_argument("--gpu", default="a100")
    p.add_argument("--seq-lens", default="1024,2048,4096,16384")
    p.set_defaults(fn=cmd_wave)

    p = sub.add_parser("gen-trace", parents=[common],
                       help="generate a Poisson arrival trace")
    p.add_argument("--rate", type=float, default=None, help="requests per second")
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--dist", default=None,
                   help=f"length preset: {', '.join(sorted(TRACE_PRESETS))}")
    p.set_defaults(fn=cmd_gen_trace)

    p = sub.add_parser("simulate", parents=[common], help="run one simulation")
    p.add_argument("--policy", default=None,
                   choices=["bullet", "chunked", "static", "nopartition"])
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="cross-product parameter sweep")
    p.add_argument("--axis", action="append", default=[],
                   help="e.g. pm=84..108:6 or cs=512,1024,2048")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("calibrate", parents=[common],
                       help="sample the oracle, fit the store, report MAPE")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("diff", help="compare two report directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.set_defaults(fn=cmd_diff)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    needs_config = args.command in ("simulate", "sweep", "calibrate")
    if needs_config and not args.config:
        print(f"smshare {args.command}: --config is required", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
