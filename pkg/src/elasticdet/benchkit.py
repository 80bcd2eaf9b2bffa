"""Standardized latency measurement and analytic FLOPs accounting.

The measurement protocol pauses a fixed buffer (default 200 ms) between
consecutive forward passes so power draw settles and throttling cannot skew
the timings; it measures reproducible single-stream latency, not sustained
throughput. Accuracy and latency are always reported from one serialized
artifact, proven by a content digest.
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ArtifactDigestError, BenchRunnerError
from .model.config import ModelConfig
from .model.network import ArchConfig


# --- latency protocol ---------------------------------------------------------

@dataclass
class BenchProtocol:
    buffer_ms: float = 200.0
    warmup_iters: int = 3
    measure_iters: int = 10
    timer: Callable[[], float] = time.perf_counter
    sleep: Callable[[float], None] = time.sleep

    def validate(self) -> None:
        if self.buffer_ms < 0:
            raise ValueError(f"buffer_ms must be >= 0, got {self.buffer_ms}")
        if self.measure_iters < 1:
            raise ValueError(f"measure_iters must be >= 1, got {self.measure_iters}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0, got {self.warmup_iters}")


@dataclass
class ThrottleEvent:
    index: int
    timestamp: float
    severity: float  # fractional drop below baseline at the episode minimum


@dataclass
class TelemetryTrace:
    """Timestamped clock or power samples from a pluggable source."""

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values must have equal length")
        if len(self.timestamps) and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")


def summarize_latencies(per_iter_ms: Sequence[float]) -> dict[str, float]:
    """Statistics as a pure function of the per-iteration timings."""
    arr = np.asarray(per_iter_ms, dtype=np.float64)
    return {
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "p50_ms": float(np.percentile(arr, 50)),
        "p99_ms": float(np.percentile(arr, 99)),
    }


@dataclass
class LatencyReport:
    per_iter_ms: list[float]
    mean_ms: float
    std_ms: float
    p50_ms: float
    p99_ms: float
    min_gap_ms: float
    throttle_events: list[ThrottleEvent] = field(default_factory=list)
    buffer_ms: float = 0.0
    warmup_iters: int = 0
    measure_iters: int = 0
    artifact_digest: str | None = None

    def to_dict(self) -> dict:
        return {
            "per_iter_ms": list(self.per_iter_ms),
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "p50_ms": self.p50_ms,
            "p99_ms": self.p99_ms,
            "min_gap_ms": self.min_gap_ms,
            "throttle_events": [
                {"index": e.index, "timestamp": e.timestamp, "severity": e.severity}
                for e in self.throttle_events
            ],
            "protocol": {
                "buffer_ms": self.buffer_ms,
                "warmup_iters": self.warmup_iters,
                "measure_iters": self.measure_iters,
            },
            "artifact_digest": self.artifact_digest,
        }


def measure_latency(
    runner: Callable[[], object],
    protocol: BenchProtocol,
    telemetry: TelemetryTrace | None = None,
) -> LatencyReport:
    """Warm up, then time measure_iters calls with a >= buffer_ms pause
    between the end of one call and the start of the next."""
    protocol.validate()
    timer, sleep = protocol.timer, protocol.sleep
    buffer_s = protocol.buffer_ms / 1000.0

    per_iter_ms: list[float] = []
    min_gap = float("inf")
    prev_end: float | None = None
    total = protocol.warmup_iters + protocol.measure_iters
    for i in range(total):
        if prev_end is not None:
            if buffer_s > 0:
                sleep(buffer_s)
            start = timer()
            min_gap = min(min_gap, (start - prev_end) * 1000.0)
        else:
            start = timer()
        try:
            runner()
        except Exception as exc:
            phase = "warmup" if i < protocol.warmup_iters else "measure"
            raise BenchRunnerError(f"runner failed at {phase} iteration {i}: {exc}", i) from exc
        prev_end = timer()
        if i >= protocol.warmup_iters:
            per_iter_ms.append((prev_end - start) * 1000.0)

    stats = summarize_latencies(per_iter_ms)
    events = detect_throttle(telemetry) if telemetry is not None and len(telemetry.values) else []
    return LatencyReport(
        per_iter_ms=per_iter_ms,
        min_gap_ms=0.0 if math.isinf(min_gap) else min_gap,
        throttle_events=events,
        buffer_ms=protocol.buffer_ms,
        warmup_iters=protocol.warmup_iters,
        measure_iters=protocol.measure_iters,
        **stats,
    )


def detect_throttle(
    trace: TelemetryTrace,
    baseline_window: int = 10,
    drop_fraction: float = 0.15,
) -> list[ThrottleEvent]:
    """Emit one event per contiguous episode of samples below
    (1 - drop_fraction) x the mean of the first baseline_window samples."""
    if len(trace.values) == 0:
        raise ValueError("telemetry trace is empty")
    baseline = float(trace.values[: max(1, baseline_window)].mean())
    threshold = (1.0 - drop_fraction) * baseline
    below = trace.values < threshold

    events: list[ThrottleEvent] = []
    i = 0
    n = len(below)
    while i < n:
        if below[i]:
            j = i
            while j < n and below[j]:
                j += 1
            episode_min = float(trace.values[i:j].min())
            events.append(ThrottleEvent(
                index=i,
                timestamp=float(trace.timestamps[i]),
                severity=1.0 - episode_min / baseline if baseline > 0 else 1.0,
            ))
            i = j
        else:
            i += 1
    return events


# --- same-artifact benchmarking -----------------------------------------------

@dataclass
class ArtifactBenchResult:
    eval_result: object
    latency: LatencyReport
    digest: str


def bench_artifact(
    artifact_path: str | Path,
    dataset,
    protocol: BenchProtocol,
    config: ModelConfig | None = None,
    telemetry: TelemetryTrace | None = None,
) -> ArtifactBenchResult:
    """Accuracy and latency from one deserialized artifact.

    The file digest is taken before the accuracy phase and re-checked before
    and after the latency phase; any change is a hard error and the final
    report embeds the digest.
    """
    import torch

    from .evalkit import evaluate_config
    from .model.archive import artifact_digest, load_weights
    from .model.network import model_forward
    from .training import batch_resize, dataset_to_samples

    digest = artifact_digest(artifact_path)
    weights, _space, meta = load_weights(artifact_path)
    if config is None:
        config = meta.get("default_config")
        if config is None:
            raise ValueError("artifact stores no default config; pass one explicitly")

    eval_result = evaluate_config(weights, config, dataset)

    if artifact_digest(artifact_path) != digest:
        raise ArtifactDigestError(
            f"artifact changed between accuracy and latency phases: {artifact_path}"
        )

    samples = dataset_to_samples(dataset, with_masks=False)[:1]
    images, _ = batch_resize(samples, config.resolution)

    def runner():
        with torch.no_grad():
            model_forward(images, config, weights)

    report = measure_latency(runner, protocol, telemetry=telemetry)
    report.artifact_digest = digest

    if artifact_digest(artifact_path) != digest:
        raise ArtifactDigestError(f"artifact changed during the latency phase: {artifact_path}")
    return ArtifactBenchResult(eval_result=eval_result, latency=report, digest=digest)


# --- analytic FLOPs -----------------------------------------------------------

def linear_flops(tokens: int, in_dim: int, out_dim: int) -> int:
    """A linear layer on t tokens costs 2 * t * m * n flops (mul + add)."""
    return 2 * tokens * in_dim * out_dim


def attention_projection_flops(tokens: int, dim: int) -> int:
    """q, k, v and output projections of self-attention over t tokens."""
    return 4 * linear_flops(tokens, dim, dim)


def attention_core_flops(tokens: int, dim: int, num_windows: int = 1) -> int:
    """Score and mix matmuls: 4 * t^2 * d, with t^2 replaced by
    num_windows^2 * (t / num_windows^2)^2 under windowed attention."""
    per_window = tokens // (num_windows * num_windows)
    return 4 * num_windows * num_windows * per_window * per_window * dim


def estimate_flops(config: ModelConfig, arch: ArchConfig) -> int:
    """Analytic per-forward flop count (batch 1) mirroring the model's
    matmul and convolution operators; elementwise work is not counted."""
    config.validate()
    d = arch.embed_dim
    hidden = int(d * arch.mlp_ratio)
    t = config.num_tokens
    k = config.num_queries
    c = arch.num_classes
    nw = config.num_windows
    windowed = set(arch.resolved_windowed_blocks())

    total = 0
    # patch kernel resampling (a matmul when the patch size is elastic)
    if config.patch_size != arch.base_patch_size:
        total += 2 * (3 * d) * arch.base_patch_size ** 2 * config.patch_size ** 2
    # patchify convolution = linear over 3 * p^2 inputs per token
    total += linear_flops(t, 3 * config.patch_size ** 2, d)

    for i in range(arch.enc_depth):
        if i in windowed and nw > 1:
            seq = t + nw * nw  # one class-token copy per window
            total += attention_projection_flops(seq, d)
            total += attention_core_flops(seq, d, nw)
        else:
            seq = t + 1
            total += attention_projection_flops(seq, d)
            total += attention_core_flops(seq, d, 1)
        total += linear_flops(t + 1, d, hidden) + linear_flops(t + 1, hidden, d)

    # projector and encoder-stage proposal heads over all tokens
    total += linear_flops(t, d, d)
    total += linear_flops(t, d, c)
    total += linear_flops(t, d, d) * 2 + linear_flops(t, d, 4)

    # query initialization
    total += linear_flops(k, d, d)

    for _ in range(config.num_decoder_layers):
        total += linear_flops(k, d, d)  # query position projection
        # self attention over k queries
        total += attention_projection_flops(k, d) + attention_core_flops(k, d, 1)
        # cross attention: q on k queries, k/v on t memory tokens
        total += linear_flops(k, d, d) * 2 + linear_flops(t, d, d) * 2
        total += 2 * (2 * k * t * d)  # scores and mix
        total += linear_flops(k, d, hidden) + linear_flops(k, hidden, d)
        # per-layer head
        total += linear_flops(k, d, c)
        total += linear_flops(k, d, d) * 2 + linear_flops(k, d, 4)

    if config.mask_head_enabled:
        side = config.resolution // 4
        m = arch.mask_dim
        # pixel embedding projector (3x3 then 1x1 conv on the stride-4 map)
        total += 2 * side * side * d * d * 9
        total += 2 * side * side * d * m
        # mask FFN for the final stage plus the query/pixel dot product
        total += linear_flops(k, d, d) + linear_flops(k, d, m)
        total += 2 * k * m * side * side
    return total


def make_measured_latency_source(
    protocol: BenchProtocol, batch_size: int = 1, seed: int = 0
) -> Callable[[object, ModelConfig], float]:
    """Latency source for grid search that times real forward passes."""
    import torch

    from .model.network import model_forward

    def source(weights, config: ModelConfig) -> float:
        gen = torch.Generator().manual_seed(seed)
        images = torch.rand(batch_size, 3, config.resolution, config.resolution, generator=gen)

        def runner():
            with torch.no_grad():
                model_forward(images, config, weights)

        return measure_latency(runner, protocol).mean_ms

    return source
