"""Search space, config sampling, grid search, and Pareto extraction.

Training samples one configuration per step, uniformly over the valid
enumerated configs (joint uniformity, not per-knob: per-knob draws would
overweight knob values with more valid partners). After training, the grid
search evaluates every config once against a validation set and a latency
source, with no retraining in between.
"""

import csv
import functools
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import InvalidSpaceError
from .model.config import ModelConfig

_KNOB_FIELDS = ("resolutions", "patch_sizes", "window_counts", "decoder_depths", "query_counts")


@dataclass(frozen=True)
class SearchSpace:
    """Admissible values per knob; enumeration filters invalid combinations."""

    resolutions: tuple[int, ...]
    patch_sizes: tuple[int, ...]
    window_counts: tuple[int, ...]
    decoder_depths: tuple[int, ...]
    query_counts: tuple[int, ...]

    def __post_init__(self):
        for name in _KNOB_FIELDS:
            values = tuple(sorted(set(int(v) for v in getattr(self, name))))
            object.__setattr__(self, name, values)

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in _KNOB_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        missing = [k for k in _KNOB_FIELDS if k not in d]
        if missing:
            raise InvalidSpaceError(f"space file missing knobs: {missing}")
        return cls(**{k: tuple(d[k]) for k in _KNOB_FIELDS})

    def contains(self, other: "SearchSpace") -> bool:
        """True if every knob set of ``other`` is a subset of this space's."""
        return all(
            set(getattr(other, name)) <= set(getattr(self, name)) for name in _KNOB_FIELDS
        )


def read_space_file(path: str | Path) -> SearchSpace:
    with open(path) as f:
        return SearchSpace.from_dict(json.load(f))


def write_space_file(path: str | Path, space: SearchSpace) -> None:
    with open(path, "w") as f:
        json.dump(space.to_dict(), f, indent=2)


@functools.lru_cache(maxsize=64)
def _enumerate_cached(space: SearchSpace, mask_head_enabled: bool) -> tuple[ModelConfig, ...]:
    for name in _KNOB_FIELDS:
        if not getattr(space, name):
            raise InvalidSpaceError(f"knob set {name} is empty")
    configs = []
    for res, patch, win, depth, queries in itertools.product(
        space.resolutions, space.patch_sizes, space.window_counts,
        space.decoder_depths, space.query_counts,
    ):
        cfg = ModelConfig(
            resolution=res, patch_size=patch, num_windows=win,
            num_decoder_layers=depth, num_queries=queries,
            mask_head_enabled=mask_head_enabled,
        )
        if cfg.is_valid():
            configs.append(cfg)
    return tuple(configs)


def enumerate_space(space: SearchSpace, mask_head_enabled: bool = False) -> list[ModelConfig]:
    """All valid configs in deterministic sorted order."""
    return list(_enumerate_cached(space, mask_head_enabled))


def sample_config(
    space: SearchSpace, rng: np.random.Generator, mask_head_enabled: bool = False
) -> ModelConfig:
    """Uniform draw over the enumerated valid configs."""
    configs = _enumerate_cached(space, mask_head_enabled)
    if not configs:
        raise InvalidSpaceError("search space enumerates to zero valid configs")
    return configs[int(rng.integers(len(configs)))]


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of non-dominated (latency, accuracy) points.

    A point is dominated when another has latency <= and accuracy >= with at
    least one strict inequality. Exact duplicates keep the first occurrence.
    Returned indices are ordered by ascending latency.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1], i))
    kept: list[int] = []
    best_acc = -float("inf")
    for i in order:
        if points[i][1] > best_acc:
            kept.append(i)
            best_acc = points[i][1]
    return kept


@dataclass
class ParetoPoint:
    config: ModelConfig
    accuracy: float
    latency_ms: float
    flops: int

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "accuracy": self.accuracy,
            "latency_ms": self.latency_ms,
            "flops": self.flops,
        }


@dataclass
class ParetoReport:
    """Evaluated (config, accuracy, latency, flops) points and the frontier."""

    points: list[ParetoPoint]
    frontier: list[int]
    errors: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "frontier": list(self.frontier),
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParetoReport":
        points = [
            ParetoPoint(
                config=ModelConfig.from_dict(p["config"]),
                accuracy=p["accuracy"], latency_ms=p["latency_ms"], flops=p["flops"],
            )
            for p in d["points"]
        ]
        return cls(points=points, frontier=list(d["frontier"]), errors=list(d.get("errors", [])))

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path: str | Path) -> None:
        cols = ["resolution", "patch_size", "num_windows", "num_decoder_layers",
                "num_queries", "mask_head_enabled", "accuracy", "latency_ms", "flops", "on_frontier"]
        frontier = set(self.frontier)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for i, p in enumerate(self.points):
                cfg = p.config.to_dict()
                writer.writerow([cfg[c] for c in cols[:6]]
                                + [p.accuracy, p.latency_ms, p.flops, int(i in frontier)])


def grid_search(
    weights,
    space: SearchSpace,
    val_dataset,
    latency_source: Callable[[Any, ModelConfig], float],
    accuracy_evaluator: Callable[[Any, ModelConfig, Any], Any] | None = None,
    mask_head_enabled: bool = False,
    fine_tune: Callable[[Any, ModelConfig], Any] | None = None,
) -> ParetoReport:
    """Evaluate every config in the space once; no retraining in between.

    ``latency_source`` maps (weights, config) to milliseconds and may be a
    measured harness or an analytic FLOPs proxy. Evaluator failures are
    recorded per config and the search continues. ``fine_tune``, off by
    default, may return a per-config adapted copy of the weights to evaluate;
    the shared weights themselves are never touched.
    """
    from .benchkit import estimate_flops
    from .evalkit import evaluate_config

    evaluator = accuracy_evaluator or evaluate_config
    points: list[ParetoPoint] = []
    errors: list[dict] = []
    for cfg in enumerate_space(space, mask_head_enabled=mask_head_enabled):
        try:
            cfg_weights = fine_tune(weights, cfg) if fine_tune is not None else weights
            result = evaluator(cfg_weights, cfg, val_dataset)
            latency = float(latency_source(cfg_weights, cfg))
            flops = estimate_flops(cfg, cfg_weights.arch)
            points.append(ParetoPoint(config=cfg, accuracy=result.ap, latency_ms=latency, flops=flops))
        except Exception as exc:  # noqa: BLE001 - recorded per config by contract
            errors.append({"config": cfg.to_dict(), "error": f"{type(exc).__name__}: {exc}"})
    frontier = pareto_frontier([(p.latency_ms, p.accuracy) for p in points])
    return ParetoReport(points=points, frontier=frontier, errors=errors)


def flops_latency_proxy(weights, config: ModelConfig) -> float:
    """Analytic latency stand-in: estimated MFLOPs as pseudo-milliseconds."""
    from .benchkit import estimate_flops

    return estimate_flops(config, weights.arch) / 1e6
