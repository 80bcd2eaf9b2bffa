"""Weights archive: one self-describing file per trained model.

The archive bundles the shared parameters, the architecture dimensions, the
search space the model was trained under, and a default inference config.
Accuracy and latency reports reference the archive by content digest.
"""

import hashlib
from pathlib import Path
from typing import Any

import torch

from ..nas import SearchSpace
from .config import ModelConfig
from .network import ArchConfig, ElasticWeights

ARCHIVE_FORMAT = "elasticdet-weights-v1"


def artifact_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_weights(
    path: str | Path,
    weights: ElasticWeights,
    space: SearchSpace,
    default_config: ModelConfig | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    payload = {
        "format": ARCHIVE_FORMAT,
        "arch": weights.arch.to_dict(),
        "state_dict": weights.state_dict(),
        "search_space": space.to_dict(),
        "default_config": default_config.to_dict() if default_config else None,
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)


def load_weights(path: str | Path) -> tuple[ElasticWeights, SearchSpace, dict[str, Any]]:
    """Returns (weights, search space, meta). meta contains 'default_config'
    as a ModelConfig when one was stored."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{path} is not a weights archive (format={payload.get('format')!r})")
    weights = ElasticWeights(ArchConfig.from_dict(payload["arch"]))
    weights.load_state_dict(payload["state_dict"])
    weights.eval()
    space = SearchSpace.from_dict(payload["search_space"])
    meta = dict(payload.get("meta") or {})
    if payload.get("default_config"):
        meta["default_config"] = ModelConfig.from_dict(payload["default_config"])
    return weights, space, meta
