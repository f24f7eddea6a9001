"""Token-level confidence scores and per-model z-score calibration.

Raw confidence ranges differ wildly across heterogeneous models, so raw
scores are never comparable between models; ``fit_calibration`` plus
``z_normalize`` put them on a shared scale. All scoring functions are pure
and ``CalibrationStats`` is immutable, so everything is safe to share
across threads.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateCalibration,
    EmptySequence,
    InsufficientSamples,
    UnknownModel,
)

CHOW_KINDS = ("sum", "avg", "quantile")

# Below this stddev a model's calibration carries no signal and normalizing
# by it would blow raw noise up into huge z-scores.
SIGMA_FLOOR = 1e-9


@dataclass(frozen=True)
class ChowVariant:
    """Selector for a token-confidence flavor: sum, avg, or quantile(q)."""

    kind: str
    q: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in CHOW_KINDS:
            raise ValueError(f"kind must be one of {CHOW_KINDS}, got {self.kind!r}")
        if self.kind == "quantile":
            if self.q is None or not 0.0 <= self.q <= 1.0:
                raise ValueError(f"quantile variant needs q in [0, 1], got {self.q!r}")
        elif self.q is not None:
            raise ValueError(f"q is only meaningful for the quantile variant")

    def label(self) -> str:
        if self.kind == "quantile":
            return f"quantile@{self.q:g}"
        return self.kind

    def to_dict(self) -> dict:
        if self.kind == "quantile":
            return {"kind": self.kind, "q": self.q}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChowVariant":
        return cls(kind=data["kind"], q=data.get("q"))


def chow_score(logprobs: Sequence[float], variant: ChowVariant) -> float:
    """Scalar confidence from a sequence of token log-probabilities.

    sum: total log-probability of the sequence.
    avg: total normalized by sequence length.
    quantile: linear-interpolation quantile of the sorted values
    (q=0 gives the min, q=1 the max).
    """
    if len(logprobs) == 0:
        raise EmptySequence("cannot score an empty log-probability sequence")
    if variant.kind == "sum":
        return float(sum(logprobs))
    if variant.kind == "avg":
        return float(sum(logprobs) / len(logprobs))
    return float(np.quantile(np.asarray(logprobs, dtype=float), variant.q))


@dataclass(frozen=True)
class ModelStats:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class CalibrationStats:
    """Per-model mean/stddev of one confidence variant, frozen once fit."""

    variant: ChowVariant
    models: Mapping[str, ModelStats]

    def for_model(self, model_id: str) -> ModelStats:
        try:
            return self.models[model_id]
        except KeyError:
            raise UnknownModel(f"no calibration stats for model {model_id!r}") from None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.to_dict(),
            "models": {
                model_id: {"mean": s.mean, "std": s.std, "n": s.n}
                for model_id, s in sorted(self.models.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CalibrationStats":
        models = {
            model_id: ModelStats(mean=entry["mean"], std=entry["std"], n=entry["n"])
            for model_id, entry in data["models"].items()
        }
        return cls(variant=ChowVariant.from_dict(data["variant"]), models=models)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_calibration(
    samples: Mapping[str, Sequence[float]], variant: ChowVariant
) -> CalibrationStats:
    """Fit per-model mean and population stddev from raw confidence scores.

    Population (divide-by-N) stddev is used; with calibration sets of any
    real size the N vs N-1 distinction is immaterial, but one convention
    has to be pinned for reproducibility.
    """
    models: dict[str, ModelStats] = {}
    for model_id, raw in samples.items():
        if len(raw) < 2:
            raise InsufficientSamples(
                f"model {model_id!r} has {len(raw)} calibration samples, need >= 2"
            )
        mean = statistics.fmean(raw)
        std = statistics.pstdev(raw, mu=mean)
        models[model_id] = ModelStats(mean=float(mean), std=float(std), n=len(raw))
    return CalibrationStats(variant=variant, models=models)


def z_normalize(raw: float, model_id: str, stats: CalibrationStats) -> float:
    """Map a raw confidence onto the model's calibrated z-scale."""
    model = stats.for_model(model_id)
    if model.std < SIGMA_FLOOR:
        raise DegenerateCalibration(
            f"model {model_id!r} stddev {model.std:.3g} is below the floor {SIGMA_FLOOR:g}"
        )
    return (raw - model.mean) / model.std
