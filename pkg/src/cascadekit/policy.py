"""Deferral policies: turn per-output signals into a cascade decision.

A decision always records which ensemble output would be selected, even
when the query defers, because offline curve construction re-thresholds
the same scores at every deferral rate. The deferral comparison is strict:
defer exactly when score < threshold. Argmax ties resolve to the lowest
index so replay is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .confidence import CalibrationStats, ChowVariant, chow_score, z_normalize
from .errors import CalibrationRequired, MissingLogprobs, UnknownMetric
from .metrics import EMBEDDING_METRIC, METRICS, agreement_matrix, mean_pairwise_scores

POLICY_KINDS = ("semantic", "token", "oracle", "partial_oracle")
AGGREGATORS = ("max", "mean")


@dataclass(frozen=True)
class Decision:
    """The cascade's verdict for one query."""

    selected_index: int
    deferral_score: float
    deferred: bool
    per_output_scores: tuple[float, ...]
    policy_id: str


def _argmax_lowest(values: Sequence[float]) -> int:
    best = max(values)
    return next(i for i, v in enumerate(values) if v == best)


def aggregate(scores: Sequence[float], kind: str) -> float:
    """Collapse per-output scores into one deferral score (max or mean).

    The mean sums sorted addends so it is bit-identical under permutation
    of the ensemble.
    """
    if kind == "max":
        return max(scores)
    if kind == "mean":
        return sum(sorted(scores)) / len(scores)
    raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {kind!r}")


def semantic_decide(
    outputs: Sequence[str],
    metric: str,
    threshold: float,
    aggregator: str = "max",
    embeddings: Sequence[Sequence[float]] | None = None,
) -> Decision:
    """Decide from semantic agreement among ensemble outputs.

    Per-output scores are the mean pairwise similarity to all other
    outputs; the deferral score aggregates them (max by default, mean as
    the alternative); the selected output is the one other outputs agree
    with most.
    """
    scores = mean_pairwise_scores(agreement_matrix(outputs, metric, embeddings))
    deferral_score = aggregate(scores, aggregator)
    return Decision(
        selected_index=_argmax_lowest(scores),
        deferral_score=deferral_score,
        deferred=deferral_score < threshold,
        per_output_scores=tuple(scores),
        policy_id=f"semantic:{metric}:{aggregator}",
    )


def token_decide(
    model_ids: Sequence[str],
    logprob_seqs: Sequence[Sequence[float] | None],
    variant: ChowVariant,
    stats: CalibrationStats | None,
    threshold: float,
    normalize: bool = True,
) -> Decision:
    """Decide from token-level confidence.

    Each output's log-probabilities collapse to a raw confidence, which is
    z-normalized against the model's calibration so heterogeneous models
    become comparable. Selection goes to the highest normalized confidence;
    the deferral score is the mean of the normalized confidences (for a
    single model that is just its own score). Raw, unnormalized scores are
    only allowed for single-model cascades.
    """
    if len(model_ids) != len(logprob_seqs) or not model_ids:
        raise ValueError("need one logprob sequence per model, at least one model")
    if normalize and stats is None:
        raise CalibrationRequired("normalization requested but no stats supplied")
    if not normalize and len(model_ids) > 1:
        raise CalibrationRequired("raw confidences are not comparable across models")
    scores: list[float] = []
    for model_id, logprobs in zip(model_ids, logprob_seqs):
        if logprobs is None:
            raise MissingLogprobs(f"output from {model_id!r} carries no log-probabilities")
        raw = chow_score(logprobs, variant)
        scores.append(z_normalize(raw, model_id, stats) if normalize else raw)
    deferral_score = aggregate(scores, "mean")
    return Decision(
        selected_index=_argmax_lowest(scores),
        deferral_score=deferral_score,
        deferred=deferral_score < threshold,
        per_output_scores=tuple(scores),
        policy_id=f"token:{variant.label()}",
    )


def oracle_decide(
    qualities: Sequence[float], target_quality: float, threshold: float = 0.0
) -> Decision:
    """Upper-bound policy with perfect knowledge of per-output quality.

    Selects the best ensemble output and scores the query by how much that
    best output beats the target (higher = keep, matching every other
    policy's sign convention). Curve construction re-thresholds by rank, so
    the deferred flag here is informational; by default it marks queries
    where the target is strictly better.
    """
    if not qualities:
        raise ValueError("need at least one ensemble quality")
    deferral_score = max(qualities) - target_quality
    return Decision(
        selected_index=_argmax_lowest(qualities),
        deferral_score=deferral_score,
        deferred=deferral_score < threshold,
        per_output_scores=tuple(qualities),
        policy_id="oracle",
    )


def partial_oracle_decide(
    qualities: Sequence[float], semantic_score: float, threshold: float
) -> Decision:
    """Oracle selection, semantic deferral.

    Always picks the best ensemble output but defers on the supplied
    agreement score, isolating how much of a cascade's headroom comes from
    output selection versus the deferral signal itself.
    """
    if not qualities:
        raise ValueError("need at least one ensemble quality")
    return Decision(
        selected_index=_argmax_lowest(qualities),
        deferral_score=semantic_score,
        deferred=semantic_score < threshold,
        per_output_scores=tuple(qualities),
        policy_id="partial_oracle",
    )


@dataclass(frozen=True)
class PolicySpec:
    """Parsed policy configuration fragment.

    JSON shape: {"policy": "semantic", "metric": "rouge_l",
    "aggregator": "max", "threshold": 0.7}. Token policies carry
    {"variant": {"kind": "avg"}} plus optional "stats" (path to a fitted
    calibration file) and "normalize" (default true). Any policy may pin
    "models" to a subset of the trace's ensemble, and "id" overrides the
    derived policy id.
    """

    policy: str
    metric: str = "rouge_l"
    aggregator: str = "max"
    threshold: float = 0.0
    variant: ChowVariant | None = None
    normalize: bool = True
    stats_path: str | None = None
    models: tuple[str, ...] | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        if self.policy not in POLICY_KINDS:
            raise ValueError(f"policy must be one of {POLICY_KINDS}, got {self.policy!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.policy in ("semantic", "partial_oracle") and self.metric not in METRICS:
            raise UnknownMetric(f"unsupported metric {self.metric!r}")
        if self.policy == "token" and self.variant is None:
            raise ValueError("token policy needs a confidence variant")

    @property
    def policy_id(self) -> str:
        if self.name:
            return self.name
        if self.policy == "semantic":
            return f"semantic:{self.metric}:{self.aggregator}"
        if self.policy == "token":
            suffix = "" if self.normalize else ":raw"
            return f"token:{self.variant.label()}{suffix}"
        if self.policy == "partial_oracle":
            return f"partial_oracle:{self.metric}:{self.aggregator}"
        return "oracle"

    @property
    def needs_embeddings(self) -> bool:
        return (
            self.policy in ("semantic", "partial_oracle")
            and self.metric == EMBEDDING_METRIC
        )

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicySpec":
        variant = data.get("variant")
        models = data.get("models")
        return cls(
            policy=data["policy"],
            metric=data.get("metric", "rouge_l"),
            aggregator=data.get("aggregator", "max"),
            threshold=float(data.get("threshold", 0.0)),
            variant=ChowVariant.from_dict(variant) if variant is not None else None,
            normalize=bool(data.get("normalize", True)),
            stats_path=data.get("stats"),
            models=tuple(models) if models is not None else None,
            name=data.get("id"),
        )

    def to_dict(self) -> dict:
        out: dict = {"policy": self.policy, "threshold": self.threshold}
        if self.policy in ("semantic", "partial_oracle"):
            out["metric"] = self.metric
            out["aggregator"] = self.aggregator
        if self.policy == "token":
            out["variant"] = self.variant.to_dict()
            if not self.normalize:
                out["normalize"] = False
            if self.stats_path:
                out["stats"] = self.stats_path
        if self.models is not None:
            out["models"] = list(self.models)
        if self.name:
            out["id"] = self.name
        return out


def apply_policy(
    spec: PolicySpec,
    model_ids: Sequence[str],
    texts: Sequence[str],
    logprob_seqs: Sequence[Sequence[float] | None] | None = None,
    *,
    stats: CalibrationStats | None = None,
    embeddings: Sequence[Sequence[float]] | None = None,
    output_qualities: Sequence[float] | None = None,
    target_quality: float | None = None,
) -> Decision:
    """Run one configured policy over a query's ensemble outputs.

    This is the single decision path shared by the live gateway and the
    offline harness, which is what makes record/replay comparisons exact.
    Oracle policies need ``output_qualities`` (and the full oracle also
    ``target_quality``); the partial oracle additionally derives its
    deferral score from semantic agreement over ``texts``.
    """
    if spec.policy == "semantic":
        return semantic_decide(
            texts, spec.metric, spec.threshold, spec.aggregator, embeddings
        )
    if spec.policy == "token":
        if logprob_seqs is None:
            logprob_seqs = [None] * len(model_ids)
        return token_decide(
            model_ids, logprob_seqs, spec.variant, stats, spec.threshold, spec.normalize
        )
    if output_qualities is None:
        raise ValueError(f"{spec.policy} policy needs per-output qualities")
    if spec.policy == "oracle":
        if target_quality is None:
            raise ValueError("oracle policy needs the target's quality")
        return oracle_decide(output_qualities, target_quality)
    semantic_score = aggregate(
        mean_pairwise_scores(agreement_matrix(texts, spec.metric, embeddings)),
        spec.aggregator,
    )
    return partial_oracle_decide(output_qualities, semantic_score, spec.threshold)
