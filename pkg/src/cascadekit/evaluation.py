"""Quality scoring and the full deferral-curve evaluation suite.

A deferral curve is built by rank-thresholding: every example gets one
deferral score, examples are sorted by (score, example id) ascending, and
for each k in 0..N the k lowest-scored examples defer to the target. That
yields N+1 points whose quality, expected cost, and expected latency are
exact averages, not samples. All sums run left-to-right over the sorted
order so repeated evaluations are bit-identical.

Cost accounting: every ensemble member runs on every query (members run in
parallel), so a query always pays the sum of member costs and additionally
the target's cost when it defers. Latency accounting mirrors that with max
over members plus the target's latency when deferred, since the deferral
decision must precede the target call.
"""

from __future__ import annotations

import csv
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .confidence import CalibrationStats, ChowVariant, chow_score, fit_calibration
from .errors import (
    BudgetInfeasible,
    EmbeddingUnavailable,
    EmptyTrace,
    FingerprintMismatch,
    MissingLogprobs,
    ThresholdUnreachable,
    UnknownMetric,
    UnknownModel,
)
from .metrics import bleu, rouge_l, tokenize
from .policy import PolicySpec, apply_policy
from .trace import DatasetExample, Trace

Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]

_ARTICLES = ("a", "an", "the")


def normalize_answer(text: str) -> str:
    """Exact-match normalization: lowercase, strip punctuation, collapse
    whitespace, drop a leading article (a/an/the)."""
    lowered = text.lower()
    stripped = "".join(
        ch for ch in lowered if not unicodedata.category(ch).startswith("P")
    )
    tokens = stripped.split()
    if tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(tokens)


def quality_score(prediction: str, example: DatasetExample) -> float:
    """Reference-based quality of one prediction under the example's metric.

    exact_match gives 1.0 when the normalized prediction equals any
    normalized reference, else 0.0; rouge_l and bleu take the max over
    references.
    """
    if example.task_metric == "exact_match":
        normalized = normalize_answer(prediction)
        return 1.0 if any(normalize_answer(r) == normalized for r in example.references) else 0.0
    if example.task_metric == "rouge_l":
        pred_tokens = tokenize(prediction)
        return max(rouge_l(pred_tokens, tokenize(r)) for r in example.references)
    if example.task_metric == "bleu":
        pred_tokens = tokenize(prediction)
        return max(bleu(pred_tokens, tokenize(r)) for r in example.references)
    raise UnknownMetric(f"unsupported task metric {example.task_metric!r}")


class CostModel:
    """Per-token unit costs; per-query cost is unit * (prompt + completion).

    The conventional unit is FLOPs with unit cost 2 * parameter count, but
    any positive per-token rate (dollars, joules) works the same way.
    """

    def __init__(
        self,
        unit_costs: Mapping[str, float] | None = None,
        default_unit_cost: float | None = None,
    ):
        unit_costs = dict(unit_costs or {})
        for model_id, unit in unit_costs.items():
            if unit <= 0:
                raise ValueError(f"unit cost for {model_id!r} must be > 0, got {unit}")
        if default_unit_cost is not None and default_unit_cost <= 0:
            raise ValueError("default unit cost must be > 0")
        self._unit_costs = unit_costs
        self._default = default_unit_cost

    def unit_cost(self, model_id: str) -> float:
        if model_id in self._unit_costs:
            return self._unit_costs[model_id]
        if self._default is not None:
            return self._default
        raise UnknownModel(f"no unit cost for model {model_id!r}")

    def query_cost(self, model_id: str, prompt_tokens: int, completion_tokens: int) -> float:
        return self.unit_cost(model_id) * (prompt_tokens + completion_tokens)

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "CostModel":
        """Parse {"<model>": {"params": P} | {"unit_cost_per_token": U}, ...}
        with optional key "default_unit_cost"; params entries cost 2P per token."""
        if not data:
            return cls(default_unit_cost=1.0)
        unit_costs: dict[str, float] = {}
        default = None
        for model_id, entry in data.items():
            if model_id == "default_unit_cost":
                default = float(entry)
                continue
            if "unit_cost_per_token" in entry:
                unit_costs[model_id] = float(entry["unit_cost_per_token"])
            elif "params" in entry:
                unit_costs[model_id] = 2.0 * float(entry["params"])
            else:
                raise ValueError(
                    f"cost model entry for {model_id!r} needs params or unit_cost_per_token"
                )
        return cls(unit_costs, default)


@dataclass(frozen=True)
class ExampleOutcome:
    """Everything curve construction needs to know about one example."""

    example_id: str
    score: float
    kept_quality: float
    target_quality: float
    ensemble_cost: float
    target_cost: float
    ensemble_latency_ms: float
    target_latency_ms: float
    selected_model: str


@dataclass(frozen=True)
class CurvePoint:
    rate: float
    quality: float
    expected_cost: float
    expected_latency_ms: float


@dataclass(frozen=True)
class DeferralCurve:
    """Quality/cost/latency as a function of the deferral rate.

    target_mean_cost is the per-query cost of the hypothetical send
    -everything-to-the-target system; budget fractions are defined
    relative to it.
    """

    points: tuple[CurvePoint, ...]
    policy_id: str
    trace_fingerprint: str
    target_mean_cost: float


def fit_stats_from_trace(
    trace: Trace,
    variant: ChowVariant,
    model_ids: Sequence[str] | None = None,
    limit: int | None = None,
) -> CalibrationStats:
    """Fit calibration stats from a trace's recorded log-probabilities.

    Uses the first ``limit`` examples (all by default); which subset to
    calibrate on is deliberately the caller's choice.
    """
    model_ids = tuple(model_ids) if model_ids is not None else trace.ensemble_ids
    examples = trace.examples[:limit] if limit is not None else trace.examples
    if not examples:
        raise EmptyTrace("calibration needs at least one example")
    samples: dict[str, list[float]] = {m: [] for m in model_ids}
    for ex in examples:
        for model_id in model_ids:
            record = trace.generation(ex.id, model_id)
            if record.logprobs is None:
                raise MissingLogprobs(
                    f"({ex.id!r}, {model_id!r}) has no logprobs to calibrate on"
                )
            samples[model_id].append(chow_score(record.logprobs, variant))
    return fit_calibration(samples, variant)


def _resolve_models(trace: Trace, policy: PolicySpec) -> tuple[str, ...]:
    if policy.models is None:
        return trace.ensemble_ids
    unknown = [m for m in policy.models if m not in trace.ensemble_ids]
    if unknown:
        raise UnknownModel(f"policy pins models absent from the trace: {unknown}")
    return policy.models


def score_trace(
    trace: Trace,
    policy: PolicySpec,
    cost_model: CostModel | None = None,
    *,
    stats: CalibrationStats | None = None,
    embedder: Embedder | None = None,
) -> list[ExampleOutcome]:
    """Apply one policy to every example of a trace, ignoring its threshold.

    Token policies that normalize and carry no stats get stats fit from
    this trace's own logprobs, which keeps a bare offline evaluation
    self-contained and deterministic.
    """
    if not trace.examples:
        raise EmptyTrace("trace has no examples")
    cost_model = cost_model or CostModel(default_unit_cost=1.0)
    model_ids = _resolve_models(trace, policy)
    if policy.needs_embeddings and embedder is None:
        raise EmbeddingUnavailable(
            f"policy {policy.policy_id!r} needs embeddings; configure an embedding source"
        )
    if policy.policy == "token" and policy.normalize and stats is None:
        stats = fit_stats_from_trace(trace, policy.variant, model_ids)

    outcomes: list[ExampleOutcome] = []
    for ex in trace.examples:
        records = [trace.generation(ex.id, m) for m in model_ids]
        target = trace.generation(ex.id, trace.target_id)
        texts = [r.text for r in records]
        embeddings = list(embedder(texts)) if policy.needs_embeddings else None

        qualities = None
        target_quality = quality_score(target.text, ex)
        if policy.policy in ("oracle", "partial_oracle"):
            qualities = [quality_score(t, ex) for t in texts]

        decision = apply_policy(
            policy,
            model_ids,
            texts,
            [r.logprobs for r in records],
            stats=stats,
            embeddings=embeddings,
            output_qualities=qualities,
            target_quality=target_quality,
        )
        selected = decision.selected_index
        kept_quality = (
            qualities[selected] if qualities is not None
            else quality_score(texts[selected], ex)
        )
        outcomes.append(
            ExampleOutcome(
                example_id=ex.id,
                score=decision.deferral_score,
                kept_quality=kept_quality,
                target_quality=target_quality,
                ensemble_cost=sum(
                    cost_model.query_cost(r.model_id, r.prompt_tokens, r.completion_tokens)
                    for r in records
                ),
                target_cost=cost_model.query_cost(
                    target.model_id, target.prompt_tokens, target.completion_tokens
                ),
                ensemble_latency_ms=max(r.latency_ms for r in records),
                target_latency_ms=target.latency_ms,
                selected_model=model_ids[selected],
            )
        )
    return outcomes


def build_curve(
    outcomes: Sequence[ExampleOutcome],
    policy_id: str,
    trace_fingerprint: str = "",
) -> DeferralCurve:
    """Assemble the N+1-point deferral curve from per-example outcomes.

    The sweep is quadratic in N because every point re-sums its terms
    fresh; that keeps each point an independently auditable average and is
    cheap at trace scale.
    """
    if not outcomes:
        raise EmptyTrace("cannot build a curve from zero examples")
    rows = sorted(outcomes, key=lambda r: (r.score, r.example_id))
    n = len(rows)
    kept_q = [r.kept_quality for r in rows]
    target_q = [r.target_quality for r in rows]
    target_cost = [r.target_cost for r in rows]
    target_lat = [r.target_latency_ms for r in rows]
    base_cost = sum(r.ensemble_cost for r in rows)
    base_lat = sum(r.ensemble_latency_ms for r in rows)

    points = []
    for k in range(n + 1):
        points.append(
            CurvePoint(
                rate=k / n,
                quality=(sum(target_q[:k]) + sum(kept_q[k:])) / n,
                expected_cost=(base_cost + sum(target_cost[:k])) / n,
                expected_latency_ms=(base_lat + sum(target_lat[:k])) / n,
            )
        )
    return DeferralCurve(
        points=tuple(points),
        policy_id=policy_id,
        trace_fingerprint=trace_fingerprint,
        target_mean_cost=sum(target_cost) / n,
    )


def deferral_curve(
    trace: Trace,
    policy: PolicySpec,
    cost_model: CostModel | None = None,
    *,
    stats: CalibrationStats | None = None,
    embedder: Embedder | None = None,
) -> DeferralCurve:
    """Score a trace under one policy and sweep all N+1 deferral rates."""
    outcomes = score_trace(trace, policy, cost_model, stats=stats, embedder=embedder)
    return build_curve(outcomes, policy.policy_id, trace.fingerprint)


def auc_df(curve: DeferralCurve) -> float:
    """Trapezoidal area under quality over the deferral rate in [0, 1]."""
    total = 0.0
    for left, right in zip(curve.points, curve.points[1:]):
        total += (left.quality + right.quality) / 2.0 * (right.rate - left.rate)
    return total


def random_baseline_auc(base_quality: float, target_quality: float) -> float:
    """Expected area under the curve when deferring uniformly at random.

    Random deferral draws the straight line from the base quality at rate 0
    to the target quality at rate 1, whose area is the midpoint.
    """
    return (base_quality + target_quality) / 2.0


def rate_at_budget(curve: DeferralCurve, fraction: float) -> float:
    """Deferral rate whose expected cost equals the budget.

    The budget is ``fraction`` of the target-only mean cost. Expected cost
    is piecewise linear and non-decreasing in the rate, so the first
    bracketing segment is interpolated linearly; rates above full deferral
    clamp to 1.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    budget = fraction * curve.target_mean_cost
    costs = [p.expected_cost for p in curve.points]
    if costs[0] > budget:
        raise BudgetInfeasible(budget, costs[0])
    if budget >= costs[-1]:
        return 1.0
    for i in range(len(costs) - 1):
        if costs[i + 1] >= budget:
            span = costs[i + 1] - costs[i]
            t = 0.0 if span == 0.0 else (budget - costs[i]) / span
            left, right = curve.points[i], curve.points[i + 1]
            return left.rate + t * (right.rate - left.rate)
    return 1.0


def quality_at_budget(curve: DeferralCurve, fraction: float) -> float:
    """Quality at the operating point where cost hits the given budget
    fraction of the target-only system, linearly interpolated."""
    rate = rate_at_budget(curve, fraction)
    points = curve.points
    if rate >= points[-1].rate:
        return points[-1].quality
    for i in range(len(points) - 1):
        if points[i].rate <= rate <= points[i + 1].rate:
            span = points[i + 1].rate - points[i].rate
            t = 0.0 if span == 0.0 else (rate - points[i].rate) / span
            return points[i].quality + t * (points[i + 1].quality - points[i].quality)
    return points[-1].quality


def latency_at_quality(curve: DeferralCurve, target_quality: float, theta: float) -> float:
    """Expected latency at the smallest deferral rate whose quality reaches
    theta * target_quality.

    Expected latency is non-decreasing in the rate, so the first qualifying
    point is also the cheapest in latency among qualifying rates.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    needed = theta * target_quality
    for point in curve.points:
        if point.quality >= needed:
            return point.expected_latency_ms
    raise ThresholdUnreachable(needed, max(p.quality for p in curve.points))


@dataclass(frozen=True)
class PolicySummary:
    """One row of the summary report."""

    policy_id: str
    auc_df: float
    quality_at_budget: float | None
    latency_at_quality: float | None
    random_auc: float


def summarize(
    curve: DeferralCurve,
    budget_fraction: float = 0.4,
    quality_theta: float = 0.98,
) -> PolicySummary:
    """Scalar operating points for one curve.

    The latency threshold is theta times the curve's own full-deferral
    quality (the target model's mean quality); the random baseline runs
    from the curve's rate-0 quality to that same endpoint. Infeasible
    operating points come back as None rather than failing the report.
    """
    target_mean_quality = curve.points[-1].quality
    try:
        budget_quality = quality_at_budget(curve, budget_fraction)
    except BudgetInfeasible:
        budget_quality = None
    try:
        latency = latency_at_quality(curve, target_mean_quality, quality_theta)
    except ThresholdUnreachable:
        latency = None
    return PolicySummary(
        policy_id=curve.policy_id,
        auc_df=auc_df(curve),
        quality_at_budget=budget_quality,
        latency_at_quality=latency,
        random_auc=random_baseline_auc(curve.points[0].quality, target_mean_quality),
    )


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def emit_report(
    curves: Sequence[DeferralCurve],
    summaries: Sequence[PolicySummary],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write curves.csv and summary.csv with deterministic bytes.

    All curves must come from the same trace; rows are sorted and floats
    rendered with shortest round-trip repr, so two runs over the same trace
    produce byte-identical files.
    """
    fingerprints = {c.trace_fingerprint for c in curves}
    if len(fingerprints) > 1:
        raise FingerprintMismatch(f"curves span {len(fingerprints)} distinct traces")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    curves_path = out_dir / "curves.csv"
    with open(curves_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["policy_id", "r", "quality", "cost", "latency_ms"])
        for curve in sorted(curves, key=lambda c: c.policy_id):
            for point in curve.points:
                writer.writerow(
                    [
                        curve.policy_id,
                        _fmt(point.rate),
                        _fmt(point.quality),
                        _fmt(point.expected_cost),
                        _fmt(point.expected_latency_ms),
                    ]
                )

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["policy_id", "auc_df", "quality_at_budget", "latency_at_quality", "random_auc"]
        )
        for summary in sorted(summaries, key=lambda s: s.policy_id):
            writer.writerow(
                [
                    summary.policy_id,
                    _fmt(summary.auc_df),
                    _fmt(summary.quality_at_budget),
                    _fmt(summary.latency_at_quality),
                    _fmt(summary.random_auc),
                ]
            )
    return curves_path, summary_path
