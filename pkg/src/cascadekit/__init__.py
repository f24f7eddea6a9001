"""cascadekit: agreement-based cascade routing with an offline evaluation harness."""

__version__ = "0.1.0"

from .clients import (
    DecodingParams,
    EndpointSpec,
    EnsembleResult,
    Generation,
    complete,
    embed,
    fanout,
)
from .confidence import (
    CalibrationStats,
    ChowVariant,
    chow_score,
    fit_calibration,
    z_normalize,
)
from .evaluation import (
    CostModel,
    DeferralCurve,
    ExampleOutcome,
    PolicySummary,
    auc_df,
    build_curve,
    deferral_curve,
    emit_report,
    fit_stats_from_trace,
    latency_at_quality,
    quality_at_budget,
    quality_score,
    random_baseline_auc,
    rate_at_budget,
    score_trace,
    summarize,
)
from .gateway import (
    CascadeConfig,
    CascadeGateway,
    RouteResponse,
    build_app,
    calibrate_threshold,
    replay_decision,
    serve,
)
from .metrics import (
    AgreementMatrix,
    agreement_matrix,
    bleu,
    cosine_similarity,
    mean_pairwise_scores,
    rouge_l,
    rouge_n,
    tokenize,
)
from .policy import (
    Decision,
    PolicySpec,
    apply_policy,
    oracle_decide,
    partial_oracle_decide,
    semantic_decide,
    token_decide,
)
from .trace import (
    DatasetExample,
    GenerationRecord,
    Trace,
    TraceManifest,
    append_generation,
    load_dataset,
    load_trace,
    read_generations,
)

__all__ = [
    "__version__",
    # metrics
    "AgreementMatrix", "agreement_matrix", "bleu", "cosine_similarity",
    "mean_pairwise_scores", "rouge_l", "rouge_n", "tokenize",
    # confidence
    "CalibrationStats", "ChowVariant", "chow_score", "fit_calibration", "z_normalize",
    # policy
    "Decision", "PolicySpec", "apply_policy", "oracle_decide",
    "partial_oracle_decide", "semantic_decide", "token_decide",
    # clients
    "DecodingParams", "EndpointSpec", "EnsembleResult", "Generation",
    "complete", "embed", "fanout",
    # trace
    "DatasetExample", "GenerationRecord", "Trace", "TraceManifest",
    "append_generation", "load_dataset", "load_trace", "read_generations",
    # evaluation
    "CostModel", "DeferralCurve", "ExampleOutcome", "PolicySummary",
    "auc_df", "build_curve", "deferral_curve", "emit_report",
    "fit_stats_from_trace", "latency_at_quality", "quality_at_budget",
    "quality_score", "random_baseline_auc", "rate_at_budget", "score_trace",
    "summarize",
    # gateway
    "CascadeConfig", "CascadeGateway", "RouteResponse", "build_app",
    "calibrate_threshold", "replay_decision", "serve",
]
