"""Exception types shared across the toolkit."""

from __future__ import annotations


class CascadeError(Exception):
    """Base class for every error this package raises on purpose."""


# --- similarity metrics ---------------------------------------------------


class DimensionMismatch(CascadeError):
    """Vectors (or embedding batches) do not share a common dimension."""


class ZeroNormVector(CascadeError):
    """Cosine similarity is undefined for a zero-norm vector."""


class FewerThanTwoOutputs(CascadeError):
    """Pairwise agreement needs at least two ensemble outputs."""


class MissingEmbeddings(CascadeError):
    """The embedding-cosine metric was selected but no vectors were supplied."""


class UnknownMetric(CascadeError):
    """Metric selector is not one of the supported names."""


# --- token confidence -----------------------------------------------------


class EmptySequence(CascadeError):
    """Confidence scores are undefined on an empty log-probability sequence."""


class InsufficientSamples(CascadeError):
    """Calibration needs at least two raw scores per model."""


class UnknownModel(CascadeError):
    """No calibration statistics (or unit cost) registered for this model id."""


class DegenerateCalibration(CascadeError):
    """Calibration stddev is below the floor; z-scores would be meaningless."""


class CalibrationRequired(CascadeError):
    """Multi-model token scoring cannot mix raw confidences; fit stats first."""


class MissingLogprobs(CascadeError):
    """A policy needs token log-probabilities that an output does not carry."""


# --- endpoint clients -----------------------------------------------------


class Timeout(CascadeError):
    """An upstream request exceeded its deadline."""

    def __init__(self, endpoint_id: str, timeout_ms: float):
        super().__init__(f"endpoint {endpoint_id!r} timed out after {timeout_ms:.0f} ms")
        self.endpoint_id = endpoint_id
        self.timeout_ms = timeout_ms


class HttpError(CascadeError):
    """Non-2xx response or transport failure from an upstream endpoint."""

    def __init__(self, status: int | None, detail: str):
        super().__init__(f"upstream HTTP error (status={status}): {detail}")
        self.status = status
        self.detail = detail


class MalformedResponse(CascadeError):
    """Upstream replied 200 but the body does not match the wire contract."""


class EnsembleMemberFailure(CascadeError):
    """One fan-out member failed and the failure mode is fail-fast."""

    def __init__(self, endpoint_id: str, cause: Exception):
        super().__init__(f"ensemble member {endpoint_id!r} failed: {cause}")
        self.endpoint_id = endpoint_id
        self.cause = cause


class InsufficientSurvivors(CascadeError):
    """Degrade mode dropped failed members but fewer than two remain."""

    def __init__(self, failures: dict[str, Exception]):
        ids = ", ".join(sorted(failures))
        super().__init__(f"fewer than two ensemble members survived (failed: {ids})")
        self.failures = failures


class UpstreamFailure(CascadeError):
    """A non-ensemble upstream call (target or embedding endpoint) failed."""

    def __init__(self, model_id: str, cause: Exception):
        super().__init__(f"upstream {model_id!r} failed: {cause}")
        self.model_id = model_id
        self.cause = cause


# --- traces ----------------------------------------------------------------


class ParseError(CascadeError):
    """A JSONL line could not be decoded or has an invalid value."""

    def __init__(self, line_no: int, detail: str):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


class DuplicateId(CascadeError):
    """Two dataset examples share an id."""

    def __init__(self, line_no: int, example_id: str):
        super().__init__(f"line {line_no}: duplicate example id {example_id!r}")
        self.line_no = line_no
        self.example_id = example_id


class MissingField(CascadeError):
    """A required field is absent from a JSONL record."""

    def __init__(self, line_no: int, field: str):
        super().__init__(f"line {line_no}: missing field {field!r}")
        self.line_no = line_no
        self.field = field


class DuplicateGeneration(CascadeError):
    """Two generation records share the same (example_id, model_id)."""

    def __init__(self, example_id: str, model_id: str):
        super().__init__(f"duplicate generation for ({example_id!r}, {model_id!r})")
        self.example_id = example_id
        self.model_id = model_id


class UnknownExample(CascadeError):
    """A generation record references an example id absent from the dataset."""

    def __init__(self, example_id: str):
        super().__init__(f"generation references unknown example {example_id!r}")
        self.example_id = example_id


class IncompleteTrace(CascadeError):
    """An (example, model) pair required by the trace has no generation."""

    def __init__(self, example_id: str, model_id: str):
        super().__init__(f"missing generation for ({example_id!r}, {model_id!r})")
        self.example_id = example_id
        self.model_id = model_id


# --- evaluation -------------------------------------------------------------


class EmptyTrace(CascadeError):
    """The operation needs at least one example."""


class BudgetInfeasible(CascadeError):
    """Even deferring nothing costs more than the requested budget."""

    def __init__(self, budget: float, floor_cost: float):
        super().__init__(
            f"budget {budget:.6g} is below the ensemble-only cost {floor_cost:.6g}"
        )
        self.budget = budget
        self.floor_cost = floor_cost


class ThresholdUnreachable(CascadeError):
    """No deferral rate reaches the requested quality level."""

    def __init__(self, requested: float, max_quality: float):
        super().__init__(
            f"no point reaches quality {requested:.6g}; best achieved {max_quality:.6g}"
        )
        self.requested = requested
        self.max_quality = max_quality


class EmbeddingUnavailable(CascadeError):
    """A policy needs embeddings and no embedding source is configured."""


class FingerprintMismatch(CascadeError):
    """A report may only combine curves built from the same trace."""


# --- gateway ----------------------------------------------------------------


class ConfigError(CascadeError):
    """Cascade configuration violates an invariant."""
