"""Dataset ingestion and durable record/replay of generations.

Both files are JSONL: one example or one generation record per line, so a
crashed run leaves a readable prefix and partial runs can be resumed by
re-running only the missing (example, model) pairs. Completeness is
enforced at load time, not at write time.

dataset line:
    {"id": "ex1", "prompt": "...", "references": ["..."], "task_metric": "exact_match"}
generations line:
    {"example_id": "ex1", "model_id": "small-a", "text": "...",
     "logprobs": [-0.1, ...] | null, "latency_ms": 12.3,
     "prompt_tokens": 10, "completion_tokens": 3}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .clients import Generation
from .errors import (
    DuplicateGeneration,
    DuplicateId,
    IncompleteTrace,
    MissingField,
    ParseError,
    UnknownExample,
)

TASK_METRICS = ("exact_match", "rouge_l", "bleu")


@dataclass(frozen=True)
class DatasetExample:
    id: str
    prompt: str
    references: tuple[str, ...]
    task_metric: str


@dataclass(frozen=True)
class GenerationRecord:
    """One persisted generation: a Generation plus its join keys."""

    example_id: str
    model_id: str
    text: str
    logprobs: tuple[float, ...] | None
    latency_ms: float
    prompt_tokens: int
    completion_tokens: int

    @classmethod
    def from_generation(cls, example_id: str, gen: Generation) -> "GenerationRecord":
        return cls(
            example_id=example_id,
            model_id=gen.model_id,
            text=gen.text,
            logprobs=gen.logprobs,
            latency_ms=gen.latency_ms,
            prompt_tokens=gen.prompt_tokens,
            completion_tokens=gen.completion_tokens,
        )

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "model_id": self.model_id,
            "text": self.text,
            "logprobs": list(self.logprobs) if self.logprobs is not None else None,
            "latency_ms": self.latency_ms,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def _require(record: Mapping, field: str, line_no: int):
    if field not in record:
        raise MissingField(line_no, field)
    return record[field]


def _jsonl_lines(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ParseError(line_no, "line is not a JSON object")
            yield line_no, record


def load_dataset(path: str | Path) -> list[DatasetExample]:
    """Read a dataset JSONL file, preserving line order."""
    examples: list[DatasetExample] = []
    seen: set[str] = set()
    for line_no, record in _jsonl_lines(path):
        example_id = _require(record, "id", line_no)
        prompt = _require(record, "prompt", line_no)
        references = _require(record, "references", line_no)
        task_metric = _require(record, "task_metric", line_no)
        if not isinstance(references, list) or not references:
            raise ParseError(line_no, "references must be a non-empty list")
        if task_metric not in TASK_METRICS:
            raise ParseError(line_no, f"task_metric must be one of {TASK_METRICS}")
        if example_id in seen:
            raise DuplicateId(line_no, example_id)
        seen.add(example_id)
        examples.append(
            DatasetExample(
                id=example_id,
                prompt=prompt,
                references=tuple(references),
                task_metric=task_metric,
            )
        )
    return examples


def append_generation(path: str | Path, record: GenerationRecord) -> None:
    """Append one record as a single JSON line.

    The line (JSON escaping keeps embedded newlines out) is written with one
    write call in append mode, so a reader never sees a torn record and any
    prefix of appends loads cleanly.
    """
    line = json.dumps(record.to_dict(), ensure_ascii=False) + "\n"
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(line)
        handle.flush()


def read_generations(path: str | Path) -> list[GenerationRecord]:
    """Read every generation record in file order (no completeness checks)."""
    records: list[GenerationRecord] = []
    for line_no, record in _jsonl_lines(path):
        example_id = _require(record, "example_id", line_no)
        model_id = _require(record, "model_id", line_no)
        text = _require(record, "text", line_no)
        logprobs = record.get("logprobs")
        records.append(
            GenerationRecord(
                example_id=example_id,
                model_id=model_id,
                text=text,
                logprobs=tuple(float(x) for x in logprobs) if logprobs is not None else None,
                latency_ms=float(_require(record, "latency_ms", line_no)),
                prompt_tokens=int(_require(record, "prompt_tokens", line_no)),
                completion_tokens=int(_require(record, "completion_tokens", line_no)),
            )
        )
    return records


@dataclass(frozen=True)
class Trace:
    """Joined dataset + generations for every declared model, replayable offline."""

    examples: tuple[DatasetExample, ...]
    generations: Mapping[tuple[str, str], GenerationRecord]
    ensemble_ids: tuple[str, ...]
    target_id: str
    fingerprint: str

    def generation(self, example_id: str, model_id: str) -> GenerationRecord:
        return self.generations[(example_id, model_id)]

    @property
    def model_ids(self) -> tuple[str, ...]:
        return self.ensemble_ids + (self.target_id,)


def _fingerprint(
    examples: Sequence[DatasetExample],
    generations: Mapping[tuple[str, str], GenerationRecord],
    ensemble_ids: Sequence[str],
    target_id: str,
) -> str:
    canonical = {
        "dataset": [
            {
                "id": ex.id,
                "prompt": ex.prompt,
                "references": list(ex.references),
                "task_metric": ex.task_metric,
            }
            for ex in examples
        ],
        "generations": [
            generations[key].to_dict() for key in sorted(generations.keys())
        ],
        "ensemble_ids": list(ensemble_ids),
        "target_id": target_id,
    }
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_trace(
    dataset_path: str | Path,
    generations_path: str | Path,
    ensemble_ids: Sequence[str],
    target_id: str,
) -> Trace:
    """Join dataset and generations into a completeness-checked trace.

    Every example must have a generation for every ensemble model and the
    target. Records for model ids outside the declared set are ignored, so
    one generations file can back several trace views.
    """
    if target_id in ensemble_ids:
        raise ValueError(f"target id {target_id!r} must not appear in the ensemble")
    examples = load_dataset(dataset_path)
    known_ids = {ex.id for ex in examples}
    wanted = set(ensemble_ids) | {target_id}

    generations: dict[tuple[str, str], GenerationRecord] = {}
    for record in read_generations(generations_path):
        if record.example_id not in known_ids:
            raise UnknownExample(record.example_id)
        if record.model_id not in wanted:
            continue
        key = (record.example_id, record.model_id)
        if key in generations:
            raise DuplicateGeneration(*key)
        generations[key] = record

    for ex in examples:
        for model_id in list(ensemble_ids) + [target_id]:
            if (ex.id, model_id) not in generations:
                raise IncompleteTrace(ex.id, model_id)

    return Trace(
        examples=tuple(examples),
        generations=generations,
        ensemble_ids=tuple(ensemble_ids),
        target_id=target_id,
        fingerprint=_fingerprint(examples, generations, ensemble_ids, target_id),
    )


@dataclass(frozen=True)
class TraceManifest:
    """Pointer file tying a dataset, a generations file, and the model pool.

    JSON shape: {"dataset": "d.jsonl", "generations": "gens.jsonl",
    "ensemble_ids": ["small-a", ...], "target_id": "target"}. Relative
    paths resolve against the manifest's own directory.
    """

    dataset_path: Path
    generations_path: Path
    ensemble_ids: tuple[str, ...]
    target_id: str

    @classmethod
    def load(cls, path: str | Path) -> "TraceManifest":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        return cls(
            dataset_path=(base / data["dataset"]).resolve(),
            generations_path=(base / data["generations"]).resolve(),
            ensemble_ids=tuple(data["ensemble_ids"]),
            target_id=data["target_id"],
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()

        def relativize(p: Path) -> str:
            try:
                return str(p.resolve().relative_to(base))
            except ValueError:
                return str(p.resolve())

        payload = {
            "dataset": relativize(self.dataset_path),
            "generations": relativize(self.generations_path),
            "ensemble_ids": list(self.ensemble_ids),
            "target_id": self.target_id,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    def load_trace(self) -> Trace:
        return load_trace(
            self.dataset_path, self.generations_path, self.ensemble_ids, self.target_id
        )
