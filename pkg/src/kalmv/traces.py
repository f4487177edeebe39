"""Per-question pipeline traces: types, canonical JSONL serialization, validation.

A trace is self-contained: it carries the question, the gold answers and
aliases, and every step's knowledge text, so evaluation needs nothing beyond
the trace file. Serialization is canonical (sorted keys, compact separators,
absent fields omitted), which makes rerun-determinism checkable byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .lm_client import OptionScores
from .verifier import Verdict, VerdictDistribution

TRACE_SCHEMA_VERSION = 1


class TraceSchemaError(ValueError):
    """Trace line does not match the expected schema version or shape."""


class Disposition(str, Enum):
    ANSWERED = "answered"
    WITHHELD = "withheld"
    FAILED = "failed"


class Action(str, Enum):
    DELIVER = "deliver"
    RERETRIEVE = "reretrieve"
    REGENERATE = "regenerate"
    WITHHOLD = "withhold"
    NONE = "none"


BUDGET_EXHAUSTED = "budget_exhausted"
KNOWLEDGE_EXHAUSTED = "knowledge_exhausted"


@dataclass
class PipelineStep:
    step_index: int
    knowledge_item_id: str | None
    knowledge_text: str | None
    prompt_digest: str
    generated_answer: str
    verdict: VerdictDistribution | None
    action: Action
    confidence: float | None = None
    knowledge_f1: float | None = None


@dataclass
class PipelineTrace:
    example_id: str
    mode: str
    max_rectify_steps: int
    question: str
    gold_answers: tuple[str, ...]
    alias_sets: dict[str, tuple[str, ...]] = field(default_factory=dict)
    steps: list[PipelineStep] = field(default_factory=list)
    disposition: Disposition = Disposition.FAILED
    final_answer: str | None = None
    withhold_reason: str | None = None
    error: str | None = None
    wall_time_ms: list[float] | None = None


def _verdict_to_dict(v: VerdictDistribution) -> dict:
    return {
        "probabilities": {k: v.probabilities[k] for k in sorted(v.probabilities)},
        "verdict": v.verdict.letter,
        "per_instruction": [
            {k: s.probabilities[k] for k in sorted(s.probabilities)} for s in v.per_instruction
        ],
    }


def _verdict_from_dict(obj: dict) -> VerdictDistribution:
    return VerdictDistribution(
        probabilities=dict(obj["probabilities"]),
        verdict=Verdict(obj["verdict"]),
        per_instruction=tuple(OptionScores(dict(p)) for p in obj["per_instruction"]),
    )


def step_to_dict(step: PipelineStep) -> dict:
    out: dict = {
        "step_index": step.step_index,
        "prompt_digest": step.prompt_digest,
        "generated_answer": step.generated_answer,
        "action": step.action.value,
    }
    if step.knowledge_item_id is not None:
        out["knowledge_item_id"] = step.knowledge_item_id
    if step.knowledge_text is not None:
        out["knowledge_text"] = step.knowledge_text
    if step.verdict is not None:
        out["verdict"] = _verdict_to_dict(step.verdict)
    if step.confidence is not None:
        out["confidence"] = step.confidence
    if step.knowledge_f1 is not None:
        out["knowledge_f1"] = step.knowledge_f1
    return out


def step_from_dict(obj: dict) -> PipelineStep:
    return PipelineStep(
        step_index=obj["step_index"],
        knowledge_item_id=obj.get("knowledge_item_id"),
        knowledge_text=obj.get("knowledge_text"),
        prompt_digest=obj["prompt_digest"],
        generated_answer=obj["generated_answer"],
        verdict=_verdict_from_dict(obj["verdict"]) if "verdict" in obj else None,
        action=Action(obj["action"]),
        confidence=obj.get("confidence"),
        knowledge_f1=obj.get("knowledge_f1"),
    )


def trace_to_dict(trace: PipelineTrace) -> dict:
    out: dict = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "example_id": trace.example_id,
        "mode": trace.mode,
        "max_rectify_steps": trace.max_rectify_steps,
        "question": trace.question,
        "gold_answers": list(trace.gold_answers),
        "steps": [step_to_dict(s) for s in trace.steps],
        "disposition": trace.disposition.value,
    }
    if trace.alias_sets:
        out["alias_sets"] = {k: list(v) for k, v in sorted(trace.alias_sets.items())}
    if trace.final_answer is not None:
        out["final_answer"] = trace.final_answer
    if trace.withhold_reason is not None:
        out["withhold_reason"] = trace.withhold_reason
    if trace.error is not None:
        out["error"] = trace.error
    if trace.wall_time_ms is not None:
        out["wall_time_ms"] = trace.wall_time_ms
    return out


def trace_from_dict(obj: dict) -> PipelineTrace:
    version = obj.get("schema_version")
    if version != TRACE_SCHEMA_VERSION:
        raise TraceSchemaError(
            f"trace schema_version {version!r} unsupported (expected {TRACE_SCHEMA_VERSION})"
        )
    return PipelineTrace(
        example_id=obj["example_id"],
        mode=obj["mode"],
        max_rectify_steps=obj["max_rectify_steps"],
        question=obj["question"],
        gold_answers=tuple(obj["gold_answers"]),
        alias_sets={k: tuple(v) for k, v in obj.get("alias_sets", {}).items()},
        steps=[step_from_dict(s) for s in obj["steps"]],
        disposition=Disposition(obj["disposition"]),
        final_answer=obj.get("final_answer"),
        withhold_reason=obj.get("withhold_reason"),
        error=obj.get("error"),
        wall_time_ms=obj.get("wall_time_ms"),
    )


def dumps_trace(trace: PipelineTrace) -> str:
    """Canonical single-line JSON for one trace."""
    return json.dumps(trace_to_dict(trace), ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def write_traces(traces: Iterable[PipelineTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(dumps_trace(trace))
            fh.write("\n")


def read_traces(path: str | Path) -> list[PipelineTrace]:
    traces: list[PipelineTrace] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceSchemaError(f"line {line_no}: invalid JSON: {exc.msg}") from exc
            try:
                traces.append(trace_from_dict(obj))
            except (KeyError, ValueError) as exc:
                if isinstance(exc, TraceSchemaError):
                    raise TraceSchemaError(f"line {line_no}: {exc}") from None
                raise TraceSchemaError(f"line {line_no}: malformed trace: {exc}") from exc
    return traces


def validate_trace(trace: PipelineTrace) -> list[str]:
    """Check the step/verdict/action bookkeeping rules. Returns problems found."""
    problems: list[str] = []
    steps = trace.steps

    for pos, step in enumerate(steps):
        where = f"step {pos}"
        if step.step_index != pos:
            problems.append(f"{where}: step_index {step.step_index} != position {pos}")
        is_last = pos == len(steps) - 1
        letter = step.verdict.verdict.letter if step.verdict is not None else None

        if step.action == Action.DELIVER and letter not in (None, "C"):
            problems.append(f"{where}: deliver after verdict {letter}")
        if step.action == Action.RERETRIEVE and letter != "A":
            problems.append(f"{where}: reretrieve without verdict A")
        if step.action == Action.REGENERATE and letter not in (None, "B"):
            problems.append(f"{where}: regenerate after verdict {letter}")
        if letter == "C" and step.action != Action.DELIVER:
            problems.append(f"{where}: verdict C must deliver, got {step.action.value}")
        if letter == "C" and not is_last:
            problems.append(f"{where}: verdict C on a non-final step")

        terminal = step.action in (Action.DELIVER, Action.WITHHOLD)
        if is_last and trace.disposition != Disposition.FAILED and not terminal:
            problems.append(f"{where}: final step has non-terminal action {step.action.value}")
        if not is_last and terminal:
            problems.append(f"{where}: terminal action {step.action.value} before the final step")

    verdict_letters = [s.verdict.verdict.letter for s in steps if s.verdict is not None]

    if trace.disposition == Disposition.ANSWERED:
        if trace.final_answer is None:
            problems.append("answered without final_answer")
        if not steps:
            problems.append("answered with no steps")
        elif steps[-1].action != Action.DELIVER:
            problems.append("answered but final action is not deliver")
        if steps and steps[-1].verdict is not None and steps[-1].verdict.verdict != Verdict.CORRECT:
            problems.append("answered but final verdict is not C")
        if trace.withhold_reason is not None:
            problems.append("answered with a withhold_reason")
    elif trace.disposition == Disposition.WITHHELD:
        if trace.final_answer is not None:
            problems.append("withheld with a final_answer")
        if "C" in verdict_letters:
            problems.append("withheld but some step had verdict C")
        if steps and steps[-1].action != Action.WITHHOLD:
            problems.append("withheld but final action is not withhold")
        if trace.withhold_reason not in (BUDGET_EXHAUSTED, KNOWLEDGE_EXHAUSTED):
            problems.append(f"withheld with unknown reason {trace.withhold_reason!r}")
        elif trace.withhold_reason == BUDGET_EXHAUSTED:
            expected = 1 + trace.max_rectify_steps
            if len(steps) != expected:
                problems.append(
                    f"budget-exhausted trace has {len(steps)} steps, expected {expected}"
                )
        else:
            if len(steps) > 1 + trace.max_rectify_steps:
                problems.append("knowledge-exhausted trace exceeds the step budget")
            if steps and verdict_letters and verdict_letters[-1] != "A":
                problems.append("knowledge exhaustion must follow verdict A")
    else:
        if trace.error is None:
            problems.append("failed without an error message")

    # every re-retrieval must bring an item not used before
    item_ids = [s.knowledge_item_id for s in steps if s.knowledge_item_id is not None]
    if item_ids:
        reretrieves = sum(1 for s in steps if s.action == Action.RERETRIEVE)
        if len(set(item_ids)) != 1 + reretrieves:
            problems.append(
                f"{len(set(item_ids))} distinct knowledge items for {reretrieves} re-retrievals"
            )

    if trace.wall_time_ms is not None and len(trace.wall_time_ms) != len(steps):
        problems.append("wall_time_ms length does not match steps")

    return problems


def assert_valid_trace(trace: PipelineTrace) -> None:
    problems = validate_trace(trace)
    if problems:
        raise ValueError(
            f"trace {trace.example_id} violates invariants: " + "; ".join(problems)
        )


def validate_traces(traces: Iterable[PipelineTrace]) -> dict[str, list[str]]:
    """Validate many traces; maps example_id to its problem list (only offenders)."""
    offenders: dict[str, list[str]] = {}
    for trace in traces:
        problems = validate_trace(trace)
        if problems:
            offenders[trace.example_id] = problems
    return offenders
