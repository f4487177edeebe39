"""Automatic construction of verifier training labels and records.

The label of a (question, knowledge, generated answer) triple is a pure
function of its inputs: A when the knowledge does not contain any gold answer,
otherwise C when the generated answer is correct under the containment
accuracy predicate, otherwise B. A secondary rule, ``token_overlap``, replaces
the correctness check with "the answer shares at least one token with the
knowledge" for ablations.

Each labeled triple expands into five training records, one per instruction
template, sharing the label letter as the target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .corpus import QAExample
from .eval import answer_acc, contains_token_seq, metric_tokens
from .verifier import InstructionTemplate, TEMPLATE_IDS, render_instruction

LABEL_RULE_ACCURACY = "accuracy"
LABEL_RULE_TOKEN_OVERLAP = "token_overlap"
LABEL_RULES = (LABEL_RULE_ACCURACY, LABEL_RULE_TOKEN_OVERLAP)


@dataclass(frozen=True)
class LabeledVerification:
    example_id: str
    question: str
    knowledge_text: str
    generated_answer: str
    label: str  # "A" | "B" | "C"

    def __post_init__(self):
        if self.label not in ("A", "B", "C"):
            raise ValueError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class VerifierTrainingRecord:
    example_id: str
    template_id: int
    prompt: str
    target: str


def answer_in_knowledge(
    gold_answers: Iterable[str],
    aliases: Mapping[str, Iterable[str]] | None,
    knowledge_text: str,
) -> bool:
    """True iff some gold answer (or alias) occurs in the knowledge.

    Occurrence means the metric-normalized token sequence of the answer is a
    contiguous run inside the normalized knowledge tokens; matching tokens
    rather than raw substrings keeps "art" from matching "Mozart".
    """
    knowledge = metric_tokens(knowledge_text)
    variants = list(gold_answers)
    if aliases:
        for gold in gold_answers:
            variants.extend(aliases.get(gold, ()))
    return any(contains_token_seq(knowledge, metric_tokens(v)) for v in variants)


def auto_label(
    example: QAExample,
    knowledge_text: str,
    generated_answer: str,
    rule: str = LABEL_RULE_ACCURACY,
) -> str:
    """Label a triple A, B, or C. Retrieval failure dominates everything else."""
    if rule not in LABEL_RULES:
        raise ValueError(f"unknown label rule {rule!r}")
    if not answer_in_knowledge(example.gold_answers, example.alias_sets, knowledge_text):
        return "A"
    if rule == LABEL_RULE_ACCURACY:
        correct = answer_acc(generated_answer, example.gold_answers, example.alias_sets) == 1
        return "C" if correct else "B"
    overlap = set(metric_tokens(generated_answer)) & set(metric_tokens(knowledge_text))
    return "C" if overlap else "B"


def label_example(
    example: QAExample,
    knowledge_text: str,
    generated_answer: str,
    rule: str = LABEL_RULE_ACCURACY,
) -> LabeledVerification:
    return LabeledVerification(
        example_id=example.example_id,
        question=example.question,
        knowledge_text=knowledge_text,
        generated_answer=generated_answer,
        label=auto_label(example, knowledge_text, generated_answer, rule),
    )


def emit_training_records(
    labeled: LabeledVerification,
    templates: dict[int, InstructionTemplate] | None = None,
) -> list[VerifierTrainingRecord]:
    """One record per instruction template, all sharing the label."""
    return [
        VerifierTrainingRecord(
            example_id=labeled.example_id,
            template_id=template_id,
            prompt=render_instruction(
                template_id,
                labeled.question,
                labeled.knowledge_text,
                labeled.generated_answer,
                templates,
            ),
            target=labeled.label,
        )
        for template_id in TEMPLATE_IDS
    ]


def write_training_records(
    records: Iterable[VerifierTrainingRecord], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "example_id": rec.example_id,
                        "template_id": rec.template_id,
                        "prompt": rec.prompt,
                        "target": rec.target,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def write_label_stats(
    labeled: Iterable[LabeledVerification],
    answer_sources: Mapping[str, str],
    path: str | Path,
) -> dict:
    """Sidecar stats: class counts plus, per example, whether the prompt's
    answer slot held the model's generation or fell back to the gold answer."""
    labeled = list(labeled)
    counts = {"A": 0, "B": 0, "C": 0}
    for item in labeled:
        counts[item.label] += 1
    stats = {
        "n_examples": len(labeled),
        "n_records": 5 * len(labeled),
        "class_counts": counts,
        "answer_source": {k: answer_sources[k] for k in sorted(answer_sources)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return stats
