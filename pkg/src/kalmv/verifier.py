"""Three-way verification of (question, knowledge, answer) triples.

Five differently-phrased instruction prompts ask the verifier LM to pick one
of three options: A (the retrieved knowledge is unhelpful), B (the knowledge
is helpful but the answer is wrong), C (the answer is correct). The per-
instruction A/B/C probability vectors are averaged elementwise and the argmax
is the verdict; exact ties prefer A over B over C, i.e. flagging an error
over delivering.

Templates live as plain-text files under resources/templates/<version>/ and
are pinned by checksum in the test suite.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .lm_client import LMBackend, OptionScores, score_options

TEMPLATE_VERSION = "v1"
TEMPLATE_IDS = (1, 2, 3, 4, 5)
OPTION_LETTERS = ("A", "B", "C")

_PLACEHOLDERS = ("{question}", "{passage}", "{answer}")
_PLACEHOLDER_RE = re.compile(r"\{(question|passage|answer)\}")


class Verdict(str, Enum):
    RETRIEVAL_ERROR = "A"
    GROUNDING_ERROR = "B"
    CORRECT = "C"

    @property
    def letter(self) -> str:
        return self.value


@dataclass(frozen=True)
class InstructionTemplate:
    template_id: int
    body: str

    def __post_init__(self):
        for ph in _PLACEHOLDERS:
            if self.body.count(ph) != 1:
                raise ValueError(
                    f"template {self.template_id}: placeholder {ph} must occur exactly once"
                )
        if not self.body.endswith("Select one option:"):
            raise ValueError(
                f"template {self.template_id}: body must end with 'Select one option:'"
            )


def load_templates(directory: str | Path | None = None) -> dict[int, InstructionTemplate]:
    """Load the five instruction templates, from the packaged resources by default."""
    templates: dict[int, InstructionTemplate] = {}
    if directory is None:
        root = resources.files("kalmv") / "resources" / "templates" / TEMPLATE_VERSION
    else:
        root = Path(directory)
    for template_id in TEMPLATE_IDS:
        text = (root / f"instruction_{template_id}.txt").read_text(encoding="utf-8")
        templates[template_id] = InstructionTemplate(template_id, text.rstrip("\n"))
    return templates


_DEFAULT_TEMPLATES: dict[int, InstructionTemplate] | None = None


def default_templates() -> dict[int, InstructionTemplate]:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = load_templates()
    return _DEFAULT_TEMPLATES


def render_instruction(
    template_id: int,
    question: str,
    knowledge: str,
    answer: str,
    templates: dict[int, InstructionTemplate] | None = None,
) -> str:
    """Substitute the three placeholders; everything else is byte-identical.

    Substitution is a single pass, so placeholder-like text inside the
    substituted values is left alone.
    """
    templates = templates if templates is not None else default_templates()
    if template_id not in templates:
        raise KeyError(f"unknown template_id {template_id}")
    values = {"question": question, "passage": knowledge, "answer": answer}
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], templates[template_id].body)


@dataclass(frozen=True)
class VerdictDistribution:
    probabilities: dict[str, float]
    verdict: Verdict
    per_instruction: tuple[OptionScores, ...]

    def __post_init__(self):
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"verdict probabilities sum to {total}, expected 1")


def argmax_verdict(probabilities: dict[str, float]) -> Verdict:
    """Argmax over A/B/C with ties resolved in that order."""
    best_letter = OPTION_LETTERS[0]
    for letter in OPTION_LETTERS[1:]:
        if probabilities[letter] > probabilities[best_letter]:
            best_letter = letter
    return Verdict(best_letter)


def ensemble(per_instruction: list[OptionScores]) -> VerdictDistribution:
    """Elementwise mean of per-instruction option distributions."""
    if not per_instruction:
        raise ValueError("per_instruction must be non-empty")
    n = len(per_instruction)
    mean = {
        letter: sum(scores[letter] for scores in per_instruction) / n
        for letter in OPTION_LETTERS
    }
    return VerdictDistribution(
        probabilities=mean,
        verdict=argmax_verdict(mean),
        per_instruction=tuple(per_instruction),
    )


def verify(
    question: str,
    knowledge: str,
    answer: str,
    verifier_endpoint: LMBackend,
    template_ids: tuple[int, ...] = TEMPLATE_IDS,
    templates: dict[int, InstructionTemplate] | None = None,
) -> VerdictDistribution:
    """Score every instruction over {A, B, C} and average into one verdict.

    Any endpoint failure aborts the whole ensemble; there is no partial
    verification.
    """
    if not template_ids:
        raise ValueError("template_ids must be non-empty")
    if len(set(template_ids)) != len(template_ids):
        raise ValueError("template_ids must be distinct")
    per_instruction: list[OptionScores] = []
    for template_id in sorted(template_ids):
        prompt = render_instruction(template_id, question, knowledge, answer, templates)
        per_instruction.append(score_options(prompt, list(OPTION_LETTERS), verifier_endpoint))
    return ensemble(per_instruction)
