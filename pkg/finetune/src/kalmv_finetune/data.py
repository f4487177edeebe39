"""Training-record IO: the labeler's JSONL format, bit-compatible."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

LETTERS = ("A", "B", "C")


@dataclass(frozen=True)
class TrainingRecord:
    example_id: str
    template_id: int
    prompt: str
    target: str

    def __post_init__(self):
        if self.target not in LETTERS:
            raise ValueError(f"target must be one of {LETTERS}, got {self.target!r}")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


def load_records(path: str | Path) -> list[TrainingRecord]:
    records: list[TrainingRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    TrainingRecord(
                        example_id=str(obj["example_id"]),
                        template_id=int(obj["template_id"]),
                        prompt=obj["prompt"],
                        target=obj["target"],
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {line_no}: bad record: {exc}") from exc
    return records
