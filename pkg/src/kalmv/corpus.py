"""Knowledge and QA corpora: normalization, triple verbalization, JSONL ingestion.

A knowledge store is built once from a passage or triple file and is immutable
afterwards; items keep their input order so downstream tie-breaking is stable.
Passages are indexed by their title and body together ("<title>. <body>") when
a title is present, since title terms usually carry the strongest signal.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

ARTICLES = frozenset({"a", "an", "the"})


class CorpusFormatError(ValueError):
    """A corpus or dataset line violates the expected JSONL schema."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@lru_cache(maxsize=4096)
def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str, metric: bool = False) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.

    With ``metric=True`` the English articles a/an/the are also dropped, which
    is the normalization used by the answer metrics and the auto-labeler.
    Retrieval keeps articles. Punctuation means Unicode categories P*; text is
    NFC-normalized first. Idempotent on its own output.
    """
    text = unicodedata.normalize("NFC", text).lower()
    cleaned = "".join(ch for ch in text if not _is_punct(ch))
    tokens = cleaned.split()
    if metric:
        tokens = [t for t in tokens if t not in ARTICLES]
    return tokens


@dataclass(frozen=True)
class Passage:
    doc_id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.doc_id.strip():
            raise ValueError("passage doc_id must be non-empty")
        if not self.body.strip():
            raise ValueError("passage body must be non-empty")


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for name in ("subject", "relation", "object"):
            if not getattr(self, name).strip():
                raise ValueError(f"triple {name} must be non-empty")


def verbalize_triple(t: Triple) -> str:
    """Render a triple as one retrievable sentence: "<s> <r> <o>."."""
    return f"{t.subject} {t.relation} {t.object}."


def triple_item_id(t: Triple) -> str:
    digest = hashlib.sha1(f"{t.subject}|{t.relation}|{t.object}".encode("utf-8"))
    return digest.hexdigest()


@dataclass(frozen=True)
class KnowledgeItem:
    item_id: str
    source_kind: str  # "passage" | "triple"
    text: str

    def __post_init__(self):
        if self.source_kind not in ("passage", "triple"):
            raise ValueError(f"unknown source_kind {self.source_kind!r}")
        if not self.text.strip():
            raise ValueError("knowledge item text must be non-empty")


class KnowledgeStore:
    """Immutable, ordered collection of knowledge items with id lookup."""

    def __init__(self, items: list[KnowledgeItem]):
        self._items = tuple(items)
        self._by_id: dict[str, KnowledgeItem] = {}
        for item in self._items:
            if item.item_id in self._by_id:
                raise CorpusFormatError(f"duplicate item_id {item.item_id!r}")
            self._by_id[item.item_id] = item

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[KnowledgeItem]:
        return iter(self._items)

    def __getitem__(self, pos: int) -> KnowledgeItem:
        return self._items[pos]

    def get(self, item_id: str) -> KnowledgeItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise KeyError(f"unknown item_id {item_id!r}") from None

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    @property
    def items(self) -> tuple[KnowledgeItem, ...]:
        return self._items


def passage_surface_form(title: str, body: str) -> str:
    title = title.strip()
    return f"{title}. {body}" if title else body


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError("expected a JSON object", line_no)
            yield line_no, obj


def _require_text(obj: dict, name: str, line_no: int, allow_empty: bool = False) -> str:
    if name not in obj:
        raise CorpusFormatError(f"missing field {name!r}", line_no)
    value = obj[name]
    if not isinstance(value, str):
        raise CorpusFormatError(f"field {name!r} must be a string", line_no)
    if not allow_empty and not value.strip():
        raise CorpusFormatError(f"field {name!r} must be non-empty", line_no)
    return value


def load_corpus(path: str | Path, kind: str) -> KnowledgeStore:
    """Load a JSONL knowledge corpus into an immutable store.

    ``kind`` is "passages" (fields doc_id/title/text) or "triples" (fields
    subject/relation/object). Item ids come from doc_id for passages and from
    a digest of "subject|relation|object" for triples; duplicates are a hard
    error, as is any malformed line (reported with its line number).
    """
    if kind not in ("passages", "triples"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    items: list[KnowledgeItem] = []
    for line_no, obj in _iter_jsonl(path):
        if kind == "passages":
            doc_id = _require_text(obj, "doc_id", line_no)
            title = _require_text(obj, "title", line_no, allow_empty=True)
            body = _require_text(obj, "text", line_no)
            items.append(
                KnowledgeItem(
                    item_id=doc_id,
                    source_kind="passage",
                    text=passage_surface_form(title, body),
                )
            )
        else:
            triple = Triple(
                subject=_require_text(obj, "subject", line_no),
                relation=_require_text(obj, "relation", line_no),
                object=_require_text(obj, "object", line_no),
            )
            items.append(
                KnowledgeItem(
                    item_id=triple_item_id(triple),
                    source_kind="triple",
                    text=verbalize_triple(triple),
                )
            )
    return KnowledgeStore(items)


@dataclass(frozen=True)
class QAExample:
    example_id: str
    question: str
    gold_answers: tuple[str, ...]
    alias_sets: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError("gold_answers must be non-empty")
        for key in self.alias_sets:
            if key not in self.gold_answers:
                raise ValueError(f"alias key {key!r} is not a gold answer")

    def answer_variants(self) -> Iterator[str]:
        """Gold answers followed by their aliases, in input order."""
        for gold in self.gold_answers:
            yield gold
            yield from self.alias_sets.get(gold, ())


def load_qa_dataset(path: str | Path) -> list[QAExample]:
    """Load a QA JSONL dataset (fields id/question/answers, optional aliases)."""
    examples: list[QAExample] = []
    seen_ids: set[str] = set()
    for line_no, obj in _iter_jsonl(path):
        example_id = str(obj.get("id", ""))
        if not example_id:
            raise CorpusFormatError("missing field 'id'", line_no)
        if example_id in seen_ids:
            raise CorpusFormatError(f"duplicate example id {example_id!r}", line_no)
        seen_ids.add(example_id)
        question = _require_text(obj, "question", line_no)
        answers = obj.get("answers")
        if not isinstance(answers, list) or not answers:
            raise CorpusFormatError("field 'answers' must be a non-empty array", line_no)
        if not all(isinstance(a, str) for a in answers):
            raise CorpusFormatError("field 'answers' must contain strings", line_no)
        aliases = obj.get("aliases")
        alias_sets: dict[str, tuple[str, ...]] = {}
        if aliases is not None:
            if not isinstance(aliases, list) or len(aliases) != len(answers):
                raise CorpusFormatError(
                    "field 'aliases' must be an array parallel to 'answers'", line_no
                )
            for gold, alias_list in zip(answers, aliases):
                if not isinstance(alias_list, list) or not all(
                    isinstance(a, str) for a in alias_list
                ):
                    raise CorpusFormatError("alias entries must be arrays of strings", line_no)
                if alias_list:
                    merged = alias_sets.get(gold, ()) + tuple(alias_list)
                    alias_sets[gold] = merged
        # dedupe answers, keeping first occurrence order
        unique_answers = tuple(dict.fromkeys(answers))
        examples.append(
            QAExample(
                example_id=example_id,
                question=question,
                gold_answers=unique_answers,
                alias_sets=alias_sets,
            )
        )
    return examples
