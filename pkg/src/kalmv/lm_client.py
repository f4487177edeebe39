"""Clients for the generation LM and the verifier LM.

Two interchangeable backends sit behind one completion contract: a live HTTP
endpoint and a scripted mock driven by a fixture file. The wire format is a
single POST route:

  request  {"prompt": str, "max_tokens": int, "temperature": float,
            "top_k": int?, "seed": int?, "logprobs": int?, "score": str?}
  response {"text": str, "first_token_logprobs": {token: logprob}?,
            "sequence_logprob": float?, "num_tokens": int?}

``logprobs`` asks for the top-N log-probabilities of the first generated
token, keyed by token text. ``score`` switches the call into scoring mode:
instead of generating, the backend returns the summed log-probability (and
token count) of that exact continuation of the prompt.

Mock fixtures are JSONL records
  {"prompt_digest": hex, "attempt": int, "text": str,
   "first_token_logprobs": {...}?, "sequence_logprob": float?, "num_tokens": int?}
keyed by sha256 of the full prompt (``prompt_digest``) for generation calls
and sha256 of prompt + "\\x1e" + continuation (``scoring_digest``) for scoring
calls. The attempt index is the mock's only state; counters live in a
per-question session so concurrent runs never interfere.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import requests

from .retrieval import TransportError

logger = logging.getLogger(__name__)

GREEDY = "greedy"
TOP_K = "top_k"


class CapabilityError(RuntimeError):
    """The backend cannot perform the requested operation (e.g. sequence scoring)."""


class FixtureError(KeyError):
    """The mock fixture file has no record for a requested prompt."""


@dataclass(frozen=True)
class GenerationParams:
    mode: str = GREEDY
    top_k: int = 40
    temperature: float = 0.7
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (GREEDY, TOP_K):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def with_seed(self, seed: int) -> GenerationParams:
        return replace(self, seed=seed)


GREEDY_PARAMS = GenerationParams(mode=GREEDY, top_k=1, temperature=1.0)
RESAMPLE_PARAMS = GenerationParams(mode=TOP_K, top_k=40, temperature=0.7)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    sequence_logprob: float | None
    backend: str  # "http" | "mock"

    def __post_init__(self):
        if self.sequence_logprob is not None and self.sequence_logprob > 0:
            raise ValueError("sequence_logprob must be <= 0")


@dataclass(frozen=True)
class OptionScores:
    probabilities: dict[str, float]

    def __post_init__(self):
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"option probabilities sum to {total}, expected 1")
        if any(p < 0 for p in self.probabilities.values()):
            raise ValueError("option probabilities must be non-negative")

    def __getitem__(self, letter: str) -> float:
        return self.probabilities[letter]


@dataclass(frozen=True)
class RawCompletion:
    text: str
    first_token_logprobs: dict[str, float] | None = None
    sequence_logprob: float | None = None
    num_tokens: int | None = None
    backend: str = "mock"


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def scoring_digest(prompt: str, continuation: str) -> str:
    return hashlib.sha256(f"{prompt}\x1e{continuation}".encode("utf-8")).hexdigest()


class LMBackend:
    """Common surface for the HTTP and mock backends."""

    backend = "unknown"

    def complete(
        self,
        prompt: str,
        params: GenerationParams,
        logprobs: int | None = None,
        score: str | None = None,
    ) -> RawCompletion:
        raise NotImplementedError

    def session(self) -> "LMBackend":
        """A handle confined to one question run (stateful only for the mock)."""
        return self


class HttpLM(LMBackend):
    backend = "http"

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        retries: int = 2,
        timeout_s: float = 60.0,
        parallelism: int = 4,
    ):
        self.url = url
        self.api_key = api_key
        self.retries = retries
        self.timeout_s = timeout_s
        self._gate = threading.Semaphore(max(1, parallelism))

    def complete(
        self,
        prompt: str,
        params: GenerationParams,
        logprobs: int | None = None,
        score: str | None = None,
    ) -> RawCompletion:
        payload: dict = {
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
        }
        if params.mode == TOP_K:
            payload["top_k"] = params.top_k
        if params.seed is not None:
            payload["seed"] = params.seed
        if logprobs is not None:
            payload["logprobs"] = logprobs
        if score is not None:
            payload["score"] = score
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        attempts = self.retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            try:
                with self._gate:
                    resp = requests.post(
                        self.url, json=payload, headers=headers, timeout=self.timeout_s
                    )
                resp.raise_for_status()
                body = resp.json()
                return RawCompletion(
                    text=body["text"],
                    first_token_logprobs=body.get("first_token_logprobs"),
                    sequence_logprob=body.get("sequence_logprob"),
                    num_tokens=body.get("num_tokens"),
                    backend=self.backend,
                )
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < attempts - 1:
                    time.sleep(0.05 * (attempt + 1))
        raise TransportError(f"LM endpoint failed: {last_error}", attempts)


@dataclass(frozen=True)
class MockRecord:
    text: str
    first_token_logprobs: dict[str, float] | None = None
    sequence_logprob: float | None = None
    num_tokens: int | None = None


class MockLM(LMBackend):
    """Deterministic scripted backend: (prompt digest, attempt) -> record.

    Missing attempts repeat the highest scripted attempt below the requested
    one, so a single attempt-0 record answers repeated greedy calls.
    """

    backend = "mock"

    def __init__(self, records: dict[tuple[str, int], MockRecord] | None = None):
        self._records: dict[tuple[str, int], MockRecord] = dict(records or {})
        self._default_session: MockSession | None = None

    @classmethod
    def from_fixture_file(cls, path: str | Path) -> "MockLM":
        records: dict[tuple[str, int], MockRecord] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                key = (obj["prompt_digest"], int(obj.get("attempt", 0)))
                if key in records:
                    raise FixtureError(f"line {line_no}: duplicate fixture key {key}")
                records[key] = MockRecord(
                    text=obj["text"],
                    first_token_logprobs=obj.get("first_token_logprobs"),
                    sequence_logprob=obj.get("sequence_logprob"),
                    num_tokens=obj.get("num_tokens"),
                )
        return cls(records)

    def add(
        self,
        prompt: str,
        text: str,
        attempt: int = 0,
        first_token_logprobs: dict[str, float] | None = None,
        sequence_logprob: float | None = None,
        num_tokens: int | None = None,
        score_of: str | None = None,
    ) -> None:
        """Script one response. ``score_of`` registers a scoring-mode record."""
        digest = (
            prompt_digest(prompt) if score_of is None else scoring_digest(prompt, score_of)
        )
        self._records[(digest, attempt)] = MockRecord(
            text=text,
            first_token_logprobs=first_token_logprobs,
            sequence_logprob=sequence_logprob,
            num_tokens=num_tokens,
        )

    def lookup(self, digest: str, attempt: int) -> MockRecord:
        record = self._records.get((digest, attempt))
        if record is not None:
            return record
        scripted = [a for (d, a) in self._records if d == digest and a < attempt]
        if scripted:
            return self._records[(digest, max(scripted))]
        raise FixtureError(f"no fixture for prompt digest {digest} (attempt {attempt})")

    def session(self) -> "MockSession":
        return MockSession(self)

    def complete(
        self,
        prompt: str,
        params: GenerationParams,
        logprobs: int | None = None,
        score: str | None = None,
    ) -> RawCompletion:
        # convenience for single-shot use; pipelines take a session per question
        if self._default_session is None:
            self._default_session = MockSession(self)
        return self._default_session.complete(prompt, params, logprobs=logprobs, score=score)


class MockSession(LMBackend):
    backend = "mock"

    def __init__(self, parent: MockLM):
        self._parent = parent
        self._attempts: dict[str, int] = {}

    def session(self) -> "MockSession":
        return self

    def complete(
        self,
        prompt: str,
        params: GenerationParams,
        logprobs: int | None = None,
        score: str | None = None,
    ) -> RawCompletion:
        digest = prompt_digest(prompt) if score is None else scoring_digest(prompt, score)
        attempt = self._attempts.get(digest, 0)
        self._attempts[digest] = attempt + 1
        record = self._parent.lookup(digest, attempt)
        num_tokens = record.num_tokens
        if num_tokens is None:
            scored_text = score if score is not None else record.text
            num_tokens = max(1, len(scored_text.split()))
        return RawCompletion(
            text=record.text,
            first_token_logprobs=record.first_token_logprobs,
            sequence_logprob=record.sequence_logprob,
            num_tokens=num_tokens,
            backend=self.backend,
        )


def build_qa_prompt(question: str, knowledge: str | None = None) -> str:
    """Assemble the QA prompt, with or without retrieved context."""
    if not question:
        raise ValueError("question must be non-empty")
    if knowledge is None:
        return f"Question: {question}. Answer: "
    return f"Context: {knowledge}. Question: {question}. Answer: "


def generate(prompt: str, params: GenerationParams, endpoint: LMBackend) -> GenerationResult:
    """One completion, whitespace-trimmed. Empty completions are returned as-is."""
    raw = endpoint.complete(prompt, params)
    seq_lp = raw.sequence_logprob
    if seq_lp is not None and seq_lp > 0:
        seq_lp = 0.0
    return GenerationResult(text=raw.text.strip(), sequence_logprob=seq_lp, backend=raw.backend)


def _match_logprob(letter: str, logprobs: dict[str, float]) -> float | None:
    if letter in logprobs:
        return logprobs[letter]
    spaced = f" {letter}"
    if spaced in logprobs:
        return logprobs[spaced]
    candidates = [lp for tok, lp in logprobs.items() if tok.strip() == letter]
    return max(candidates) if candidates else None


def _strip_trailing_punct(text: str) -> str:
    return text.rstrip(".,:;!?)")


def score_options(prompt: str, options: list[str], endpoint: LMBackend) -> OptionScores:
    """Probability over the given option letters for the next generated token.

    Prefers first-token log-probabilities (exponentiated and renormalized over
    the requested letters). Backends without logprobs degrade to a one-hot on
    the greedily generated letter; anything off-option becomes uniform.
    """
    if not options:
        raise ValueError("options must be non-empty")
    if len(set(options)) != len(options):
        raise ValueError("options must be distinct")
    if any(len(o) != 1 or not o.isalpha() for o in options):
        raise ValueError("options must be single letters")

    params = GenerationParams(mode=GREEDY, top_k=1, temperature=1.0, max_new_tokens=4)
    raw = endpoint.complete(prompt, params, logprobs=max(3, len(options)))

    if raw.first_token_logprobs:
        matched = {o: _match_logprob(o, raw.first_token_logprobs) for o in options}
        if any(lp is not None for lp in matched.values()):
            weights = {o: (math.exp(lp) if lp is not None else 0.0) for o, lp in matched.items()}
            total = sum(weights.values())
            return OptionScores({o: w / total for o, w in weights.items()})

    generated = _strip_trailing_punct(raw.text.strip())
    for option in options:
        if generated.upper() == option.upper():
            return OptionScores({o: (1.0 if o == option else 0.0) for o in options})
    logger.warning(
        "off-option generation %r for option scoring; returning uniform distribution", raw.text
    )
    uniform = 1.0 / len(options)
    return OptionScores({o: uniform for o in options})


def answer_confidence(prompt: str, answer: str, endpoint: LMBackend) -> float:
    """exp(mean per-token log-probability) of ``answer`` as a continuation."""
    params = GenerationParams(mode=GREEDY, top_k=1, temperature=1.0, max_new_tokens=1)
    raw = endpoint.complete(prompt, params, score=answer)
    if raw.sequence_logprob is None:
        raise CapabilityError(
            "backend does not support sequence scoring; disable confidence-based modes"
        )
    num_tokens = raw.num_tokens if raw.num_tokens else max(1, len(answer.split()))
    mean_logprob = raw.sequence_logprob / max(1, num_tokens)
    return max(0.0, min(1.0, math.exp(mean_logprob)))
