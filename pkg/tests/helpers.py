"""Shared test utilities: corpus/dataset file builders and mock scripting."""

import json

from kalmv.lm_client import MockLM, build_qa_prompt
from kalmv.verifier import TEMPLATE_IDS, render_instruction

OPTION_LETTERS = ("A", "B", "C")


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")
    return path


def write_passages(path, passages):
    """passages: iterable of (doc_id, title, body)."""
    return write_jsonl(
        path, [{"doc_id": d, "title": t, "text": b} for d, t, b in passages]
    )


def write_dataset(path, examples):
    """examples: iterable of dicts with id/question/answers (+ optional aliases)."""
    return write_jsonl(path, list(examples))


def one_hot(letter):
    return {o: (1.0 if o == letter else 0.0) for o in OPTION_LETTERS}


def script_generation(mock: MockLM, question, knowledge, text, attempt=0):
    """Script the QA-generation reply for (question, knowledge)."""
    mock.add(build_qa_prompt(question, knowledge), text, attempt=attempt)


def script_verdict(mock: MockLM, question, knowledge, answer, letter, attempt=0):
    """Script all five instruction prompts to answer with one option letter.

    No logprobs are scripted, so option scoring takes the one-hot fallback and
    the ensembled distribution is an exact one-hot on ``letter``.
    """
    for template_id in TEMPLATE_IDS:
        prompt = render_instruction(template_id, question, knowledge, answer)
        mock.add(prompt, letter, attempt=attempt)


def script_confidence(mock: MockLM, prompt, answer, mean_token_logprob, attempt=0):
    """Script a sequence-scoring record with the given mean token logprob."""
    mock.add(
        prompt,
        answer,
        attempt=attempt,
        sequence_logprob=mean_token_logprob,
        num_tokens=1,
        score_of=answer,
    )


def verdict_dict(letter):
    """Expected serialized VerdictDistribution for a unanimous one-hot ensemble."""
    return {
        "probabilities": one_hot(letter),
        "verdict": letter,
        "per_instruction": [one_hot(letter) for _ in TEMPLATE_IDS],
    }


def dump_mock_fixture(mock: MockLM, path):
    """Write a scripted MockLM to the JSONL fixture-file format."""
    rows = []
    for (digest, attempt), record in mock._records.items():
        row = {"prompt_digest": digest, "attempt": attempt, "text": record.text}
        if record.first_token_logprobs is not None:
            row["first_token_logprobs"] = record.first_token_logprobs
        if record.sequence_logprob is not None:
            row["sequence_logprob"] = record.sequence_logprob
        if record.num_tokens is not None:
            row["num_tokens"] = record.num_tokens
        rows.append(row)
    return write_jsonl(path, rows)
