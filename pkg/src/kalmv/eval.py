"""Answer-quality and verifier-quality metrics over trace files, plus reports.

Answer metrics follow the usual open-domain QA conventions: token-level F1,
exact match, and containment accuracy, all computed on metric-normalized
tokens (lowercase, punctuation stripped, articles dropped) and taken as the
max over gold answers and their aliases. Withheld questions score 0 and are
also reported as a separate withhold rate; failed (transport-error) traces are
excluded from the denominators but counted.

Verifier metrics judge the final step of each verdict-bearing trace against an
auto-label oracle passed in by the caller, and measure the delivery decision
with precision (delivered answers that are correct, over delivered) and recall
(delivered-and-correct over all traces whose final answer is correct).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import QAExample, tokenize
from .traces import Disposition, PipelineTrace

VERDICT_CLASSES = ("A", "B", "C")

GoldLabeler = Callable[[QAExample, str, str], str]


def metric_tokens(text: str) -> list[str]:
    return tokenize(text, metric=True)


def contains_token_seq(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    """True when ``needle`` occurs as a contiguous run inside ``haystack``."""
    n = len(needle)
    if n == 0:
        return True
    return any(list(haystack[i : i + n]) == list(needle) for i in range(len(haystack) - n + 1))


def _gold_variants(golds: Iterable[str], aliases: Mapping[str, Iterable[str]] | None):
    for gold in golds:
        yield gold
        if aliases:
            yield from aliases.get(gold, ())


def _pair_f1(pred: list[str], gold: list[str]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = Counter(pred) & Counter(gold)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred)
    recall = num_same / len(gold)
    return 2 * precision * recall / (precision + recall)


def answer_f1(
    prediction: str,
    golds: Iterable[str],
    aliases: Mapping[str, Iterable[str]] | None = None,
) -> float:
    """Max token-multiset F1 of the prediction against any gold or alias."""
    pred = metric_tokens(prediction)
    return max(_pair_f1(pred, metric_tokens(g)) for g in _gold_variants(golds, aliases))


def answer_em(
    prediction: str,
    golds: Iterable[str],
    aliases: Mapping[str, Iterable[str]] | None = None,
) -> int:
    """1 iff the normalized prediction equals any normalized gold or alias."""
    pred = metric_tokens(prediction)
    return int(any(pred == metric_tokens(g) for g in _gold_variants(golds, aliases)))


def answer_acc(
    prediction: str,
    golds: Iterable[str],
    aliases: Mapping[str, Iterable[str]] | None = None,
) -> int:
    """1 iff the prediction contains some gold or alias as a contiguous token run.

    An empty prediction can only match a gold that itself normalizes to
    nothing, which keeps exact match a lower bound on accuracy.
    """
    pred = metric_tokens(prediction)
    return int(any(contains_token_seq(pred, metric_tokens(g)) for g in _gold_variants(golds, aliases)))


@dataclass
class AnswerMetrics:
    f1: float | None
    em: float | None
    acc: float | None
    withheld_rate: float | None
    n_answered: int
    n_withheld: int
    n_failed: int


def answer_metrics(traces: Iterable[PipelineTrace]) -> AnswerMetrics:
    """Corpus means over answered + withheld traces; withheld answers score 0."""
    n_answered = n_withheld = n_failed = 0
    f1_sum = em_sum = acc_sum = 0.0
    for trace in traces:
        if trace.disposition == Disposition.FAILED:
            n_failed += 1
            continue
        if trace.disposition == Disposition.WITHHELD:
            n_withheld += 1
            continue
        n_answered += 1
        prediction = trace.final_answer or ""
        f1_sum += answer_f1(prediction, trace.gold_answers, trace.alias_sets)
        em_sum += answer_em(prediction, trace.gold_answers, trace.alias_sets)
        acc_sum += answer_acc(prediction, trace.gold_answers, trace.alias_sets)
    denom = n_answered + n_withheld
    if denom == 0:
        return AnswerMetrics(None, None, None, None, 0, 0, n_failed)
    return AnswerMetrics(
        f1=f1_sum / denom,
        em=em_sum / denom,
        acc=acc_sum / denom,
        withheld_rate=n_withheld / denom,
        n_answered=n_answered,
        n_withheld=n_withheld,
        n_failed=n_failed,
    )


@dataclass
class VerifierMetrics:
    per_class_accuracy: dict[str, float | None]
    class_ratios: dict[str, float] | None
    precision: float | None
    recall: float | None
    f1: float | None
    n_verified: int
    n_delivered: int
    n_delivered_correct: int
    n_final_correct: int


def _example_of(trace: PipelineTrace) -> QAExample:
    return QAExample(
        example_id=trace.example_id,
        question=trace.question,
        gold_answers=trace.gold_answers,
        alias_sets=trace.alias_sets,
    )


def verifier_metrics(
    traces: Iterable[PipelineTrace], gold_labeler: GoldLabeler
) -> VerifierMetrics:
    """Judge final-step verdicts against the auto-label oracle; score delivery.

    ``gold_labeler(example, knowledge_text, generated_answer)`` must return the
    gold class letter. Traces without verdicts contribute to the delivery
    metrics only; failed traces contribute to nothing.
    """
    gold_counts: Counter = Counter()
    match_counts: Counter = Counter()
    n_delivered = n_delivered_correct = n_final_correct = 0
    n_scored = 0

    for trace in traces:
        if trace.disposition == Disposition.FAILED or not trace.steps:
            continue
        final = trace.steps[-1]
        n_scored += 1
        correct = answer_acc(final.generated_answer, trace.gold_answers, trace.alias_sets) == 1
        if correct:
            n_final_correct += 1
        if trace.disposition == Disposition.ANSWERED:
            n_delivered += 1
            if correct:
                n_delivered_correct += 1
        if final.verdict is not None:
            gold = gold_labeler(_example_of(trace), final.knowledge_text or "", final.generated_answer)
            gold_counts[gold] += 1
            if final.verdict.verdict.letter == gold:
                match_counts[gold] += 1

    n_verified = sum(gold_counts.values())
    per_class: dict[str, float | None] = {
        c: (match_counts[c] / gold_counts[c] if gold_counts[c] else None)
        for c in VERDICT_CLASSES
    }
    ratios = (
        {c: gold_counts[c] / n_verified for c in VERDICT_CLASSES} if n_verified else None
    )
    precision = n_delivered_correct / n_delivered if n_delivered else None
    recall = n_delivered_correct / n_final_correct if n_final_correct else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return VerifierMetrics(
        per_class_accuracy=per_class,
        class_ratios=ratios,
        precision=precision,
        recall=recall,
        f1=f1,
        n_verified=n_verified,
        n_delivered=n_delivered,
        n_delivered_correct=n_delivered_correct,
        n_final_correct=n_final_correct,
    )


# --- report rendering ---------------------------------------------------


def _round(x: float | None) -> float | None:
    return None if x is None else round(x, 4)


def answer_report(metrics: AnswerMetrics) -> dict:
    return {
        "kind": "answer_eval",
        "f1": _round(metrics.f1),
        "em": _round(metrics.em),
        "acc": _round(metrics.acc),
        "withheld_rate": _round(metrics.withheld_rate),
        "n_answered": metrics.n_answered,
        "n_withheld": metrics.n_withheld,
        "n_failed": metrics.n_failed,
    }


def _verifier_group(metrics: VerifierMetrics) -> dict:
    return {
        "per_class_accuracy": {c: _round(v) for c, v in metrics.per_class_accuracy.items()},
        "class_ratios": (
            {c: _round(v) for c, v in metrics.class_ratios.items()}
            if metrics.class_ratios is not None
            else None
        ),
        "precision": _round(metrics.precision),
        "recall": _round(metrics.recall),
        "f1": _round(metrics.f1),
        "n_verified": metrics.n_verified,
        "n_delivered": metrics.n_delivered,
        "n_delivered_correct": metrics.n_delivered_correct,
        "n_final_correct": metrics.n_final_correct,
    }


def verifier_report(groups: list[tuple[int, VerifierMetrics]]) -> dict:
    return {
        "kind": "verifier_eval",
        "groups": [
            {"max_rectify_steps": budget, **_verifier_group(m)} for budget, m in groups
        ],
    }


def group_traces_by_budget(traces: Iterable[PipelineTrace]) -> list[tuple[int, list[PipelineTrace]]]:
    grouped: dict[int, list[PipelineTrace]] = {}
    for trace in traces:
        grouped.setdefault(trace.max_rectify_steps, []).append(trace)
    return sorted(grouped.items())


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(report: dict) -> str:
    lines: list[str] = []
    if report["kind"] == "answer_eval":
        lines.append("answer metrics")
        for key in ("f1", "em", "acc", "withheld_rate", "n_answered", "n_withheld", "n_failed"):
            lines.append(f"  {key:<14} {_fmt(report[key])}")
    else:
        header = (
            f"{'budget':>6} {'P':>8} {'R':>8} {'F1':>8} "
            f"{'acc_A':>8} {'acc_B':>8} {'acc_C':>8} "
            f"{'ratio_A':>8} {'ratio_B':>8} {'ratio_C':>8} {'n':>6}"
        )
        lines.append("verifier metrics by max_rectify_steps")
        lines.append(header)
        for group in report["groups"]:
            acc = group["per_class_accuracy"]
            ratios = group["class_ratios"] or {c: None for c in VERDICT_CLASSES}
            lines.append(
                f"{group['max_rectify_steps']:>6} "
                f"{_fmt(group['precision']):>8} {_fmt(group['recall']):>8} {_fmt(group['f1']):>8} "
                f"{_fmt(acc['A']):>8} {_fmt(acc['B']):>8} {_fmt(acc['C']):>8} "
                f"{_fmt(ratios['A']):>8} {_fmt(ratios['B']):>8} {_fmt(ratios['C']):>8} "
                f"{group['n_verified']:>6}"
            )
    return "\n".join(lines) + "\n"


def render_csv(report: dict) -> str:
    rows: list[list] = []
    if report["kind"] == "answer_eval":
        keys = ["f1", "em", "acc", "withheld_rate", "n_answered", "n_withheld", "n_failed"]
        rows.append(keys)
        rows.append([report[k] for k in keys])
    else:
        keys = [
            "max_rectify_steps",
            "precision",
            "recall",
            "f1",
            "acc_A",
            "acc_B",
            "acc_C",
            "ratio_A",
            "ratio_B",
            "ratio_C",
            "n_verified",
            "n_delivered",
        ]
        rows.append(keys)
        for group in report["groups"]:
            acc = group["per_class_accuracy"]
            ratios = group["class_ratios"] or {c: None for c in VERDICT_CLASSES}
            rows.append(
                [
                    group["max_rectify_steps"],
                    group["precision"],
                    group["recall"],
                    group["f1"],
                    acc["A"],
                    acc["B"],
                    acc["C"],
                    ratios["A"],
                    ratios["B"],
                    ratios["C"],
                    group["n_verified"],
                    group["n_delivered"],
                ]
            )
    return "\n".join(",".join("" if v is None else str(v) for v in row) for row in rows) + "\n"


def report(metrics, fmt: str = "table") -> str:
    """Render AnswerMetrics or a verifier group list as table or json text."""
    if isinstance(metrics, AnswerMetrics):
        built = answer_report(metrics)
    elif isinstance(metrics, VerifierMetrics):
        built = verifier_report([(0, metrics)])
    else:
        built = verifier_report(list(metrics))
    if fmt == "json":
        return render_json(built)
    if fmt == "table":
        return render_table(built)
    raise ValueError(f"unknown report format {fmt!r}")
