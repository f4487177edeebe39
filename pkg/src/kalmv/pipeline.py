"""Per-question execution: retrieve, generate, verify, rectify, or withhold.

Mode ``kalmv`` runs the full loop: answer from the top retrieved item, verify,
then while the verdict is not C and rectification budget remains, either fetch
the next-best unused knowledge and regenerate greedily (verdict A) or keep the
knowledge and re-sample with top-k (verdict B). Once the budget is spent, or
no unused knowledge is left, the answer is withheld.

Baseline modes: ``naive`` (no retrieval), ``knowledge_augmented`` (retrieve
then answer), ``adaptive_confidence`` (retrieve only when the naive answer's
generation probability is low), and the two augmenter variants
(``augmenter_kf1``, ``augmenter_confidence``) that accept or re-sample the
answer against a knowledge-F1 or confidence threshold without ever
re-retrieving.

Endpoint failures mid-run yield a ``failed`` trace rather than aborting the
whole dataset run.
"""

from __future__ import annotations

import hashlib
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .corpus import KnowledgeItem, QAExample
from .lm_client import (
    GREEDY_PARAMS,
    RESAMPLE_PARAMS,
    CapabilityError,
    FixtureError,
    GenerationParams,
    LMBackend,
    answer_confidence,
    build_qa_prompt,
    generate,
    prompt_digest,
)
from .retrieval import ExclusionSet, RetrievalIndex, TransportError, retrieve_next
from .traces import (
    BUDGET_EXHAUSTED,
    KNOWLEDGE_EXHAUSTED,
    Action,
    Disposition,
    PipelineStep,
    PipelineTrace,
)
from .verifier import InstructionTemplate, TEMPLATE_IDS, Verdict, verify
from .eval import metric_tokens

logger = logging.getLogger(__name__)

MODE_NAIVE = "naive"
MODE_KNOWLEDGE_AUGMENTED = "knowledge_augmented"
MODE_ADAPTIVE_CONFIDENCE = "adaptive_confidence"
MODE_AUGMENTER_KF1 = "augmenter_kf1"
MODE_AUGMENTER_CONFIDENCE = "augmenter_confidence"
MODE_KALMV = "kalmv"
MODES = (
    MODE_NAIVE,
    MODE_KNOWLEDGE_AUGMENTED,
    MODE_ADAPTIVE_CONFIDENCE,
    MODE_AUGMENTER_KF1,
    MODE_AUGMENTER_CONFIDENCE,
    MODE_KALMV,
)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = MODE_KALMV
    max_rectify_steps: int = 1
    confidence_threshold: float = 0.5
    kf1_threshold: float = 0.2
    first_params: GenerationParams = GREEDY_PARAMS
    resample_params: GenerationParams = RESAMPLE_PARAMS
    template_ids: tuple[int, ...] = TEMPLATE_IDS
    bundle_top_n: int = 1
    label_rule: str = "accuracy"
    record_timings: bool = False  # off by default: keeps trace files byte-reproducible

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.max_rectify_steps < 0:
            raise ValueError("max_rectify_steps must be >= 0")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")
        if not 0.0 <= self.kf1_threshold <= 1.0:
            raise ValueError("kf1_threshold must be in [0, 1]")
        if self.bundle_top_n < 1:
            raise ValueError("bundle_top_n must be >= 1")


def knowledge_f1(knowledge_text: str, answer: str) -> float:
    """Token-multiset F1 between knowledge and answer; 0 when either is empty."""
    knowledge = metric_tokens(knowledge_text)
    pred = metric_tokens(answer)
    if not knowledge or not pred:
        return 0.0
    common = Counter(pred) & Counter(knowledge)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred)
    recall = num_same / len(knowledge)
    return 2 * precision * recall / (precision + recall)


def derive_seed(root_seed: int, example_id: str) -> int:
    """Stable per-question seed, independent of execution order."""
    digest = hashlib.sha256(f"{root_seed}:{example_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def bundled_retrieve(
    question: str, index: RetrievalIndex, exclusions: ExclusionSet, top_n: int
) -> KnowledgeItem | None:
    """Next-best unused item; with top_n > 1, the next-best items merged into one."""
    picked: list[KnowledgeItem] = []
    for _ in range(top_n):
        item = retrieve_next(question, index, exclusions)
        if item is None:
            break
        exclusions.add(item.item_id)
        picked.append(item)
    if not picked:
        return None
    if len(picked) == 1:
        return picked[0]
    return KnowledgeItem(
        item_id="+".join(p.item_id for p in picked),
        source_kind=picked[0].source_kind,
        text=" ".join(p.text for p in picked),
    )


@dataclass
class _Run:
    example: QAExample
    config: PipelineConfig
    steps: list[PipelineStep] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    _mark: float = field(default_factory=time.perf_counter)

    def append(self, step: PipelineStep) -> None:
        now = time.perf_counter()
        self.wall_times.append((now - self._mark) * 1000.0)
        self._mark = now
        self.steps.append(step)

    def trace(
        self,
        disposition: Disposition,
        final_answer: str | None = None,
        withhold_reason: str | None = None,
        error: str | None = None,
    ) -> PipelineTrace:
        return PipelineTrace(
            example_id=self.example.example_id,
            mode=self.config.mode,
            max_rectify_steps=self.config.max_rectify_steps,
            question=self.example.question,
            gold_answers=self.example.gold_answers,
            alias_sets=self.example.alias_sets,
            steps=self.steps,
            disposition=disposition,
            final_answer=final_answer,
            withhold_reason=withhold_reason,
            error=error,
            wall_time_ms=self.wall_times if self.config.record_timings else None,
        )


def _generate_answer(
    question: str, knowledge: str | None, params: GenerationParams, lm: LMBackend
) -> tuple[str, str]:
    prompt = build_qa_prompt(question, knowledge)
    result = generate(prompt, params, lm)
    return result.text, prompt_digest(prompt)


def _run_kalmv(run: _Run, index, lm, verifier_lm, templates, seed) -> PipelineTrace:
    config = run.config
    question = run.example.question
    exclusions = ExclusionSet()
    first = config.first_params.with_seed(seed)

    item = bundled_retrieve(question, index, exclusions, config.bundle_top_n)
    if item is None:
        return run.trace(Disposition.WITHHELD, withhold_reason=KNOWLEDGE_EXHAUSTED)
    answer, digest = _generate_answer(question, item.text, first, lm)
    verdict = verify(question, item.text, answer, verifier_lm, config.template_ids, templates)
    rectifies_used = 0

    while True:
        step = PipelineStep(
            step_index=len(run.steps),
            knowledge_item_id=item.item_id,
            knowledge_text=item.text,
            prompt_digest=digest,
            generated_answer=answer,
            verdict=verdict,
            action=Action.NONE,
        )
        if verdict.verdict == Verdict.CORRECT:
            step.action = Action.DELIVER
            run.append(step)
            return run.trace(Disposition.ANSWERED, final_answer=answer)
        if rectifies_used >= config.max_rectify_steps:
            step.action = Action.WITHHOLD
            run.append(step)
            return run.trace(Disposition.WITHHELD, withhold_reason=BUDGET_EXHAUSTED)

        if verdict.verdict == Verdict.RETRIEVAL_ERROR:
            next_item = bundled_retrieve(question, index, exclusions, config.bundle_top_n)
            if next_item is None:
                step.action = Action.WITHHOLD
                run.append(step)
                return run.trace(Disposition.WITHHELD, withhold_reason=KNOWLEDGE_EXHAUSTED)
            step.action = Action.RERETRIEVE
            run.append(step)
            item = next_item
            # fresh knowledge, deterministic decode
            answer, digest = _generate_answer(question, item.text, first, lm)
        else:
            step.action = Action.REGENERATE
            run.append(step)
            resample = config.resample_params.with_seed(seed + len(run.steps))
            answer, digest = _generate_answer(question, item.text, resample, lm)
        rectifies_used += 1
        verdict = verify(question, item.text, answer, verifier_lm, config.template_ids, templates)


def _run_naive(run: _Run, lm, seed) -> PipelineTrace:
    answer, digest = _generate_answer(
        run.example.question, None, run.config.first_params.with_seed(seed), lm
    )
    run.append(
        PipelineStep(
            step_index=0,
            knowledge_item_id=None,
            knowledge_text=None,
            prompt_digest=digest,
            generated_answer=answer,
            verdict=None,
            action=Action.DELIVER,
        )
    )
    return run.trace(Disposition.ANSWERED, final_answer=answer)


def _run_knowledge_augmented(run: _Run, index, lm, seed) -> PipelineTrace:
    question = run.example.question
    item = bundled_retrieve(question, index, ExclusionSet(), run.config.bundle_top_n)
    knowledge = item.text if item is not None else None
    answer, digest = _generate_answer(
        question, knowledge, run.config.first_params.with_seed(seed), lm
    )
    run.append(
        PipelineStep(
            step_index=0,
            knowledge_item_id=item.item_id if item else None,
            knowledge_text=knowledge,
            prompt_digest=digest,
            generated_answer=answer,
            verdict=None,
            action=Action.DELIVER,
        )
    )
    return run.trace(Disposition.ANSWERED, final_answer=answer)


def run_adaptive_confidence(
    example: QAExample,
    config: PipelineConfig,
    index: RetrievalIndex,
    lm: LMBackend,
    seed: int = 0,
) -> PipelineTrace:
    """Answer naively; retrieve and regenerate only when confidence is low."""
    run = _Run(example, config)
    lm = lm.session()
    question = example.question
    first = config.first_params.with_seed(seed)
    naive_prompt = build_qa_prompt(question)
    result = generate(naive_prompt, first, lm)
    conf = answer_confidence(naive_prompt, result.text, lm)

    if conf < config.confidence_threshold:
        run.append(
            PipelineStep(
                step_index=0,
                knowledge_item_id=None,
                knowledge_text=None,
                prompt_digest=prompt_digest(naive_prompt),
                generated_answer=result.text,
                verdict=None,
                action=Action.NONE,
                confidence=conf,
            )
        )
        item = bundled_retrieve(question, index, ExclusionSet(), config.bundle_top_n)
        knowledge = item.text if item is not None else None
        answer, digest = _generate_answer(question, knowledge, first, lm)
        run.append(
            PipelineStep(
                step_index=1,
                knowledge_item_id=item.item_id if item else None,
                knowledge_text=knowledge,
                prompt_digest=digest,
                generated_answer=answer,
                verdict=None,
                action=Action.DELIVER,
            )
        )
        return run.trace(Disposition.ANSWERED, final_answer=answer)

    run.append(
        PipelineStep(
            step_index=0,
            knowledge_item_id=None,
            knowledge_text=None,
            prompt_digest=prompt_digest(naive_prompt),
            generated_answer=result.text,
            verdict=None,
            action=Action.DELIVER,
            confidence=conf,
        )
    )
    return run.trace(Disposition.ANSWERED, final_answer=result.text)


def run_augmenter(
    example: QAExample,
    config: PipelineConfig,
    index: RetrievalIndex,
    lm: LMBackend,
    variant: str,
    seed: int = 0,
) -> PipelineTrace:
    """Retrieve once, then accept or re-sample against a heuristic threshold.

    The knowledge never changes: this baseline cannot recover from a bad
    retrieval, only from an unlucky generation.
    """
    if variant not in ("kf1", "confidence"):
        raise ValueError(f"unknown augmenter variant {variant!r}")
    run = _Run(example, config)
    lm = lm.session()
    question = example.question
    item = bundled_retrieve(question, index, ExclusionSet(), config.bundle_top_n)
    if item is None:
        return _run_naive(run, lm, seed)
    prompt = build_qa_prompt(question, item.text)

    for attempt in range(config.max_rectify_steps + 1):
        params = (
            config.first_params.with_seed(seed)
            if attempt == 0
            else config.resample_params.with_seed(seed + attempt)
        )
        result = generate(prompt, params, lm)
        if variant == "kf1":
            score = knowledge_f1(item.text, result.text)
            accepted = score >= config.kf1_threshold
            extra = {"knowledge_f1": score}
        else:
            score = answer_confidence(prompt, result.text, lm)
            accepted = score >= config.confidence_threshold
            extra = {"confidence": score}
        last_attempt = attempt == config.max_rectify_steps
        action = Action.DELIVER if accepted else (
            Action.WITHHOLD if last_attempt else Action.REGENERATE
        )
        run.append(
            PipelineStep(
                step_index=attempt,
                knowledge_item_id=item.item_id,
                knowledge_text=item.text,
                prompt_digest=prompt_digest(prompt),
                generated_answer=result.text,
                verdict=None,
                action=action,
                **extra,
            )
        )
        if accepted:
            return run.trace(Disposition.ANSWERED, final_answer=result.text)
    return run.trace(Disposition.WITHHELD, withhold_reason=BUDGET_EXHAUSTED)


def run_question(
    example: QAExample,
    config: PipelineConfig,
    index: RetrievalIndex | None,
    lm: LMBackend,
    verifier_lm: LMBackend | None = None,
    templates: dict[int, InstructionTemplate] | None = None,
    seed: int = 0,
) -> PipelineTrace:
    """Run one question under the configured mode and return its trace.

    Endpoint failures (transport, capability, missing mock fixture) are
    captured as a ``failed`` trace carrying the steps completed so far.
    """
    run = _Run(example, config)
    try:
        if config.mode == MODE_NAIVE:
            return _run_naive(run, lm.session(), seed)
        if index is None:
            raise ValueError(f"mode {config.mode!r} requires a retrieval index")
        if config.mode == MODE_KNOWLEDGE_AUGMENTED:
            return _run_knowledge_augmented(run, index, lm.session(), seed)
        if config.mode == MODE_ADAPTIVE_CONFIDENCE:
            return run_adaptive_confidence(example, config, index, lm, seed)
        if config.mode == MODE_AUGMENTER_KF1:
            return run_augmenter(example, config, index, lm, "kf1", seed)
        if config.mode == MODE_AUGMENTER_CONFIDENCE:
            return run_augmenter(example, config, index, lm, "confidence", seed)
        if verifier_lm is None:
            raise ValueError("mode 'kalmv' requires a verifier endpoint")
        return _run_kalmv(run, index, lm.session(), verifier_lm.session(), templates, seed)
    except (TransportError, CapabilityError, FixtureError) as exc:
        logger.warning("question %s failed: %s", example.example_id, exc)
        return run.trace(Disposition.FAILED, error=str(exc))


def run_dataset(
    examples: list[QAExample],
    config: PipelineConfig,
    index: RetrievalIndex | None,
    lm: LMBackend,
    verifier_lm: LMBackend | None = None,
    templates: dict[int, InstructionTemplate] | None = None,
    root_seed: int = 0,
    parallelism: int = 4,
) -> list[PipelineTrace]:
    """Run every example; traces come back in input order regardless of scheduling."""

    def one(example: QAExample) -> PipelineTrace:
        return run_question(
            example,
            config,
            index,
            lm,
            verifier_lm,
            templates,
            seed=derive_seed(root_seed, example.example_id),
        )

    if parallelism <= 1 or len(examples) <= 1:
        return [one(ex) for ex in examples]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, examples))
