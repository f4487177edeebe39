import json

import pytest

import kalmv.pipeline as pipeline_mod
from kalmv.corpus import KnowledgeItem, KnowledgeStore, QAExample
from kalmv.lm_client import MockLM, build_qa_prompt
from kalmv.pipeline import (
    PipelineConfig,
    derive_seed,
    knowledge_f1,
    run_adaptive_confidence,
    run_augmenter,
    run_dataset,
    run_question,
)
from kalmv.retrieval import RetrievalIndex
from kalmv.traces import (
    Action,
    Disposition,
    assert_valid_trace,
    dumps_trace,
    trace_to_dict,
    validate_trace,
)

from .helpers import script_confidence, script_generation, script_verdict
from .scenarios import build_scenarios


class TestKnowledgeF1:
    def test_identical(self):
        assert knowledge_f1("same words here", "same words here") == 1.0

    def test_disjoint(self):
        assert knowledge_f1("alpha beta", "gamma delta") == 0.0

    def test_partial(self):
        # knowledge {w1..w4}, answer {w1, w2}: precision 1.0, recall 0.5
        assert knowledge_f1("w1 w2 w3 w4", "w1 w2") == pytest.approx(2 / 3, abs=1e-9)

    def test_empty_sides(self):
        assert knowledge_f1("", "words") == 0.0
        assert knowledge_f1("words", "") == 0.0


class TestScenarios:
    @pytest.mark.parametrize("scenario", build_scenarios(), ids=lambda s: s.name)
    def test_trace_matches_expected_bytes(self, scenario):
        scenario.assert_ranking_matches_reference()
        trace = run_question(
            scenario.example, scenario.config(), scenario.index(),
            scenario.mock, scenario.mock,
        )
        expected = json.dumps(
            scenario.expected_trace, ensure_ascii=False, separators=(",", ":"), sort_keys=True
        )
        assert dumps_trace(trace) == expected

    @pytest.mark.parametrize("scenario", build_scenarios(), ids=lambda s: s.name)
    def test_validator_accepts(self, scenario):
        trace = run_question(
            scenario.example, scenario.config(), scenario.index(),
            scenario.mock, scenario.mock,
        )
        assert validate_trace(trace) == []

    @pytest.mark.parametrize("scenario", build_scenarios(), ids=lambda s: s.name)
    def test_knowledge_freshness(self, scenario):
        trace = run_question(
            scenario.example, scenario.config(), scenario.index(),
            scenario.mock, scenario.mock,
        )
        ids = [s.knowledge_item_id for s in trace.steps if s.knowledge_item_id]
        reretrieves = sum(1 for s in trace.steps if s.action == Action.RERETRIEVE)
        assert len(set(ids)) == 1 + reretrieves


def _single_item_index(text="useful knowledge here"):
    store = KnowledgeStore([KnowledgeItem("k1", "passage", text)])
    return RetrievalIndex.build_sparse(store)


class TestKalmvEdges:
    def test_budget_zero_is_verify_only(self):
        ex = QAExample("e", "useful question", ("gold",))
        index = _single_item_index("useful knowledge question words")
        mock = MockLM()
        knowledge = "useful knowledge question words"
        script_generation(mock, ex.question, knowledge, "some answer")
        script_verdict(mock, ex.question, knowledge, "some answer", "B")
        config = PipelineConfig(mode="kalmv", max_rectify_steps=0)
        trace = run_question(ex, config, index, mock, mock)
        assert trace.disposition == Disposition.WITHHELD
        assert trace.withhold_reason == "budget_exhausted"
        assert len(trace.steps) == 1
        assert validate_trace(trace) == []

    def test_empty_retrieval_withholds_without_steps(self):
        ex = QAExample("e", "nothing matches this", ("gold",))
        index = _single_item_index("completely disjoint text")
        config = PipelineConfig(mode="kalmv", max_rectify_steps=2)
        trace = run_question(ex, config, index, MockLM(), MockLM())
        assert trace.disposition == Disposition.WITHHELD
        assert trace.withhold_reason == "knowledge_exhausted"
        assert trace.steps == []
        assert validate_trace(trace) == []

    def test_endpoint_failure_becomes_failed_trace(self):
        ex = QAExample("e", "useful question", ("gold",))
        index = _single_item_index("useful knowledge question words")
        trace = run_question(ex, PipelineConfig(mode="kalmv"), index, MockLM(), MockLM())
        assert trace.disposition == Disposition.FAILED
        assert "no fixture" in trace.error
        assert validate_trace(trace) == []


class TestAdaptiveConfidence:
    def _setup(self, confidence_mean_logprob, threshold=0.5):
        ex = QAExample("e", "capital of freedonia", ("Freedonia City",))
        index = _single_item_index("freedonia capital is freedonia city")
        mock = MockLM()
        naive_prompt = build_qa_prompt(ex.question)
        script_generation(mock, ex.question, None, "naive answer")
        script_confidence(mock, naive_prompt, "naive answer", confidence_mean_logprob)
        script_generation(
            mock, ex.question, "freedonia capital is freedonia city", "grounded answer"
        )
        config = PipelineConfig(mode="adaptive_confidence", confidence_threshold=threshold)
        return ex, index, mock, config

    def test_high_confidence_skips_retrieval(self, monkeypatch):
        ex, index, mock, config = self._setup(confidence_mean_logprob=-0.01)
        calls = []
        real = pipeline_mod.retrieve_next
        monkeypatch.setattr(
            pipeline_mod, "retrieve_next", lambda *a: calls.append(1) or real(*a)
        )
        trace = run_adaptive_confidence(ex, config, index, mock)
        assert trace.disposition == Disposition.ANSWERED
        assert trace.final_answer == "naive answer"
        assert len(trace.steps) == 1 and trace.steps[0].knowledge_item_id is None
        assert calls == []
        assert validate_trace(trace) == []

    def test_low_confidence_retrieves_and_regenerates(self):
        ex, index, mock, config = self._setup(confidence_mean_logprob=-5.0)
        trace = run_adaptive_confidence(ex, config, index, mock)
        assert trace.disposition == Disposition.ANSWERED
        assert trace.final_answer == "grounded answer"
        assert [s.knowledge_item_id for s in trace.steps] == [None, "k1"]
        assert trace.steps[0].confidence == pytest.approx(pytest.approx(0.006737946999, abs=1e-9))
        assert validate_trace(trace) == []

    def test_threshold_zero_never_retrieves(self):
        ex, index, mock, config = self._setup(confidence_mean_logprob=-20.0, threshold=0.0)
        trace = run_adaptive_confidence(ex, config, index, mock)
        assert len(trace.steps) == 1
        assert trace.final_answer == "naive answer"


class TestAugmenter:
    def _setup(self, answers, threshold=0.1, budget=1):
        # knowledge tokens: {w1, w2, w3, w4}
        ex = QAExample("e", "w1 question", ("gold",))
        knowledge = "w1 w2 w3 w4"
        index = _single_item_index(knowledge)
        mock = MockLM()
        for attempt, answer in enumerate(answers):
            script_generation(mock, ex.question, knowledge, answer, attempt=attempt)
        config = PipelineConfig(
            mode="augmenter_kf1", kf1_threshold=threshold, max_rectify_steps=budget
        )
        return ex, index, mock, config

    def test_zero_overlap_triggers_regeneration(self):
        ex, index, mock, config = self._setup(["zzz yyy", "w1 w2"])
        trace = run_augmenter(ex, config, index, mock, "kf1")
        assert trace.disposition == Disposition.ANSWERED
        assert [s.action for s in trace.steps] == [Action.REGENERATE, Action.DELIVER]
        assert trace.steps[0].knowledge_f1 == 0.0
        assert trace.steps[1].knowledge_f1 == pytest.approx(2 / 3, abs=1e-9)
        assert validate_trace(trace) == []

    def test_accept_at_step_zero(self):
        ex, index, mock, config = self._setup(["w1 w2"])
        trace = run_augmenter(ex, config, index, mock, "kf1")
        assert trace.disposition == Disposition.ANSWERED
        assert len(trace.steps) == 1

    def test_all_below_threshold_withholds_after_budget(self):
        ex, index, mock, config = self._setup(["zzz", "yyy"], budget=1)
        trace = run_augmenter(ex, config, index, mock, "kf1")
        assert trace.disposition == Disposition.WITHHELD
        assert len(trace.steps) == 2
        assert trace.withhold_reason == "budget_exhausted"
        assert validate_trace(trace) == []

    def test_confidence_variant(self):
        ex = QAExample("e", "w1 question", ("gold",))
        knowledge = "w1 w2 w3 w4"
        index = _single_item_index(knowledge)
        mock = MockLM()
        prompt = build_qa_prompt(ex.question, knowledge)
        script_generation(mock, ex.question, knowledge, "first", attempt=0)
        script_confidence(mock, prompt, "first", -5.0)
        script_generation(mock, ex.question, knowledge, "second", attempt=1)
        script_confidence(mock, prompt, "second", -0.01)
        config = PipelineConfig(mode="augmenter_confidence", confidence_threshold=0.5)
        trace = run_augmenter(ex, config, index, mock, "confidence")
        assert trace.disposition == Disposition.ANSWERED
        assert trace.final_answer == "second"
        assert trace.steps[0].confidence == pytest.approx(0.006737946999, abs=1e-9)


class TestBaselines:
    def test_naive_single_step(self):
        ex = QAExample("e", "any question", ("gold",))
        mock = MockLM()
        script_generation(mock, ex.question, None, "from memory")
        trace = run_question(ex, PipelineConfig(mode="naive"), None, mock)
        assert trace.disposition == Disposition.ANSWERED
        assert trace.steps[0].knowledge_item_id is None
        assert validate_trace(trace) == []

    def test_knowledge_augmented_single_step(self):
        ex = QAExample("e", "useful question", ("gold",))
        index = _single_item_index("useful knowledge question words")
        mock = MockLM()
        script_generation(mock, ex.question, "useful knowledge question words", "grounded")
        trace = run_question(ex, PipelineConfig(mode="knowledge_augmented"), index, mock)
        assert trace.disposition == Disposition.ANSWERED
        assert trace.steps[0].knowledge_item_id == "k1"
        assert trace.steps[0].verdict is None
        assert validate_trace(trace) == []


class TestRunDataset:
    def _scenario_run(self, parallelism):
        scenarios = build_scenarios()[:4]
        mock = MockLM()
        for s in scenarios:
            mock._records.update(s.mock._records)
        store_items = []
        for s in scenarios:
            store_items.extend(KnowledgeItem(d, "passage", b) for d, _, b in s.passages)
        index = RetrievalIndex.build_sparse(KnowledgeStore(store_items))
        examples = [s.example for s in scenarios]
        config = PipelineConfig(mode="kalmv", max_rectify_steps=2)
        return run_dataset(
            examples, config, index, mock, mock, root_seed=0, parallelism=parallelism
        )

    def test_order_and_parallel_determinism(self):
        serial = self._scenario_run(parallelism=1)
        parallel = self._scenario_run(parallelism=4)
        assert [dumps_trace(t) for t in serial] == [dumps_trace(t) for t in parallel]
        assert [t.example_id for t in serial] == ["s1", "s2", "s3", "s4"]

    def test_derive_seed_is_stable(self):
        assert derive_seed(0, "x") == derive_seed(0, "x")
        assert derive_seed(0, "x") != derive_seed(1, "x")
        assert derive_seed(0, "x") != derive_seed(0, "y")


class TestValidatorRejects:
    def _good_trace(self):
        scenario = build_scenarios()[0]
        return run_question(
            scenario.example, scenario.config(), scenario.index(),
            scenario.mock, scenario.mock,
        )

    def test_detects_action_verdict_mismatch(self):
        trace = self._good_trace()
        trace.steps[-1].action = Action.RERETRIEVE
        assert any("reretrieve" in p for p in validate_trace(trace))

    def test_detects_missing_final_answer(self):
        trace = self._good_trace()
        trace.final_answer = None
        assert any("final_answer" in p for p in validate_trace(trace))

    def test_detects_bad_step_count_for_budget_withhold(self):
        scenario = next(s for s in build_scenarios() if s.name == "all_a_withhold")
        trace = run_question(
            scenario.example, scenario.config(), scenario.index(),
            scenario.mock, scenario.mock,
        )
        trace.steps.pop()
        trace.steps[-1].action = Action.WITHHOLD
        assert any("steps" in p for p in validate_trace(trace))

    def test_assert_valid_raises(self):
        trace = self._good_trace()
        trace.final_answer = None
        with pytest.raises(ValueError, match="violates invariants"):
            assert_valid_trace(trace)

    def test_round_trip_through_dict(self):
        trace = self._good_trace()
        from kalmv.traces import trace_from_dict

        again = trace_from_dict(trace_to_dict(trace))
        assert dumps_trace(again) == dumps_trace(trace)
