import json
import logging

import pytest

from kalmv_finetune.data import LETTERS, load_records
from kalmv_finetune.train import TrainSpec, evaluate_checkpoint, train

from .conftest import separable_records, write_records


class TestTrainSpec:
    def test_defaults_mirror_the_reference_setup(self, tmp_path):
        spec = TrainSpec(
            train_path="t", dev_path="d", base_model_name="tiny-byt5",
            output_dir=str(tmp_path), epochs=1,
        )
        assert spec.learning_rate == 5e-5
        assert spec.batch_size == 8

    def test_validation(self, tmp_path):
        common = dict(train_path="t", dev_path="d", base_model_name="m",
                      output_dir=str(tmp_path))
        with pytest.raises(ValueError):
            TrainSpec(**common, epochs=0)
        with pytest.raises(ValueError):
            TrainSpec(**common, epochs=1, learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainSpec(**common, epochs=1, batch_size=0)


class TestRecords:
    def test_load_validates_targets(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"example_id": "e", "template_id": 1, "prompt": "p", "target": "Z"}\n')
        with pytest.raises(ValueError, match="target"):
            load_records(path)

    def test_empty_training_file_is_a_hard_error(self, tmp_path):
        train_path = tmp_path / "empty.jsonl"
        train_path.write_text("")
        dev_path = write_records(separable_records(6, seed=9), tmp_path / "dev.jsonl")
        spec = TrainSpec(
            train_path=str(train_path), dev_path=str(dev_path),
            base_model_name="tiny-byt5", output_dir=str(tmp_path / "out"), epochs=1,
        )
        with pytest.raises(ValueError, match="empty"):
            train(spec)


class TestSeparableFixture:
    def test_reaches_perfect_dev_accuracy(self, separable_workspace):
        history = separable_workspace["result"].epochs
        assert len(history) <= 20
        assert any(m.dev_accuracy == 1.0 for m in history)
        assert history[-1].dev_accuracy == 1.0

    def test_confusion_is_diagonal(self, separable_workspace):
        confusion = separable_workspace["result"].confusion
        for gold in LETTERS:
            for pred in LETTERS:
                if gold != pred:
                    assert confusion[gold][pred] == 0
            assert confusion[gold][gold] == 20  # 60 dev records, one third each

    def test_eval_reproduces_training_log(self, separable_workspace):
        result = separable_workspace["result"]
        ev = evaluate_checkpoint(result.checkpoint_dir, separable_workspace["dev"])
        assert ev.accuracy == result.epochs[-1].dev_accuracy
        assert ev.confusion == result.confusion

    def test_confusion_rows_sum_to_class_counts(self, separable_workspace):
        ev = evaluate_checkpoint(
            separable_workspace["result"].checkpoint_dir, separable_workspace["dev"]
        )
        dev = load_records(separable_workspace["dev"])
        assert ev.n == len(dev)
        for gold in LETTERS:
            row_sum = sum(ev.confusion[gold].values())
            assert row_sum == sum(1 for r in dev if r.target == gold)

    def test_metrics_file_fields(self, separable_workspace):
        metrics_path = separable_workspace["result"].checkpoint_dir / "metrics.json"
        metrics = json.loads(metrics_path.read_text())
        assert {"epochs", "confusion"} <= set(metrics)
        for entry in metrics["epochs"]:
            assert {"epoch", "train_loss", "dev_accuracy"} == set(entry)


class TestDegenerateAndDeterminism:
    def test_single_class_training_predicts_that_class(self, tmp_path):
        train_path = write_records(
            separable_records(20, seed=3, target="A"), tmp_path / "train.jsonl"
        )
        dev_path = write_records(separable_records(60, seed=4), tmp_path / "dev.jsonl")
        result = train(TrainSpec(
            train_path=str(train_path), dev_path=str(dev_path),
            base_model_name="tiny-byt5", output_dir=str(tmp_path / "out"),
            epochs=5, learning_rate=3e-3, seed=0,
        ))
        ev = evaluate_checkpoint(result.checkpoint_dir, dev_path)
        assert set(ev.predictions) == {"A"}
        prevalence = sum(1 for r in load_records(dev_path) if r.target == "A") / ev.n
        assert ev.accuracy == pytest.approx(prevalence)

    def test_seed_determinism(self, tmp_path):
        train_path = write_records(separable_records(24, seed=5), tmp_path / "train.jsonl")
        dev_path = write_records(separable_records(12, seed=6), tmp_path / "dev.jsonl")

        def run(out):
            return train(TrainSpec(
                train_path=str(train_path), dev_path=str(dev_path),
                base_model_name="tiny-byt5", output_dir=str(tmp_path / out),
                epochs=2, learning_rate=1e-3, seed=7,
            ))

        first, second = run("a"), run("b")
        assert [m.train_loss for m in first.epochs] == [m.train_loss for m in second.epochs]
        assert [m.dev_accuracy for m in first.epochs] == [m.dev_accuracy for m in second.epochs]

    def test_stalled_loss_warns_but_trains(self, tmp_path, caplog):
        # one record, lr too small to move float32 weights: per-epoch loss is frozen
        train_path = write_records(separable_records(1, seed=8), tmp_path / "train.jsonl")
        dev_path = write_records(separable_records(3, seed=9), tmp_path / "dev.jsonl")
        with caplog.at_level(logging.WARNING):
            result = train(TrainSpec(
                train_path=str(train_path), dev_path=str(dev_path),
                base_model_name="tiny-byt5", output_dir=str(tmp_path / "out"),
                epochs=2, learning_rate=1e-30, batch_size=1, seed=0,
            ))
        assert "never decreased" in caplog.text
        assert len(result.epochs) == 2
