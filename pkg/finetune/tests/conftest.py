import json
import random

import pytest
import transformers

transformers.utils.logging.set_verbosity_error()

from kalmv_finetune.train import TrainSpec, train

# label is a pure function of one marker token planted in the passage slot
MARKERS = {"ruby": "A", "jade": "B", "onyx": "C"}
FILLER = ["report", "values", "entry", "window", "record", "detail", "margin", "signal"]

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call":
        _acceptance_results.append((report.nodeid, "PASS" if report.passed else "FAIL"))
    elif report.when == "setup" and report.skipped:
        _acceptance_results.append((report.nodeid, "SKIP"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_acceptance_results):
        terminalreporter.write_line(f"[{outcome}] {nodeid.split('::')[-1]}")


def separable_records(n, seed, target=None):
    """Synthetic records whose label is decided by the marker token (the oracle)."""
    rng = random.Random(seed)
    markers = list(MARKERS)
    rows = []
    for i in range(n):
        marker = markers[i % 3]
        pre = " ".join(rng.choice(FILLER) for _ in range(rng.randint(2, 6)))
        post = " ".join(rng.choice(FILLER) for _ in range(rng.randint(2, 6)))
        prompt = (
            f"Question: {pre}?\n\n"
            f"Passage: the token {marker} appears with {post}.\n\n"
            f"Output: {rng.choice(FILLER)}\n\n"
            f"Select one option:"
        )
        rows.append(
            {
                "example_id": f"e{i}",
                "template_id": 1 + i % 5,
                "prompt": prompt,
                "target": target or MARKERS[marker],
            }
        )
    return rows


def write_records(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


@pytest.fixture(scope="session")
def separable_workspace(tmp_path_factory):
    """Train once on the separable fixture; shared by training/serving tests."""
    root = tmp_path_factory.mktemp("separable")
    train_path = write_records(separable_records(60, seed=1), root / "train.jsonl")
    dev_path = write_records(separable_records(60, seed=2), root / "dev.jsonl")
    spec = TrainSpec(
        train_path=str(train_path),
        dev_path=str(dev_path),
        base_model_name="tiny-byt5",
        output_dir=str(root / "checkpoint"),
        epochs=12,
        learning_rate=1e-3,
        seed=0,
    )
    result = train(spec)
    return {"spec": spec, "result": result, "train": train_path, "dev": dev_path}
