"""Interop with the main pipeline's LM client, over the real wire contract.

Skipped when the kalmv package is not installed; the harness itself never
imports it.
"""

import math
import threading

import pytest

kalmv_lm = pytest.importorskip("kalmv.lm_client")

from kalmv_finetune.data import load_records
from kalmv_finetune.serve import make_server
from kalmv_finetune.train import evaluate_checkpoint


@pytest.fixture(scope="module")
def served(separable_workspace):
    server = make_server(separable_workspace["result"].checkpoint_dir)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    yield {"url": f"http://{host}:{port}/v1/completions", "workspace": separable_workspace}
    server.shutdown()
    server.server_close()


def test_primary_client_scores_options_consistently(served):
    workspace = served["workspace"]
    dev = load_records(workspace["dev"])
    offline = evaluate_checkpoint(workspace["result"].checkpoint_dir, workspace["dev"])
    client = kalmv_lm.HttpLM(served["url"], retries=1)
    for record, expected in list(zip(dev, offline.predictions))[:12]:
        scores = kalmv_lm.score_options(record.prompt, ["A", "B", "C"], client)
        assert sum(scores.probabilities.values()) == pytest.approx(1.0, abs=1e-6)
        best = max("ABC", key=lambda o: scores.probabilities[o])
        assert best == expected


def test_primary_client_reads_sequence_confidence(served):
    dev = load_records(served["workspace"]["dev"])
    client = kalmv_lm.HttpLM(served["url"], retries=1)
    confidence = kalmv_lm.answer_confidence(dev[0].prompt, dev[0].target, client)
    assert 0.0 <= confidence <= 1.0
    # cross-check against the raw wire response
    raw = client.complete(
        dev[0].prompt, kalmv_lm.GREEDY_PARAMS, score=dev[0].target
    )
    assert confidence == pytest.approx(
        min(1.0, math.exp(raw.sequence_logprob / max(1, raw.num_tokens)))
    )
