"""Training and evaluation of the option-letter verifier.

Training is plain AdamW over the seq2seq cross-entropy of the target letter
(defaults: learning rate 5e-5, batch size 8). Evaluation never decodes
freely: it compares the likelihoods the model assigns to each option letter
as the first generated token, which is exactly how the serving side scores
options.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import LETTERS, TrainingRecord, load_records
from .modeling import build, letter_token_ids, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"


@dataclass
class TrainSpec:
    train_path: str
    dev_path: str
    base_model_name: str
    output_dir: str
    epochs: int
    learning_rate: float = 5e-5
    batch_size: int = 8
    max_input_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_accuracy: float


@dataclass
class TrainResult:
    checkpoint_dir: Path
    epochs: list[EpochMetrics]
    confusion: dict[str, dict[str, int]]

    @property
    def final_dev_accuracy(self) -> float:
        return self.epochs[-1].dev_accuracy


def _encode_batch(tokenizer, prompts, max_input_len):
    return tokenizer(
        prompts,
        return_tensors="pt",
        padding=True,
        truncation=True,
        max_length=max_input_len,
    )


def _label_batch(tokenizer, targets, pad_to: int | None = None):
    enc = tokenizer(list(targets), return_tensors="pt", padding=True)
    labels = enc.input_ids.clone()
    labels[labels == tokenizer.pad_token_id] = -100
    return labels


@torch.no_grad()
def predict_letters(
    model, tokenizer, prompts: list[str], max_input_len: int = 512, batch_size: int = 16
) -> list[str]:
    """Argmax over the option letters' first-token likelihoods, per prompt."""
    model.eval()
    option_ids = letter_token_ids(tokenizer, LETTERS)
    out: list[str] = []
    start_id = model.config.decoder_start_token_id
    for lo in range(0, len(prompts), batch_size):
        chunk = prompts[lo : lo + batch_size]
        enc = _encode_batch(tokenizer, chunk, max_input_len)
        decoder_input = torch.full((len(chunk), 1), start_id, dtype=torch.long)
        logits = model(
            input_ids=enc.input_ids,
            attention_mask=enc.attention_mask,
            decoder_input_ids=decoder_input,
        ).logits[:, 0, :]
        picks = logits[:, option_ids].argmax(dim=-1).tolist()
        out.extend(LETTERS[p] for p in picks)
    return out


def _dev_accuracy(model, tokenizer, dev: list[TrainingRecord], max_input_len: int) -> float:
    if not dev:
        return 0.0
    predicted = predict_letters(model, tokenizer, [r.prompt for r in dev], max_input_len)
    return sum(p == r.target for p, r in zip(predicted, dev)) / len(dev)


def _confusion(model, tokenizer, dev: list[TrainingRecord], max_input_len: int):
    counts = {gold: {pred: 0 for pred in LETTERS} for gold in LETTERS}
    predicted = predict_letters(model, tokenizer, [r.prompt for r in dev], max_input_len)
    for record, pred in zip(dev, predicted):
        counts[record.target][pred] += 1
    return counts


def train(spec: TrainSpec) -> TrainResult:
    """Fine-tune, tracking per-epoch loss and dev accuracy; save a checkpoint."""
    records = load_records(spec.train_path)
    if not records:
        raise ValueError(f"training file is empty: {spec.train_path}")
    dev = load_records(spec.dev_path)

    torch.manual_seed(spec.seed)
    tokenizer, model = build(spec.base_model_name, seed=spec.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=spec.learning_rate)
    shuffler = torch.Generator().manual_seed(spec.seed)

    history: list[EpochMetrics] = []
    for epoch in range(1, spec.epochs + 1):
        model.train()
        order = torch.randperm(len(records), generator=shuffler).tolist()
        total_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), spec.batch_size):
            batch = [records[i] for i in order[lo : lo + spec.batch_size]]
            enc = _encode_batch(tokenizer, [r.prompt for r in batch], spec.max_input_len)
            labels = _label_batch(tokenizer, [r.target for r in batch])
            loss = model(
                input_ids=enc.input_ids,
                attention_mask=enc.attention_mask,
                labels=labels,
            ).loss
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item()
            n_batches += 1
        epoch_loss = total_loss / n_batches
        accuracy = _dev_accuracy(model, tokenizer, dev, spec.max_input_len)
        history.append(EpochMetrics(epoch=epoch, train_loss=epoch_loss, dev_accuracy=accuracy))
        logger.info("epoch %d: train_loss %.4f dev_accuracy %.4f", epoch, epoch_loss, accuracy)

    losses = [m.train_loss for m in history]
    if len(losses) > 1 and all(b >= a for a, b in zip(losses, losses[1:])):
        logger.warning("training loss never decreased across %d epochs", len(losses))

    confusion = _confusion(model, tokenizer, dev, spec.max_input_len)
    checkpoint_dir = save_checkpoint(
        model,
        tokenizer,
        spec.output_dir,
        meta={
            "base_model_name": spec.base_model_name,
            "learning_rate": spec.learning_rate,
            "batch_size": spec.batch_size,
            "epochs": spec.epochs,
            "max_input_len": spec.max_input_len,
            "seed": spec.seed,
        },
    )
    metrics = {
        "epochs": [
            {"epoch": m.epoch, "train_loss": m.train_loss, "dev_accuracy": m.dev_accuracy}
            for m in history
        ],
        "confusion": confusion,
    }
    with open(checkpoint_dir / METRICS_FILE, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return TrainResult(checkpoint_dir=checkpoint_dir, epochs=history, confusion=confusion)


@dataclass
class EvalResult:
    accuracy: float
    confusion: dict[str, dict[str, int]]
    n: int
    predictions: list[str] = field(repr=False, default_factory=list)


def evaluate_checkpoint(checkpoint_dir: str | Path, dev_path: str | Path) -> EvalResult:
    """Label accuracy and per-class confusion of a saved checkpoint."""
    tokenizer, model, meta = load_checkpoint(checkpoint_dir)
    max_input_len = int(meta.get("max_input_len", 512))
    dev = load_records(dev_path)
    predicted = predict_letters(model, tokenizer, [r.prompt for r in dev], max_input_len)
    counts = {gold: {pred: 0 for pred in LETTERS} for gold in LETTERS}
    hits = 0
    for record, pred in zip(dev, predicted):
        counts[record.target][pred] += 1
        hits += pred == record.target
    accuracy = hits / len(dev) if dev else 0.0
    return EvalResult(accuracy=accuracy, confusion=counts, n=len(dev), predictions=predicted)
