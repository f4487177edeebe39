"""Model construction and checkpoint IO.

``base_model_name`` is either the built-in "tiny-byt5" (a byte-level T5 built
from scratch, no downloads, meant for tests and smoke runs) or any local or
hub text-to-text checkpoint loadable by transformers. Option letters are
compared by the first token of their encoding, so models whose tokenizers
split a letter into several pieces still score consistently.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import torch
from transformers import (
    AutoModelForSeq2SeqLM,
    AutoTokenizer,
    ByT5Tokenizer,
    T5Config,
    T5ForConditionalGeneration,
)

logger = logging.getLogger(__name__)

TINY_BYT5 = "tiny-byt5"
META_FILE = "train_meta.json"


def build(base_model_name: str, seed: int = 0):
    """Return (tokenizer, model) for a base model name."""
    if base_model_name == TINY_BYT5:
        tokenizer = ByT5Tokenizer()
        config = T5Config(
            vocab_size=len(tokenizer),
            d_model=64,
            d_kv=16,
            d_ff=128,
            num_layers=2,
            num_decoder_layers=2,
            num_heads=4,
            dropout_rate=0.0,
            decoder_start_token_id=tokenizer.pad_token_id,
            pad_token_id=tokenizer.pad_token_id,
            eos_token_id=tokenizer.eos_token_id,
        )
        torch.manual_seed(seed)
        model = T5ForConditionalGeneration(config)
        return tokenizer, model
    tokenizer = AutoTokenizer.from_pretrained(base_model_name)
    model = AutoModelForSeq2SeqLM.from_pretrained(base_model_name)
    return tokenizer, model


def letter_token_ids(tokenizer, letters) -> list[int]:
    """First token id of each option letter (the compared likelihoods)."""
    ids = []
    for letter in letters:
        pieces = tokenizer(letter, add_special_tokens=False).input_ids
        if len(pieces) != 1:
            logger.warning(
                "option %r tokenizes to %d pieces; comparing first tokens only",
                letter, len(pieces),
            )
        ids.append(pieces[0])
    if len(set(ids)) != len(ids):
        raise ValueError("option letters do not have distinct first tokens")
    return ids


def save_checkpoint(model, tokenizer, out_dir: str | Path, meta: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)
    with open(out_dir / META_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_checkpoint(checkpoint_dir: str | Path):
    checkpoint_dir = Path(checkpoint_dir)
    if not checkpoint_dir.exists():
        raise FileNotFoundError(f"checkpoint directory not found: {checkpoint_dir}")
    tokenizer = AutoTokenizer.from_pretrained(checkpoint_dir)
    model = AutoModelForSeq2SeqLM.from_pretrained(checkpoint_dir)
    model.eval()
    meta_path = checkpoint_dir / META_FILE
    meta = {}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return tokenizer, model, meta
