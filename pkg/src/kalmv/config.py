"""Run configuration: a YAML tree with CLI-flag overrides layered on top.

The dotted key names below are the single source of truth; the CLI help text
and the doc-sync test both derive from them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .lm_client import GREEDY_PARAMS, RESAMPLE_PARAMS, GenerationParams
from .pipeline import MODE_KALMV, MODES, PipelineConfig
from .retrieval import DENSE_COSINE, SPARSE_BM25

ENV_LM_URL = "KALMV_LM_URL"
ENV_VERIFIER_URL = "KALMV_VERIFIER_URL"
ENV_EMBED_URL = "KALMV_EMBED_URL"
ENV_API_KEY = "KALMV_API_KEY"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    parallelism: int = 4
    templates_dir: str | None = None

    retrieval_kind: str = SPARSE_BM25
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    bundle_top_n: int = 1

    mode: str = MODE_KALMV
    max_rectify_steps: int = 1
    confidence_threshold: float = 0.5
    kf1_threshold: float = 0.2
    template_ids: tuple[int, ...] = (1, 2, 3, 4, 5)
    label_rule: str = "accuracy"

    first_params: GenerationParams = GREEDY_PARAMS
    resample_params: GenerationParams = RESAMPLE_PARAMS

    lm_url: str | None = None
    verifier_url: str | None = None
    embed_url: str | None = None
    retries: int = 2
    timeout_s: float = 60.0

    corpus: str | None = None
    corpus_kind: str = "passages"
    dataset: str | None = None
    index: str | None = None
    traces: str | None = None
    report_dir: str | None = None

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            mode=self.mode,
            max_rectify_steps=self.max_rectify_steps,
            confidence_threshold=self.confidence_threshold,
            kf1_threshold=self.kf1_threshold,
            first_params=self.first_params,
            resample_params=self.resample_params,
            template_ids=tuple(self.template_ids),
            bundle_top_n=self.bundle_top_n,
            label_rule=self.label_rule,
        )

    def resolved_lm_url(self) -> str | None:
        return self.lm_url or os.environ.get(ENV_LM_URL)

    def resolved_verifier_url(self) -> str | None:
        return self.verifier_url or os.environ.get(ENV_VERIFIER_URL)

    def resolved_embed_url(self) -> str | None:
        return self.embed_url or os.environ.get(ENV_EMBED_URL)

    @staticmethod
    def api_key() -> str | None:
        return os.environ.get(ENV_API_KEY)


# dotted config key -> RunConfig attribute
CONFIG_KEYS: dict[str, str] = {
    "seed": "seed",
    "parallelism": "parallelism",
    "templates_dir": "templates_dir",
    "retrieval.kind": "retrieval_kind",
    "retrieval.k1": "bm25_k1",
    "retrieval.b": "bm25_b",
    "retrieval.bundle_top_n": "bundle_top_n",
    "pipeline.mode": "mode",
    "pipeline.max_rectify_steps": "max_rectify_steps",
    "pipeline.confidence_threshold": "confidence_threshold",
    "pipeline.kf1_threshold": "kf1_threshold",
    "pipeline.template_ids": "template_ids",
    "labeler.rule": "label_rule",
    "endpoints.lm_url": "lm_url",
    "endpoints.verifier_url": "verifier_url",
    "endpoints.embed_url": "embed_url",
    "endpoints.retries": "retries",
    "endpoints.timeout_s": "timeout_s",
    "paths.corpus": "corpus",
    "paths.corpus_kind": "corpus_kind",
    "paths.dataset": "dataset",
    "paths.index": "index",
    "paths.traces": "traces",
    "paths.report_dir": "report_dir",
}

_GENERATION_SECTIONS = ("first", "resample")


def _flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _params_from(section: dict, base: GenerationParams) -> GenerationParams:
    allowed = {"mode", "top_k", "temperature", "max_new_tokens", "seed"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown generation keys: {sorted(unknown)}")
    return replace(base, **section)


def load_config(path: str | Path | None) -> RunConfig:
    """Build a RunConfig from a YAML file; missing keys keep their defaults."""
    config = RunConfig()
    if path is None:
        return config
    with open(path, encoding="utf-8") as fh:
        tree = yaml.safe_load(fh) or {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping: {path}")

    generation = tree.pop("generation", {}) or {}
    if not isinstance(generation, dict) or set(generation) - set(_GENERATION_SECTIONS):
        raise ConfigError("generation section must contain only 'first' and 'resample'")
    if "first" in generation:
        config.first_params = _params_from(generation["first"], config.first_params)
    if "resample" in generation:
        config.resample_params = _params_from(generation["resample"], config.resample_params)

    flat = _flatten(tree)
    unknown = set(flat) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for dotted, value in flat.items():
        attr = CONFIG_KEYS[dotted]
        if attr == "template_ids":
            value = tuple(int(v) for v in value)
        setattr(config, attr, value)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    if config.retrieval_kind not in (SPARSE_BM25, DENSE_COSINE):
        raise ConfigError(f"unknown retrieval kind {config.retrieval_kind!r}")
    if config.mode not in MODES:
        raise ConfigError(f"unknown pipeline mode {config.mode!r}")
    if config.corpus_kind not in ("passages", "triples"):
        raise ConfigError(f"unknown corpus kind {config.corpus_kind!r}")
    if config.label_rule not in ("accuracy", "token_overlap"):
        raise ConfigError(f"unknown label rule {config.label_rule!r}")
