"""Command-line entry point.

Subcommands: ``index`` builds a retrieval snapshot, ``run`` executes a
pipeline mode over a dataset and writes a trace file, ``label`` emits the
verifier training JSONL, ``eval`` scores answers from traces, and
``verify-eval`` scores the verifier itself (sweeping rectify budgets when the
trace file mixes several). Every subcommand takes ``--config`` (YAML) with
flags overriding file values; ``--mock FIXTURE`` swaps both LM endpoints for
the scripted mock backend.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import __version__
from .config import (
    CONFIG_KEYS,
    ConfigError,
    RunConfig,
    load_config,
)
from .corpus import CorpusFormatError, load_corpus, load_qa_dataset
from .eval import (
    answer_metrics,
    answer_report,
    group_traces_by_budget,
    render_csv,
    render_json,
    render_table,
    verifier_metrics,
    verifier_report,
)
from .figures import render_answer_figures, render_verifier_figures
from .labeler import auto_label, emit_training_records, label_example, write_label_stats, write_training_records
from .lm_client import HttpLM, LMBackend, MockLM, build_qa_prompt, generate
from .pipeline import MODE_NAIVE, MODES, bundled_retrieve, run_dataset
from .retrieval import (
    DENSE_COSINE,
    EmbeddingClient,
    ExclusionSet,
    RetrievalIndex,
    SPARSE_BM25,
    SnapshotError,
    TransportError,
)
from .traces import TraceSchemaError, read_traces, validate_traces, write_traces
from .verifier import load_templates

# config keys each subcommand actually reads; rendered into its --help epilog
COMMAND_CONFIG_KEYS: dict[str, list[str]] = {
    "index": [
        "retrieval.kind",
        "retrieval.k1",
        "retrieval.b",
        "endpoints.embed_url",
        "endpoints.retries",
        "endpoints.timeout_s",
        "paths.corpus",
        "paths.corpus_kind",
        "paths.index",
    ],
    "run": [
        "seed",
        "parallelism",
        "templates_dir",
        "retrieval.bundle_top_n",
        "pipeline.mode",
        "pipeline.max_rectify_steps",
        "pipeline.confidence_threshold",
        "pipeline.kf1_threshold",
        "pipeline.template_ids",
        "endpoints.lm_url",
        "endpoints.verifier_url",
        "endpoints.embed_url",
        "endpoints.retries",
        "endpoints.timeout_s",
        "paths.dataset",
        "paths.index",
        "paths.traces",
    ],
    "label": [
        "seed",
        "templates_dir",
        "retrieval.bundle_top_n",
        "labeler.rule",
        "endpoints.lm_url",
        "endpoints.embed_url",
        "endpoints.retries",
        "endpoints.timeout_s",
        "paths.dataset",
        "paths.index",
        "paths.traces",
    ],
    "eval": ["paths.traces", "paths.report_dir"],
    "verify-eval": ["labeler.rule", "paths.traces", "paths.report_dir"],
}


class CliError(RuntimeError):
    pass


def _epilog(command: str) -> str:
    keys = "\n".join(f"  {key}" for key in COMMAND_CONFIG_KEYS[command])
    return f"config keys read by this command:\n{keys}\n"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="root random seed (overrides config)")
    parser.add_argument("--mock", help="mock LM fixture file (JSONL); replaces HTTP endpoints")
    parser.add_argument("--parallelism", type=int, help="concurrent question runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kalmv",
        description="retrieve, answer, verify, and rectify for knowledge-augmented QA",
    )
    parser.add_argument("--version", action="version", version=f"kalmv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("index", help="build a retrieval index snapshot",
                       epilog=_epilog("index"), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--corpus", help="knowledge corpus JSONL")
    p.add_argument("--corpus-kind", choices=["passages", "triples"], dest="corpus_kind")
    p.add_argument("--retriever", choices=[SPARSE_BM25, DENSE_COSINE], dest="retrieval_kind")
    p.add_argument("--out", help="snapshot file to write")
    p.add_argument("--force", action="store_true", help="overwrite an existing snapshot")

    p = sub.add_parser("run", help="run a pipeline mode over a QA dataset",
                       epilog=_epilog("run"), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--dataset", help="QA dataset JSONL")
    p.add_argument("--index", help="index snapshot file")
    p.add_argument("--mode", choices=list(MODES))
    p.add_argument("--max-rectify-steps", type=int, dest="max_rectify_steps")
    p.add_argument("--timings", action="store_true",
                   help="record per-step wall time in traces (breaks byte-reproducibility)")
    p.add_argument("--out", help="trace file to write")

    p = sub.add_parser("label", help="emit verifier training records",
                       epilog=_epilog("label"), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--dataset", help="QA dataset JSONL with gold answers")
    p.add_argument("--traces", help="reuse knowledge/answers from this trace file")
    p.add_argument("--index", help="index snapshot (for live retrieval when no traces)")
    p.add_argument("--rule", choices=["accuracy", "token_overlap"], dest="label_rule")
    p.add_argument("--out", required=True, help="training records JSONL to write")

    p = sub.add_parser("eval", help="score answers from a trace file",
                       epilog=_epilog("eval"), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--traces", help="trace file to evaluate")
    p.add_argument("--out", help="report directory (default: reports)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("verify-eval", help="score the verifier from a trace file",
                       epilog=_epilog("verify-eval"), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--traces", help="trace file to evaluate")
    p.add_argument("--rule", choices=["accuracy", "token_overlap"], dest="label_rule")
    p.add_argument("--out", help="report directory (default: reports)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    return parser


_OVERRIDES = (
    "seed",
    "parallelism",
    "corpus",
    "corpus_kind",
    "retrieval_kind",
    "dataset",
    "index",
    "traces",
    "mode",
    "max_rectify_steps",
    "label_rule",
)


def _config_from(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    for name in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    return config


def _require(value: str | None, what: str) -> str:
    if not value:
        raise CliError(f"missing required {what} (set it in the config or pass the flag)")
    return value


def _embedder(config: RunConfig) -> EmbeddingClient:
    url = _require(config.resolved_embed_url(), "embedding endpoint url (KALMV_EMBED_URL)")
    return EmbeddingClient(
        url, api_key=config.api_key(), retries=config.retries, timeout_s=config.timeout_s
    )


def _lm_backends(config: RunConfig, args) -> tuple[LMBackend, LMBackend | None]:
    """Generation and verifier backends; one mock serves both when --mock is given."""
    if args.mock:
        mock = MockLM.from_fixture_file(args.mock)
        return mock, mock
    lm_url = _require(config.resolved_lm_url(), "LM endpoint url (KALMV_LM_URL)")
    lm = HttpLM(
        lm_url,
        api_key=config.api_key(),
        retries=config.retries,
        timeout_s=config.timeout_s,
        parallelism=config.parallelism,
    )
    verifier_url = config.resolved_verifier_url()
    verifier = (
        HttpLM(
            verifier_url,
            api_key=config.api_key(),
            retries=config.retries,
            timeout_s=config.timeout_s,
            parallelism=config.parallelism,
        )
        if verifier_url
        else None
    )
    return lm, verifier


def cmd_index(args) -> int:
    config = _config_from(args)
    corpus_path = _require(config.corpus, "corpus path")
    out_path = Path(_require(getattr(args, "out", None) or config.index, "index output path"))
    if out_path.exists() and not args.force:
        raise CliError(f"refusing to overwrite existing snapshot {out_path} (use --force)")
    store = load_corpus(corpus_path, config.corpus_kind)
    if config.retrieval_kind == SPARSE_BM25:
        index = RetrievalIndex.build_sparse(store, k1=config.bm25_k1, b=config.bm25_b)
    else:
        index = RetrievalIndex.build_dense(store, _embedder(config))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    index.save(out_path)
    print(f"indexed {len(store)} items ({config.retrieval_kind}) -> {out_path}")
    return 0


def cmd_run(args) -> int:
    config = _config_from(args)
    examples = load_qa_dataset(_require(config.dataset, "dataset path"))
    lm, verifier_lm = _lm_backends(config, args)
    if config.mode == "kalmv" and verifier_lm is None:
        raise CliError("mode 'kalmv' needs a verifier endpoint (KALMV_VERIFIER_URL) or --mock")
    index = None
    if config.mode != MODE_NAIVE:
        index = RetrievalIndex.load(_require(config.index, "index snapshot path"))
        if index.kind == DENSE_COSINE:
            # dense snapshots need a query-time embedder; sparse ones do not
            index.embedder = _embedder(config)
    templates = load_templates(config.templates_dir) if config.templates_dir else None
    pipeline_config = config.pipeline_config()
    if args.timings:
        pipeline_config = dataclasses.replace(pipeline_config, record_timings=True)
    traces = run_dataset(
        examples,
        pipeline_config,
        index,
        lm,
        verifier_lm,
        templates,
        root_seed=config.seed,
        parallelism=config.parallelism,
    )
    offenders = validate_traces(traces)
    if offenders:
        raise CliError(f"internal error: invalid traces for {sorted(offenders)}")
    out_path = Path(_require(getattr(args, "out", None) or config.traces, "trace output path"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_traces(traces, out_path)
    counts = {d: 0 for d in ("answered", "withheld", "failed")}
    for trace in traces:
        counts[trace.disposition.value] += 1
    print(
        f"ran {len(traces)} questions: {counts['answered']} answered, "
        f"{counts['withheld']} withheld, {counts['failed']} failed -> {out_path}"
    )
    if traces and counts["failed"] == len(traces):
        return 1
    return 0


def cmd_label(args) -> int:
    config = _config_from(args)
    examples = load_qa_dataset(_require(config.dataset, "dataset path"))
    templates = load_templates(config.templates_dir) if config.templates_dir else None

    # (knowledge, answer, answer_source) per example, from traces or live generation
    gathered: dict[str, tuple[str, str, str]] = {}
    if config.traces:
        by_id = {t.example_id: t for t in read_traces(config.traces)}
        for example in examples:
            trace = by_id.get(example.example_id)
            if trace is None or not trace.steps or trace.steps[0].knowledge_text is None:
                continue
            first = trace.steps[0]
            if first.generated_answer:
                gathered[example.example_id] = (
                    first.knowledge_text, first.generated_answer, "generated"
                )
            else:
                gathered[example.example_id] = (
                    first.knowledge_text, example.gold_answers[0], "gold"
                )
    else:
        index = RetrievalIndex.load(_require(config.index, "index snapshot path"))
        if index.kind == DENSE_COSINE:
            index.embedder = _embedder(config)
        lm, _ = _lm_backends(config, args)
        for example in examples:
            item = bundled_retrieve(
                example.question, index, ExclusionSet(), config.bundle_top_n
            )
            if item is None:
                continue
            session = lm.session()
            params = config.first_params.with_seed(config.seed)
            result = generate(build_qa_prompt(example.question, item.text), params, session)
            if result.text:
                gathered[example.example_id] = (item.text, result.text, "generated")
            else:
                gathered[example.example_id] = (item.text, example.gold_answers[0], "gold")

    labeled = []
    answer_sources: dict[str, str] = {}
    records = []
    for example in examples:
        if example.example_id not in gathered:
            continue
        knowledge, answer, source = gathered[example.example_id]
        lab = label_example(example, knowledge, answer, config.label_rule)
        labeled.append(lab)
        answer_sources[example.example_id] = source
        records.extend(emit_training_records(lab, templates))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_training_records(records, out_path)
    stats = write_label_stats(labeled, answer_sources, str(out_path) + ".stats.json")
    print(
        f"labeled {stats['n_examples']} examples -> {stats['n_records']} records "
        f"(A={stats['class_counts']['A']} B={stats['class_counts']['B']} "
        f"C={stats['class_counts']['C']}) -> {out_path}"
    )
    return 0


def _report_out(args, config: RunConfig) -> Path:
    out = getattr(args, "out", None) or config.report_dir or "reports"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_eval(args) -> int:
    config = _config_from(args)
    traces = read_traces(_require(config.traces, "trace file"))
    report = answer_report(answer_metrics(traces))
    out_dir = _report_out(args, config)
    (out_dir / "answer_report.json").write_text(render_json(report), encoding="utf-8")
    (out_dir / "answer_report.csv").write_text(render_csv(report), encoding="utf-8")
    if not args.no_figures:
        render_answer_figures(report, out_dir)
    sys.stdout.write(render_table(report))
    return 0


def cmd_verify_eval(args) -> int:
    config = _config_from(args)
    traces = read_traces(_require(config.traces, "trace file"))
    labeler = lambda ex, k, a: auto_label(ex, k, a, config.label_rule)  # noqa: E731
    groups = [
        (budget, verifier_metrics(group, labeler))
        for budget, group in group_traces_by_budget(traces)
    ]
    report = verifier_report(groups)
    out_dir = _report_out(args, config)
    (out_dir / "verifier_report.json").write_text(render_json(report), encoding="utf-8")
    (out_dir / "verifier_report.csv").write_text(render_csv(report), encoding="utf-8")
    if not args.no_figures:
        render_verifier_figures(report, out_dir)
    sys.stdout.write(render_table(report))
    return 0


_HANDLERS = {
    "index": cmd_index,
    "run": cmd_run,
    "label": cmd_label,
    "eval": cmd_eval,
    "verify-eval": cmd_verify_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (
        CliError,
        ConfigError,
        CorpusFormatError,
        SnapshotError,
        TraceSchemaError,
        TransportError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
