"""Command-line entry point: `cgrs <subcommand>`.

Subcommands cover the full two-stage pipeline (ingest, retrieve,
caption, rerank), the evaluation tools (eval, compare, sweep), the loss
check suite (losscheck), and the synthetic benchmark generator (synth).
Every run is deterministic given its inputs (http providers excepted),
and the effective configuration is echoed into a .meta.json sidecar next
to each output.

Exit codes: 0 success, 1 IO/config, 2 validation, 3 provider failure,
4 check-suite failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import io
from .captions import (
    CaptionCache,
    PromptTemplate,
    caption_candidates,
    make_caption_provider,
)
from .config import EmbedderConfig, PipelineConfig, load_config, override
from .datasets import SynthSpec, generate_synthetic
from .embedders import (
    FileSentenceEmbedder,
    HashingSentenceEmbedder,
    HttpSentenceEmbedder,
    SentenceEmbedder,
)
from .exceptions import ConfigError, ProviderError, ValidationError
from .losses import run_loss_checks
from .metrics import (
    alpha_sweep,
    compare_runs,
    measure_rerank_latency,
    rankings_from_results,
    recall_at_k,
)
from .reranker import rerank_batch
from .retriever import retrieve_batch
from .store import GalleryStore, build_store
from .types import CoarseResult
from .validation import validate_gallery

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_PROVIDER = 3
EXIT_CHECKS = 4


def _load_base_config(args) -> PipelineConfig:
    return load_config(args.config) if getattr(args, "config", None) else PipelineConfig()


def _paths_with_flags(cfg: PipelineConfig, args, **mapping) -> PipelineConfig:
    updates = {}
    for field_name, flag_name in mapping.items():
        value = getattr(args, flag_name, None)
        if value is not None:
            updates[field_name] = value
    if updates:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **updates))
    return cfg


def _require_path(value, what: str) -> Path:
    if not value:
        raise ConfigError(f"no {what} configured; pass the flag or set it in the config file")
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_store(cfg: PipelineConfig) -> GalleryStore:
    manifest = _require_path(cfg.paths.gallery_manifest, "gallery manifest")
    embeddings = _require_path(cfg.paths.gallery_embeddings, "gallery embeddings")
    records = io.read_gallery_manifest(manifest)
    _, _, matrix = io.read_embedding_file(embeddings)
    return build_store(records, matrix)


def _load_queries(cfg: PipelineConfig):
    manifest = _require_path(cfg.paths.query_manifest, "query manifest")
    embeddings = _require_path(cfg.paths.query_embeddings, "query embeddings")
    records = io.read_query_manifest(manifest)
    _, count, matrix = io.read_embedding_file(embeddings)
    for rec in records:
        if not 0 <= rec.row_index < count:
            raise ValidationError(
                f"query {rec.query_id!r}: row_index {rec.row_index} out of range [0, {count})"
            )
    return records, matrix


def _coarse_from_file(path) -> list[CoarseResult]:
    return [
        CoarseResult(query_id=qid, candidates=tuple(cands))
        for qid, cands in io.read_result_file(path)
    ]


def _make_embedder(cfg: EmbedderConfig) -> SentenceEmbedder:
    if cfg.embedder_id == "mock-hash":
        return HashingSentenceEmbedder(dim=cfg.dim)
    if cfg.embedder_id == "file":
        return FileSentenceEmbedder(cfg.manifest, cfg.embeddings)
    return HttpSentenceEmbedder(cfg.endpoint, dim=cfg.dim)


def _write_meta(out_path, command: str, cfg: PipelineConfig, **extra) -> None:
    meta = {"command": command, "config": cfg.to_dict(), **extra}
    Path(str(out_path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _out_path(cfg: PipelineConfig, flag_value, default_name: str) -> Path:
    if flag_value:
        out = Path(flag_value)
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / default_name


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated float list, got {text!r}") from exc


def cmd_ingest(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args),
        args,
        gallery_manifest="gallery_manifest",
        gallery_embeddings="gallery_embeddings",
        output_dir="output_dir",
    )
    manifest = _require_path(cfg.paths.gallery_manifest, "gallery manifest")
    embeddings = _require_path(cfg.paths.gallery_embeddings, "gallery embeddings")
    records = io.read_gallery_manifest(manifest)
    dim, count, matrix = io.read_embedding_file(embeddings)
    report = validate_gallery(records, matrix_rows=count, matrix_dim=dim)
    if not report.ok:
        for violation in report.violations:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_VALIDATION
    out = _out_path(cfg, None, "store.json")
    out.write_text(
        json.dumps(
            {
                "count": count,
                "dim": dim,
                "gallery_manifest": str(manifest),
                "gallery_embeddings": str(embeddings),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    _write_meta(out, "ingest", cfg)
    print(f"{count} images, dim {dim}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args),
        args,
        gallery_manifest="gallery_manifest",
        gallery_embeddings="gallery_embeddings",
        query_manifest="query_manifest",
        query_embeddings="query_embeddings",
        output_dir="output_dir",
    )
    cfg = override(cfg, n_shards=args.n_shards)
    k = args.k if args.k is not None else cfg.fusion.k_coarse
    store = _load_store(cfg)
    queries, query_matrix = _load_queries(cfg)
    results = retrieve_batch(
        store,
        query_matrix[[q.row_index for q in queries]],
        k=k,
        n_shards=cfg.n_shards,
        query_ids=[q.query_id for q in queries],
    )
    out = _out_path(cfg, args.out, "coarse_results.jsonl")
    io.write_result_file(out, results)
    _write_meta(out, "retrieve", cfg, k=k)
    print(f"retrieved top-{k} for {len(results)} queries -> {out}")
    return EXIT_OK


def cmd_caption(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args),
        args,
        gallery_manifest="gallery_manifest",
        gallery_embeddings="gallery_embeddings",
        cache="cache",
        output_dir="output_dir",
    )
    provider_updates = {
        key: getattr(args, key)
        for key in (
            "provider_id",
            "endpoint",
            "model_id",
            "token_limit",
            "max_concurrency",
            "max_retries",
            "backoff_base_ms",
        )
        if getattr(args, key, None) is not None
    }
    if provider_updates:
        cfg = dataclasses.replace(
            cfg, provider=dataclasses.replace(cfg.provider, **provider_updates)
        )
    results_path = _require_path(args.results, "coarse results file")
    store = _load_store(cfg)
    results = _coarse_from_file(results_path)
    template = PromptTemplate()
    if args.prompt_file:
        template = PromptTemplate(text=Path(args.prompt_file).read_text(encoding="utf-8"))
    provider = make_caption_provider(cfg.provider, mapping_path=args.provider_file)
    cache = CaptionCache(cfg.paths.cache) if cfg.paths.cache else None
    run = caption_candidates(provider, cache, results, store, template)
    out = _out_path(cfg, args.out or cfg.paths.captions, "captions.jsonl")
    io.write_caption_file(out, run.captions.values())
    _write_meta(
        out,
        "caption",
        cfg,
        prompt_hash=template.hash,
        fetched=run.fetched,
        cached=run.cached,
        failed=len(run.failures),
    )
    print(f"captions: fetched: {run.fetched}, cached: {run.cached}, failed: {len(run.failures)}")
    if run.failures:
        for image_id, message in sorted(run.failures.items()):
            print(f"failed {image_id}: {message}", file=sys.stderr)
        return EXIT_PROVIDER
    return EXIT_OK


def cmd_rerank(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args),
        args,
        query_manifest="query_manifest",
        captions="captions",
        output_dir="output_dir",
    )
    embedder_updates = {
        key: getattr(args, f"embedder_{key}")
        for key in ("dim", "endpoint", "manifest", "embeddings")
        if getattr(args, f"embedder_{key}", None) is not None
    }
    if args.embedder is not None:
        embedder_updates["embedder_id"] = args.embedder
    if embedder_updates:
        cfg = dataclasses.replace(
            cfg, embedder=dataclasses.replace(cfg.embedder, **embedder_updates)
        )
    if args.alpha is not None:
        cfg = dataclasses.replace(
            cfg, fusion=dataclasses.replace(cfg.fusion, alpha=args.alpha)
        )

    results = _coarse_from_file(_require_path(args.results, "coarse results file"))
    captions_path = _require_path(cfg.paths.captions, "caption file")
    captions = {c.image_id: c for c in io.read_caption_file(captions_path)}
    query_records = io.read_query_manifest(_require_path(cfg.paths.query_manifest, "query manifest"))
    query_texts = {q.query_id: q.text for q in query_records}
    embedder = _make_embedder(cfg.embedder)

    fused = rerank_batch(
        results,
        query_texts,
        captions,
        embedder,
        alpha=cfg.fusion.alpha,
        missing_caption_policy=args.missing_caption_policy,
    )
    out = _out_path(cfg, args.out, "reranked_results.jsonl")
    io.write_result_file(out, fused)
    if args.breakdown:
        breakdown = Path(args.breakdown)
        breakdown.parent.mkdir(parents=True, exist_ok=True)
        io.write_score_breakdown(breakdown, fused)
    _write_meta(
        out,
        "rerank",
        cfg,
        alpha=cfg.fusion.alpha,
        embedder_id=cfg.embedder.embedder_id,
        prompt_hash=sorted({c.prompt_hash for c in captions.values()}),
        missing_caption_policy=args.missing_caption_policy,
    )
    print(f"reranked {len(fused)} queries at alpha={cfg.fusion.alpha} -> {out}")
    return EXIT_OK


def _report_ks(cfg: PipelineConfig, args) -> list[int]:
    return _parse_int_list(args.ks) if args.ks else list(cfg.fusion.k_report)


def cmd_eval(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args), args, qrels="qrels", output_dir="output_dir"
    )
    ks = _report_ks(cfg, args)
    rankings = rankings_from_results(io.read_result_file(_require_path(args.results, "results file")))
    qrels = io.read_qrels(_require_path(cfg.paths.qrels, "qrels file"))
    report = recall_at_k(rankings, qrels, ks)
    if args.latency_trials:
        report.latency = measure_rerank_latency(
            n_candidates=cfg.fusion.k_coarse,
            n_trials=args.latency_trials,
            embed_dim=cfg.embedder.dim,
            seed=cfg.seed,
        )
    out = _out_path(cfg, args.out, "eval_report.json")
    out.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    _write_meta(out, "eval", cfg, ks=ks)
    print(report.format_table(label=Path(args.results).stem))
    if report.latency:
        print(
            f"rerank latency: mean {report.latency.mean_ms:.3f} ms, "
            f"p99 {report.latency.p99_ms:.3f} ms over {report.latency.n_trials} trials"
        )
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args), args, qrels="qrels", output_dir="output_dir"
    )
    ks = _report_ks(cfg, args)
    coarse = rankings_from_results(io.read_result_file(_require_path(args.coarse, "coarse results")))
    reranked = rankings_from_results(
        io.read_result_file(_require_path(args.reranked, "reranked results"))
    )
    qrels = io.read_qrels(_require_path(cfg.paths.qrels, "qrels file"))
    report = compare_runs(coarse, reranked, qrels, ks)
    out = _out_path(cfg, args.out, "compare_report.json")
    out.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    _write_meta(out, "compare", cfg, ks=ks)
    print(report.format_table())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _paths_with_flags(
        _load_base_config(args),
        args,
        gallery_manifest="gallery_manifest",
        gallery_embeddings="gallery_embeddings",
        query_manifest="query_manifest",
        query_embeddings="query_embeddings",
        captions="captions",
        qrels="qrels",
        output_dir="output_dir",
    )
    alphas = _parse_float_list(args.alphas) if args.alphas else [0.0, 0.1, 0.3, 0.5, 0.7, 1.0]
    ks = _report_ks(cfg, args)
    k = args.k if args.k is not None else cfg.fusion.k_coarse

    store = _load_store(cfg)
    queries, query_matrix = _load_queries(cfg)
    captions = {
        c.image_id: c
        for c in io.read_caption_file(_require_path(cfg.paths.captions, "caption file"))
    }
    qrels = io.read_qrels(_require_path(cfg.paths.qrels, "qrels file"))
    coarse = retrieve_batch(
        store,
        query_matrix[[q.row_index for q in queries]],
        k=k,
        n_shards=cfg.n_shards,
        query_ids=[q.query_id for q in queries],
    )
    table = alpha_sweep(
        coarse,
        {q.query_id: q.text for q in queries},
        captions,
        qrels,
        alphas,
        ks,
        embedder=_make_embedder(cfg.embedder),
    )
    out = _out_path(cfg, args.out, "alpha_sweep.json")
    out.write_text(
        json.dumps(
            {f"{alpha:g}": report.to_json_dict() for alpha, report in table.items()},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _write_meta(out, "sweep", cfg, alphas=alphas, ks=ks, k_coarse=k)
    header = " | ".join([f"{'alpha':<8}"] + [f"Recall@{kk:<3}" for kk in ks])
    print(header)
    print("-" * len(header))
    for alpha in alphas:
        rep = table[float(alpha)]
        print(" | ".join([f"{alpha:<8g}"] + [f"{rep.recall_at[kk]:8.2f} " for kk in ks]))
    return EXIT_OK


def cmd_losscheck(args) -> int:
    cfg = _load_base_config(args)
    report = run_loss_checks(seed=args.seed if args.seed is not None else cfg.seed)
    out = _out_path(cfg, args.out, "losscheck.json")
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for check in report["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        print(f"{status} {check['name']}: max relative error {check['max_rel_err']:.3e}")
    if not report["passed"]:
        print("loss checks FAILED", file=sys.stderr)
        return EXIT_CHECKS
    print("all checks passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_base_config(args)
    spec = SynthSpec(
        n_gallery=args.n_gallery,
        n_queries=args.n_queries,
        dim=args.dim,
        coarse_noise_sigma=args.sigma,
        caption_fidelity=args.fidelity,
        seed=args.seed if args.seed is not None else cfg.seed,
    )
    out_dir = Path(args.out_dir)
    generate_synthetic(spec, out_dir=out_dir)
    meta = {"command": "synth", "spec": dataclasses.asdict(spec)}
    (out_dir / "synth.meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"synthetic benchmark: {spec.n_gallery} gallery images, "
        f"{spec.n_queries} queries, dim {spec.dim} -> {out_dir}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgrs",
        description="Two-stage caption-guided image retrieval pipeline",
        epilog=(
            "Environment: CGRS_CAPTION_TOKEN / CGRS_EMBED_TOKEN are sent as "
            "bearer tokens by the http caption/embedding providers."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file; flags override its values")
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate a gallery manifest + embedding file")
    p.add_argument("--gallery-manifest")
    p.add_argument("--gallery-embeddings")
    p.add_argument("--output-dir")

    p = add("retrieve", cmd_retrieve, "exact cosine top-k retrieval")
    p.add_argument("--gallery-manifest")
    p.add_argument("--gallery-embeddings")
    p.add_argument("--query-manifest")
    p.add_argument("--query-embeddings")
    p.add_argument("--k", type=int)
    p.add_argument("--n-shards", type=int)
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("caption", cmd_caption, "caption coarse candidates through a provider")
    p.add_argument("--results", required=True, help="coarse result file")
    p.add_argument("--gallery-manifest")
    p.add_argument("--gallery-embeddings")
    p.add_argument("--provider", dest="provider_id", choices=["mock", "file", "http"])
    p.add_argument("--provider-file", help="JSONL image_id->text mapping (file provider)")
    p.add_argument("--endpoint")
    p.add_argument("--model-id", dest="model_id")
    p.add_argument("--token-limit", dest="token_limit", type=int)
    p.add_argument("--max-concurrency", dest="max_concurrency", type=int)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--backoff-base-ms", dest="backoff_base_ms", type=int)
    p.add_argument("--prompt-file", help="override the built-in prompt template")
    p.add_argument("--cache")
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("rerank", cmd_rerank, "fuse caption similarity into the coarse ranking")
    p.add_argument("--results", required=True, help="coarse result file")
    p.add_argument("--captions")
    p.add_argument("--query-manifest")
    p.add_argument("--alpha", type=float)
    p.add_argument("--embedder", choices=["mock-hash", "file", "http"])
    p.add_argument("--embedder-dim", dest="embedder_dim", type=int)
    p.add_argument("--embedder-endpoint", dest="embedder_endpoint")
    p.add_argument("--embedder-manifest", dest="embedder_manifest")
    p.add_argument("--embedder-embeddings", dest="embedder_embeddings")
    p.add_argument(
        "--missing-caption-policy",
        choices=["error", "penalize"],
        default="error",
    )
    p.add_argument("--breakdown", help="also write a per-candidate score breakdown")
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("eval", cmd_eval, "Recall@K over a result file")
    p.add_argument("--results", required=True)
    p.add_argument("--qrels")
    p.add_argument("--ks", help="comma-separated depths, default from config")
    p.add_argument("--latency-trials", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("compare", cmd_compare, "delta report between two runs")
    p.add_argument("--coarse", required=True)
    p.add_argument("--reranked", required=True)
    p.add_argument("--qrels")
    p.add_argument("--ks")
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("sweep", cmd_sweep, "rerank metrics across fusion weights")
    p.add_argument("--gallery-manifest")
    p.add_argument("--gallery-embeddings")
    p.add_argument("--query-manifest")
    p.add_argument("--query-embeddings")
    p.add_argument("--captions")
    p.add_argument("--qrels")
    p.add_argument("--alphas", help="comma-separated fusion weights")
    p.add_argument("--k", type=int)
    p.add_argument("--ks")
    p.add_argument("--out")
    p.add_argument("--output-dir")

    p = add("losscheck", cmd_losscheck, "gradient and property suite for the losses")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("synth", cmd_synth, "generate a synthetic benchmark with planted truth")
    p.add_argument("--n-gallery", type=int, default=2000)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=1.25)
    p.add_argument("--fidelity", type=float, default=0.9)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
