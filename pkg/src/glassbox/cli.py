"""Single entry point wiring the pipeline.

Subcommands: demo-corpus, prepare-data, verify-data, train, eval,
memorize, export-metrics, validate-config, reproduce-desk. Exit codes
are distinct per stage so callers can tell where a pipeline stopped.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as analysis_mod
from . import corpus as corpus_mod
from . import evaluate as evaluate_mod
from . import synthdata
from .checkpoint import list_checkpoints, load_checkpoint
from .metrics import MetricsLedger
from .model import ModelConfig
from .runconfig import ConfigError, load_config, validate_config
from .trainer import TrainPlan, plan_total_steps, run_training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREPARE = 3
EXIT_VERIFY = 4
EXIT_TRAIN = 5
EXIT_EVAL = 6
EXIT_MEMORIZE = 7
EXIT_EXPORT = 8


class StageFailure(Exception):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(message)
        self.stage = stage
        self.code = code


def _fail(stage: str, code: int, message: str) -> StageFailure:
    return StageFailure(stage, code, message)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_demo_corpus(args) -> int:
    specs = synthdata.write_demo_sources(
        Path(args.out), total_tokens=args.tokens, seed=args.seed, coin_every=args.coin_every
    )
    doc = {"sources": specs}
    out = Path(args.out) / "sources.json"
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(specs)} demo sources and {out}")
    return EXIT_OK


def _read_sources_file(path: Path) -> tuple[list[corpus_mod.SourceSpec], list[dict] | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    base = Path(path).parent
    specs = []
    for s in doc["sources"]:
        p = Path(s["path"])
        if not p.is_absolute():
            p = base / p
        specs.append(
            corpus_mod.SourceSpec(name=s["name"], path=str(p), weight_tokens=s["weight_tokens"])
        )
    return specs, doc.get("stages")


def cmd_prepare_data(args) -> int:
    try:
        sources, stages = _read_sources_file(Path(args.sources))
        manifest = corpus_mod.prepare_corpus(
            sources=sources,
            seed=args.seed,
            n_chunks=args.chunks,
            max_seq_len=args.max_seq_len,
            out_dir=Path(args.out),
            stage_budgets=stages,
        )
    except (corpus_mod.CorpusError, OSError, KeyError) as e:
        raise _fail("prepare", EXIT_PREPARE, str(e))
    print(
        f"prepared {manifest.n_chunks} chunks, {manifest.total_tokens} tokens, "
        f"manifest checksum {manifest.checksum()[:12]}"
    )
    return EXIT_OK


def cmd_verify_data(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = corpus_mod.CorpusManifest.load(manifest_path)
    except (corpus_mod.CorpusError, OSError, json.JSONDecodeError) as e:
        raise _fail("verify", EXIT_VERIFY, str(e))
    chunk_dir = Path(args.chunk_dir) if args.chunk_dir else manifest_path.parent / "chunks"
    report = corpus_mod.verify_manifest(manifest, chunk_dir)
    for check in report.checks:
        status = "ok" if check.ok else f"FAIL ({check.reason})"
        print(f"chunk {check.index:5d}: {status}")
    if not report.passed:
        raise _fail("verify", EXIT_VERIFY, f"{len(report.failures())} chunk(s) failed verification")
    print(f"verified {len(report.checks)} chunks: all pass")
    return EXIT_OK


def _load_plan_file(path: Path) -> tuple[ModelConfig, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ModelConfig.from_dict(doc["model"]), dict(doc["train"])


def _build_plan(train_kwargs: dict, manifest: corpus_mod.CorpusManifest) -> TrainPlan:
    kwargs = dict(train_kwargs)
    total = kwargs.pop("total_steps", "auto")
    heldout = kwargs.get("heldout_chunks", [])
    stage_plan = kwargs.pop("stage_plan", None)
    plan = TrainPlan(total_steps=1, **kwargs)
    if stage_plan:
        plan.stage_plan = corpus_mod.StagePlan.from_dict(stage_plan)
    order = [c.index for c in manifest.chunks if c.index not in set(heldout)]
    if total == "auto":
        plan.total_steps = plan_total_steps(manifest, plan.batch_size_sequences, order)
    else:
        plan.total_steps = int(total)
    plan.validate()
    return plan


def cmd_train(args) -> int:
    try:
        manifest = corpus_mod.CorpusManifest.load(Path(args.manifest))
        config, train_kwargs = _load_plan_file(Path(args.plan))
        if args.deterministic is not None:
            train_kwargs["deterministic"] = args.deterministic
        if args.inject_nan_chunk:
            train_kwargs["inject_nan_chunks"] = list(args.inject_nan_chunk)
        plan = _build_plan(train_kwargs, manifest)
        chunk_dir = Path(args.chunk_dir) if args.chunk_dir else Path(args.manifest).parent / "chunks"
        summary = run_training(
            config=config,
            plan=plan,
            manifest=manifest,
            chunk_dir=chunk_dir,
            out_dir=Path(args.out),
            resume_from=Path(args.resume) if args.resume else None,
            manifest_path=Path(args.manifest),
        )
    except Exception as e:
        raise _fail("train", EXIT_TRAIN, str(e))
    print(
        f"trained to step {summary['final_step']} over {summary['boundaries']} boundaries; "
        f"{len(summary['nan_ledger']['entries'])} NaN event(s)"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        manifest = corpus_mod.CorpusManifest.load(Path(args.manifest))
        ckpt = load_checkpoint(Path(args.ckpt))
        ppl = evaluate_mod.eval_perplexity(ckpt, Path(args.heldout), manifest)
    except Exception as e:
        raise _fail("eval", EXIT_EVAL, str(e))
    print(f"checkpoint {ckpt.boundary_index}: heldout perplexity {ppl:.4f}")
    return EXIT_OK


def select_checkpoints(boundaries: list[int], spec) -> list[int]:
    """Resolve a checkpoint selection: "auto10", "all", or an explicit list.

    auto10 keeps the chance baseline (boundary 0 if present) plus up to
    10 evenly spaced trained boundaries.
    """
    if isinstance(spec, str) and spec != "all" and spec != "auto10":
        spec = [int(x) for x in spec.split(",") if x.strip()]
    if isinstance(spec, list):
        missing = [b for b in spec if b not in boundaries]
        if missing:
            raise analysis_mod.AnalysisError(f"checkpoints not found: {missing}")
        return sorted(spec)
    if spec == "all":
        return sorted(boundaries)
    trained = [b for b in sorted(boundaries) if b > 0]
    selected = {0} if 0 in boundaries else set()
    if trained:
        idx = np.unique(np.linspace(0, len(trained) - 1, min(10, len(trained))).round().astype(int))
        selected.update(trained[i] for i in idx)
    return sorted(selected)


def _run_memorize(
    run_dir: Path,
    n_probes: int,
    k: int,
    l: int,
    probe_seed: int,
    checkpoints_spec,
    out_dir: Path,
) -> dict:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run_meta.json").read_text(encoding="utf-8"))
    manifest_path = run_dir / meta["manifest_path"]
    chunk_dir = run_dir / meta["chunk_dir"]
    manifest = corpus_mod.CorpusManifest.load(manifest_path)
    checksum = manifest.checksum()
    if checksum != meta["manifest_checksum"]:
        raise analysis_mod.AnalysisError("manifest on disk no longer matches the training run")

    probes = analysis_mod.sample_probes(manifest, chunk_dir, n_probes, k, l, probe_seed)
    paths = list_checkpoints(run_dir / "checkpoints")
    by_boundary = {}
    for p in paths:
        by_boundary[int(p.stem.split("_")[1])] = p
    selected = select_checkpoints(sorted(by_boundary), checkpoints_spec)

    results = []
    for b in selected:
        ckpt = load_checkpoint(by_boundary[b])
        results.append(analysis_mod.evaluate_checkpoint(ckpt, probes, checksum))
        logger.info("evaluated checkpoint %d (%d probes)", b, len(results[-1].scores))
    files = analysis_mod.emit_report(results, out_dir)
    probes_json = {
        "k": k,
        "l": l,
        "n_per_chunk": n_probes,
        "seed": probe_seed,
        "probes": [
            {"chunk": p.chunk_index, "sequence": p.sequence_index, "crosses_document": p.crosses_document}
            for p in probes.probes
        ],
    }
    probe_path = Path(out_dir) / "probes.json"
    probe_path.write_text(json.dumps(probes_json, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files["probes"] = probe_path
    return files


def cmd_memorize(args) -> int:
    try:
        out_dir = Path(args.out) if args.out else Path(args.run) / "analysis"
        files = _run_memorize(
            Path(args.run), args.n_probes, args.k, args.l, args.probe_seed, args.checkpoints, out_dir
        )
    except Exception as e:
        raise _fail("memorize", EXIT_MEMORIZE, str(e))
    for name, path in files.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    try:
        ledger = MetricsLedger(Path(args.run) / "metrics.jsonl")
        n = ledger.export_csv(Path(args.csv))
        ledger.close()
    except Exception as e:
        raise _fail("export", EXIT_EXPORT, str(e))
    print(f"exported {n} records to {args.csv}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    try:
        doc = load_config(Path(args.config))
        validate_config(doc, base_dir=Path(args.config).parent)
    except ConfigError as e:
        for path, msg in e.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        raise _fail("config", EXIT_CONFIG, str(e))
    except (OSError, json.JSONDecodeError) as e:
        raise _fail("config", EXIT_CONFIG, str(e))
    print("config ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce-desk
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return corpus_mod.sha256_file(path)


def cmd_reproduce_desk(args) -> int:
    try:
        doc = load_config(Path(args.config))
        cfg = validate_config(doc, base_dir=Path(args.config).parent)
    except ConfigError as e:
        raise _fail("config", EXIT_CONFIG, str(e))
    out_root = Path(args.out) if args.out else cfg.output_root
    out_root.mkdir(parents=True, exist_ok=True)
    corpus_dir = out_root / "corpus"
    run_dir = out_root / "run"
    analysis_dir = out_root / "analysis"

    # stage 1: prepare
    try:
        manifest = corpus_mod.prepare_corpus(
            sources=cfg.sources,
            seed=cfg.corpus_seed,
            n_chunks=cfg.n_chunks,
            max_seq_len=cfg.max_seq_len,
            out_dir=corpus_dir,
            stage_budgets=cfg.stages,
        )
    except corpus_mod.CorpusError as e:
        raise _fail("prepare", EXIT_PREPARE, str(e))
    print(f"[prepare] {manifest.n_chunks} chunks, {manifest.total_tokens} tokens")

    # stage 2: verify
    report = corpus_mod.verify_manifest(manifest, corpus_dir / "chunks")
    if not report.passed:
        raise _fail("verify", EXIT_VERIFY, f"{len(report.failures())} chunk(s) failed")
    print(f"[verify] {len(report.checks)} chunks pass")

    # stage 3: train
    try:
        plan = _build_plan(cfg.train, manifest)
        summary = run_training(
            config=cfg.model,
            plan=plan,
            manifest=manifest,
            chunk_dir=corpus_dir / "chunks",
            out_dir=run_dir,
            manifest_path=corpus_dir / "manifest.json",
        )
    except Exception as e:
        raise _fail("train", EXIT_TRAIN, str(e))
    print(f"[train] {summary['boundaries']} boundaries, final step {summary['final_step']}")

    # stage 4: held-out perplexity per checkpoint
    ppl_rows = []
    heldout = cfg.train.get("heldout_chunks", [])
    if heldout:
        heldout_path = corpus_dir / "chunks" / corpus_mod.chunk_file_name(heldout[0])
        try:
            for path in list_checkpoints(run_dir / "checkpoints"):
                ckpt = load_checkpoint(path)
                ppl = evaluate_mod.eval_perplexity(ckpt, heldout_path, manifest)
                ppl_rows.append((ckpt.boundary_index, ppl))
        except Exception as e:
            raise _fail("eval", EXIT_EVAL, str(e))
        with open(run_dir / "perplexity.csv", "w", encoding="utf-8") as f:
            f.write("checkpoint,heldout_perplexity\n")
            for b, ppl in ppl_rows:
                f.write(f"{b},{ppl!r}\n")
        print(f"[eval] heldout perplexity: first {ppl_rows[0][1]:.2f} -> final {ppl_rows[-1][1]:.2f}")

    # stage 5: memorization analysis
    try:
        analysis_files = _run_memorize(
            run_dir,
            cfg.analysis.n_probes,
            cfg.analysis.k,
            cfg.analysis.l,
            cfg.analysis.probe_seed,
            cfg.analysis.checkpoints,
            analysis_dir,
        )
    except Exception as e:
        raise _fail("memorize", EXIT_MEMORIZE, str(e))
    print(f"[memorize] wrote {len(analysis_files)} analysis files")

    # stage 6: metrics export + provenance stamp
    try:
        ledger = MetricsLedger(run_dir / "metrics.jsonl")
        ledger.export_csv(run_dir / "metrics.csv")
        ledger.close()
        provenance = {
            "schema_version": 1,
            "config": doc,
            "manifest": {
                "path": "corpus/manifest.json",
                "checksum": manifest.checksum(),
                "sha256": _sha256(corpus_dir / "manifest.json"),
            },
            "chunks": [
                {"path": f"corpus/chunks/{corpus_mod.chunk_file_name(c.index)}", "sha256": c.sha256}
                for c in manifest.chunks
            ],
            "checkpoints": [
                {"path": f"run/checkpoints/{p.name}", "sha256": _sha256(p)}
                for p in list_checkpoints(run_dir / "checkpoints")
            ],
            "checkpoint_sidecars": [
                f"run/checkpoints/{p.name}.sha256" for p in list_checkpoints(run_dir / "checkpoints")
            ],
            "analysis": {
                name: {"path": str(Path(p).relative_to(out_root)), "sha256": _sha256(p)}
                for name, p in analysis_files.items()
            },
            "evaluation": (
                {"path": "run/perplexity.csv", "sha256": _sha256(run_dir / "perplexity.csv")}
                if ppl_rows
                else None
            ),
            "run_files": {
                "run_meta": {"path": "run/run_meta.json", "sha256": _sha256(run_dir / "run_meta.json")},
                "nan_ledger": {"path": "run/nan_ledger.json", "sha256": _sha256(run_dir / "nan_ledger.json")},
            },
            "volatile": ["run/metrics.jsonl", "run/metrics.csv"],
        }
        prov_path = out_root / "provenance.json"
        prov_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except StageFailure:
        raise
    except Exception as e:
        raise _fail("export", EXIT_EXPORT, str(e))
    print(f"[done] provenance stamp at {prov_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glassbox",
        description="Desk-scale reproducible LLM pretraining with provenance and memorization analysis",
    )
    parser.add_argument("--json-errors", action="store_true", help="report failures as JSON on stderr")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-corpus", help="generate a synthetic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--tokens", type=int, default=1_050_000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--coin-every", type=int, default=16,
                   help="period of unpredictable bytes in the generated documents")
    p.set_defaults(func=cmd_demo_corpus)

    p = sub.add_parser("prepare-data", help="tokenize, permute, and chunk the corpus")
    p.add_argument("--sources", required=True, help="JSON file listing sources")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chunks", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-seq-len", type=int, default=2048)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("verify-data", help="recompute chunk checksums against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--chunk-dir")
    p.set_defaults(func=cmd_verify_data)

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True, help="JSON file with model and train sections")
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("--inject-nan-chunk", type=int, action="append", help="test hook: force a NaN loss in this chunk")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--heldout", required=True, help="held-out chunk file")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("memorize", help="memorization analysis over checkpoints")
    p.add_argument("--run", required=True)
    p.add_argument("--n-probes", type=int, default=200)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--l", type=int, default=32)
    p.add_argument("--probe-seed", type=int, default=7)
    p.add_argument("--checkpoints", default="auto10", help='"auto10", "all", or comma list')
    p.add_argument("--out")
    p.set_defaults(func=cmd_memorize)

    p = sub.add_parser("export-metrics", help="export the metrics ledger as CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("validate-config", help="validate a run configuration document")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate_config)

    p = sub.add_parser("reproduce-desk", help="full pipeline: prepare, train, eval, memorize")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output root")
    p.set_defaults(func=cmd_reproduce_desk)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except StageFailure as e:
        if args.json_errors:
            print(
                json.dumps({"stage": e.stage, "code": e.code, "error": str(e)}),
                file=sys.stderr,
            )
        else:
            print(f"[{e.stage}] failed: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
