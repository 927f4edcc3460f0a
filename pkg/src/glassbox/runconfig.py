"""Unified run configuration: parse, cross-validate, and materialize.

The config is one JSON document with a schema_version and four
sections (corpus, model, train, analysis). Validation collects every
violation with the offending key path instead of stopping at the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SourceSpec
from .model import ModelConfig, ModelError
from .tokenizer import VOCAB_SIZE

CONFIG_SCHEMA_VERSION = 1


class ConfigError(Exception):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        lines = "; ".join(f"{path}: {msg}" for path, msg in errors)
        super().__init__(f"invalid config: {lines}")


@dataclass
class AnalysisSettings:
    n_probes: int = 200
    k: int = 32
    l: int = 32
    probe_seed: int = 7
    checkpoints: str | list[int] = "auto10"


@dataclass
class RunConfig:
    output_root: Path
    sources: list[SourceSpec]
    corpus_seed: int
    n_chunks: int
    max_seq_len: int
    stages: list[dict] | None
    model: ModelConfig
    train: dict  # TrainPlan kwargs; total_steps may be "auto"
    analysis: AnalysisSettings
    raw: dict = field(repr=False, default_factory=dict)


def load_config(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def validate_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Cross-check the document; raises ConfigError listing every violation."""
    errors: list[tuple[str, str]] = []

    def need(section: dict, path: str, key: str, kind=None, default=None):
        if key not in section:
            if default is not None:
                return default
            errors.append((f"{path}.{key}", "missing"))
            return None
        val = section[key]
        if kind is not None and not isinstance(val, kind):
            errors.append((f"{path}.{key}", f"expected {kind.__name__}"))
            return None
        return val

    if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
        errors.append(("schema_version", f"must be {CONFIG_SCHEMA_VERSION}"))

    for section in ("corpus", "model", "train"):
        if section not in doc or not isinstance(doc[section], dict):
            errors.append((section, "missing section"))
    if errors:
        raise ConfigError(errors)

    corpus = doc["corpus"]
    sources = []
    for i, s in enumerate(corpus.get("sources", [])):
        name = s.get("name")
        path = s.get("path")
        weight = s.get("weight_tokens")
        if not name:
            errors.append((f"corpus.sources[{i}].name", "missing"))
            continue
        if not isinstance(weight, int) or weight <= 0:
            errors.append((f"corpus.sources[{i}].weight_tokens", "must be a positive integer"))
            continue
        p = Path(path) if path else None
        if base_dir is not None and p is not None and not p.is_absolute():
            p = Path(base_dir) / p
        if p is None or not p.exists():
            errors.append((f"corpus.sources[{i}].path", f"does not exist: {path}"))
            continue
        sources.append(SourceSpec(name=name, path=str(p), weight_tokens=weight))
    if not corpus.get("sources"):
        errors.append(("corpus.sources", "at least one source required"))
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        errors.append(("corpus.sources", "source names must be unique"))

    corpus_seed = need(corpus, "corpus", "seed", int)
    n_chunks = need(corpus, "corpus", "n_chunks", int)
    max_seq_len = need(corpus, "corpus", "max_seq_len", int)
    if isinstance(n_chunks, int) and n_chunks < 1:
        errors.append(("corpus.n_chunks", "must be >= 1"))
    if isinstance(max_seq_len, int) and max_seq_len < 2:
        errors.append(("corpus.max_seq_len", "must be >= 2"))

    stages = corpus.get("stages")
    if stages is not None:
        available = {s.name: s.weight_tokens for s in sources}
        used: dict[str, int] = {}
        for i, budgets in enumerate(stages):
            for name, amount in budgets.items():
                if name not in available:
                    errors.append((f"corpus.stages[{i}].{name}", "unknown source"))
                    continue
                used[name] = used.get(name, 0) + amount
        for name, amount in used.items():
            if name in available and amount > available[name]:
                errors.append(
                    (f"corpus.stages.{name}",
                     f"stage budgets total {amount}, source provides {available[name]}")
                )

    model_cfg = None
    try:
        model_cfg = ModelConfig.from_dict(doc["model"])
    except (ModelError, TypeError) as e:
        errors.append(("model", str(e)))
    if model_cfg is not None:
        if model_cfg.vocab_size != VOCAB_SIZE:
            errors.append(("model.vocab_size", f"byte tokenizer requires vocab_size={VOCAB_SIZE}"))
        if isinstance(max_seq_len, int) and model_cfg.max_seq_len < max_seq_len:
            errors.append(
                ("model.max_seq_len",
                 f"must be >= corpus.max_seq_len ({max_seq_len})")
            )

    train = dict(doc["train"])
    warmup = train.get("warmup_steps", 0)
    total = train.get("total_steps", "auto")
    batch = train.get("batch_size_sequences", 1)
    if not isinstance(batch, int) or batch < 1:
        errors.append(("train.batch_size_sequences", "must be a positive integer"))
        batch = 1
    if total != "auto" and (not isinstance(total, int) or total < 1):
        errors.append(("train.total_steps", "must be 'auto' or a positive integer"))
    if isinstance(total, int) and isinstance(warmup, int) and warmup >= total:
        errors.append(
            ("train.warmup_steps", f"must be < train.total_steps ({warmup} >= {total})")
        )
    if total == "auto" and isinstance(warmup, int) and isinstance(max_seq_len, int) and sources:
        # conservative lower bound on the eventual step count
        budget = sum(s.weight_tokens for s in sources)
        est_steps = (budget // max_seq_len) // batch
        if warmup >= est_steps:
            errors.append(
                ("train.warmup_steps",
                 f"must be < estimated total steps (~{est_steps} from corpus budget)")
            )
    heldout = train.get("heldout_chunks", [])
    if isinstance(n_chunks, int):
        for idx in heldout:
            if not (0 <= idx < n_chunks):
                errors.append(("train.heldout_chunks", f"chunk {idx} outside [0, {n_chunks})"))

    analysis = doc.get("analysis", {})
    a = AnalysisSettings(
        n_probes=analysis.get("n_probes", 200),
        k=analysis.get("k", 32),
        l=analysis.get("l", 32),
        probe_seed=analysis.get("probe_seed", 7),
        checkpoints=analysis.get("checkpoints", "auto10"),
    )
    if isinstance(max_seq_len, int) and a.k + a.l > max_seq_len:
        errors.append(("analysis.k", f"k+l ({a.k + a.l}) exceeds corpus.max_seq_len ({max_seq_len})"))

    output_root = doc.get("output_root")
    if not output_root:
        errors.append(("output_root", "missing"))

    if errors:
        raise ConfigError(errors)

    out = Path(output_root)
    if base_dir is not None and not out.is_absolute():
        out = Path(base_dir) / out
    return RunConfig(
        output_root=out,
        sources=sources,
        corpus_seed=corpus_seed,
        n_chunks=n_chunks,
        max_seq_len=max_seq_len,
        stages=stages,
        model=model_cfg,
        train=train,
        analysis=a,
        raw=doc,
    )
