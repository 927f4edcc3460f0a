"""Corpus preparation: ingest sources, pack, permute, partition, verify.

The pipeline is: draw a fixed token budget from each source, pack each
source's documents into fixed-length windows (separator id between
documents, pad id in the final partial window), globally permute the
packed windows with a seeded shuffle, cut the permuted stream into
contiguous evenly-sized chunks, and emit a manifest with a checksum per
chunk file so the whole dataset is verifiable after the fact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prng import MASK64, global_permute
from .tokenizer import PAD_ID, SEP_ID, TOKENIZER_ID, tokenize

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1

CHUNK_MAGIC = b"LC01"
_CHUNK_HEADER = struct.Struct("<4sII")  # magic, n_sequences, max_seq_len


class CorpusError(Exception):
    pass


# ---------------------------------------------------------------------------
# chunk files
# ---------------------------------------------------------------------------


def chunk_file_name(index: int) -> str:
    return f"chunk_{index:05d}.bin"


def write_chunk(path: Path, sequences: np.ndarray) -> None:
    """Write a [n, max_seq_len] uint16 array as a chunk file (little-endian)."""
    if sequences.ndim != 2:
        raise ValueError("sequences must be a 2-D array")
    n, seq_len = sequences.shape
    body = np.ascontiguousarray(sequences, dtype="<u2")
    with open(path, "wb") as f:
        f.write(_CHUNK_HEADER.pack(CHUNK_MAGIC, n, seq_len))
        f.write(body.tobytes())


def read_chunk(path: Path) -> np.ndarray:
    """Read a chunk file back into a [n, max_seq_len] uint16 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _CHUNK_HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, n, seq_len = _CHUNK_HEADER.unpack_from(raw)
    if magic != CHUNK_MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    expected = _CHUNK_HEADER.size + 2 * n * seq_len
    if len(raw) != expected:
        raise CorpusError(f"{path}: length mismatch (got {len(raw)} bytes, want {expected})")
    body = np.frombuffer(raw, dtype="<u2", offset=_CHUNK_HEADER.size)
    return body.reshape(n, seq_len).astype(np.uint16)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifest types
# ---------------------------------------------------------------------------


@dataclass
class SourceSpec:
    """One raw text source and the absolute number of tokens to draw from it."""

    name: str
    path: str
    weight_tokens: int

    def validate(self) -> None:
        if self.weight_tokens <= 0:
            raise CorpusError(f"source {self.name!r}: weight_tokens must be > 0")


@dataclass
class ChunkRecord:
    index: int
    n_sequences: int
    n_tokens: int  # non-pad tokens (documents + separators)
    sha256: str


@dataclass
class StagePlan:
    """Ordered training stages, each owning a contiguous chunk range."""

    stages: list[dict]  # {stage_id, budgets: {source: tokens}, chunk_range: [start, end)}

    def chunk_order(self) -> list[int]:
        order: list[int] = []
        for st in self.stages:
            start, end = st["chunk_range"]
            order.extend(range(start, end))
        return order

    def to_dict(self) -> dict:
        return {"stages": self.stages}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(stages=[dict(s) for s in d["stages"]])


@dataclass
class CorpusManifest:
    """Provenance record binding sources, seed, and chunk contents."""

    seed: int
    n_chunks: int
    tokenizer_id: str
    max_seq_len: int
    sources: list[SourceSpec]
    chunks: list[ChunkRecord]
    total_tokens: int
    schema_version: int = MANIFEST_SCHEMA_VERSION
    stage_plan: StagePlan | None = None

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "n_chunks": self.n_chunks,
            "tokenizer_id": self.tokenizer_id,
            "max_seq_len": self.max_seq_len,
            "sources": [
                {"name": s.name, "path": s.path, "weight_tokens": s.weight_tokens}
                for s in self.sources
            ],
            "chunks": [
                {
                    "index": c.index,
                    "n_sequences": c.n_sequences,
                    "n_tokens": c.n_tokens,
                    "sha256": c.sha256,
                }
                for c in self.chunks
            ],
            "total_tokens": self.total_tokens,
        }
        if self.stage_plan is not None:
            d["stage_plan"] = self.stage_plan.to_dict()
        return d

    def checksum(self) -> str:
        """Hash of the canonical manifest JSON; joins checkpoints to their data."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise CorpusError(f"unsupported manifest schema_version {d.get('schema_version')!r}")
        return cls(
            seed=d["seed"],
            n_chunks=d["n_chunks"],
            tokenizer_id=d["tokenizer_id"],
            max_seq_len=d["max_seq_len"],
            sources=[SourceSpec(**s) for s in d["sources"]],
            chunks=[ChunkRecord(**c) for c in d["chunks"]],
            total_tokens=d["total_tokens"],
            schema_version=d["schema_version"],
            stage_plan=StagePlan.from_dict(d["stage_plan"]) if "stage_plan" in d else None,
        )

    @classmethod
    def load(cls, path: Path) -> "CorpusManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# ingestion and packing
# ---------------------------------------------------------------------------


def load_documents(path: Path) -> list[bytes]:
    """Split a raw text file into documents on blank lines."""
    raw = Path(path).read_bytes()
    return [doc for doc in raw.split(b"\n\n") if doc]


def draw_tokens(documents: list[bytes], budget: int, source_name: str) -> list[np.ndarray]:
    """Tokenize documents in order until exactly `budget` tokens are drawn.

    The final document is truncated to land on the budget exactly; running
    out of source tokens is an error (the budget is a provenance promise).
    """
    drawn: list[np.ndarray] = []
    remaining = budget
    for doc in documents:
        if remaining == 0:
            break
        toks = tokenize(doc)
        if len(toks) > remaining:
            toks = toks[:remaining]
        drawn.append(toks)
        remaining -= len(toks)
    if remaining > 0:
        raise CorpusError(
            f"source {source_name!r} has too few tokens: budget {budget}, "
            f"short by {remaining}"
        )
    return drawn


def pack_sequences(documents: list[np.ndarray], max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack token-id documents into fixed windows of max_seq_len.

    Documents are concatenated with SEP_ID between them and cut into
    non-overlapping windows; the final partial window is padded with
    PAD_ID. Returns (sequences [n, max_seq_len] uint16, real token count
    per sequence).
    """
    if max_seq_len < 2:
        raise CorpusError("max_seq_len must be >= 2")
    if not documents:
        return (
            np.zeros((0, max_seq_len), dtype=np.uint16),
            np.zeros(0, dtype=np.int64),
        )
    parts: list[np.ndarray] = []
    sep = np.array([SEP_ID], dtype=np.uint16)
    for i, doc in enumerate(documents):
        if i > 0:
            parts.append(sep)
        parts.append(np.asarray(doc, dtype=np.uint16))
    stream = np.concatenate(parts)
    n_real = len(stream)
    n_seq = (n_real + max_seq_len - 1) // max_seq_len
    padded = np.full(n_seq * max_seq_len, PAD_ID, dtype=np.uint16)
    padded[:n_real] = stream
    sequences = padded.reshape(n_seq, max_seq_len)
    real = np.full(n_seq, max_seq_len, dtype=np.int64)
    if n_real % max_seq_len:
        real[-1] = n_real % max_seq_len
    return sequences, real


def partition_sizes(n: int, n_chunks: int) -> list[int]:
    """Contiguous block sizes: ceil or floor of n/n_chunks, larger blocks first."""
    if n_chunks < 1:
        raise CorpusError("n_chunks must be >= 1")
    if n < n_chunks:
        raise CorpusError(f"cannot fill {n_chunks} chunks from {n} sequences")
    q, r = divmod(n, n_chunks)
    return [q + 1] * r + [q] * (n_chunks - r)


def partition_chunks(
    sequences: np.ndarray,
    real_tokens: np.ndarray,
    n_chunks: int,
    out_dir: Path,
    first_index: int = 0,
) -> list[ChunkRecord]:
    """Cut a (permuted) sequence array into contiguous chunks and write files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = partition_sizes(len(sequences), n_chunks)
    records: list[ChunkRecord] = []
    pos = 0
    for i, size in enumerate(sizes):
        index = first_index + i
        block = sequences[pos : pos + size]
        path = out_dir / chunk_file_name(index)
        write_chunk(path, block)
        records.append(
            ChunkRecord(
                index=index,
                n_sequences=size,
                n_tokens=int(real_tokens[pos : pos + size].sum()),
                sha256=sha256_file(path),
            )
        )
        pos += size
    return records


# ---------------------------------------------------------------------------
# stage planning
# ---------------------------------------------------------------------------


def build_stage_plan(
    stage_budgets: list[dict[str, int]],
    n_chunks: int,
    available: dict[str, int],
) -> StagePlan:
    """Allocate contiguous chunk ranges to stages, proportional to token budgets.

    Rounding: floor everywhere, remainder chunks to the earliest stages.
    Budgets that exceed a source's available tokens are rejected by name.
    """
    if not stage_budgets:
        raise CorpusError("at least one stage required")
    used: dict[str, int] = {}
    for budgets in stage_budgets:
        for name, amount in budgets.items():
            if name not in available:
                raise CorpusError(f"stage budget names unknown source {name!r}")
            used[name] = used.get(name, 0) + amount
    for name, amount in used.items():
        if amount > available[name]:
            raise CorpusError(
                f"source {name!r} over budget: stages request {amount}, "
                f"available {available[name]}"
            )
    totals = [sum(b.values()) for b in stage_budgets]
    grand = sum(totals)
    if grand <= 0:
        raise CorpusError("stage budgets must be positive")
    counts = [t * n_chunks // grand for t in totals]
    shortfall = n_chunks - sum(counts)
    for i in range(shortfall):
        counts[i % len(counts)] += 1
    if any(c == 0 for c in counts):
        raise CorpusError("a stage received zero chunks; reduce stage count or rebalance")
    stages = []
    start = 0
    for sid, (budgets, count) in enumerate(zip(stage_budgets, counts)):
        stages.append(
            {
                "stage_id": sid,
                "budgets": dict(budgets),
                "chunk_range": [start, start + count],
            }
        )
        start += count
    return StagePlan(stages=stages)


# ---------------------------------------------------------------------------
# end-to-end preparation
# ---------------------------------------------------------------------------


def prepare_corpus(
    sources: list[SourceSpec],
    seed: int,
    n_chunks: int,
    max_seq_len: int,
    out_dir: Path,
    stage_budgets: list[dict[str, int]] | None = None,
) -> CorpusManifest:
    """Run the full pipeline and write chunk files plus manifest.json.

    With multiple stages, each stage draws its own budgets, is permuted
    independently (stage s uses seed+s), and owns a contiguous chunk
    range; the single-stage default is the plain pipeline with the
    manifest seed.
    """
    out_dir = Path(out_dir)
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise CorpusError("source names must be unique")
    for s in sources:
        s.validate()
    available = {s.name: s.weight_tokens for s in sources}

    if stage_budgets is None:
        stage_budgets = [dict(available)]
    plan = build_stage_plan(stage_budgets, n_chunks, available)

    # Per source, the document cursor advances across stages so a later
    # stage draws the tokens after the earlier stage's draw.
    docs_by_source = {s.name: load_documents(s.path) for s in sources}
    cursors = {name: 0 for name in docs_by_source}

    chunk_records: list[ChunkRecord] = []
    chunk_dir = out_dir / "chunks"
    for st in plan.stages:
        stage_seqs: list[np.ndarray] = []
        stage_real: list[np.ndarray] = []
        for name in sorted(st["budgets"]):
            budget = st["budgets"][name]
            docs = docs_by_source[name][cursors[name] :]
            drawn = draw_tokens(docs, budget, name)
            cursors[name] += len(drawn)
            seqs, real = pack_sequences(drawn, max_seq_len)
            stage_seqs.append(seqs)
            stage_real.append(real)
        sequences = np.concatenate(stage_seqs) if stage_seqs else np.zeros((0, max_seq_len), np.uint16)
        real_tokens = np.concatenate(stage_real) if stage_real else np.zeros(0, np.int64)
        stage_seed = (seed + st["stage_id"]) & MASK64
        perm = global_permute(len(sequences), stage_seed)
        start, end = st["chunk_range"]
        chunk_records.extend(
            partition_chunks(
                sequences[perm],
                real_tokens[perm],
                end - start,
                chunk_dir,
                first_index=start,
            )
        )

    manifest = CorpusManifest(
        seed=seed,
        n_chunks=n_chunks,
        tokenizer_id=TOKENIZER_ID,
        max_seq_len=max_seq_len,
        sources=sources,
        chunks=chunk_records,
        total_tokens=int(sum(c.n_tokens for c in chunk_records)),
        stage_plan=plan if len(plan.stages) > 1 else None,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass
class ChunkCheck:
    index: int
    ok: bool
    reason: str = ""


@dataclass
class VerificationReport:
    checks: list[ChunkCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[ChunkCheck]:
        return [c for c in self.checks if not c.ok]


def verify_manifest(manifest: CorpusManifest, chunk_dir: Path) -> VerificationReport:
    """Recompute every chunk checksum and count against the manifest."""
    chunk_dir = Path(chunk_dir)
    report = VerificationReport()
    for rec in manifest.chunks:
        path = chunk_dir / chunk_file_name(rec.index)
        if not path.exists():
            report.checks.append(ChunkCheck(rec.index, False, "missing chunk file"))
            continue
        try:
            seqs = read_chunk(path)
        except CorpusError as e:
            report.checks.append(ChunkCheck(rec.index, False, str(e)))
            continue
        if seqs.shape != (rec.n_sequences, manifest.max_seq_len):
            report.checks.append(
                ChunkCheck(rec.index, False, f"shape mismatch {seqs.shape}")
            )
            continue
        digest = sha256_file(path)
        if digest != rec.sha256:
            report.checks.append(ChunkCheck(rec.index, False, "checksum mismatch"))
            continue
        n_tokens = int((seqs != PAD_ID).sum())
        if n_tokens != rec.n_tokens:
            report.checks.append(
                ChunkCheck(rec.index, False, f"token count mismatch ({n_tokens})")
            )
            continue
        report.checks.append(ChunkCheck(rec.index, True))
    total = sum(c.n_tokens for c in manifest.chunks)
    if total != manifest.total_tokens:
        report.checks.append(
            ChunkCheck(-1, False, f"total_tokens mismatch ({total} vs {manifest.total_tokens})")
        )
    return report
