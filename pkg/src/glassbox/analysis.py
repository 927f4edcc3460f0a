"""Memorization analysis across checkpoints and data chunks.

A probe is the first k+l tokens of a training sequence; its score is
the fraction of the l continuation tokens the model reproduces when
greedily decoding from the k-token prompt. A probe with score 1 is
extractible. Results aggregate into per-checkpoint score histograms,
a checkpoint x chunk-group mean-score matrix with the latest-seen
group marked, and checkpoint-checkpoint correlation matrices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .corpus import CorpusManifest, chunk_file_name, read_chunk
from .evaluate import model_from_checkpoint
from .prng import MASK64, global_permute
from .tokenizer import PAD_ID, SEP_ID

logger = logging.getLogger(__name__)


class AnalysisError(Exception):
    pass


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def memorization_score(s_tokens, g_tokens, k: int, l: int) -> float:
    """Fraction of the l continuation positions where G matches S.

    s_tokens: the first k+l tokens of the training sequence.
    g_tokens: the l tokens generated from the k-token prompt.
    """
    s = np.asarray(s_tokens)
    g = np.asarray(g_tokens)
    if s.shape != (k + l,):
        raise AnalysisError(f"S must have length k+l={k + l}, got {s.shape}")
    if g.shape != (l,):
        raise AnalysisError(f"G must have length l={l}, got {g.shape}")
    return float((s[k:] == g).sum() / l)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class Probe:
    chunk_index: int
    sequence_index: int
    tokens: np.ndarray  # first k+l tokens
    crosses_document: bool  # separator inside the probe window

    @property
    def ref(self) -> tuple[int, int]:
        return (self.chunk_index, self.sequence_index)


@dataclass
class ProbeSet:
    k: int
    l: int
    n_per_chunk: int
    seed: int
    probes: list[Probe] = field(default_factory=list)

    def by_chunk(self) -> dict[int, list[Probe]]:
        out: dict[int, list[Probe]] = {}
        for p in self.probes:
            out.setdefault(p.chunk_index, []).append(p)
        return out


def sample_probes(
    manifest: CorpusManifest,
    chunk_dir: Path,
    n_per_chunk: int,
    k: int,
    l: int,
    seed: int,
) -> ProbeSet:
    """Draw up to n probes per chunk, seeded, without replacement.

    Sequences shorter than k+l real tokens (pad inside the window) are
    skipped; a chunk with fewer than n eligible sequences contributes
    them all, with a warning.
    """
    if k < 1 or l < 1:
        raise AnalysisError("k and l must be >= 1")
    if k + l > manifest.max_seq_len:
        raise AnalysisError("k+l exceeds the corpus max_seq_len")
    probe_set = ProbeSet(k=k, l=l, n_per_chunk=n_per_chunk, seed=seed)
    chunk_dir = Path(chunk_dir)
    for rec in manifest.chunks:
        seqs = read_chunk(chunk_dir / chunk_file_name(rec.index))
        window = seqs[:, : k + l]
        eligible = np.flatnonzero((window != PAD_ID).all(axis=1))
        if len(eligible) < n_per_chunk:
            logger.warning(
                "chunk %d: only %d eligible sequences (wanted %d); taking all",
                rec.index, len(eligible), n_per_chunk,
            )
            chosen = eligible
        else:
            perm = global_permute(len(eligible), (seed + rec.index) & MASK64)
            chosen = eligible[perm[:n_per_chunk]]
        for row in sorted(int(i) for i in chosen):
            tokens = window[row].astype(np.int64)
            probe_set.probes.append(
                Probe(
                    chunk_index=rec.index,
                    sequence_index=row,
                    tokens=tokens,
                    crosses_document=bool((tokens == SEP_ID).any()),
                )
            )
    return probe_set


# ---------------------------------------------------------------------------
# checkpoint evaluation
# ---------------------------------------------------------------------------


@dataclass
class MemorizationResult:
    boundary_index: int
    k: int
    l: int
    refs: list[tuple[int, int]]  # (chunk, sequence) per probe
    scores: np.ndarray
    extractible: np.ndarray  # score == 1.0
    seen_chunks: list[int]
    skipped_chunks: list[int]  # NaN-skipped chunks whose probes are flagged
    chance_baseline: bool = False  # untrained checkpoint, evaluated on all probes

    def per_chunk_mean(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for ref, score in zip(self.refs, self.scores):
            out.setdefault(ref[0], []).append(float(score))
        return {c: float(np.mean(v)) for c, v in sorted(out.items())}

    @property
    def extractible_fraction(self) -> float:
        return float(self.extractible.mean()) if len(self.extractible) else float("nan")


def evaluate_checkpoint(
    ckpt: Checkpoint,
    probes: ProbeSet,
    manifest_checksum: str,
    batch_size: int = 512,
) -> MemorizationResult:
    """Score every probe from a chunk the checkpoint has trained on.

    The untrained checkpoint (boundary 0) has seen nothing; it is scored
    on all probes as the chance-level baseline and flagged as such.
    """
    if ckpt.manifest_checksum != manifest_checksum:
        raise AnalysisError("checkpoint and probes come from different manifests")
    baseline = ckpt.boundary_index == 0
    seen = set(ckpt.trained_chunks)
    if baseline:
        selected = list(probes.probes)
    else:
        selected = [p for p in probes.probes if p.chunk_index in seen]

    model = model_from_checkpoint(ckpt)
    k, l = probes.k, probes.l
    scores = np.zeros(len(selected), dtype=np.float64)
    for start in range(0, len(selected), batch_size):
        batch = selected[start : start + batch_size]
        prompts = torch.from_numpy(np.stack([p.tokens[:k] for p in batch]))
        generated = generate_continuations(model, prompts, l)
        truth = np.stack([p.tokens[k:] for p in batch])
        scores[start : start + len(batch)] = (generated == truth).mean(axis=1)

    return MemorizationResult(
        boundary_index=ckpt.boundary_index,
        k=k,
        l=l,
        refs=[p.ref for p in selected],
        scores=scores,
        extractible=scores == 1.0,
        seen_chunks=sorted(seen),
        skipped_chunks=sorted(ckpt.skipped_chunks),
        chance_baseline=baseline,
    )


def generate_continuations(model, prompts: torch.Tensor, l: int) -> np.ndarray:
    """Greedy l-token continuations for a batch of prompts (lowest-id ties)."""
    from .model import generate_greedy

    with torch.no_grad():
        out = generate_greedy(model, prompts, l)
    return out.numpy()


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def chunk_group_matrix(results: list[MemorizationResult]) -> dict:
    """Mean score per (checkpoint, chunk group), groups cut at the
    evaluated checkpoint boundaries; marks the latest-seen group per row.

    Rows are the non-baseline results in boundary order; group j covers
    chunks [b_{j-1}, b_j) for the sorted boundary list.
    """
    rows = sorted((r for r in results if not r.chance_baseline), key=lambda r: r.boundary_index)
    if len(rows) < 1:
        raise AnalysisError("need at least one trained checkpoint result")
    boundaries = [r.boundary_index for r in rows]
    edges = [0] + boundaries
    groups = [(edges[i], edges[i + 1]) for i in range(len(edges) - 1) if edges[i] < edges[i + 1]]

    matrix = np.full((len(rows), len(groups)), np.nan)
    latest = np.full(len(rows), -1, dtype=np.int64)
    for i, res in enumerate(rows):
        per_chunk: dict[int, list[float]] = {}
        for ref, score in zip(res.refs, res.scores):
            per_chunk.setdefault(ref[0], []).append(float(score))
        for j, (lo, hi) in enumerate(groups):
            vals = [s for c, ss in per_chunk.items() if lo <= c < hi for s in ss]
            if vals:
                matrix[i, j] = float(np.mean(vals))
                latest[i] = j
    return {
        "boundaries": boundaries,
        "groups": groups,
        "matrix": matrix,
        "latest_seen": latest,
    }


@dataclass
class CorrelationResult:
    pearson: float | None
    phi: float | None  # binary agreement of extractible flags
    n_common: int


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return None
    am = a - a.mean()
    bm = b - b.mean()
    return float((am * bm).sum() / np.sqrt((am**2).sum() * (bm**2).sum()))


def checkpoint_correlation(res_a: MemorizationResult, res_b: MemorizationResult) -> CorrelationResult:
    """Pearson over common-probe scores; phi over extractible flags.

    A statistic is reported as absent (None) when undefined, e.g. a
    constant flag vector.
    """
    index_b = {ref: i for i, ref in enumerate(res_b.refs)}
    pairs = [(i, index_b[ref]) for i, ref in enumerate(res_a.refs) if ref in index_b]
    if not pairs:
        raise AnalysisError("checkpoints share no probes (empty chunk intersection)")
    ia = np.array([p[0] for p in pairs])
    ib = np.array([p[1] for p in pairs])
    a, b = res_a.scores[ia], res_b.scores[ib]
    fa, fb = res_a.extractible[ia], res_b.extractible[ib]
    return CorrelationResult(pearson=_pearson(a, b), phi=_pearson(fa.astype(float), fb.astype(float)), n_common=len(pairs))


def correlation_matrices(results: list[MemorizationResult]) -> dict:
    """Symmetric checkpoint x checkpoint matrices for both statistics."""
    rows = sorted((r for r in results if not r.chance_baseline), key=lambda r: r.boundary_index)
    n = len(rows)
    pearson = np.full((n, n), np.nan)
    phi = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            corr = checkpoint_correlation(rows[i], rows[j])
            if corr.pearson is not None:
                pearson[i, j] = pearson[j, i] = corr.pearson
            if corr.phi is not None:
                phi[i, j] = phi[j, i] = corr.phi
    return {"boundaries": [r.boundary_index for r in rows], "pearson": pearson, "phi": phi}


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_report(results: list[MemorizationResult], out_dir: Path) -> dict[str, Path]:
    """Write the three figure-ready CSV tables plus a JSON summary.

    Deterministic: the same results produce byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not results:
        raise AnalysisError("no results to report")
    l = results[0].l
    ordered = sorted(results, key=lambda r: r.boundary_index)

    # score histogram per checkpoint (bins are the l+1 exact score levels)
    hist_path = out_dir / "score_histograms.csv"
    with open(hist_path, "w", encoding="utf-8") as f:
        f.write("checkpoint,chance_baseline,score,count,pct_score_1\n")
        for res in ordered:
            counts = {}
            levels = np.round(res.scores * l).astype(int)
            for lev in levels:
                counts[lev] = counts.get(lev, 0) + 1
            pct1 = 100.0 * res.extractible_fraction if len(res.scores) else float("nan")
            for lev in range(l + 1):
                f.write(
                    f"{res.boundary_index},{int(res.chance_baseline)},"
                    f"{_fmt(lev / l)},{counts.get(lev, 0)},{_fmt(pct1)}\n"
                )

    # chunk-group mean scores with latest-seen markers
    groups_path = out_dir / "chunk_group_matrix.csv"
    gm = chunk_group_matrix(ordered)
    with open(groups_path, "w", encoding="utf-8") as f:
        f.write("checkpoint,group_start,group_end,mean_score,is_latest_seen\n")
        for i, b in enumerate(gm["boundaries"]):
            for j, (lo, hi) in enumerate(gm["groups"]):
                f.write(
                    f"{b},{lo},{hi},{_fmt(float(gm['matrix'][i, j]))},"
                    f"{int(gm['latest_seen'][i] == j)}\n"
                )

    # checkpoint-checkpoint correlations
    corr_path = out_dir / "checkpoint_correlation.csv"
    cm = correlation_matrices(ordered)
    with open(corr_path, "w", encoding="utf-8") as f:
        f.write("metric,checkpoint_a,checkpoint_b,value\n")
        for name, tag in (("pearson", "pearson_score"), ("phi", "binary_agreement")):
            mat = cm[name]
            for i, a in enumerate(cm["boundaries"]):
                for j, b in enumerate(cm["boundaries"]):
                    f.write(f"{tag},{a},{b},{_fmt(float(mat[i, j]))}\n")

    summary_path = out_dir / "summary.json"
    summary = {
        "k": results[0].k,
        "l": l,
        "checkpoints": [
            {
                "boundary_index": r.boundary_index,
                "chance_baseline": r.chance_baseline,
                "n_probes": len(r.scores),
                "mean_score": float(r.scores.mean()) if len(r.scores) else None,
                "extractible_fraction": (
                    float(r.extractible_fraction) if len(r.scores) else None
                ),
                "skipped_chunks": r.skipped_chunks,
            }
            for r in ordered
        ],
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return {
        "score_histograms": hist_path,
        "chunk_group_matrix": groups_path,
        "checkpoint_correlation": corr_path,
        "summary": summary_path,
    }
