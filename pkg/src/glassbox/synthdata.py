"""Synthetic byte corpus with tunable learnability and memorizability.

Every document follows a shared byte-successor rule: a fixed random
permutation table T over byte values is derived from a table seed
common to all sources (and therefore to held-out chunks). Positions
continue deterministically as T[prev], except that every
`coin_every`-th position is a fresh uniform random byte.

A model that learns the table predicts every rule position, so held-out
perplexity collapses; the random bytes of a specific document are
unpredictable unless that document was memorized, which makes the
continuation score a clean memorization probe. Greedy decoding derails
at the first unmemorized random byte, so a probe's baseline score is
set by where its window sits relative to the noise grid, giving stable
per-probe difficulty with essentially no luck component. Byte marginals
stay uniform (permutation table, uniform starts and noise), pinning an
untrained model's chance score at ~1/vocab.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _permutation_table(rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(256).astype(np.uint8)


def generate_documents(
    n_tokens: int,
    content_seed: int,
    table_seed: int,
    coin_every: int = 16,
    doc_len_range: tuple[int, int] = (64, 192),
) -> list[bytes]:
    """Generate documents totalling at least n_tokens bytes.

    Content varies with content_seed; the successor table depends only
    on table_seed, so different sources can share it.
    """
    rng = np.random.default_rng(content_seed)
    table_rng = np.random.default_rng(table_seed)
    t_table = _permutation_table(table_rng)

    lo, hi = doc_len_range
    avg = (lo + hi) / 2
    n_docs = int(np.ceil(n_tokens / avg)) + 8
    lengths = rng.integers(lo, hi + 1, size=n_docs)
    max_len = int(lengths.max())

    grid = np.zeros((n_docs, max_len), dtype=np.uint8)
    grid[:, 0] = rng.integers(0, 256, size=n_docs)
    noise = rng.integers(0, 256, size=(n_docs, max_len)).astype(np.uint8)
    for j in range(1, max_len):
        if j % coin_every == 0:
            grid[:, j] = noise[:, j]
        else:
            grid[:, j] = t_table[grid[:, j - 1]]

    docs = [grid[i, : lengths[i]].tobytes() for i in range(n_docs)]
    total = 0
    out = []
    for d in docs:
        out.append(d)
        total += len(d)
        if total >= n_tokens:
            break
    return out


def write_demo_sources(
    out_dir: Path,
    total_tokens: int,
    seed: int,
    coin_every: int = 16,
    split: tuple[float, ...] = (0.6, 0.4),
) -> list[dict]:
    """Write demo source files and return prepare-ready source specs.

    All sources share the same successor tables, so any chunk (including
    a held-out one) is predictable by the same learned rules.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ["alpha", "beta", "gamma", "delta"][: len(split)]
    specs = []
    for i, (name, frac) in enumerate(zip(names, split)):
        budget = int(total_tokens * frac)
        docs = generate_documents(
            # headroom: accidental blank lines inside documents re-split at
            # load time and shave a few bytes off the drawable total
            int(budget * 1.05) + 1024,
            content_seed=seed + 1 + i,
            table_seed=seed,
            coin_every=coin_every,
        )
        path = out_dir / f"{name}.txt"
        path.write_bytes(b"\n\n".join(docs))
        specs.append({"name": name, "path": str(path), "weight_tokens": budget})
    return specs
