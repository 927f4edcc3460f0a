import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from glassbox import corpus, model, synthdata


@pytest.fixture
def toy_config():
    return model.ModelConfig(
        hidden_size=128, n_layers=2, n_heads=4, intermediate_size=344, max_seq_len=128
    )


@pytest.fixture
def mini_config():
    # smallest config that still exercises every code path
    return model.ModelConfig(
        hidden_size=32, n_layers=2, n_heads=2, intermediate_size=86, max_seq_len=64
    )


def build_tiny_corpus(root, n_chunks=5, total_tokens=40_000, seed=11, max_seq_len=128, **gen_kwargs):
    """Demo corpus + manifest under root; returns (manifest, chunk_dir)."""
    specs = synthdata.write_demo_sources(
        root / "src", total_tokens=total_tokens, seed=seed, **gen_kwargs
    )
    sources = [corpus.SourceSpec(**s) for s in specs]
    manifest = corpus.prepare_corpus(
        sources, seed=seed + 77, n_chunks=n_chunks, max_seq_len=max_seq_len, out_dir=root
    )
    return manifest, root / "chunks"


@pytest.fixture
def tiny_corpus(tmp_path):
    return build_tiny_corpus(tmp_path)


def rand_tokens(shape, seed=0, vocab=258):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, vocab, size=shape).astype(np.int64))
