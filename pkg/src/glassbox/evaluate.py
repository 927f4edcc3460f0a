"""Held-out perplexity for a checkpoint, with a data-leakage guard.

The held-out chunk is identified by content hash against the manifest,
and evaluation refuses to score a chunk the checkpoint already trained
on.
"""

from __future__ import annotations

import torch

from .checkpoint import Checkpoint
from .corpus import CorpusManifest, read_chunk, sha256_file
from .model import DecoderModel, cross_entropy_loss
from .tokenizer import PAD_ID


class DataLeakageError(Exception):
    """Held-out data overlaps the checkpoint's training chunks."""


class EvaluationError(Exception):
    pass


def model_from_checkpoint(ckpt: Checkpoint) -> DecoderModel:
    model = DecoderModel(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model


@torch.no_grad()
def perplexity_on_sequences(model: DecoderModel, sequences, batch_size: int = 64) -> float:
    """exp(mean NLL) over non-pad target positions."""
    data = torch.as_tensor(sequences.astype("int64"))
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(data), batch_size):
        batch = data[start : start + batch_size]
        inputs = batch[:, :-1]
        targets = batch[:, 1:]
        mask = targets != PAD_ID
        if not bool(mask.any()):
            continue
        logits = model(inputs)
        loss, n = cross_entropy_loss(logits, targets, mask)
        total_nll += float(loss) * n
        total_tokens += n
    if total_tokens == 0:
        raise EvaluationError("held-out chunk contains no scoreable tokens")
    return float(torch.exp(torch.tensor(total_nll / total_tokens)))


def eval_perplexity(
    ckpt: Checkpoint,
    chunk_path,
    manifest: CorpusManifest,
    batch_size: int = 64,
) -> float:
    """Perplexity of a checkpoint on one chunk file.

    The chunk is matched to the manifest by sha256; a chunk the
    checkpoint has trained on (or that belongs to a different manifest)
    is rejected.
    """
    if ckpt.manifest_checksum != manifest.checksum():
        raise EvaluationError("checkpoint was trained against a different manifest")
    digest = sha256_file(chunk_path)
    matches = [c for c in manifest.chunks if c.sha256 == digest]
    if not matches:
        raise EvaluationError(f"{chunk_path}: not a chunk of this manifest")
    index = matches[0].index
    if index in ckpt.trained_chunks:
        raise DataLeakageError(
            f"chunk {index} is part of the checkpoint's training data; "
            "held-out evaluation would leak"
        )
    model = model_from_checkpoint(ckpt)
    return perplexity_on_sequences(model, read_chunk(chunk_path), batch_size=batch_size)
