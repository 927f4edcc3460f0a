"""Byte-level tokenizer: token id = byte value, plus two reserved ids.

Vocab is 258: ids 0-255 are raw bytes, 256 separates documents in the
packed stream, 257 pads the final partial window. Round-trips losslessly
for ids < 256.
"""

from __future__ import annotations

import numpy as np

SEP_ID = 256
PAD_ID = 257
VOCAB_SIZE = 258

TOKENIZER_ID = "byte-v1"


def tokenize(data: bytes) -> np.ndarray:
    """Encode a byte string as uint16 token ids (identity byte map)."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.uint16)


def detokenize(ids) -> bytes:
    """Decode token ids back to bytes. Reserved ids (>= 256) are rejected."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        bad = arr[(arr < 0) | (arr > 255)][0]
        raise ValueError(f"token id {int(bad)} is not a byte; cannot detokenize")
    return arr.astype(np.uint8).tobytes()
