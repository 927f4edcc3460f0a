import numpy as np
import pytest

from glassbox.tokenizer import PAD_ID, SEP_ID, VOCAB_SIZE, detokenize, tokenize


def test_reserved_ids():
    assert (SEP_ID, PAD_ID, VOCAB_SIZE) == (256, 257, 258)


def test_empty():
    assert tokenize(b"").tolist() == []
    assert detokenize([]) == b""


def test_identity_byte_map():
    assert tokenize(b"AB").tolist() == [65, 66]
    assert tokenize(bytes([0, 255])).tolist() == [0, 255]


def test_round_trip_random_byte_strings():
    rng = np.random.default_rng(5)
    for n in (1, 2, 17, 256, 4096):
        data = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        assert detokenize(tokenize(data)) == data


def test_reserved_ids_do_not_detokenize():
    with pytest.raises(ValueError):
        detokenize([65, SEP_ID])
    with pytest.raises(ValueError):
        detokenize([PAD_ID])
