import numpy as np
import pytest

from engine.errors import TokenIndexError
from application.tokenizer import (BOS_ID, EOS_ID, IMG_ID, PAD_ID, VOCAB_SIZE, ByteTokenizer,
                                   detokenize, tokenize)


def test_special_ids():
    assert (PAD_ID, BOS_ID, EOS_ID, IMG_ID, VOCAB_SIZE) == (256, 257, 258, 259, 260)


def test_ascii():
    assert tokenize("yes") == [121, 101, 115]
    assert detokenize([121, 101, 115]) == "yes"


def test_multibyte_utf8():
    ids = tokenize("phổi")
    assert len(ids) > len("phổi")
    assert detokenize(ids) == "phổi"


def test_special_tokens_skipped():
    assert detokenize([BOS_ID, 110, 111, EOS_ID, PAD_ID]) == "no"


def test_special_tokens_rejected_when_strict():
    with pytest.raises(TokenIndexError):
        ByteTokenizer().detokenize([BOS_ID, 110], skip_special=False)


def test_out_of_vocab():
    with pytest.raises(TokenIndexError):
        detokenize([300])


def test_encode_answer_appends_eos():
    assert ByteTokenizer().encode_answer("no") == [110, 111, EOS_ID]


def test_random_bytes_round_trip(rng):
    tok = ByteTokenizer()
    for _ in range(1000):
        raw = bytes(rng.integers(0, 256, size=int(rng.integers(0, 40))).astype(np.uint8))
        assert tok.decode_bytes(tok.encode_bytes(raw)) == raw
