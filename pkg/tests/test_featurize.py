"""Byte-to-token featurization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robomal.featurize import (
    PAD_TOKEN, SEQUENCE_LENGTH, VOCAB_SIZE, EmptyPayload, TokenSequence, featurize)


def test_direct_byte_map():
    seq = featurize(bytes([0x00, 0xFF, 0x41]))
    assert seq.true_length == 3
    assert list(seq.tokens[:3]) == [0, 255, 65]
    assert np.all(seq.tokens[3:] == PAD_TOKEN)


def test_truncation_at_cap():
    seq = featurize(bytes(range(256)) * 10)  # 2,560 bytes
    assert seq.true_length == SEQUENCE_LENGTH
    assert np.all(seq.tokens[:256] == np.arange(256))
    assert not np.any(seq.tokens == PAD_TOKEN)


def test_partial_padding():
    seq = featurize(b"\x07" * 1300)
    assert seq.true_length == 1300
    assert np.sum(seq.tokens == PAD_TOKEN) == 700


def test_empty_payload_rejected():
    with pytest.raises(EmptyPayload):
        featurize(b"")


def test_vocab_constant():
    assert VOCAB_SIZE == 257
    assert PAD_TOKEN == 256


def test_token_sequence_validation():
    with pytest.raises(ValueError):
        TokenSequence(tokens=np.zeros(10, dtype=np.int16), true_length=5)
    with pytest.raises(ValueError):
        TokenSequence(tokens=np.zeros(SEQUENCE_LENGTH, dtype=np.int16), true_length=0)


@given(st.binary(min_size=1, max_size=3000))
@settings(max_examples=200)
def test_output_shape_and_token_range(payload):
    seq = featurize(payload)
    assert seq.tokens.shape == (SEQUENCE_LENGTH,)
    assert seq.true_length == min(len(payload), SEQUENCE_LENGTH)
    assert seq.tokens.min() >= 0
    assert seq.tokens.max() <= PAD_TOKEN
    body = seq.tokens[: seq.true_length]
    assert np.all(body <= 255)
    assert np.all(seq.tokens[seq.true_length:] == PAD_TOKEN)


@given(st.binary(min_size=1, max_size=SEQUENCE_LENGTH),
       st.binary(min_size=1, max_size=SEQUENCE_LENGTH))
@settings(max_examples=200)
def test_injective_under_cap(a, b):
    if a != b:
        sa, sb = featurize(a), featurize(b)
        assert not np.array_equal(sa.tokens, sb.tokens)


@given(st.binary(min_size=1, max_size=SEQUENCE_LENGTH))
@settings(max_examples=100)
def test_roundtrip_under_cap(payload):
    seq = featurize(payload)
    recovered = bytes(seq.tokens[: seq.true_length].astype(np.uint8))
    assert recovered == payload
