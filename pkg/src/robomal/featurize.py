"""Controller bytes to fixed-length categorical token sequences.

Each byte value is one categorical token (0..255). Sequences are capped at
2,000 positions and padded with a dedicated 257th token; padding is a
distinct symbol rather than byte 0x00 because null bytes occur legitimately
in binaries. Recurrent models never read past ``true_length``; the CNN and
ANN consume the full padded array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEQUENCE_LENGTH = 2000
VOCAB_BYTES = 256
PAD_TOKEN = 256
VOCAB_SIZE = VOCAB_BYTES + 1  # 256 byte values plus PAD


class EmptyPayload(ValueError):
    """A zero-length controller section cannot be classified."""


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # int16[SEQUENCE_LENGTH], values in {0..256}
    true_length: int

    def __post_init__(self):
        if self.tokens.shape != (SEQUENCE_LENGTH,):
            raise ValueError(f"token array must have length {SEQUENCE_LENGTH}")
        if not 1 <= self.true_length <= SEQUENCE_LENGTH:
            raise ValueError(f"true_length {self.true_length} outside [1, {SEQUENCE_LENGTH}]")


def featurize(payload: bytes) -> TokenSequence:
    """Map payload bytes to tokens, truncating at the cap and padding beyond."""
    if len(payload) == 0:
        raise EmptyPayload("empty controller payload")
    n = min(len(payload), SEQUENCE_LENGTH)
    tokens = np.full(SEQUENCE_LENGTH, PAD_TOKEN, dtype=np.int16)
    tokens[:n] = np.frombuffer(payload, dtype=np.uint8, count=n)
    return TokenSequence(tokens=tokens, true_length=n)
