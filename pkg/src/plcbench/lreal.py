"""LREAL (IEEE-754 binary64) bit helpers.

Values travel as raw 64-bit patterns so NaN payloads and signed zeros are
never normalised by float arithmetic. The word view is big-endian with the
most-significant 16-bit word first.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable

WORDS_PER_LREAL = 4


def float_to_bits(value: float) -> int:
    return struct.unpack(">Q", struct.pack(">d", value))[0]


def bits_to_float(bits: int) -> float:
    return struct.unpack(">d", struct.pack(">Q", bits))[0]


def bits_to_words(bits: int) -> list[int]:
    return [(bits >> shift) & 0xFFFF for shift in (48, 32, 16, 0)]


def words_to_bits(words: Iterable[int]) -> int:
    bits = 0
    for w in words:
        bits = (bits << 16) | (w & 0xFFFF)
    return bits


def same_bits(a: float, b: float) -> bool:
    return float_to_bits(a) == float_to_bits(b)
