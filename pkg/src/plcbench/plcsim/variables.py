"""LREAL variable table with a DM word image.

Each variable is a 64-bit float exposed to FINS as four consecutive 16-bit
DM words, most-significant word first (big-endian end to end). Values are
stored as raw 64-bit patterns so NaN payloads and signed zeros survive every
copy untouched.
"""

from __future__ import annotations

import enum
import re
from collections.abc import Iterable
from dataclasses import dataclass

from ..errors import ConfigurationError
from ..lreal import WORDS_PER_LREAL, bits_to_float, bits_to_words, float_to_bits, words_to_bits

DM_WORDS = 0x10000

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Publish(enum.Enum):
    INPUT = "input"
    OUTPUT = "output"
    NONE = "none"


@dataclass
class Variable:
    name: str
    publish: Publish = Publish.NONE
    dm_address: int = 0
    value: float = 0.0

    @property
    def dm_words(self) -> range:
        return range(self.dm_address, self.dm_address + WORDS_PER_LREAL)


class AddressError(LookupError):
    """DM access outside the mapped words."""


class VariableTable:
    """Named LREAL variables plus the word-addressed view FINS sees."""

    def __init__(self, variables: Iterable[Variable]) -> None:
        self._vars: dict[str, Variable] = {}
        self._bits: dict[str, int] = {}
        self._word_owner: dict[int, tuple[str, int]] = {}
        for var in variables:
            self.add(var)

    def add(self, var: Variable) -> None:
        if not _NAME_RE.match(var.name):
            raise ConfigurationError(f"invalid variable name {var.name!r}")
        if var.name in self._vars:
            raise ConfigurationError(f"duplicate variable name {var.name!r}")
        if not 0 <= var.dm_address <= DM_WORDS - WORDS_PER_LREAL:
            raise ConfigurationError(f"{var.name}: DM address {var.dm_address} out of range")
        for word in var.dm_words:
            if word in self._word_owner:
                other = self._word_owner[word][0]
                raise ConfigurationError(
                    f"{var.name}@DM{var.dm_address} overlaps {other} at DM{word}"
                )
        for i, word in enumerate(var.dm_words):
            self._word_owner[word] = (var.name, i)
        self._vars[var.name] = var
        self._bits[var.name] = 0

    def remove(self, name: str) -> None:
        var = self._vars.pop(name)
        del self._bits[name]
        for word in var.dm_words:
            del self._word_owner[word]

    def __contains__(self, name: object) -> bool:
        return name in self._vars

    def __iter__(self):
        return iter(self._vars.values())

    def __len__(self) -> int:
        return len(self._vars)

    def variable(self, name: str) -> Variable:
        return self._vars[name]

    def published(self) -> list[Variable]:
        return [v for v in self._vars.values() if v.publish is not Publish.NONE]

    def get_bits(self, name: str) -> int:
        return self._bits[name]

    def set_bits(self, name: str, bits: int) -> None:
        if name not in self._bits:
            raise KeyError(name)
        self._bits[name] = bits & 0xFFFF_FFFF_FFFF_FFFF

    def get(self, name: str) -> float:
        return bits_to_float(self._bits[name])

    def set(self, name: str, value: float) -> None:
        self.set_bits(name, float_to_bits(value))

    def _check_range(self, address: int, count: int) -> None:
        for word in range(address, address + count):
            if word not in self._word_owner:
                raise AddressError(f"DM{word} is not mapped")

    def read_words(self, address: int, count: int) -> list[int]:
        self._check_range(address, count)
        out = []
        for word in range(address, address + count):
            name, idx = self._word_owner[word]
            out.append(bits_to_words(self._bits[name])[idx])
        return out

    def write_words(self, address: int, words: list[int]) -> None:
        # all-or-nothing: validate the whole range before touching anything
        self._check_range(address, len(words))
        for offset, value in enumerate(words):
            name, idx = self._word_owner[address + offset]
            current = bits_to_words(self._bits[name])
            current[idx] = value & 0xFFFF
            self._bits[name] = words_to_bits(current)
