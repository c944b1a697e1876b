"""Vocabulary, word-level tokenizer and role-tagged token sequences."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .errors import ConfigurationError, InvalidInputError

MASK_TOKEN = "<mask>"
END_TOKEN = "<endoftext>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\d|[A-Za-z]+|[^\w\s]")


class Role(enum.IntEnum):
    AUDIO = 0
    PROMPT = 1
    RESPONSE = 2
    PAD = 3


@dataclass(frozen=True)
class VocabSpec:
    size: int
    mask_id: int
    end_id: int

    def __post_init__(self):
        if self.size <= 0:
            raise ConfigurationError(f"vocab size must be positive, got {self.size}")
        if self.mask_id == self.end_id:
            raise ConfigurationError("mask_id and end_id must differ")
        for name, value in (("mask_id", self.mask_id), ("end_id", self.end_id)):
            if not 0 <= value < self.size:
                raise ConfigurationError(f"{name}={value} outside vocabulary of size {self.size}")


@dataclass
class TokenSequence:
    """One example: prompt and response token ids with per-position roles.

    The audio prefix is continuous and travels separately; ``Role.AUDIO``
    exists so collated batches can describe the full layout.
    """

    ids: list[int]
    roles: list[Role]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise InvalidInputError("ids and roles differ in length")

    @classmethod
    def from_parts(cls, prompt: Sequence[int], response: Sequence[int]) -> "TokenSequence":
        return cls(
            list(prompt) + list(response),
            [Role.PROMPT] * len(prompt) + [Role.RESPONSE] * len(response),
        )

    def __len__(self):
        return len(self.ids)

    @property
    def prompt(self) -> list[int]:
        return [i for i, r in zip(self.ids, self.roles) if r == Role.PROMPT]

    @property
    def response(self) -> list[int]:
        return [i for i, r in zip(self.ids, self.roles) if r == Role.RESPONSE]


@dataclass
class TokenBatch:
    ids: torch.Tensor  # [B, L] long
    roles: torch.Tensor  # [B, L] long

    @property
    def valid(self) -> torch.Tensor:
        return self.roles != Role.PAD

    @property
    def response(self) -> torch.Tensor:
        return self.roles == Role.RESPONSE

    def __len__(self):
        return self.ids.shape[0]


def collate(seqs: Sequence[TokenSequence], pad_id: int, left_pad: bool = False) -> TokenBatch:
    """Stack sequences into a padded batch; padding gets ``Role.PAD``."""
    if not seqs:
        raise InvalidInputError("cannot collate an empty list of sequences")
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    roles = torch.full((len(seqs), width), int(Role.PAD), dtype=torch.long)
    for b, s in enumerate(seqs):
        n = len(s)
        sl = slice(width - n, width) if left_pad else slice(0, n)
        ids[b, sl] = torch.tensor(s.ids, dtype=torch.long)
        roles[b, sl] = torch.tensor([int(r) for r in s.roles], dtype=torch.long)
    return TokenBatch(ids, roles)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass
class Tokenizer:
    """Closed word-level tokenizer.

    Case is preserved so single capital letters (answer options) stay
    distinct from the article "a"; unknown words fall back to their
    lowercase form, then to ``<unk>``.
    """

    words: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        specials = [MASK_TOKEN, END_TOKEN, UNK_TOKEN]
        seen: dict[str, int] = {}
        for w in specials + list(self.words):
            if w not in seen:
                seen[w] = len(seen)
        self.words = list(seen)
        self._index = seen

    @property
    def spec(self) -> VocabSpec:
        return VocabSpec(size=len(self.words), mask_id=self.mask_id, end_id=self.end_id)

    @property
    def mask_id(self) -> int:
        return self._index[MASK_TOKEN]

    @property
    def end_id(self) -> int:
        return self._index[END_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._index[UNK_TOKEN]

    def __len__(self):
        return len(self.words)

    def token_id(self, word: str) -> int:
        if word in self._index:
            return self._index[word]
        return self._index.get(word.lower(), self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in split_words(text)]

    def decode(self, ids: Iterable[int], stop_at_end: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if stop_at_end and i == self.end_id:
                break
            out.append(self.words[i])
        return " ".join(out)

    def pad_response(self, ids: Sequence[int], length: int) -> list[int]:
        """Append ``end_id`` up to ``length`` (the end token is always present once)."""
        ids = list(ids) + [self.end_id]
        if len(ids) > length:
            raise InvalidInputError(f"response of {len(ids)} tokens exceeds answer length {length}")
        return ids + [self.end_id] * (length - len(ids))
