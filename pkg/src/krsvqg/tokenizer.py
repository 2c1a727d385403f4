"""Word-level vocabulary and fixed-length token sequences."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens %s" % (SPECIAL_TOKENS,))
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK}

    def save(self, path) -> None:
        # one token per line, line number == id
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        seen_pad = False
        for i in ids:
            if i < 0:
                raise ValueError("negative token id %d" % i)
            if i == PAD:
                seen_pad = True
            elif seen_pad:
                raise ValueError("PAD ids must form a contiguous suffix")

    @property
    def length(self) -> int:
        return sum(1 for i in self.ids if i != PAD)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from text lines.

    Tokens are ordered by descending frequency, ties broken
    lexicographically, after the four special tokens.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be a positive integer")
    lines = list(corpus)
    if not lines:
        raise ValueError("empty corpus")
    counts = Counter()
    for line in lines:
        counts.update(tokenize(line))
    kept = [tok for tok, c in counts.items() if c >= min_freq and tok not in SPECIAL_TOKENS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 3:
        raise ValueError("max_len must be at least 3 (BOS + token + EOS), got %d" % max_len)
    body = [vocab.token_to_id.get(tok, UNK) for tok in tokenize(text)]
    body = body[: max_len - 2]
    ids = [BOS, *body, EOS]
    ids += [PAD] * (max_len - len(ids))
    return TokenSequence(tuple(ids))


def decode(ids: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = list(ids)
    for i in ids:
        if not 0 <= i < len(vocab):
            raise ValueError("id out of range: %d (vocabulary size %d)" % (i, len(vocab)))
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)


def normalize_text(text: str) -> str:
    """The surface form ``decode(encode(text))`` aims to reproduce."""
    return " ".join(tokenize(text))
