"""Word-level tokenizer with byte fallback.

Text is lower-cased and split into runs of word characters and single
punctuation marks. In-vocabulary words map to one id; anything else falls back
to one id per UTF-8 byte. Every encoded sequence starts with ``[CLS]`` and the
CLS token counts against the length budget.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, MASK = "[PAD]", "[CLS]", "[MASK]"
SPECIALS = (PAD, CLS, MASK)
_BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))
_PRETOKEN = re.compile(r"\w+|[^\w\s]")


def pretokenize(text: str) -> list:
    return _PRETOKEN.findall(text.lower())


@dataclass(frozen=True)
class Encoding:
    ids: tuple
    truncated: bool


class Tokenizer:
    def __init__(self, words: Iterable[str]):
        words = sorted(set(words) - set(SPECIALS) - set(_BYTE_TOKENS))
        self.itos = list(SPECIALS) + list(_BYTE_TOKENS) + words
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.cls_id = self.stoi[CLS]
        self.mask_id = self.stoi[MASK]
        self._byte0 = len(SPECIALS)

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(pretokenize(t))
        return cls(words)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos[len(SPECIALS) + 256:]))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def pieces(self, text: str) -> list:
        ids = []
        for word in pretokenize(text):
            if word in self.stoi:
                ids.append(self.stoi[word])
            else:
                ids.extend(self._byte0 + b for b in word.encode("utf-8"))
        return ids

    def count(self, text: str) -> int:
        """Token count including CLS; 0 for empty text."""
        p = self.pieces(text)
        return len(p) + 1 if p else 0

    def encode(self, text: str, max_len: int) -> Encoding:
        ids = [self.cls_id] + self.pieces(text)
        return Encoding(tuple(ids[:max_len]), len(ids) > max_len)

    def decode(self, ids: Sequence[int]) -> str:
        out, buf = [], bytearray()
        for i in ids:
            if self._byte0 <= i < self._byte0 + 256:
                buf.append(i - self._byte0)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            if self.itos[i] not in SPECIALS:
                out.append(self.itos[i])
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return " ".join(out)


@lru_cache(maxsize=1)
def default_tokenizer() -> Tokenizer:
    from .templates import corpus

    return Tokenizer.from_corpus(corpus())
