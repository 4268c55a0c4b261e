"""Word-level vocabulary and tokenizer."""

from __future__ import annotations

import re
from typing import Iterable

PAD, CLS, ANS, UNK, EOS = "[PAD]", "[CLS]", "[ANS]", "[UNK]", "[EOS]"
SPECIALS = (PAD, CLS, ANS, UNK, EOS)

_TOKEN_RE = re.compile(r"\[[A-Z]+\]|[^\s:,;.?!]+|[:,;.?!]")
_NO_SPACE_BEFORE = {":", ",", ";", ".", "?", "!"}


def word_tokens(text: str) -> list[str]:
    """Split on whitespace; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    out: list[str] = []
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE:
            out.append(" ")
        out.append(tok)
    return "".join(out)


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        idx = self.stoi.get(word)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(word)
            self.stoi[word] = idx
        return idx

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Vocabulary":
        vocab = cls()
        for w in extra:
            vocab.add(w)
        for text in texts:
            for tok in word_tokens(text):
                vocab.add(tok)
        return vocab

    @classmethod
    def from_list(cls, itos: list[str]) -> "Vocabulary":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        vocab = cls()
        for w in itos[len(SPECIALS):]:
            if w in vocab.stoi:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            vocab.add(w)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def ids(self, tokens: Iterable[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def tokenize(self, text: str) -> list[int]:
        return self.ids(word_tokens(text))

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        toks = [self.itos[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in SPECIALS]
        return toks

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def cls(self) -> int:
        return self.stoi[CLS]

    @property
    def ans(self) -> int:
        return self.stoi[ANS]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]
