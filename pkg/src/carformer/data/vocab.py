"""Closed word vocabulary with the dialogue layout markers."""
from __future__ import annotations

from typing import Iterable, Sequence

PAD, UNK, HIST, QUES, EOU = "[PAD]", "[UNK]", "[HIST]", "[QUES]", "<eou>"
SPECIALS = (PAD, UNK, HIST, QUES, EOU)


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return text.lower().split()


class Vocab:
    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for w in words:
            if w not in seen:
                seen.add(w)
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_itos(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the marker tokens " + " ".join(SPECIALS))
        return cls(itos[len(SPECIALS):])

    @classmethod
    def from_world(cls, world) -> "Vocab":
        return cls(world.word_list())

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def ids(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]
