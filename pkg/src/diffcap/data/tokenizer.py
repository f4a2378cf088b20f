"""Word-level tokenizer shared by training and metric computation."""

import re
from collections import Counter
from typing import Iterable, List, Sequence

PAD, UNK, BOS, EOS, SEP, IMG1, IMG2 = range(7)
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<img1>", "<img2>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_ATTACH_LEFT = set(".,;:!?)")


def split_words(text: str) -> List[str]:
    """Lowercase, split on whitespace and punctuation; punctuation marks become tokens."""
    return _TOKEN_RE.findall(text.lower())


def is_punct(token: str) -> bool:
    return not any(c.isalnum() for c in token)


def join_words(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if not out:
            out = tok
        elif tok in _ATTACH_LEFT:
            out += tok
        else:
            out += " " + tok
    return out


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.itos: List[str] = list(SPECIALS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for t in texts for tok in split_words(t))
        # sorted for a vocabulary that does not depend on corpus order
        return cls(sorted(w for w, c in counts.items() if c >= min_count))

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> List[int]:
        return [self.stoi.get(tok, UNK) for tok in split_words(text)]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            toks.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return join_words(toks)

    def unk_rate(self, texts: Iterable[str]) -> float:
        total = unk = 0
        for t in texts:
            ids = self.encode(t)
            total += len(ids)
            unk += sum(1 for i in ids if i == UNK)
        return unk / total if total else 0.0

    def to_list(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the reserved special tokens")
        return cls(itos[len(SPECIALS):])
