"""Word-level tokenizer with an exact round trip on its training alphabet.

Tokens are whitespace-delimited words; detokenization joins with single
spaces. The corpus generator emits single-space text, so round trips are
exact over the corpus alphabet. Kept-token subsequences detokenize to
fragmented but valid text, which is what compression is expected to emit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Set

from .errors import DataError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, UNK_TOKEN)


@dataclass
class WordTokenizer:
    """TokenizerHandle: immutable after construction, shareable."""

    vocab: List[str]
    name: str = "word"

    def __post_init__(self):
        self._index: Dict[str, int] = {w: i for i, w in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise DataError("duplicate words in vocabulary")
        for tok in SPECIAL_TOKENS:
            if tok not in self._index:
                raise DataError(f"vocabulary missing special token {tok!r}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self._index[PAD_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._index[BOS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._index[UNK_TOKEN]

    @property
    def special_token_ids(self) -> Set[int]:
        return {self.pad_id, self.bos_id, self.unk_id}

    @classmethod
    def train(cls, texts: Iterable[str], name: str = "word") -> "WordTokenizer":
        """Build a vocabulary from whitespace-split words, specials first."""
        seen: Dict[str, None] = {}
        for text in texts:
            for word in text.split():
                if word not in seen and word not in SPECIAL_TOKENS:
                    seen[word] = None
        return cls(vocab=list(SPECIAL_TOKENS) + sorted(seen), name=name)

    def tokenize(self, text: str, strict: bool = False) -> List[int]:
        ids = []
        for word in text.split():
            idx = self._index.get(word)
            if idx is None:
                if strict:
                    raise DataError(f"word {word!r} not in vocabulary")
                idx = self.unk_id
            ids.append(idx)
        return ids

    def detokenize_ids(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise DataError(f"token id {i} outside vocabulary of size {self.vocab_size}")
            words.append(self.vocab[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"name": self.name, "vocab": self.vocab}))

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        doc = json.loads(Path(path).read_text())
        return cls(vocab=doc["vocab"], name=doc["name"])


@dataclass
class TokenSequence:
    """Ordered token ids bound to the tokenizer that produced them."""

    ids: List[int]
    tokenizer: WordTokenizer

    def __post_init__(self):
        if len(self.ids) < 1:
            raise DataError("TokenSequence must contain at least one token")
        V = self.tokenizer.vocab_size
        for i in self.ids:
            if not 0 <= i < V:
                raise DataError(f"token id {i} outside vocabulary of size {V}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def text(self) -> str:
        return self.tokenizer.detokenize_ids(self.ids)


def bos_always_keep(ids: Sequence[int], tokenizer: WordTokenizer) -> frozenset:
    """Default always-keep set: the begin-of-sequence position when present."""
    if len(ids) > 0 and ids[0] == tokenizer.bos_id:
        return frozenset({0})
    return frozenset()
