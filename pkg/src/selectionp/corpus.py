"""Corpus ingestion, segmentation, and the synthetic key-value world.

The world emits episodic documents: each episode opens with <s>, states a
fresh random binding table as "key value" units, and re-states bindings
several times amid filler bursts. Re-stated values are predictable only by
retrieving the earlier binding, which is what gives the base model its
in-context retrieval skill and the selector a payload/filler contrast.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import WorldConfig
from .errors import ConfigurationError, DataError
from .tokenizer import BOS_TOKEN, TokenSequence, WordTokenizer

logger = logging.getLogger(__name__)

CORPUS_FORMATS = ("plain-text", "jsonl")


@dataclass
class LoadReport:
    documents: int = 0
    skipped_empty: int = 0
    malformed_lines: List[int] = field(default_factory=list)


def load_corpus(path, format: str = "plain-text", text_field: str = "text") -> Tuple[List[str], LoadReport]:
    """Read documents in file order; skip and count empties.

    plain-text: one document per line. jsonl: one JSON object per line with
    the configured text field; malformed lines are logged with their line
    number and skipped without aborting.
    """
    if format not in CORPUS_FORMATS:
        raise ConfigurationError(f"unknown corpus format {format!r}; expected one of {CORPUS_FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise OSError(f"corpus path {path} does not exist or is not a file")
    docs: List[str] = []
    report = LoadReport()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if format == "jsonl":
                line = line.strip()
                if not line:
                    report.skipped_empty += 1
                    continue
                try:
                    record = json.loads(line)
                    text = record[text_field]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    report.malformed_lines.append(lineno)
                    logger.warning("malformed jsonl record at line %d: %s", lineno, exc)
                    continue
            else:
                text = line.rstrip("\n")
            if not text.strip():
                report.skipped_empty += 1
                continue
            docs.append(text)
    report.documents = len(docs)
    return docs, report


@dataclass
class Segment:
    tokens: TokenSequence
    source_doc_id: str
    offset: int

    def __len__(self) -> int:
        return len(self.tokens)


def segment(doc_tokens: TokenSequence, segment_length: int, source_doc_id: str = "doc") -> Tuple[List[Segment], int]:
    """Split into consecutive fixed-length segments; never crosses documents.

    Returns (segments, dropped): tails shorter than 2 tokens are dropped and
    counted because the CLM loss is undefined on them.
    """
    if segment_length < 2:
        raise ConfigurationError("segment_length must be >= 2")
    ids = doc_tokens.ids
    segments: List[Segment] = []
    dropped = 0
    for offset in range(0, len(ids), segment_length):
        piece = ids[offset:offset + segment_length]
        if len(piece) < 2:
            dropped += 1
            continue
        segments.append(Segment(
            tokens=TokenSequence(ids=list(piece), tokenizer=doc_tokens.tokenizer),
            source_doc_id=source_doc_id,
            offset=offset,
        ))
    return segments, dropped


def detokenize(seq: TokenSequence) -> str:
    """Canonical surface string of a token sequence (deterministic)."""
    return seq.tokenizer.detokenize_ids(seq.ids)


@dataclass
class CorpusManifest:
    documents: int
    tokens: int
    segments: int
    dropped_segments: int
    skipped_empty: int
    segment_length: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def build_segments(docs: Sequence[str], tokenizer: WordTokenizer, segment_length: int,
                   load_report: Optional[LoadReport] = None) -> Tuple[List[Segment], CorpusManifest]:
    """Tokenize and segment a document list, accumulating corpus statistics."""
    segments: List[Segment] = []
    dropped = 0
    tokens = 0
    kept_docs = 0
    for i, doc in enumerate(docs):
        ids = tokenizer.tokenize(doc)
        if len(ids) < 2:
            dropped += 1
            continue
        kept_docs += 1
        tokens += len(ids)
        segs, d = segment(TokenSequence(ids=ids, tokenizer=tokenizer), segment_length, source_doc_id=f"doc{i}")
        segments.extend(segs)
        dropped += d
    manifest = CorpusManifest(
        documents=kept_docs,
        tokens=tokens,
        segments=len(segments),
        dropped_segments=dropped,
        skipped_empty=load_report.skipped_empty if load_report else 0,
        segment_length=segment_length,
    )
    return segments, manifest


# --- synthetic key-value world ------------------------------------------------

TAG_KEY = "key"
TAG_VALUE = "value"
TAG_FILLER = "filler"
TAG_SPECIAL = "special"


def world_words(cfg: WorldConfig) -> dict:
    """Surface forms for keys, values, and fillers."""
    return {
        "keys": [f"k{i:03d}" for i in range(cfg.n_keys)],
        "values": [f"v{i:03d}" for i in range(cfg.n_values)],
        "fillers": [f"f{i:02d}" for i in range(cfg.n_fillers)],
    }


def classify_word(word: str) -> str:
    """Token-class tagger for world text (lexical prefix rules)."""
    if word.startswith("k") and word[1:].isdigit():
        return TAG_KEY
    if word.startswith("v") and word[1:].isdigit():
        return TAG_VALUE
    if word.startswith("f") and word[1:].isdigit():
        return TAG_FILLER
    return TAG_SPECIAL


def make_episode(rng: np.random.Generator, cfg: WorldConfig) -> List[str]:
    """One episode: <s> then cycled restatements of a binding table.

    Every cycle states each pair exactly once in a fresh random order, so a
    binding's first statement is genuinely load-bearing for its later
    restatements. Filler-burst lengths are spread wide so burst phase reveals
    little about where the next pair begins.
    """
    words = world_words(cfg)
    n_pairs = int(rng.integers(cfg.pairs_min, cfg.pairs_max + 1))
    n_pairs = min(n_pairs, cfg.n_keys)
    filler_ratio = float(rng.choice(cfg.filler_ratios))
    keys = rng.choice(cfg.n_keys, size=n_pairs, replace=False)
    vals = rng.choice(cfg.n_values, size=n_pairs, replace=True)
    n_cycles = int(rng.integers(cfg.cycles_min, cfg.cycles_max + 1))
    # mean burst length chosen so fillers make up filler_ratio of the episode
    mean_burst = 2.0 * filler_ratio / max(1.0 - filler_ratio, 1e-9)
    out = [BOS_TOKEN]
    for _ in range(n_cycles):
        for i in rng.permutation(n_pairs):
            out.append(words["keys"][keys[int(i)]])
            out.append(words["values"][vals[int(i)]])
            if filler_ratio > 0:
                n_fill = int(rng.integers(0, int(round(2 * mean_burst)) + 1))
                for j in rng.integers(0, cfg.n_fillers, n_fill):
                    out.append(words["fillers"][int(j)])
    return out


def make_document(rng: np.random.Generator, cfg: WorldConfig, length: int) -> str:
    """Concatenated episodes truncated to exactly `length` words."""
    out: List[str] = []
    while len(out) < length:
        out.extend(make_episode(rng, cfg))
    return " ".join(out[:length])


def generate_corpus(path, cfg: WorldConfig, n_documents: int, doc_length: int, seed: int) -> dict:
    """Write a plain-text corpus (one document per line); returns stats."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for _ in range(n_documents):
            fh.write(make_document(rng, cfg, doc_length) + "\n")
    return {"documents": n_documents, "doc_length": doc_length, "tokens": n_documents * doc_length, "seed": seed}


def requery_positions(words: Sequence[str]) -> List[bool]:
    """True at value positions whose key was already stated in the episode.

    These are the positions where next-token prediction requires retrieving
    an earlier in-context binding; <s> resets the episode.
    """
    out = [False] * len(words)
    seen = set()
    for i, w in enumerate(words):
        if w == BOS_TOKEN:
            seen = set()
            continue
        if classify_word(w) == TAG_VALUE and i > 0 and classify_word(words[i - 1]) == TAG_KEY:
            if words[i - 1] in seen:
                out[i] = True
            seen.add(words[i - 1])
    return out


def payload_positions(words: Sequence[str]) -> List[bool]:
    """True at key/value positions (the informative tokens by construction)."""
    return [classify_word(w) in (TAG_KEY, TAG_VALUE) for w in words]
