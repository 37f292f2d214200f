"""Classification tasks for in-context-learning evaluation.

Tasks are stored as JSON with {context, options, gold} instances split into
train (demonstration pool) and test. The synthetic key-value task is the
ground-truth oracle: every demonstration states one binding amid fillers, so
informative token positions are known by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import WorldConfig
from .corpus import BOS_TOKEN, world_words
from .errors import ConfigurationError, DataError


def _join(parts: Sequence[str]) -> str:
    return " ".join(p for p in parts if p)


@dataclass(frozen=True)
class Template:
    """Demonstration formatting rule: '<input_prefix> context <label_prefix> label'."""

    input_prefix: str = ""
    label_prefix: str = ""
    prepend_bos: bool = False

    def demonstration(self, context: str, label: str) -> str:
        return _join([self.input_prefix, context, self.label_prefix, label])

    def query(self, context: str) -> str:
        """Demonstration format up to (and including) the label prefix."""
        return _join([self.input_prefix, context, self.label_prefix])

    def to_dict(self) -> dict:
        return {"input_prefix": self.input_prefix, "label_prefix": self.label_prefix,
                "prepend_bos": self.prepend_bos}


@dataclass(frozen=True)
class Instance:
    context: str
    options: Tuple[str, ...]
    gold: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise DataError(f"instance needs >= 2 options, got {len(self.options)}")
        if not 0 <= self.gold < len(self.options):
            raise DataError(f"gold index {self.gold} outside [0, {len(self.options)})")

    @property
    def label(self) -> str:
        return self.options[self.gold]


@dataclass
class ClassificationTask:
    name: str
    template: Template
    train: List[Instance]
    test: List[Instance]
    metadata: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> "ClassificationTask":
        if not self.train:
            raise ConfigurationError(f"task {self.name!r} has an empty training split")
        if not self.test:
            raise ConfigurationError(f"task {self.name!r} has an empty test split")
        return self

    def demonstration_texts(self) -> List[str]:
        return [self.template.demonstration(inst.context, inst.label) for inst in self.train]

    def all_texts(self) -> List[str]:
        """Every string the tokenizer must cover: demos, queries, options."""
        texts = self.demonstration_texts()
        for inst in self.train + self.test:
            texts.append(self.template.query(inst.context))
            texts.extend(inst.options)
        if self.template.prepend_bos:
            texts.append(BOS_TOKEN)
        return texts


def save_task(task: ClassificationTask, path) -> None:
    payload = {
        "name": task.name,
        "template": task.template.to_dict(),
        "train": [{"context": i.context, "options": list(i.options), "gold": i.gold} for i in task.train],
        "test": [{"context": i.context, "options": list(i.options), "gold": i.gold} for i in task.test],
        "metadata": task.metadata,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _parse_instances(rows, where: str) -> List[Instance]:
    out = []
    for i, row in enumerate(rows):
        try:
            out.append(Instance(context=str(row["context"]),
                                options=tuple(str(o) for o in row["options"]),
                                gold=int(row["gold"])))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{where}[{i}]: malformed instance ({exc})") from exc
    return out


def load_task(path) -> ClassificationTask:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    tmpl = payload.get("template", {})
    task = ClassificationTask(
        name=str(payload.get("name", path.stem)),
        template=Template(input_prefix=str(tmpl.get("input_prefix", "")),
                          label_prefix=str(tmpl.get("label_prefix", "")),
                          prepend_bos=bool(tmpl.get("prepend_bos", False))),
        train=_parse_instances(payload.get("train", []), "train"),
        test=_parse_instances(payload.get("test", []), "test"),
        metadata=dict(payload.get("metadata", {})),
    )
    return task.validate()


def make_synthetic_kv_task(n_keys: int = 24, filler_ratio: float = 0.75, seed: int = 0,
                           n_options: int = 8, n_test: int = 64,
                           world: Optional[WorldConfig] = None) -> ClassificationTask:
    """Key-value retrieval task with known informative positions.

    One binding table per task: each training instance states one key's value
    amid filler words (filler_ratio = filler fraction of demo tokens); test
    queries ask the value of a table key, options are the value pool. A model
    can only answer by retrieving the binding from whatever demonstrations
    survive compression, so accuracy directly measures payload preservation.

    Fillers precede the key so each formatted demo ends "... key value",
    keeping the pair adjacent exactly as in the pretraining episodes.
    """
    if n_keys < 2:
        raise ConfigurationError("n_keys must be >= 2")
    if not 0.0 <= filler_ratio < 1.0:
        raise ConfigurationError("filler_ratio must be in [0, 1)")
    world = world or WorldConfig()
    world.validate()
    if n_keys > world.n_keys:
        raise ConfigurationError(f"n_keys {n_keys} exceeds world vocabulary ({world.n_keys})")
    if n_options > world.n_values:
        raise ConfigurationError(f"n_options {n_options} exceeds world vocabulary ({world.n_values})")
    words = world_words(world)
    rng = np.random.default_rng(seed)
    keys = rng.choice(world.n_keys, size=n_keys, replace=False)
    pool = rng.choice(world.n_values, size=n_options, replace=False)
    options = tuple(words["values"][int(v)] for v in pool)
    # payload is 2 tokens/demo; filler count solves f = nf / (nf + 2)
    n_fillers = int(round(2 * filler_ratio / (1 - filler_ratio)))
    train: List[Instance] = []
    binding: Dict[str, int] = {}
    for k in keys:
        gold = int(rng.integers(n_options))
        key_word = words["keys"][int(k)]
        binding[key_word] = gold
        fillers = [words["fillers"][int(j)] for j in rng.integers(0, world.n_fillers, n_fillers)]
        train.append(Instance(context=_join(fillers + [key_word]), options=options, gold=gold))
    test = []
    for _ in range(n_test):
        key_word = words["keys"][int(keys[rng.integers(n_keys)])]
        test.append(Instance(context=key_word, options=options, gold=binding[key_word]))
    return ClassificationTask(
        name=f"synthetic-kv-f{filler_ratio:g}-s{seed}",
        template=Template(prepend_bos=True),
        train=train,
        test=test,
        metadata={
            "kind": "synthetic-kv",
            "filler_ratio": filler_ratio,
            "payload_tokens_per_demo": 2,
            "demo_tokens": 2 + n_fillers,
            "binding": {k: options[g] for k, g in binding.items()},
        },
    ).validate()
