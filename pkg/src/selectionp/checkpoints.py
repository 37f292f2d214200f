"""Checkpoint layout: a directory holding base/adapters/head weights.

header.json records the model config, adapter config, tokenizer name, and
training step; tokenizer.json makes every checkpoint self-contained.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .config import AdapterConfig, ModelConfig, from_dict, to_dict
from .errors import DataError
from .model import AdapterSet, TransformerLM, attach_lora
from .selector import SelectionHead
from .tokenizer import WordTokenizer


@dataclass
class CheckpointBundle:
    model: TransformerLM
    tokenizer: WordTokenizer
    header: dict
    adapters: Optional[AdapterSet] = None
    head: Optional[SelectionHead] = None
    path: Optional[Path] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def content_hash(self) -> str:
        """Stable short id of the checkpoint contents (for caches/records)."""
        if self.path is None:
            return "unsaved"
        digest = hashlib.sha256()
        for name in sorted(p.name for p in self.path.iterdir()):
            digest.update(name.encode())
            digest.update((self.path / name).read_bytes())
        return digest.hexdigest()[:16]


def save_checkpoint(path, model: TransformerLM, tokenizer: WordTokenizer, step: int,
                    adapters: Optional[AdapterSet] = None,
                    head: Optional[SelectionHead] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "model_config": to_dict(model.cfg),
        "tokenizer_name": tokenizer.name,
        "step": step,
        "has_adapters": adapters is not None,
        "has_head": head is not None,
        "adapter_config": to_dict(adapters.config) if adapters is not None else None,
        "extra": extra or {},
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    tokenizer.save(path / "tokenizer.json")
    torch.save({n: p for n, p in model.state_dict().items() if ".A" not in n and ".B" not in n},
               path / "base.pt")
    if adapters is not None:
        torch.save(adapters.state_dict(), path / "adapters.pt")
    if head is not None:
        torch.save(head.state_dict(), path / "head.pt")
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    header_file = path / "header.json"
    if not header_file.is_file():
        raise DataError(f"no checkpoint header at {header_file}")
    header = json.loads(header_file.read_text())
    tokenizer = WordTokenizer.load(path / "tokenizer.json")
    cfg = from_dict(ModelConfig, header["model_config"])
    model = TransformerLM(cfg)
    # Base weights were saved from a possibly adapter-wrapped model, whose
    # projection keys carry a ".base" segment; normalize both directions.
    state = torch.load(path / "base.pt", weights_only=True)
    state = {k.replace(".base.", "."): v for k, v in state.items()}
    model.load_state_dict(state)
    adapters = None
    if header.get("has_adapters"):
        adapters = attach_lora(model, from_dict(AdapterConfig, header["adapter_config"]))
        adapters.load_state_dict(torch.load(path / "adapters.pt", weights_only=True))
    head = None
    if header.get("has_head"):
        head = SelectionHead(cfg.d_model)
        head.load_state_dict(torch.load(path / "head.pt", weights_only=True))
    model.eval()
    return CheckpointBundle(model=model, tokenizer=tokenizer, header=header,
                            adapters=adapters, head=head, path=path)
