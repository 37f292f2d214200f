"""Shared fixtures.

Unit tests run on tiny in-session models. Behavioral tests (acceptance) need
the trained experiment checkpoints under <repo>/artifacts; if they are
missing, the pipeline script is invoked once to build them (slow on first
run, cached afterwards).
"""
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from selectionp.checkpoints import load_checkpoint, save_checkpoint
from selectionp.config import (AdapterConfig, ModelConfig, TrainConfig, WorldConfig)
from selectionp.corpus import build_segments, generate_corpus, load_corpus, world_words
from selectionp.model import TransformerLM, attach_lora
from selectionp.selector import SelectionHead
from selectionp.tokenizer import WordTokenizer
from selectionp.checkpoints import CheckpointBundle

REPO = Path(__file__).resolve().parent.parent
ARTIFACTS = REPO / "artifacts"


def _ensure_artifacts():
    wanted = ["checkpoints/base4", "checkpoints/base8",
              "checkpoints/selector_s0", "checkpoints/selector_s1", "checkpoints/selector_s2"]
    if all((ARTIFACTS / w / "header.json").exists() for w in wanted):
        return
    subprocess.run([sys.executable, str(REPO / "scripts" / "run_pipeline.py"),
                    "--root", str(ARTIFACTS)], check=True)


@pytest.fixture(scope="session")
def world_cfg():
    return WorldConfig().validate()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, world_cfg):
    """Small world corpus for unit tests (no training quality implied)."""
    path = tmp_path_factory.mktemp("corpus") / "tiny.txt"
    generate_corpus(path, world_cfg, n_documents=10, doc_length=256, seed=5)
    docs, report = load_corpus(path)
    return path, docs, report


@pytest.fixture(scope="session")
def tiny_tok(tiny_corpus, world_cfg):
    _, docs, _ = tiny_corpus
    words = world_words(world_cfg)
    coverage = " ".join(words["keys"] + words["values"] + words["fillers"])
    return WordTokenizer.train(list(docs) + [coverage])


@pytest.fixture(scope="session")
def tiny_segments(tiny_corpus, tiny_tok):
    _, docs, report = tiny_corpus
    segments, _ = build_segments(docs, tiny_tok, 64, report)
    return segments


def _tiny_model(tok, n_layers=2, d_model=32, seed=7, max_seq_len=512):
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=tok.vocab_size, n_layers=n_layers, n_heads=4,
                      d_model=d_model, d_ff=2 * d_model, max_seq_len=max_seq_len).validate()
    return TransformerLM(cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_tok):
    model = _tiny_model(tiny_tok)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_bundle(tiny_model, tiny_tok):
    """Untrained model with adapters + head: exercises plumbing, not quality."""
    torch.manual_seed(13)
    adapters = attach_lora(tiny_model, AdapterConfig())
    head = SelectionHead(tiny_model.cfg.d_model)
    return CheckpointBundle(model=tiny_model, tokenizer=tiny_tok, header={},
                            adapters=adapters, head=head)


@pytest.fixture(scope="session")
def base4(pytestconfig):
    _ensure_artifacts()
    return load_checkpoint(ARTIFACTS / "checkpoints" / "base4")


@pytest.fixture(scope="session")
def base8():
    _ensure_artifacts()
    return load_checkpoint(ARTIFACTS / "checkpoints" / "base8")


@pytest.fixture(scope="session")
def selectors():
    _ensure_artifacts()
    return [load_checkpoint(ARTIFACTS / "checkpoints" / f"selector_s{i}") for i in (0, 1, 2)]
