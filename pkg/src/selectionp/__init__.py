"""Self-supervised per-token prompt compression.

A linear+sigmoid selection head over a causal LM's last hidden states scores
every token's informativeness in one forward pass; the top fraction is kept
and detokenized back to plain text, so compressed prompts transfer to any
model that can read them. The head (plus low-rank adapters on the frozen
base) is trained with a masked causal-LM objective: predict kept tokens with
dropped tokens removed from the visible context.
"""
from .analysis import (CorrelationReport, LatencyReport, PosReport, correlate_signals,
                       measure_latency, payload_preservation, pos_preservation, spearman)
from .baselines import BaselineSpec, demo_truncate, perplexity_select, random_select
from .checkpoints import CheckpointBundle, load_checkpoint, save_checkpoint
from .compress import (BudgetPlan, CompressedPrompt, CompressionCache, allocate_counts,
                       apply_budget_plan, budget_controller, chunked_compress, compress)
from .config import (AdapterConfig, EvalConfig, LatencyConfig, ModelConfig, PretrainConfig,
                     TrainConfig, WorldConfig)
from .corpus import generate_corpus, load_corpus, segment
from .errors import (ConfigurationError, ContractViolation, DataError, LengthError,
                     SelectionPError)
from .evaluate import (DemonstrationSet, EvalRecord, TrialResult, build_demo_set, run_trial,
                       score_options, transfer_eval)
from .model import AdapterSet, TransformerLM, attach_lora, clm_loss, forward, token_perplexities
from .selector import KeepMask, SelectionHead, discretize, score, soft_mask, target_count
from .tasks import ClassificationTask, Template, load_task, make_synthetic_kv_task, save_task
from .tokenizer import WordTokenizer
from .training import pretrain_backbone, train_selector

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "AdapterSet", "BaselineSpec", "BudgetPlan", "CheckpointBundle",
    "ClassificationTask", "CompressedPrompt", "CompressionCache", "ConfigurationError",
    "ContractViolation", "CorrelationReport", "DataError", "DemonstrationSet", "EvalConfig",
    "EvalRecord", "KeepMask", "LatencyConfig", "LatencyReport", "LengthError", "ModelConfig",
    "PosReport", "PretrainConfig", "SelectionHead", "SelectionPError", "Template",
    "TrainConfig", "TransformerLM", "TrialResult", "WordTokenizer", "WorldConfig",
    "allocate_counts", "apply_budget_plan", "attach_lora", "budget_controller",
    "build_demo_set", "chunked_compress", "clm_loss", "compress", "correlate_signals",
    "demo_truncate", "discretize", "forward", "generate_corpus", "load_checkpoint",
    "load_corpus", "load_task", "make_synthetic_kv_task", "measure_latency",
    "payload_preservation", "perplexity_select", "pos_preservation", "pretrain_backbone",
    "random_select", "run_trial", "save_checkpoint", "save_task", "score", "score_options",
    "segment", "soft_mask", "spearman", "target_count", "token_perplexities",
    "train_selector", "transfer_eval",
]
