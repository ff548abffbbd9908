"""Hierarchical cross-modal prompt learning on miniature dual encoders."""
from .encoders import DualEncoder, EncoderConfig, load_vocab, tokenize
from .errors import HiCroPLError
from .objectives import consistency_loss, load_templates, predict, teacher_text_embeddings, total_loss
from .promptflow import FlowConfig, PromptStack, init_prompt_stack, materialize

__version__ = "0.1.0"

__all__ = [
    "DualEncoder", "EncoderConfig", "FlowConfig", "HiCroPLError", "PromptStack", "consistency_loss",
    "init_prompt_stack", "load_templates", "load_vocab", "materialize", "predict",
    "teacher_text_embeddings", "tokenize", "total_loss",
]
