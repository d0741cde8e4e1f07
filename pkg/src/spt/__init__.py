"""Selective prompt tuning: a bank of soft prompts routed by a dense retriever
over a frozen causal language model."""
import torch

# gradient checks and bitwise checkpoint tests assume 64-bit floats
torch.set_default_dtype(torch.float64)

from .backbone import Backbone, BackboneConfig, pretrain  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .prompts import SoftPromptBank  # noqa: E402
from .retriever import Retriever, SimilarityScores, select  # noqa: E402
from .trainer import SPTTrainer  # noqa: E402

__all__ = ["Backbone", "BackboneConfig", "pretrain", "RunConfig", "load_config", "SoftPromptBank",
           "Retriever", "SimilarityScores", "select", "SPTTrainer"]
__version__ = "0.1.0"
