"""Structured prune-and-restore for a desk-scale next-item transformer."""

from .config import PipelineConfig, load_config
from .errors import (ChecksumError, ContractError, DimensionError, FormatError, NonFiniteError,
                     PlanError, TokenIndexError)
from .metrics import EvalReport, evaluate, hr_at_k, ndcg_at_k
from .model import ModelConfig, TransformerModel, forward, init_model
from .prune import PruningPlan, apply_plan, param_count
from .recdata import GeneratorConfig, RecDataset, generate

__version__ = "0.1.0"
