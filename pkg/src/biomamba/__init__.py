"""Selective state-space language models on a small numpy autodiff engine."""

from .data import Vocabulary, decode, encode, load_squad_file, train_bpe
from .errors import BioMambaError
from .evaluation import EvalReport, evaluate_corpus, evaluate_qa, perplexity
from .model import LMModel, ModelConfig, generate, init_model, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import TrainConfig, finetune_qa_loop, pretrain_loop

__version__ = "0.1.0"

__all__ = [
    "BioMambaError",
    "EvalReport",
    "LMModel",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "decode",
    "encode",
    "evaluate_corpus",
    "evaluate_qa",
    "finetune_qa_loop",
    "generate",
    "init_model",
    "load_checkpoint",
    "load_squad_file",
    "perplexity",
    "pretrain_loop",
    "save_checkpoint",
    "train_bpe",
]
