"""Desk-scale laboratory for step-supervised implicit chain-of-thought reasoning."""

from .model import ModelConfig, ModelParams, init_params, last_hidden, lm_logits
from .reasoner import (
    GenerationResult,
    LatentChain,
    SoftThinkConfig,
    answer_log_prob,
    build_latents,
    generate_answer,
    soft_think_mix,
)
from .supervisor import (
    DecoderParams,
    LossWeights,
    StepBatch,
    answer_loss,
    build_step_batch,
    init_decoder,
    step_loss,
    total_loss,
)
from .taskgen import GenSpec, ReasoningSample, VocabSpec, evaluate_chain, generate
from .tensor import Tensor, backward, no_grad
from .trainer import RunState, TrainConfig, curriculum_k, evaluate, train

__version__ = "0.1.0"
