"""Bit-flip attack toolkit for toy Mamba-style state-space language models."""

from .container import EncodedModel, load_model, save_model
from .fault_injector import BitLocation, FlipSet, bflip_loss
from .ssm_model import ModelConfig, ModelParams, TokenBatch, forward_logits, init_params

__version__ = "0.1.0"
