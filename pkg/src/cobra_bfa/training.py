"""Full-batch gradient descent for the victim model."""

import logging
from dataclasses import dataclass

import numpy as np

from .grad_engine import backward
from .ssm_model import ModelParams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.05
    # global gradient-norm clip; keeps the Euler scan out of its unstable regime
    clip_norm: float = 1.0


def train(params, batch, cfg, log_every=100):
    """Run ``cfg.steps`` descent steps on ``batch``; returns ``(params, losses)``.

    ``losses[i]`` is the loss before update ``i``; a final entry holds the loss of
    the returned parameters. ``lr == 0`` leaves every tensor bit-identical.
    """
    params = params.astype(np.float64)
    losses = []
    for step in range(cfg.steps):
        loss, grads = backward(params, batch)
        losses.append(loss)
        if step % log_every == 0:
            log.info("step %d loss %.6f", step, loss)
        if cfg.lr == 0:
            continue
        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.grads.values()))
        step_size = cfg.lr * min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else cfg.lr
        params = ModelParams.from_named(
            params.config, {k: v - step_size * grads[k] for k, v in params.named_tensors().items()})
    losses.append(backward(params, batch)[0])
    return params, losses
