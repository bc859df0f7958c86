# backend/optimizer.py

"""
AdamW over named numpy parameter tables, with a linear-warmup cosine schedule.
"""

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from backend.errors import ShapeMismatch

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter and the step counter."""
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({name: np.zeros_like(p) for name, p in params.items()},
                   {name: np.zeros_like(p) for name, p in params.items()},
                   0)


def lr_scale(step_fraction, warmup_ratio):
    """
    Learning-rate multiplier at a point of training.

    Linear from 0 to 1 over [0, warmup_ratio], then cosine from 1 down to 0
    at step_fraction = 1.
    """
    step_fraction = min(max(float(step_fraction), 0.0), 1.0)
    if warmup_ratio > 0 and step_fraction < warmup_ratio:
        return step_fraction / warmup_ratio
    if warmup_ratio >= 1.0:
        return 1.0
    progress = (step_fraction - warmup_ratio) / (1.0 - warmup_ratio)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _check_shapes(params, grads, state):
    for name, p in params.items():
        if name not in grads:
            raise ShapeMismatch(f"No gradient for parameter {name}")
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"Gradient for {name} has shape {grads[name].shape}, parameter has {p.shape}")
        for moments in (state.exp_avg, state.exp_avg_sq):
            if name in moments and moments[name].shape != p.shape:
                raise ShapeMismatch(f"Optimizer state for {name} has shape {moments[name].shape}, parameter has {p.shape}")
    extra = set(grads) - set(params)
    if extra:
        raise ShapeMismatch(f"Gradients for unknown parameters: {', '.join(sorted(extra))}")


def optimizer_step(params, grads, state: OptimizerState, cfg, step_fraction):
    """
    One AdamW update, applied in place.

    Args:
        params: name -> parameter array (updated in place)
        grads: name -> gradient of the loss to minimize
        state: moments and step counter (updated in place)
        cfg: anything with learning_rate, weight_decay and warmup_ratio
        step_fraction: position in training, 0 at the first step, 1 at the end

    Returns:
        Tuple of (params, state)
    """
    _check_shapes(params, grads, state)
    beta1, beta2 = getattr(cfg, "adam_betas", DEFAULT_BETAS)
    eps = getattr(cfg, "adam_eps", DEFAULT_EPS)
    lr = cfg.learning_rate * lr_scale(step_fraction, cfg.warmup_ratio)

    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.setdefault(name, np.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        # decoupled weight decay
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return params, state
