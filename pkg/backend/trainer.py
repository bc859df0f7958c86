# backend/trainer.py

"""
Training loops for the toy tutor policy.

sft_train fits gold annotations by negative log-likelihood. lhp_train
optimizes a DPO, IPO or KTO objective against a frozen reference copy,
pushing the loss gradients through the annotation log-probabilities.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Tuple

import numpy as np

from backend.errors import EmptyDataset
from backend.losses import (ALGOS, QuadLogProbs, batch_objective, check_beta,
                            kto_examples_from_quads)
from backend.optimizer import OptimizerState, optimizer_step
from backend.policy import PARAM_NAMES
from backend.prefgen import build_context
from backend.schema import Conversation, ConversationTurn
from utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 16
    epochs: int = 3
    weight_decay: float = 0.05
    warmup_ratio: float = 0.1
    seed: int = 13
    beta: float = 0.1
    algo: str = "dpo"
    lambda_d: float = 1.0
    lambda_u: float = 1.0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        if self.algo not in ALGOS:
            raise ValueError(f"Unknown algorithm: {self.algo}")
        check_beta(self.beta)
        if self.lambda_d <= 0 or self.lambda_u <= 0:
            raise ValueError("KTO weights must be positive")

    @classmethod
    def from_section(cls, section):
        """Build from a config section, ignoring keys that are not training settings."""
        known = {f.name for f in fields(cls)}
        values = {key: value for key, value in section.items() if key in known}
        if "adam_betas" in values:
            values["adam_betas"] = tuple(values["adam_betas"])
        return cls(**values)

    def to_record(self):
        record = asdict(self)
        record["adam_betas"] = list(self.adam_betas)
        return record


def sft_examples(convs):
    """(Context, gold annotation) for every turn of every conversation."""
    return [(build_context(conv, turn.index), turn.tutor) for conv in convs for turn in conv.turns]


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def sft_train(policy, examples, cfg: TrainConfig):
    """
    Supervised fine-tuning on gold annotations.

    The input policy is left untouched; training runs on a copy.

    Args:
        policy: ToyTutorPolicy to start from
        examples: list of (Context, TutorAnnotation)
        cfg: TrainConfig

    Returns:
        Tuple of (trained policy, per-epoch mean negative log-likelihood)
    """
    if not examples:
        raise EmptyDataset("SFT needs at least one example")
    policy = policy.copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(examples)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    state = OptimizerState.zeros_like(policy.params())

    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        nll = 0.0
        for batch in _batches(rng.permutation(n), cfg.batch_size):
            grads = policy.zero_grads()
            weight = -1.0 / len(batch)
            for i in batch:
                ctx, ann = examples[i]
                nll -= policy.accumulate_logprob_grad(ctx, ann, weight, grads)
            optimizer_step(policy.params(), grads, state, cfg, step / total_steps)
            step += 1
        curve.append(nll / n)
        logger.info(f"SFT epoch {epoch}/{cfg.epochs}: mean NLL {curve[-1]:.4f}")
    return policy, curve


def reference_logprobs(reference, pairs):
    """[n_pairs x 2] log-probs of (chosen, rejected) under the frozen reference."""
    return np.array([[reference.annotation_logprob(p.context, p.chosen),
                      reference.annotation_logprob(p.context, p.rejected)] for p in pairs])


def preference_objective(policy, pairs, ref_lp, algo, beta, lambda_d=1.0, lambda_u=1.0, ref_points=None):
    """
    Batch objective of a preference algorithm and its gradient w.r.t. the policy parameters.

    Args:
        policy: trainable ToyTutorPolicy
        pairs: list of PreferencePair
        ref_lp: reference log-probs as returned by reference_logprobs
        algo, beta, lambda_d, lambda_u: objective settings
        ref_points: KTO reference points to hold fixed

    Returns:
        Tuple of (BatchObjective, name -> gradient array)
    """
    quads = [QuadLogProbs(policy.annotation_logprob(p.context, p.chosen), float(ref_lp[i][0]),
                          policy.annotation_logprob(p.context, p.rejected), float(ref_lp[i][1]))
             for i, p in enumerate(pairs)]

    grads = policy.zero_grads()
    if algo == "kto":
        # singletons alternate chosen (desirable), rejected (undesirable)
        objective = batch_objective(kto_examples_from_quads(quads), algo, beta, lambda_d, lambda_u, ref_points)
        for i, p in enumerate(pairs):
            policy.accumulate_logprob_grad(p.context, p.chosen, objective.grads[2 * i][0], grads)
            policy.accumulate_logprob_grad(p.context, p.rejected, objective.grads[2 * i + 1][0], grads)
    else:
        objective = batch_objective(quads, algo, beta)
        for i, p in enumerate(pairs):
            policy.accumulate_logprob_grad(p.context, p.chosen, objective.grads[i][0], grads)
            policy.accumulate_logprob_grad(p.context, p.rejected, objective.grads[i][1], grads)
    return objective, grads


def lhp_train(policy, reference, pairs, cfg: TrainConfig):
    """
    Preference optimization (cfg.algo) against a frozen reference.

    Returns:
        Tuple of (trained policy copy, per-epoch mean margin)
    """
    if not pairs:
        raise EmptyDataset("preference training needs at least one pair")
    policy = policy.copy()
    ref_lp = reference_logprobs(reference, pairs)
    rng = np.random.default_rng(cfg.seed)
    n = len(pairs)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    state = OptimizerState.zeros_like(policy.params())

    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        margins = []
        losses = []
        for batch in _batches(rng.permutation(n), cfg.batch_size):
            objective, grads = preference_objective(policy, [pairs[i] for i in batch], ref_lp[batch],
                                                    cfg.algo, cfg.beta, cfg.lambda_d, cfg.lambda_u)
            margins.extend(objective.margins.tolist())
            losses.append(objective.mean_loss)
            optimizer_step(policy.params(), grads, state, cfg, step / total_steps)
            step += 1
        curve.append(float(np.mean(margins)))
        logger.info(f"{cfg.algo.upper()} epoch {epoch}/{cfg.epochs}: "
                    f"mean loss {np.mean(losses):.4f}, mean margin {curve[-1]:.4f}")
    return policy, curve


def evaluate_objective(policy, reference, pairs, algo, beta, lambda_d=1.0, lambda_u=1.0):
    """Objective over the whole pair set, without gradient bookkeeping for the caller."""
    objective, _ = preference_objective(policy, pairs, reference_logprobs(reference, pairs),
                                        algo, beta, lambda_d, lambda_u)
    return objective


def parameter_grad_check(policy, reference, pairs, algo, beta, n_params=20, eps=1e-4, seed=0,
                         lambda_d=1.0, lambda_u=1.0):
    """
    Central-difference check of preference_objective's parameter gradient.

    Samples n_params entries among those with a nonzero analytic gradient.
    The policy is restored exactly afterwards.

    Returns:
        max of |analytic - numeric| / max(1, |analytic|) over the sampled entries
    """
    ref_lp = reference_logprobs(reference, pairs)
    base, grads = preference_objective(policy, pairs, ref_lp, algo, beta, lambda_d, lambda_u)
    ref_points = base.ref_points if algo == "kto" else None

    candidates = [(name, tuple(idx)) for name in PARAM_NAMES for idx in np.argwhere(grads[name] != 0)]
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_params, len(candidates)), replace=False)

    def loss_at(name, idx, value):
        table = policy.params()[name]
        original = table[idx]
        table[idx] = value
        try:
            return preference_objective(policy, pairs, ref_lp, algo, beta, lambda_d, lambda_u, ref_points)[0].mean_loss
        finally:
            table[idx] = original

    worst = 0.0
    for k in picks:
        name, idx = candidates[int(k)]
        center = policy.params()[name][idx]
        numeric = (loss_at(name, idx, center + eps) - loss_at(name, idx, center - eps)) / (2.0 * eps)
        analytic = grads[name][idx]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return float(worst)


def annotate_stream(policy, convs):
    """
    The policy's own tutor turns for each conversation, under the gold history.

    Student turns and earlier gold tutor turns form each context, so the
    output aligns turn by turn with the input.
    """
    annotated = []
    for conv in sorted(convs, key=lambda c: c.id):
        turns = tuple(ConversationTurn(index=turn.index, student_utterance=turn.student_utterance,
                                       tutor=policy.annotate(build_context(conv, turn.index)))
                      for turn in conv.turns)
        annotated.append(Conversation(id=conv.id, question=conv.question, turns=turns))
    return annotated
