# backend/losses.py

"""
DPO, IPO and KTO objectives over sequence log-probabilities.

Every loss returns its value together with the analytic gradient with
respect to the policy log-probabilities; the reference model is frozen.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np

from backend.errors import EmptyBatch, InvalidBeta
from utils.logger import get_logger

logger = get_logger(__name__)

ALGOS = ("dpo", "ipo", "kto")


@dataclass(frozen=True)
class QuadLogProbs:
    lp_policy_chosen: float
    lp_ref_chosen: float
    lp_policy_rejected: float
    lp_ref_rejected: float

    def __post_init__(self):
        for name in ("lp_policy_chosen", "lp_ref_chosen", "lp_policy_rejected", "lp_ref_rejected"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def chosen_logratio(self):
        return self.lp_policy_chosen - self.lp_ref_chosen

    @property
    def rejected_logratio(self):
        return self.lp_policy_rejected - self.lp_ref_rejected

    def policy_inputs(self):
        return np.array([self.lp_policy_chosen, self.lp_policy_rejected])

    def with_policy(self, values):
        return QuadLogProbs(float(values[0]), self.lp_ref_chosen, float(values[1]), self.lp_ref_rejected)


class KtoLabel(str, Enum):
    DESIRABLE = "desirable"
    UNDESIRABLE = "undesirable"


@dataclass(frozen=True)
class KtoExample:
    lp_policy: float
    lp_ref: float
    label: KtoLabel

    def __post_init__(self):
        if not (math.isfinite(self.lp_policy) and math.isfinite(self.lp_ref)):
            raise ValueError("KTO log-probabilities must be finite")

    @property
    def logratio(self):
        return self.lp_policy - self.lp_ref

    def policy_inputs(self):
        return np.array([self.lp_policy])

    def with_policy(self, values):
        return KtoExample(float(values[0]), self.lp_ref, self.label)


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class BatchObjective:
    """Mean loss, per-example gradients (already divided by the batch size) and margin stats."""
    algo: str
    beta: float
    mean_loss: float
    grads: np.ndarray
    margins: np.ndarray
    losses: np.ndarray
    ref_points: np.ndarray

    @property
    def margin_mean(self):
        return float(np.mean(self.margins))

    @property
    def margin_min(self):
        return float(np.min(self.margins))

    @property
    def margin_max(self):
        return float(np.max(self.margins))

    def to_record(self):
        return {
            "algo": self.algo,
            "beta": self.beta,
            "mean_loss": self.mean_loss,
            "margin_mean": self.margin_mean,
            "margin_min": self.margin_min,
            "margin_max": self.margin_max,
        }


def check_beta(beta):
    """Return beta as float, raising InvalidBeta unless it is a finite positive number."""
    value = float(beta)
    if not (math.isfinite(value) and value > 0):
        raise InvalidBeta(beta)
    return value


def softplus(x):
    """log(1 + e^x) without overflow."""
    return float(np.logaddexp(0.0, x))


def sigmoid(x):
    return math.exp(-softplus(-x))


def dpo_margin(q: QuadLogProbs, beta):
    """W - L, the beta-scaled difference of chosen and rejected log-ratios."""
    return beta * q.chosen_logratio - beta * q.rejected_logratio


def dpo_loss(q: QuadLogProbs, beta) -> LossResult:
    """-log sigmoid(W - L); gradient w.r.t. (policy chosen, policy rejected)."""
    beta = check_beta(beta)
    margin = dpo_margin(q, beta)
    loss = softplus(-margin)
    weight = beta * sigmoid(-margin)
    return LossResult(loss, np.array([-weight, weight]))


def ipo_margin(q: QuadLogProbs):
    """h, the unscaled difference of chosen and rejected log-ratios."""
    return q.chosen_logratio - q.rejected_logratio


def ipo_loss(q: QuadLogProbs, beta) -> LossResult:
    """(h - 1/(2 beta))^2; gradient w.r.t. (policy chosen, policy rejected)."""
    beta = check_beta(beta)
    gap = ipo_margin(q) - 1.0 / (2.0 * beta)
    return LossResult(gap * gap, np.array([2.0 * gap, -2.0 * gap]))


def kto_loss(ex: KtoExample, beta, ref_point=0.0, lambda_d=1.0, lambda_u=1.0) -> LossResult:
    """
    Prospect-style loss on a single labelled response.

    desirable:   lambda_d * (1 - sigmoid(beta * (r - ref_point)))
    undesirable: lambda_u * (1 - sigmoid(beta * (ref_point - r)))

    with r the policy/reference log-ratio. ref_point is treated as a constant.
    """
    beta = check_beta(beta)
    if lambda_d <= 0 or lambda_u <= 0:
        raise ValueError("KTO weights must be positive")
    r = ex.logratio
    if ex.label is KtoLabel.DESIRABLE:
        z = beta * (r - ref_point)
        loss = lambda_d * sigmoid(-z)
        grad = -lambda_d * beta * sigmoid(z) * sigmoid(-z)
    else:
        z = beta * (ref_point - r)
        loss = lambda_u * sigmoid(-z)
        grad = lambda_u * beta * sigmoid(z) * sigmoid(-z)
    return LossResult(loss, np.array([grad]))


def kto_examples_from_quads(quads):
    """Split pairs into singletons: chosen -> desirable, rejected -> undesirable."""
    examples = []
    for q in quads:
        examples.append(KtoExample(q.lp_policy_chosen, q.lp_ref_chosen, KtoLabel.DESIRABLE))
        examples.append(KtoExample(q.lp_policy_rejected, q.lp_ref_rejected, KtoLabel.UNDESIRABLE))
    return examples


def kto_reference_points(examples: List[KtoExample]):
    """
    Leave-one-out reference point per example: max(0, mean log-ratio of the others).

    A batch of one gets 0.
    """
    n = len(examples)
    if n == 1:
        return np.zeros(1)
    ratios = np.array([ex.logratio for ex in examples])
    loo_mean = (ratios.sum() - ratios) / (n - 1)
    return np.maximum(0.0, loo_mean)


def batch_objective(items, algo, beta, lambda_d=1.0, lambda_u=1.0, ref_points=None) -> BatchObjective:
    """
    Mean loss over a batch with per-example gradients scaled by 1/batch.

    Args:
        items: QuadLogProbs for dpo/ipo, KtoExample for kto
        algo: "dpo", "ipo" or "kto"
        beta: KL-penalty strength
        lambda_d, lambda_u: KTO weights
        ref_points: KTO reference points to hold fixed (computed from the batch when None)

    Raises:
        EmptyBatch, ValueError (unknown algo or wrong item type)
    """
    if not items:
        raise EmptyBatch("batch is empty")
    beta = check_beta(beta)
    n = len(items)

    if algo in ("dpo", "ipo"):
        if not all(isinstance(item, QuadLogProbs) for item in items):
            raise ValueError(f"{algo} needs QuadLogProbs inputs")
        loss_fn = dpo_loss if algo == "dpo" else ipo_loss
        results = [loss_fn(q, beta) for q in items]
        if algo == "dpo":
            margins = np.array([dpo_margin(q, beta) for q in items])
        else:
            margins = np.array([ipo_margin(q) for q in items])
        refs = np.zeros(n)
    elif algo == "kto":
        if not all(isinstance(item, KtoExample) for item in items):
            raise ValueError("kto needs KtoExample inputs")
        refs = kto_reference_points(items) if ref_points is None else np.asarray(ref_points, dtype=float)
        results = [kto_loss(ex, beta, refs[i], lambda_d, lambda_u) for i, ex in enumerate(items)]
        margins = np.array([ex.logratio for ex in items])
    else:
        raise ValueError(f"Unknown algorithm: {algo} (expected one of {', '.join(ALGOS)})")

    losses = np.array([res.loss for res in results])
    grads = np.stack([res.grad for res in results]) / n
    return BatchObjective(algo, beta, float(np.mean(losses)), grads, margins, losses, refs)


def single_loss(algo, point, beta, ref_point=0.0, lambda_d=1.0, lambda_u=1.0) -> LossResult:
    if algo == "dpo":
        return dpo_loss(point, beta)
    if algo == "ipo":
        return ipo_loss(point, beta)
    if algo == "kto":
        return kto_loss(point, beta, ref_point, lambda_d, lambda_u)
    raise ValueError(f"Unknown algorithm: {algo}")


def grad_check(algo, point, beta, eps=1e-5, ref_point=0.0, lambda_d=1.0, lambda_u=1.0):
    """
    Compare the analytic gradient to central differences.

    Returns:
        max over policy coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = single_loss(algo, point, beta, ref_point, lambda_d, lambda_u).grad
    base = point.policy_inputs()
    worst = 0.0
    for i in range(len(base)):
        up = base.copy()
        down = base.copy()
        up[i] += eps
        down[i] -= eps
        f_up = single_loss(algo, point.with_policy(up), beta, ref_point, lambda_d, lambda_u).loss
        f_down = single_loss(algo, point.with_policy(down), beta, ref_point, lambda_d, lambda_u).loss
        numeric = (f_up - f_down) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
