"""Loss computations and the gradient-surgery combination rule.

Three losses drive training: the Huber quantile regression loss on the
joint return distribution, a regression loss tying the barrier critic to
empirical discounted-death values, and an invariance loss penalizing
barrier growth along a trajectory. The two task gradients (return vs.
barrier) are merged by projecting each onto the other's normal plane
whenever they conflict.

Every loss has a plain-numpy form (the contract tested against hand
values) and, where training needs gradients, a tape-building twin that is
cross-checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import DiffError, Tape, Tensor
from .mixnet import JointQuantileBatch

__all__ = [
    "GradientPair",
    "LossReport",
    "huber_quantile_loss",
    "huber_quantile_loss_t",
    "empirical_barrier",
    "barrier_invariance_loss",
    "barrier_invariance_loss_t",
    "barrier_regression_loss",
    "barrier_regression_loss_t",
    "pcgrad_combine",
]


@dataclass
class GradientPair:
    """Flattened task gradients plus their combination weights."""

    g_q: np.ndarray
    g_b: np.ndarray
    beta_q: float = 0.5
    beta_b: float = 0.5
    beta_q_plus: float = 0.5
    beta_b_plus: float = 0.5
    cos_theta: float = field(init=False)

    def __post_init__(self):
        self.g_q = np.asarray(self.g_q, dtype=np.float64)
        self.g_b = np.asarray(self.g_b, dtype=np.float64)
        if self.g_q.shape != self.g_b.shape or self.g_q.ndim != 1:
            raise DiffError(
                f"gradient pair: shapes {self.g_q.shape} and {self.g_b.shape} differ"
            )
        nq = float(np.linalg.norm(self.g_q))
        nb = float(np.linalg.norm(self.g_b))
        if nq > 0.0 and nb > 0.0:
            self.cos_theta = float(np.dot(self.g_q, self.g_b) / (nq * nb))
        else:
            self.cos_theta = 0.0

    @property
    def conflict(self) -> bool:
        return float(np.dot(self.g_q, self.g_b)) < 0.0


@dataclass
class LossReport:
    """Per-update bookkeeping for the two losses and their combination."""

    l_q: float
    l_b: float
    grad_norm: float
    conflict: bool


def _huber(delta: np.ndarray, kappa: float) -> np.ndarray:
    small = np.abs(delta) <= kappa
    return np.where(small, 0.5 * delta * delta, kappa * (np.abs(delta) - 0.5 * kappa))


def huber_quantile_loss(pred: JointQuantileBatch, target_samples, kappa: float = 1.0) -> float:
    """Quantile regression loss between K predicted and K' target samples.

    (1/(K*K')) * sum_{k,k'} |tau_k - 1{d<0}| * Huber_kappa(d)/kappa with
    d = target[k'] - pred[k].
    """
    if kappa <= 0:
        raise DiffError(f"huber_quantile_loss: kappa must be > 0, got {kappa}")
    targets = np.asarray(target_samples, dtype=np.float64).ravel()
    if pred.values.size == 0 or targets.size == 0:
        raise DiffError("huber_quantile_loss: empty sample batch")
    delta = targets[None, :] - pred.values[:, None]  # (K, K')
    weight = np.abs(pred.taus[:, None] - (delta < 0.0))
    return float(np.mean(weight * _huber(delta, kappa) / kappa))


def huber_quantile_loss_t(
    tape: Tape,
    pred: Tensor,
    taus: np.ndarray,
    targets: np.ndarray,
    kappa: float = 1.0,
    weights: np.ndarray | None = None,
    total: float | None = None,
) -> Tensor:
    """Tape twin of `huber_quantile_loss` over a batch of steps.

    `pred` is (R, K); `taus` is (R, K); `targets` is (R, K'). `weights`
    (R,) rescales rows (used for padding masks) and `total` overrides the
    normalizing row count, so per-step calls can sum to a global mean.
    """
    r, k = pred.shape
    targets = np.asarray(targets, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    if k == 0 or targets.shape[1] == 0:
        raise DiffError("huber_quantile_loss: empty sample batch")
    kp = targets.shape[1]
    delta = tape.sub(tape.const(targets[:, None, :]), tape.reshape(pred, (r, k, 1)))
    # the indicator weight is piecewise constant in the parameters, so it is
    # evaluated from the forward values and enters as a constant factor
    weight = np.abs(taus[:, :, None] - (delta.data < 0.0))
    if weights is None:
        weights = np.ones(r)
    if total is None:
        total = float(weights.sum())
    scale = weight * weights[:, None, None] / (kappa * k * kp * max(total, 1.0))
    return tape.sum(tape.mul(tape.huber(delta, kappa), tape.const(scale)))


def empirical_barrier(deaths, gamma_b: float) -> np.ndarray:
    """Discounted death counts along a trajectory, by backward recursion.

    out[t] = deaths[t] + gamma_b * out[t+1], with 0 after the terminal step.
    """
    if not (0.0 < gamma_b < 1.0):
        raise DiffError(f"empirical_barrier: gamma_b must be in (0,1), got {gamma_b}")
    deaths = np.asarray(deaths, dtype=np.float64)
    if deaths.size == 0:
        raise DiffError("empirical_barrier: empty death sequence")
    out = np.zeros_like(deaths)
    acc = 0.0
    for t in range(deaths.size - 1, -1, -1):
        acc = deaths[t] + gamma_b * acc
        out[t] = acc
    return out


def barrier_invariance_loss(predicted, lambda_b: float) -> float:
    """Mean hinge on barrier growth: max(B(s') - (1-lambda_b) B(s), 0).

    Averaged over the number of visited states, not pairs.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    if not (0.0 < lambda_b < 1.0):
        raise DiffError(f"barrier_invariance_loss: lambda_b must be in (0,1), got {lambda_b}")
    if predicted.size < 2:
        raise DiffError("barrier_invariance_loss: need at least 2 states")
    terms = np.maximum(predicted[1:] - (1.0 - lambda_b) * predicted[:-1], 0.0)
    return float(terms.sum() / predicted.size)


def barrier_invariance_loss_t(tape: Tape, predicted: Tensor, lambda_b: float) -> Tensor:
    n = predicted.shape[0]
    if n < 2:
        raise DiffError("barrier_invariance_loss: need at least 2 states")
    nxt = tape.narrow(predicted, 0, 1, n)
    prev = tape.narrow(predicted, 0, 0, n - 1)
    hinge = tape.relu(tape.sub(nxt, tape.mul(prev, 1.0 - lambda_b)))
    return tape.mul(tape.sum(hinge), 1.0 / n)


def barrier_regression_loss(predicted, empirical) -> float:
    """Mean squared error between critic predictions and empirical values."""
    predicted = np.asarray(predicted, dtype=np.float64)
    empirical = np.asarray(empirical, dtype=np.float64)
    if predicted.shape != empirical.shape:
        raise DiffError(
            f"barrier_regression_loss: lengths {predicted.shape} != {empirical.shape}"
        )
    return float(np.mean((predicted - empirical) ** 2))


def barrier_regression_loss_t(tape: Tape, predicted: Tensor, empirical: np.ndarray) -> Tensor:
    empirical = np.asarray(empirical, dtype=np.float64)
    if predicted.shape != empirical.shape:
        raise DiffError(
            f"barrier_regression_loss: lengths {predicted.shape} != {empirical.shape}"
        )
    diff = tape.sub(predicted, tape.const(empirical))
    return tape.mean(tape.mul(diff, diff))


def pcgrad_combine(pair: GradientPair) -> np.ndarray:
    """Merge the two task gradients, projecting away conflicts.

    When the gradients conflict (negative inner product) each is projected
    onto the normal plane of the other before the weighted sum; otherwise
    the weighted sum is taken directly. A zero gradient on either side
    short-circuits to the weighted other, since the projections divide by
    squared norms.
    """
    gq, gb = pair.g_q, pair.g_b
    nq2 = float(np.dot(gq, gq))
    nb2 = float(np.dot(gb, gb))
    if nq2 == 0.0:
        return pair.beta_b * gb
    if nb2 == 0.0:
        return pair.beta_q * gq
    dot = float(np.dot(gq, gb))
    if dot < 0.0:
        gq_plus = gq - (dot / nb2) * gb
        gb_plus = gb - (dot / nq2) * gq
        return pair.beta_q_plus * gq_plus + pair.beta_b_plus * gb_plus
    return pair.beta_q * gq + pair.beta_b * gb
