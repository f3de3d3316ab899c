"""Centralized mixer: mean-shape dueling factorization plus barrier critic.

The joint return samples decompose into a mean path and a shape path:

    Z_joint[k] = sum_i V_i + sum_i lam_i * A_i + sum_i (Z_i[k] - Q_i)

where V_i is each agent's best mean value, A_i = Q_i - V_i <= 0 is the
advantage of the chosen action, and the lambda weights are strictly
positive (softplus plus a floor), which preserves argmax consistency
between the joint mean and the per-agent greedy actions. The shape path
sums the agents' zero-mean quantile residuals index-wise at shared tau
levels.

A linear barrier head shares the mixer's state encoder and predicts the
discounted-casualty barrier value of a state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DiffError, ParameterStore, Tape, Tensor
from .policynet import QuantileBatch

__all__ = ["MixerConfig", "JointQuantileBatch", "MixerNet", "combine_joint"]

LAMBDA_MIN = 1e-3


@dataclass
class MixerConfig:
    state_len: int
    obs_len: int  # per-agent feature block fed to the lambda hypernet
    n_actions: int
    n_agents: int
    hidden_dim: int = 64

    def validate(self) -> None:
        for name in ("state_len", "obs_len", "n_actions", "n_agents", "hidden_dim"):
            if getattr(self, name) < 1:
                raise DiffError(f"mixer config: {name} must be >= 1")


@dataclass
class JointQuantileBatch:
    """Sampled joint returns at shared tau levels."""

    taus: np.ndarray  # (K,)
    values: np.ndarray  # (K,)

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.taus.shape != self.values.shape or self.taus.ndim != 1:
            raise DiffError("joint quantile batch: taus and values must align 1-D")

    def q_value(self) -> float:
        return float(self.values.mean())


def combine_joint(v: np.ndarray, a: np.ndarray, lam: np.ndarray,
                  z_chosen: np.ndarray, q_chosen: np.ndarray) -> np.ndarray:
    """Pure mean-shape combination; `z_chosen` is (n, K), the rest (n,)."""
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    z_chosen = np.atleast_2d(np.asarray(z_chosen, dtype=np.float64))
    q_chosen = np.asarray(q_chosen, dtype=np.float64)
    mean_path = v.sum() + (lam * a).sum()
    shape_path = (z_chosen - q_chosen[:, None]).sum(axis=0)
    return mean_path + shape_path


class MixerNet:
    """Learned pieces of the factorization: lambda hypernet + barrier head."""

    def __init__(self, cfg: MixerConfig, store: ParameterStore,
                 rng: np.random.Generator, prefix: str = "mixer"):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        h = cfg.hidden_dim
        feat = h + cfg.obs_len + cfg.n_actions

        def u(shape, scale):
            return rng.uniform(-scale, scale, size=shape)

        p = {
            "enc_w": u((cfg.state_len, h), 1.0 / np.sqrt(cfg.state_len)),
            "enc_b": u((1, h), 1.0 / np.sqrt(cfg.state_len)),
            "lam_w1": u((feat, h), 1.0 / np.sqrt(feat)),
            "lam_b1": u((1, h), 1.0 / np.sqrt(feat)),
            "lam_w2": u((h, 1), 1.0 / np.sqrt(h)),
            "lam_b2": np.zeros((1, 1)),
            "bar_w": u((h, 1), 1.0 / np.sqrt(h)),
            "bar_b": np.zeros((1, 1)),
        }
        for name, arr in p.items():
            store.add(f"{prefix}.{name}", arr)
        self.store = store

    def _p(self, tape: Tape, name: str) -> Tensor:
        return tape.param(f"{self.prefix}.{name}")

    def bound_to(self, store: ParameterStore) -> "MixerNet":
        """Same architecture reading another store (e.g. target parameters)."""
        clone = object.__new__(MixerNet)
        clone.cfg, clone.prefix, clone.store = self.cfg, self.prefix, store
        return clone

    # ------------------------------------------------------------- tape path

    def encode_t(self, tape: Tape, state: Tensor) -> Tensor:
        if state.shape[1] != self.cfg.state_len:
            raise DiffError(
                f"mixer: state width {state.shape[1]} != {self.cfg.state_len}"
            )
        return tape.relu(tape.matmul(state, self._p(tape, "enc_w"))
                         + self._p(tape, "enc_b"))

    def lambda_rows_t(self, tape: Tape, enc: Tensor, agent_feats: Tensor) -> Tensor:
        """Positive weight per row from encoded state + one agent's features."""
        x = tape.concat([enc, agent_feats], axis=1)
        hidden = tape.relu(tape.matmul(x, self._p(tape, "lam_w1"))
                           + self._p(tape, "lam_b1"))
        raw = tape.matmul(hidden, self._p(tape, "lam_w2")) + self._p(tape, "lam_b2")
        return tape.softplus(raw) + LAMBDA_MIN

    def barrier_rows_t(self, tape: Tape, enc: Tensor) -> Tensor:
        return tape.matmul(enc, self._p(tape, "bar_w")) + self._p(tape, "bar_b")

    @staticmethod
    def mix_rows_t(tape: Tape, v: Tensor, a: Tensor, lam: Tensor,
                   z_chosen: Tensor, q_chosen: Tensor) -> Tensor:
        """Batched combination: inputs (R, n) / (R, n, K) -> samples (R, K)."""
        r, n, k = z_chosen.shape
        mean_path = tape.sum(v, axis=1) + tape.sum(tape.mul(lam, a), axis=1)
        resid = tape.sub(z_chosen, tape.reshape(q_chosen, (r, n, 1)))
        shape_path = tape.sum(resid, axis=1)
        return tape.add(tape.reshape(mean_path, (r, 1)), shape_path)

    # ------------------------------------------------------- numpy wrappers

    def lambda_weights(self, state, per_agent_features) -> np.ndarray:
        """One positive weight per agent; each >= LAMBDA_MIN."""
        state = np.asarray(state, dtype=np.float64).reshape(1, -1)
        feats = np.atleast_2d(np.asarray(per_agent_features, dtype=np.float64))
        n = feats.shape[0]
        if n < 1:
            raise DiffError("lambda_weights: need at least one agent")
        tape = Tape(self.store)
        enc = self.encode_t(tape, tape.const(np.repeat(state, n, axis=0)))
        lam = self.lambda_rows_t(tape, enc, tape.const(feats))
        return lam.data.ravel()

    def predict_barrier(self, state) -> float:
        state = np.asarray(state, dtype=np.float64).reshape(1, -1)
        tape = Tape(self.store)
        return self.barrier_rows_t(tape, self.encode_t(tape, tape.const(state))).item()

    def mix_joint_distribution(self, v, a, z_batches: list[QuantileBatch],
                               state, per_agent_features) -> JointQuantileBatch:
        """Factorize chosen-action local distributions into joint samples.

        Each agent supplies its K samples at shared tau levels (restricted
        to the chosen action); Q_i is taken as the sample mean.
        """
        if not z_batches:
            raise DiffError("mix_joint_distribution: no agent batches")
        taus = z_batches[0].taus
        for zb in z_batches[1:]:
            if zb.taus.shape != taus.shape or not np.array_equal(zb.taus, taus):
                raise DiffError("mix_joint_distribution: tau levels differ across agents")
        z = np.stack([zb.values.ravel() for zb in z_batches])  # (n, K)
        if z.shape[1] != taus.size:
            raise DiffError("mix_joint_distribution: sample count mismatch")
        q = z.mean(axis=1)
        lam = self.lambda_weights(state, per_agent_features)
        values = combine_joint(np.asarray(v), np.asarray(a), lam, z, q)
        return JointQuantileBatch(taus, values)
