"""Per-agent local policy: recurrent quantile network with a hypernet input.

The input layer's weights are generated by a small hypernetwork from the
previous step's return distribution (the quantile values of the action
actually taken, zeros at episode start) and clamped non-negative by a
ReLU. A gated recurrent cell handles partial observability. Returns are
modeled as quantile samples: values at K sampled quantile levels per
action, with Q as the sample mean, V as the best Q over legal actions and
A = Q - V (so A <= 0 with equality exactly at the greedy action).

All agents share one parameter set; an agent-id one-hot is appended to
the raw observation before it reaches the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DiffError, ParameterStore, Tape, Tensor

__all__ = ["PolicyConfig", "QuantileBatch", "LocalPolicyNet", "augment_obs"]

MASK_OFFSET = -1e9  # added to illegal actions before any argmax / max


@dataclass
class PolicyConfig:
    obs_len: int  # raw environment observation length
    n_actions: int
    n_agents: int
    hidden_dim: int = 64  # input layer width
    rnn_hidden_dim: int = 64
    embed_dim: int = 64  # cosine basis size for the quantile embedding
    n_quantiles: int = 8

    @property
    def in_len(self) -> int:
        return self.obs_len + self.n_agents

    def validate(self) -> None:
        for name in ("obs_len", "n_actions", "n_agents", "hidden_dim",
                     "rnn_hidden_dim", "embed_dim", "n_quantiles"):
            if getattr(self, name) < 1:
                raise DiffError(f"policy config: {name} must be >= 1")


@dataclass
class QuantileBatch:
    """Sampled returns per action at sampled quantile levels."""

    taus: np.ndarray  # (K,), strictly inside (0, 1)
    values: np.ndarray  # (K, n_actions)

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.taus.ndim != 1 or self.taus.size < 1:
            raise DiffError("quantile batch: need at least one tau level")
        if np.any(self.taus <= 0.0) or np.any(self.taus >= 1.0):
            raise DiffError("quantile batch: tau levels must lie strictly in (0,1)")
        if self.values.shape[0] != self.taus.size:
            raise DiffError(
                f"quantile batch: {self.values.shape[0]} sample rows for "
                f"{self.taus.size} tau levels"
            )
        if not np.all(np.isfinite(self.values)):
            raise DiffError("quantile batch: non-finite values")

    def q_values(self) -> np.ndarray:
        return self.values.mean(axis=0)


def augment_obs(obs: np.ndarray, agent_ids: np.ndarray, n_agents: int) -> np.ndarray:
    """Append agent-id one-hots to a (R, obs_len) block of observations."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    ids = np.asarray(agent_ids, dtype=np.int64).ravel()
    onehot = np.zeros((obs.shape[0], n_agents))
    onehot[np.arange(obs.shape[0]), ids] = 1.0
    return np.concatenate([obs, onehot], axis=1)


def cosine_basis(taus: np.ndarray, embed_dim: int) -> np.ndarray:
    """cos(pi * i * tau) for i = 0..embed_dim-1; shape (..., embed_dim)."""
    taus = np.asarray(taus, dtype=np.float64)
    i = np.arange(embed_dim, dtype=np.float64)
    return np.pi * taus[..., None] * i  # angles; the tape applies cos


class LocalPolicyNet:
    """Shared local policy network over a parameter store.

    The same forward code serves single-agent acting (rows = agents) and
    batched training (rows = batch * agents), with hidden state and the
    previous-action distribution carried either as constants or as live
    tensors on the training tape.
    """

    def __init__(self, cfg: PolicyConfig, store: ParameterStore,
                 rng: np.random.Generator, prefix: str = "policy"):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        k, h, hr, d = cfg.n_quantiles, cfg.hidden_dim, cfg.rnn_hidden_dim, cfg.embed_dim
        in_len, a = cfg.in_len, cfg.n_actions

        def u(shape, scale):
            return rng.uniform(-scale, scale, size=shape)

        p = {}
        # hypernetwork: prev return dist (K,) -> input weight matrix (h, in_len)
        p["hyper_w"] = u((k, h * in_len), 1.0 / np.sqrt(k))
        # positive bias so the generated weights are active at episode start
        p["hyper_b"] = rng.uniform(0.05, 1.0, size=h * in_len) / np.sqrt(in_len)
        p["in_b"] = u((1, h), 1.0 / np.sqrt(in_len))
        # gated recurrent cell, gates packed [reset | update | candidate]
        p["gru_wx"] = u((h, 3 * hr), 1.0 / np.sqrt(h))
        p["gru_wh"] = u((hr, 3 * hr), 1.0 / np.sqrt(hr))
        p["gru_b"] = np.zeros((1, 3 * hr))
        # quantile embedding and output head
        p["embed_w"] = u((d, hr), 1.0 / np.sqrt(d))
        p["embed_b"] = u((1, hr), 1.0 / np.sqrt(d))
        p["out_w"] = u((hr, a), 1.0 / np.sqrt(hr))
        p["out_b"] = np.zeros((1, a))
        for name, arr in p.items():
            store.add(f"{prefix}.{name}", arr)
        self.store = store

    def _p(self, tape: Tape, name: str) -> Tensor:
        return tape.param(f"{self.prefix}.{name}")

    def bound_to(self, store: ParameterStore) -> "LocalPolicyNet":
        """Same architecture reading another store (e.g. target parameters)."""
        clone = object.__new__(LocalPolicyNet)
        clone.cfg, clone.prefix, clone.store = self.cfg, self.prefix, store
        return clone

    def zero_hidden(self, rows: int) -> np.ndarray:
        return np.zeros((rows, self.cfg.rnn_hidden_dim))

    def zero_prev(self, rows: int) -> np.ndarray:
        return np.zeros((rows, self.cfg.n_quantiles))

    # ------------------------------------------------------------- forward

    def input_weights_t(self, tape: Tape, prev: Tensor) -> Tensor:
        """Non-negative input-layer weights, flattened per row."""
        return tape.relu(tape.matmul(prev, self._p(tape, "hyper_w"))
                         + self._p(tape, "hyper_b"))

    def forward_rows(self, tape: Tape, obs: Tensor, prev: Tensor, hidden: Tensor,
                     taus: np.ndarray) -> tuple[Tensor, Tensor]:
        """One step for R rows: returns (values (R, K, A), next hidden)."""
        cfg = self.cfg
        r = obs.shape[0]
        k = np.asarray(taus).shape[-1]
        if obs.shape[1] != cfg.in_len:
            raise DiffError(
                f"policy forward: obs width {obs.shape[1]} != {cfg.in_len}"
            )
        wflat = self.input_weights_t(tape, prev)
        x = tape.relu(tape.batched_matvec(wflat, obs, cfg.hidden_dim)
                      + self._p(tape, "in_b"))

        hr = cfg.rnn_hidden_dim
        s = tape.matmul(x, self._p(tape, "gru_wx")) + self._p(tape, "gru_b")
        hu = tape.matmul(hidden, self._p(tape, "gru_wh"))
        reset = tape.sigmoid(tape.narrow(s, 1, 0, hr) + tape.narrow(hu, 1, 0, hr))
        update = tape.sigmoid(tape.narrow(s, 1, hr, 2 * hr)
                              + tape.narrow(hu, 1, hr, 2 * hr))
        cand = tape.tanh(tape.narrow(s, 1, 2 * hr, 3 * hr)
                         + tape.mul(reset, tape.narrow(hu, 1, 2 * hr, 3 * hr)))
        h_next = cand + tape.mul(update, tape.sub(hidden, cand))

        angles = cosine_basis(np.asarray(taus, dtype=np.float64).reshape(r, k),
                              cfg.embed_dim)
        phi = tape.relu(tape.matmul(tape.cos(tape.const(angles.reshape(r * k, -1))),
                                    self._p(tape, "embed_w"))
                        + self._p(tape, "embed_b"))
        mixed = tape.mul(tape.reshape(phi, (r, k, hr)), tape.reshape(h_next, (r, 1, hr)))
        z = tape.matmul(tape.reshape(mixed, (r * k, hr)), self._p(tape, "out_w")) \
            + self._p(tape, "out_b")
        return tape.reshape(z, (r, k, cfg.n_actions)), h_next

    # ------------------------------------------------------- numpy wrappers

    def hyper_input_weights(self, prev_summary) -> np.ndarray:
        """Generated input weight matrix (hidden_dim, in_len); entries >= 0."""
        prev = np.asarray(prev_summary, dtype=np.float64).reshape(1, -1)
        if prev.shape[1] != self.cfg.n_quantiles:
            raise DiffError(
                f"hyper_input_weights: summary length {prev.shape[1]} != "
                f"{self.cfg.n_quantiles}"
            )
        tape = Tape(self.store)
        w = self.input_weights_t(tape, tape.const(prev))
        return w.data.reshape(self.cfg.hidden_dim, self.cfg.in_len)

    def quantile_values(self, obs, hidden, prev, taus) -> tuple[QuantileBatch, np.ndarray]:
        """Single-agent forward: (QuantileBatch, next hidden state)."""
        taus = np.asarray(taus, dtype=np.float64).reshape(1, -1)
        tape = Tape(self.store)
        z, h = self.forward_rows(
            tape,
            tape.const(np.asarray(obs, dtype=np.float64).reshape(1, -1)),
            tape.const(np.asarray(prev, dtype=np.float64).reshape(1, -1)),
            tape.const(np.asarray(hidden, dtype=np.float64).reshape(1, -1)),
            taus,
        )
        batch = QuantileBatch(taus[0], z.data[0])
        return batch, h.data[0]

    def act(self, obs, hidden, prev, epsilon: float, rng: np.random.Generator,
            avail=None):
        """Epsilon-greedy action for one agent.

        Returns (action, next hidden, chosen-action quantile values). Tau
        levels are drawn from `rng`; illegal actions are masked before the
        argmax and excluded from exploration.
        """
        if not (0.0 <= epsilon <= 1.0):
            raise DiffError(f"act: epsilon must be in [0,1], got {epsilon}")
        if avail is None:
            avail = np.ones(self.cfg.n_actions, dtype=bool)
        avail = np.asarray(avail, dtype=bool)
        if not avail.any():
            raise DiffError("act: no legal action")
        taus = sample_taus(rng, 1, self.cfg.n_quantiles)[0]
        batch, h_next = self.quantile_values(obs, hidden, prev, taus)
        q = batch.q_values() + np.where(avail, 0.0, MASK_OFFSET)
        if rng.random() < epsilon:
            action = int(rng.choice(np.flatnonzero(avail)))
        else:
            action = int(np.argmax(q))  # first max: lowest index wins ties
        return action, h_next, batch.values[:, action]

    def act_rows(self, obs_rows, hidden_rows, prev_rows, epsilon: float,
                 rng: np.random.Generator, avail_rows, taus: np.ndarray):
        """Vectorized epsilon-greedy step for several agents at once."""
        rows = obs_rows.shape[0]
        tape = Tape(self.store)
        z, h = self.forward_rows(
            tape, tape.const(obs_rows), tape.const(prev_rows),
            tape.const(hidden_rows), np.broadcast_to(taus, (rows, taus.size)),
        )
        values = z.data  # (rows, K, A)
        q = values.mean(axis=1) + np.where(avail_rows, 0.0, MASK_OFFSET)
        greedy = q.argmax(axis=1)
        actions = np.empty(rows, dtype=np.int64)
        for i in range(rows):
            if rng.random() < epsilon:
                actions[i] = rng.choice(np.flatnonzero(avail_rows[i]))
            else:
                actions[i] = greedy[i]
        chosen = np.take_along_axis(
            values, actions[:, None, None].repeat(values.shape[1], axis=1), axis=2
        )[:, :, 0]
        return actions, h.data, chosen


def sample_taus(rng: np.random.Generator, rows: int, k: int) -> np.ndarray:
    """K tau levels per row, strictly inside (0,1), sorted ascending."""
    u = np.clip(rng.uniform(0.0, 1.0, size=(rows, k)), 1e-6, 1.0 - 1e-6)
    return np.sort(u, axis=1)
