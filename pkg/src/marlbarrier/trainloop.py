"""Episodic trainer: quantile TD learning gated by a casualty constraint.

Each epoch collects one epsilon-greedy episode, stores it, and runs one
update. The return loss is computed on a replay batch of whole episodes
with lambda-returns applied index-wise across quantile samples; the
barrier losses are computed on the freshly collected episode (an
on-policy sample) and only when its total deaths exceed the safety
threshold omega. The two gradients are merged by gradient surgery and
applied with one Adam update. Target networks are hard-copied on a fixed
cadence.

Variants: "full" (both losses), "no_barrier" (pure weighted return
gradient), "expectation_only" (single fixed median quantile, i.e. no
distributional modeling).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .battlegrid import EnvConfig, TrajectoryLogWriter, make_env
from .diffcore import DiffError, ParameterStore, Tape
from .losses import (
    GradientPair,
    LossReport,
    barrier_invariance_loss_t,
    barrier_regression_loss_t,
    empirical_barrier,
    huber_quantile_loss_t,
    pcgrad_combine,
)
from .mixnet import MixerConfig, MixerNet
from .policynet import (
    MASK_OFFSET,
    LocalPolicyNet,
    PolicyConfig,
    augment_obs,
    sample_taus,
)

__all__ = [
    "TrainConfig",
    "Episode",
    "ReplayBuffer",
    "MetricsRow",
    "METRICS_HEADER",
    "Trainer",
    "lambda_return_samples",
    "evaluate_policy",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("full", "no_barrier", "expectation_only")
EVAL_WORKER = 99991  # held-out environment stream

METRICS_HEADER = "epoch,steps,return,win_rate,deaths,l_q,l_b,conflict_frac,epsilon"


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gamma_b: float = 0.5
    lambda_b: float = 0.5
    td_lambda: float = 0.6
    learning_rate: float = 0.001
    batch_size: int = 8  # episodes
    buffer_size: int = 5000  # episodes
    hidden_dim: int = 64
    rnn_hidden_dim: int = 64
    embed_dim: int = 64
    n_quantiles: int = 8
    kappa: float = 1.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000
    target_update_interval: int = 200  # train steps
    omega: float = -1.0  # safety threshold; -1 resolves to n_allies - 1
    beta_q: float = 0.5
    beta_b: float = 0.5
    epochs: int = 500
    eval_interval: int = 25  # epochs
    eval_episodes: int = 16
    checkpoint_every: int = 0  # evaluations between checkpoints; 0 = final only
    variant: str = "full"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise DiffError("train config: gamma must be in (0,1)")
        for name in ("gamma_b", "lambda_b"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise DiffError(f"train config: {name} must be in (0,1)")
        if not (0.0 <= self.td_lambda <= 1.0):
            raise DiffError("train config: td_lambda must be in [0,1]")
        if self.learning_rate <= 0:
            raise DiffError("train config: learning_rate must be > 0")
        for name in ("batch_size", "buffer_size", "hidden_dim", "rnn_hidden_dim",
                     "embed_dim", "n_quantiles", "epochs", "eval_interval",
                     "eval_episodes", "target_update_interval",
                     "epsilon_decay_steps"):
            if getattr(self, name) < 1:
                raise DiffError(f"train config: {name} must be >= 1")
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DiffError(f"train config: {name} must be in [0,1]")
        if self.epsilon_end > self.epsilon_start:
            raise DiffError("train config: epsilon_end must be <= epsilon_start")
        if self.kappa <= 0:
            raise DiffError("train config: kappa must be > 0")
        for name in ("beta_q", "beta_b"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise DiffError(f"train config: {name} must be in [0,1]")
        if self.variant not in VARIANTS:
            raise DiffError(f"train config: variant must be one of {VARIANTS}")
        if self.checkpoint_every < 0:
            raise DiffError("train config: checkpoint_every must be >= 0")


@dataclass
class Episode:
    obs: np.ndarray  # (L+1, n, obs_len)
    state: np.ndarray  # (L+1, state_len)
    avail: np.ndarray  # (L+1, n, n_actions) bool
    actions: np.ndarray  # (L, n)
    rewards: np.ndarray  # (L,)
    deaths: np.ndarray  # (L,)
    win: bool

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def total_deaths(self) -> int:
        return int(self.deaths.sum())

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


class ReplayBuffer:
    """Ring of complete episodes with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DiffError("replay buffer: capacity must be >= 1")
        self.capacity = capacity
        self._ring: deque[Episode] = deque(maxlen=capacity)

    def add(self, episode: Episode) -> None:
        self._ring.append(episode)

    def sample(self, rng: np.random.Generator, count: int) -> list[Episode]:
        if not self._ring:
            raise DiffError("replay buffer: empty")
        count = min(count, len(self._ring))
        idx = rng.choice(len(self._ring), size=count, replace=False)
        return [self._ring[int(i)] for i in idx]

    def __len__(self) -> int:
        return len(self._ring)


@dataclass
class MetricsRow:
    epoch: int
    steps: int
    mean_return: float
    win_rate: float
    mean_deaths: float
    l_q: float
    l_b: float
    conflict_frac: float
    epsilon: float

    def to_csv(self) -> str:
        return ",".join([
            str(self.epoch), str(self.steps), repr(self.mean_return),
            repr(self.win_rate), repr(self.mean_deaths), repr(self.l_q),
            repr(self.l_b), repr(self.conflict_frac), repr(self.epsilon),
        ])

    @staticmethod
    def from_csv(line: str) -> "MetricsRow":
        parts = line.strip().split(",")
        if len(parts) != 9:
            raise DiffError(f"metrics row: expected 9 fields, got {len(parts)}")
        return MetricsRow(int(parts[0]), int(parts[1]), *(float(p) for p in parts[2:]))


def lambda_return_samples(rewards: np.ndarray, next_samples: np.ndarray,
                          gamma: float, td_lambda: float) -> np.ndarray:
    """Lambda-returns applied index-wise across quantile samples.

    `next_samples[t]` holds the bootstrap samples for state t+1; the last
    row is unused because the terminal boundary is G[L-1] = r[L-1].
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    next_samples = np.asarray(next_samples, dtype=np.float64)
    length, k = next_samples.shape
    if rewards.shape != (length,):
        raise DiffError("lambda_return_samples: rewards/bootstrap length mismatch")
    out = np.zeros((length, k))
    out[length - 1] = rewards[length - 1]
    for t in range(length - 2, -1, -1):
        mix = (1.0 - td_lambda) * next_samples[t] + td_lambda * out[t + 1]
        out[t] = rewards[t] + gamma * mix
    return out


class Trainer:
    """Owns the networks, buffer, optimizer state, and RNG streams."""

    def __init__(self, env_config: EnvConfig, config: TrainConfig,
                 config_hash: str = ""):
        config.validate()
        env_config.validate()
        self.env_cfg = env_config
        self.cfg = config
        self.config_hash = config_hash
        if config.variant == "expectation_only":
            self.n_quantiles = 1
        else:
            self.n_quantiles = config.n_quantiles

        self.env = make_env(env_config, worker_id=0)
        n, a = self.env.n_agents, self.env.n_actions
        self.policy_cfg = PolicyConfig(
            obs_len=self.env.obs_len, n_actions=a, n_agents=n,
            hidden_dim=config.hidden_dim, rnn_hidden_dim=config.rnn_hidden_dim,
            embed_dim=config.embed_dim, n_quantiles=self.n_quantiles,
        )
        self.mixer_cfg = MixerConfig(
            state_len=self.env.state_len, obs_len=self.policy_cfg.in_len,
            n_actions=a, n_agents=n, hidden_dim=config.hidden_dim,
        )

        seed = config.seed
        self._init_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self._act_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self._tau_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self._buffer_rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))

        self.store = ParameterStore()
        self.policy = LocalPolicyNet(self.policy_cfg, self.store, self._init_rng)
        self.mixer = MixerNet(self.mixer_cfg, self.store, self._init_rng)
        self.target_store = self.store.copy()
        self.target_policy = self.policy.bound_to(self.target_store)
        self.target_mixer = self.mixer.bound_to(self.target_store)

        self.buffer = ReplayBuffer(config.buffer_size)
        self.omega = config.omega if config.omega >= 0 else float(n - 1)
        self._adam_m = np.zeros(self.store.size)
        self._adam_v = np.zeros(self.store.size)
        self._adam_t = 0
        self.env_steps = 0
        self.train_steps = 0

    # ----------------------------------------------------------- collection

    def epsilon(self) -> float:
        cfg = self.cfg
        frac = min(1.0, self.env_steps / cfg.epsilon_decay_steps)
        return cfg.epsilon_start - (cfg.epsilon_start - cfg.epsilon_end) * frac

    def _taus(self, rng: np.random.Generator, rows: int) -> np.ndarray:
        if self.cfg.variant == "expectation_only":
            return np.full((rows, 1), 0.5)
        return sample_taus(rng, rows, self.n_quantiles)

    def collect_episode(self, epsilon: float, env=None, act_rng=None,
                        tau_rng=None) -> Episode:
        env = env or self.env
        act_rng = act_rng if act_rng is not None else self._act_rng
        tau_rng = tau_rng if tau_rng is not None else self._tau_rng
        n = env.n_agents
        obs = np.stack(env.reset())
        hidden = self.policy.zero_hidden(n)
        prev = self.policy.zero_prev(n)
        rec = {k: [] for k in ("obs", "state", "avail", "actions", "rewards",
                               "deaths")}
        win = False
        agent_ids = np.arange(n)
        while True:
            avail = env.avail_actions()
            rec["obs"].append(obs)
            rec["state"].append(env.global_state())
            rec["avail"].append(avail)
            taus = self._taus(tau_rng, 1)[0]
            aug = augment_obs(obs, agent_ids, n)
            actions, hidden, chosen = self.policy.act_rows(
                aug, hidden, prev, epsilon, act_rng, avail, taus)
            prev = chosen
            obs_list, res = env.step(actions)
            obs = np.stack(obs_list)
            rec["actions"].append(actions)
            rec["rewards"].append(res.reward)
            rec["deaths"].append(res.deaths_this_step)
            if res.done:
                win = res.win
                break
        rec["obs"].append(obs)
        rec["state"].append(env.global_state())
        rec["avail"].append(env.avail_actions())
        return Episode(
            obs=np.stack(rec["obs"]), state=np.stack(rec["state"]),
            avail=np.stack(rec["avail"]), actions=np.stack(rec["actions"]),
            rewards=np.asarray(rec["rewards"], dtype=np.float64),
            deaths=np.asarray(rec["deaths"], dtype=np.int64), win=win,
        )

    # ------------------------------------------------------------- targets

    def _stack_batch(self, episodes: list[Episode]):
        b = len(episodes)
        n, a = self.env.n_agents, self.env.n_actions
        t_max = max(ep.length for ep in episodes)
        obs = np.zeros((b, t_max + 1, n, self.env.obs_len))
        state = np.zeros((b, t_max + 1, self.env.state_len))
        avail = np.zeros((b, t_max + 1, n, a), dtype=bool)
        avail[:, :, :, 0] = True  # padding rows: noop only
        actions = np.zeros((b, t_max, n), dtype=np.int64)
        rewards = np.zeros((b, t_max))
        mask = np.zeros((b, t_max))
        for i, ep in enumerate(episodes):
            le = ep.length
            obs[i, : le + 1] = ep.obs
            state[i, : le + 1] = ep.state
            avail[i, : le + 1] = ep.avail
            actions[i, :le] = ep.actions
            rewards[i, :le] = ep.rewards
            mask[i, :le] = 1.0
        return obs, state, avail, actions, rewards, mask

    def compute_td_targets(self, episodes: list[Episode]):
        """Per-step target quantile samples (B, T, K) plus the step mask."""
        obs, state, avail, actions, rewards, mask = self._stack_batch(episodes)
        b, t_total, n, _ = obs.shape
        k = self.n_quantiles
        rows = b * n
        agent_ids = np.tile(np.arange(n), b)

        tape = Tape(self.target_store)
        hidden = tape.const(np.zeros((rows, self.cfg.rnn_hidden_dim)))
        prev = tape.const(np.zeros((rows, k)))
        greedy_joint = np.zeros((b, t_total, k))
        for t in range(t_total):
            taus_t = self._taus(self._tau_rng, b)
            z, hidden = self.target_policy.forward_rows(
                tape, tape.const(augment_obs(obs[:, t].reshape(rows, -1),
                                             agent_ids, n)),
                prev, hidden, np.repeat(taus_t, n, axis=0))
            values = z.data  # (rows, K, A)
            q = values.mean(axis=1) + np.where(avail[:, t].reshape(rows, -1),
                                               0.0, MASK_OFFSET)
            greedy = q.argmax(axis=1)
            z_greedy = np.take_along_axis(
                values, greedy[:, None, None].repeat(k, axis=1), axis=2)[:, :, 0]
            # at the greedy action the dueling mean path collapses, leaving the
            # plain index-wise sum of greedy samples across agents
            greedy_joint[:, t] = z_greedy.reshape(b, n, k).sum(axis=1)
            if t < t_total - 1:
                taken = actions[:, t].reshape(rows)
                z_taken = np.take_along_axis(
                    values, taken[:, None, None].repeat(k, axis=1), axis=2)[:, :, 0]
                prev = tape.const(z_taken)

        targets = np.zeros((b, t_total - 1, k))
        for i, ep in enumerate(episodes):
            le = ep.length
            targets[i, :le] = lambda_return_samples(
                rewards[i, :le], greedy_joint[i, 1 : le + 1],
                self.cfg.gamma, self.cfg.td_lambda)
        return targets, mask

    # ---------------------------------------------------------- train step

    def train_step(self, episodes: list[Episode], fresh: Episode) -> LossReport:
        if not episodes:
            raise DiffError("train_step: empty batch")
        cfg = self.cfg
        targets, mask = self.compute_td_targets(episodes)
        obs, state, avail, actions, rewards, mask = self._stack_batch(episodes)
        b, t_plus, n, a = avail.shape
        t_total = t_plus - 1
        k = self.n_quantiles
        rows = b * n
        agent_ids = np.tile(np.arange(n), b)
        total_weight = float(mask.sum())

        tape = Tape(self.store)
        hidden = tape.const(np.zeros((rows, cfg.rnn_hidden_dim)))
        prev = tape.const(np.zeros((rows, k)))
        eye = np.eye(a)
        loss_terms = []
        for t in range(t_total):
            taus_t = self._taus(self._tau_rng, b)
            aug = augment_obs(obs[:, t].reshape(rows, -1), agent_ids, n)
            z, hidden = self.policy.forward_rows(
                tape, tape.const(aug), prev, hidden, np.repeat(taus_t, n, axis=0))
            q_all = tape.mean(z, axis=1)
            illegal = np.where(avail[:, t].reshape(rows, a), 0.0, MASK_OFFSET)
            v_rows = tape.max(tape.add(q_all, tape.const(illegal)), axis=1)
            taken = actions[:, t].reshape(rows)
            z_taken = tape.gather_last(z, np.repeat(taken[:, None], k, axis=1))
            q_taken = tape.mean(z_taken, axis=1)
            a_taken = tape.sub(q_taken, v_rows)

            enc = self.mixer.encode_t(tape, tape.const(state[:, t]))
            lam_cols = []
            aug3 = aug.reshape(b, n, -1)
            for i in range(n):
                feats = np.concatenate([aug3[:, i], eye[actions[:, t, i]]], axis=1)
                lam_cols.append(self.mixer.lambda_rows_t(tape, enc, tape.const(feats)))
            lam = tape.concat(lam_cols, axis=1)

            joint = MixerNet.mix_rows_t(
                tape,
                tape.reshape(v_rows, (b, n)),
                tape.reshape(a_taken, (b, n)),
                lam,
                tape.reshape(z_taken, (b, n, k)),
                tape.reshape(q_taken, (b, n)),
            )
            loss_terms.append(huber_quantile_loss_t(
                tape, joint, taus_t, targets[:, t], cfg.kappa,
                weights=mask[:, t], total=total_weight))
            prev = z_taken

        l_q = loss_terms[0]
        for term in loss_terms[1:]:
            l_q = tape.add(l_q, term)
        g_q = tape.backward(l_q)

        l_b_value = 0.0
        g_b = np.zeros_like(g_q)
        if cfg.variant != "no_barrier" and fresh.total_deaths > self.omega:
            tape_b = Tape(self.store)
            states = fresh.state[: fresh.length]
            enc = self.mixer.encode_t(tape_b, tape_b.const(states))
            pred = tape_b.reshape(self.mixer.barrier_rows_t(tape_b, enc),
                                  (fresh.length,))
            emp = empirical_barrier(fresh.deaths, cfg.gamma_b)
            l_b = barrier_regression_loss_t(tape_b, pred, emp)
            if fresh.length >= 2:
                l_b = tape_b.add(l_b, barrier_invariance_loss_t(
                    tape_b, pred, cfg.lambda_b))
            l_b_value = l_b.item()
            g_b = tape_b.backward(l_b)

        pair = GradientPair(g_q, g_b, cfg.beta_q, cfg.beta_b,
                            cfg.beta_q, cfg.beta_b)
        combined = pcgrad_combine(pair)
        self._adam_update(combined)
        if not np.isfinite(l_q.item()) or not np.isfinite(l_b_value):
            raise DiffError("train_step: non-finite loss on this batch")
        return LossReport(l_q.item(), l_b_value, float(np.linalg.norm(combined)),
                          pair.conflict)

    def _adam_update(self, grad: np.ndarray) -> None:
        cfg = self.cfg
        self._adam_t += 1
        self._adam_m = cfg.adam_beta1 * self._adam_m + (1 - cfg.adam_beta1) * grad
        self._adam_v = cfg.adam_beta2 * self._adam_v + (1 - cfg.adam_beta2) * grad ** 2
        m_hat = self._adam_m / (1 - cfg.adam_beta1 ** self._adam_t)
        v_hat = self._adam_v / (1 - cfg.adam_beta2 ** self._adam_t)
        delta = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        self.store.load_flat(self.store.flatten() - delta)
        self.train_steps += 1
        if self.train_steps % cfg.target_update_interval == 0:
            self.sync_targets()

    def sync_targets(self) -> None:
        self.target_store.copy_from(self.store)

    # ----------------------------------------------------------- evaluation

    def evaluate(self, episodes: int | None = None):
        return evaluate_policy(self.policy, self.env_cfg,
                               episodes or self.cfg.eval_episodes,
                               self.cfg.seed, self.cfg.variant)

    # ------------------------------------------------------------------ run

    def run(self, on_row=None, checkpoint_dir=None) -> list[MetricsRow]:
        cfg = self.cfg
        rows: list[MetricsRow] = []
        window: list[LossReport] = []
        evaluations = 0
        for epoch in range(1, cfg.epochs + 1):
            eps = self.epsilon()
            episode = self.collect_episode(eps)
            self.env_steps += episode.length
            self.buffer.add(episode)
            if len(self.buffer) >= 1:
                batch = self.buffer.sample(self._buffer_rng, cfg.batch_size)
                window.append(self.train_step(batch, episode))
            if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
                win_rate, mean_deaths, mean_return = self.evaluate()
                row = MetricsRow(
                    epoch=epoch, steps=self.env_steps, mean_return=mean_return,
                    win_rate=win_rate, mean_deaths=mean_deaths,
                    l_q=float(np.mean([w.l_q for w in window])) if window else 0.0,
                    l_b=float(np.mean([w.l_b for w in window])) if window else 0.0,
                    conflict_frac=float(np.mean([w.conflict for w in window]))
                    if window else 0.0,
                    epsilon=eps,
                )
                rows.append(row)
                window = []
                evaluations += 1
                if on_row is not None:
                    on_row(row)
                if checkpoint_dir is not None and cfg.checkpoint_every and \
                        evaluations % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        f"{checkpoint_dir}/checkpoint_ep{epoch}.npz",
                        self.store, self.config_hash)
        return rows

    def write_trajectory_log(self, path, episodes: int, meta=None) -> None:
        """Greedy rollouts on a held-out stream, in the battlegrid schema."""
        env = make_env(self.env_cfg, worker_id=EVAL_WORKER + 1)
        act_rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 7]))
        tau_rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 8]))
        header = {"seed": self.cfg.seed, "env_type": self.env_cfg.env_type,
                  "n_agents": self.env_cfg.n_allies, "episodes": episodes}
        header.update(meta or {})
        with TrajectoryLogWriter(path, meta=header) as writer:
            for ep_id in range(episodes):
                episode = self.collect_episode(0.0, env=env, act_rng=act_rng,
                                               tau_rng=tau_rng)
                for t in range(episode.length):
                    writer.write_step(
                        ep_id, t, episode.actions[t], float(episode.rewards[t]),
                        int(episode.deaths[t]), t == episode.length - 1,
                        episode.win and t == episode.length - 1)


def evaluate_policy(policy: LocalPolicyNet, env_config: EnvConfig,
                    episodes: int, seed: int, variant: str = "full"):
    """Greedy evaluation on a held-out seed stream.

    Returns (win_rate, mean_deaths, mean_return). Repeated calls with the
    same arguments and parameters give identical results.
    """
    if episodes < 1:
        raise DiffError("evaluate: episodes must be >= 1")
    env = make_env(env_config, worker_id=EVAL_WORKER)
    act_rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    tau_rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    n = env.n_agents
    k = policy.cfg.n_quantiles
    wins, deaths, returns = [], [], []
    agent_ids = np.arange(n)
    for _ in range(episodes):
        obs = np.stack(env.reset())
        hidden = policy.zero_hidden(n)
        prev = policy.zero_prev(n)
        total_r, total_d = 0.0, 0
        while True:
            if variant == "expectation_only":
                taus = np.full(k, 0.5)
            else:
                taus = sample_taus(tau_rng, 1, k)[0]
            aug = augment_obs(obs, agent_ids, n)
            actions, hidden, prev = policy.act_rows(
                aug, hidden, prev, 0.0, act_rng, env.avail_actions(), taus)
            obs_list, res = env.step(actions)
            obs = np.stack(obs_list)
            total_r += res.reward
            total_d += res.deaths_this_step
            if res.done:
                wins.append(res.win)
                break
        deaths.append(total_d)
        returns.append(total_r)
    return float(np.mean(wins)), float(np.mean(deaths)), float(np.mean(returns))


def save_checkpoint(path, store: ParameterStore, config_hash: str,
                    extra: dict | None = None) -> None:
    """Flat parameter dump plus naming metadata and the config hash."""
    meta = {
        "names": store.names(),
        "shapes": {n: list(store[n].shape) for n in store.names()},
        "config_hash": config_hash,
    }
    meta.update(extra or {})
    np.savez(path, flat=store.flatten(), meta=json.dumps(meta))


def load_checkpoint(path):
    """Returns (flat vector, meta dict)."""
    with np.load(path, allow_pickle=False) as data:
        flat = data["flat"]
        meta = json.loads(str(data["meta"]))
    return flat, meta
