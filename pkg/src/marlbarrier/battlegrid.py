"""Desk-scale cooperative Dec-POMDP environments with agent terminations.

Two variants share one config and interface:

* ``battle``: a grid skirmish against scripted enemies. Allies spawn in a
  left band, enemies in a right band; enemies attack the nearest ally in
  range, otherwise step toward the nearest ally (ties to the lowest
  index). The shared reward is damage dealt plus kill and win bonuses.
  Timeout counts as a loss.

* ``corridor``: agents advance along a 1 x L lane with hazard cells.
  Entering a hazard terminates the agent and clears the hazard (the wreck
  fills the hole), so later agents can pass; coordinating who pays the
  cost is the point. The episode ends in a loss when more than half the
  agents are eliminated, and in a win when every survivor stands on the
  goal cell.

Both are deterministic given (seed, worker_id): randomness is consumed
only at reset, steps are pure. Observations are fixed-length with exact
zeros for units outside sight_range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EnvError",
    "EnvConfig",
    "EnvState",
    "StepResult",
    "BattleEnv",
    "CorridorEnv",
    "make_env",
    "TrajectoryLogWriter",
    "EpisodeRecord",
    "read_trajectory_log",
]

NOOP = 0
MOVES = {1: (0, 1), 2: (0, -1), 3: (1, 0), 4: (-1, 0)}  # N, S, E, W
ATTACK_BASE = 5
ADVANCE = 1  # corridor


class EnvError(ValueError):
    """Invalid configuration or action input."""


@dataclass
class EnvConfig:
    env_type: str = "battle"  # "battle" or "corridor"
    grid_width: int = 7
    grid_height: int = 5
    n_allies: int = 3
    n_enemies: int = 3
    ally_hp: int = 6
    enemy_hp: int = 2
    attack_damage: int = 1
    attack_range: int = 1  # Chebyshev
    sight_range: int = 7  # Chebyshev
    enemy_speed: int = 1  # cells per step while closing distance
    max_steps: int = 30
    kill_reward: float = 1.0
    win_reward: float = 8.0
    damage_reward_scale: float = 1.0
    # corridor-only knobs (grid_width is the lane length)
    hazards: tuple[int, ...] = ()
    goal_bonus: float = 2.0
    progress_reward: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.env_type not in ("battle", "corridor"):
            raise EnvError(f"env_type must be battle or corridor, got {self.env_type!r}")
        positive = ["grid_width", "grid_height", "n_allies", "ally_hp",
                    "attack_damage", "max_steps"]
        if self.env_type == "battle":
            positive += ["n_enemies", "enemy_hp"]
        for name in positive:
            if getattr(self, name) < 1:
                raise EnvError(f"env config: {name} must be >= 1")
        for name in ("attack_range", "sight_range"):
            if getattr(self, name) < 0:
                raise EnvError(f"env config: {name} must be >= 0")
        if self.enemy_speed < 1:
            raise EnvError("env config: enemy_speed must be >= 1")
        if self.attack_range > self.sight_range:
            raise EnvError("env config: attack_range must be <= sight_range")
        if self.seed < 0:
            raise EnvError("env config: seed must be unsigned")
        if self.env_type == "corridor":
            bad = [c for c in self.hazards if not (0 < c < self.grid_width)]
            if bad:
                raise EnvError(f"env config: hazard cells {bad} outside lane interior")


@dataclass
class StepResult:
    reward: float
    deaths_this_step: int
    done: bool
    win: bool
    invalid_attacks: int = 0  # attacks that resolved as noop


@dataclass
class EnvState:
    """Snapshot of everything a step depends on (besides the config)."""

    ally_pos: np.ndarray  # (n_allies, 2)
    ally_hp: np.ndarray
    enemy_pos: np.ndarray
    enemy_hp: np.ndarray
    step_count: int
    hazards: frozenset = field(default_factory=frozenset)  # corridor only

    def copy(self) -> "EnvState":
        return EnvState(self.ally_pos.copy(), self.ally_hp.copy(),
                        self.enemy_pos.copy(), self.enemy_hp.copy(),
                        self.step_count, self.hazards)


def _cheb(a, b) -> int:
    return int(np.max(np.abs(np.asarray(a) - np.asarray(b))))


class BattleEnv:
    """Grid battle against scripted enemies. Single-owner, see module doc."""

    FEATS_PER_UNIT = 5

    def __init__(self, config: EnvConfig, worker_id: int = 0):
        config.validate()
        if config.env_type != "battle":
            raise EnvError("BattleEnv requires env_type=battle")
        self.cfg = config
        self._rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, worker_id]))
        band = self._band_columns()
        capacity = len(band) * config.grid_height
        if config.n_allies > capacity or config.n_enemies > capacity:
            raise EnvError(
                f"unit count exceeds band capacity {capacity} "
                f"({config.n_allies} allies / {config.n_enemies} enemies)"
            )
        self.state: EnvState | None = None

    # ----------------------------------------------------------- geometry

    def _band_columns(self) -> list[int]:
        w = self.cfg.grid_width
        width = max(1, w // 3)
        return list(range(width))

    @property
    def n_agents(self) -> int:
        return self.cfg.n_allies

    @property
    def n_actions(self) -> int:
        return ATTACK_BASE + self.cfg.n_enemies

    @property
    def obs_len(self) -> int:
        others = self.cfg.n_allies - 1 + self.cfg.n_enemies
        return self.FEATS_PER_UNIT * others + 1

    @property
    def state_len(self) -> int:
        return 4 * (self.cfg.n_allies + self.cfg.n_enemies)

    # -------------------------------------------------------------- reset

    def _place(self, count: int, columns: list[int]) -> np.ndarray:
        cells = [(x, y) for x in columns for y in range(self.cfg.grid_height)]
        chosen = self._rng.choice(len(cells), size=count, replace=False)
        return np.array([cells[i] for i in chosen], dtype=np.int64)

    def reset(self) -> list[np.ndarray]:
        cfg = self.cfg
        left = self._band_columns()
        right = [cfg.grid_width - 1 - c for c in left]
        self.state = EnvState(
            ally_pos=self._place(cfg.n_allies, left),
            ally_hp=np.full(cfg.n_allies, cfg.ally_hp, dtype=np.int64),
            enemy_pos=self._place(cfg.n_enemies, sorted(right)),
            enemy_hp=np.full(cfg.n_enemies, cfg.enemy_hp, dtype=np.int64),
            step_count=0,
        )
        return self.observations()

    # ------------------------------------------------------- observations

    def observations(self) -> list[np.ndarray]:
        return [self._observe(i) for i in range(self.cfg.n_allies)]

    def _observe(self, i: int) -> np.ndarray:
        cfg, st = self.cfg, self.state
        obs = np.zeros(self.obs_len)
        if st.ally_hp[i] <= 0:
            return obs
        me = st.ally_pos[i]
        span = max(cfg.grid_width - 1, cfg.grid_height - 1, 1)
        slot = 0
        units = [(st.ally_pos[j], st.ally_hp[j], cfg.ally_hp, 0.5)
                 for j in range(cfg.n_allies) if j != i]
        units += [(st.enemy_pos[j], st.enemy_hp[j], cfg.enemy_hp, 1.0)
                  for j in range(cfg.n_enemies)]
        for pos, hp, max_hp, kind in units:
            base = slot * self.FEATS_PER_UNIT
            slot += 1
            if hp <= 0 or _cheb(me, pos) > cfg.sight_range:
                continue
            obs[base + 0] = (pos[0] - me[0]) / max(cfg.grid_width - 1, 1)
            obs[base + 1] = (pos[1] - me[1]) / max(cfg.grid_height - 1, 1)
            obs[base + 2] = _cheb(me, pos) / span
            obs[base + 3] = hp / max_hp
            obs[base + 4] = kind
        obs[-1] = st.ally_hp[i] / cfg.ally_hp
        return obs

    def global_state(self) -> np.ndarray:
        cfg, st = self.cfg, self.state
        out = []
        for pos, hp, max_hp in [(st.ally_pos, st.ally_hp, cfg.ally_hp),
                                (st.enemy_pos, st.enemy_hp, cfg.enemy_hp)]:
            for j in range(len(hp)):
                alive = 1.0 if hp[j] > 0 else 0.0
                out += [pos[j, 0] / max(cfg.grid_width - 1, 1) * alive,
                        pos[j, 1] / max(cfg.grid_height - 1, 1) * alive,
                        hp[j] / max_hp, alive]
        return np.array(out)

    def avail_actions(self) -> np.ndarray:
        cfg, st = self.cfg, self.state
        avail = np.zeros((cfg.n_allies, self.n_actions), dtype=bool)
        avail[:, NOOP] = True
        for i in range(cfg.n_allies):
            if st.ally_hp[i] <= 0:
                continue
            for a, (dx, dy) in MOVES.items():
                nx, ny = st.ally_pos[i, 0] + dx, st.ally_pos[i, 1] + dy
                if 0 <= nx < cfg.grid_width and 0 <= ny < cfg.grid_height:
                    avail[i, a] = True
            for j in range(cfg.n_enemies):
                if st.enemy_hp[j] > 0 and \
                        _cheb(st.ally_pos[i], st.enemy_pos[j]) <= cfg.attack_range:
                    avail[i, ATTACK_BASE + j] = True
        return avail

    # --------------------------------------------------------------- step

    def step(self, joint_action) -> tuple[list[np.ndarray], StepResult]:
        cfg, st = self.cfg, self.state
        if st is None:
            raise EnvError("step before reset")
        actions = list(joint_action)
        if len(actions) != cfg.n_allies:
            raise EnvError(f"expected {cfg.n_allies} actions, got {len(actions)}")
        for i, a in enumerate(actions):
            if not (0 <= int(a) < self.n_actions):
                raise EnvError(f"agent {i}: malformed action index {a}")
            if st.ally_hp[i] <= 0 and int(a) != NOOP:
                raise EnvError(f"agent {i} is dead and must submit noop")

        reward = 0.0
        invalid = 0
        kills = 0
        # allies act in index order
        for i, a in enumerate(actions):
            a = int(a)
            if st.ally_hp[i] <= 0 or a == NOOP:
                continue
            if a in MOVES:
                dx, dy = MOVES[a]
                nx, ny = st.ally_pos[i, 0] + dx, st.ally_pos[i, 1] + dy
                if 0 <= nx < cfg.grid_width and 0 <= ny < cfg.grid_height:
                    st.ally_pos[i] = (nx, ny)
                else:
                    raise EnvError(f"agent {i}: move off-grid (action {a})")
            else:
                j = a - ATTACK_BASE
                if st.enemy_hp[j] <= 0 or \
                        _cheb(st.ally_pos[i], st.enemy_pos[j]) > cfg.attack_range:
                    invalid += 1  # became out-of-range/dead mid-step: noop
                    continue
                dealt = min(cfg.attack_damage, int(st.enemy_hp[j]))
                st.enemy_hp[j] -= dealt
                reward += cfg.damage_reward_scale * dealt
                if st.enemy_hp[j] <= 0:
                    kills += 1
                    reward += cfg.kill_reward

        # scripted enemies act in index order
        deaths = 0
        if st.enemy_hp.max(initial=0) > 0:
            for j in range(cfg.n_enemies):
                if st.enemy_hp[j] <= 0:
                    continue
                living = [i for i in range(cfg.n_allies) if st.ally_hp[i] > 0]
                if not living:
                    break
                dists = [_cheb(st.enemy_pos[j], st.ally_pos[i]) for i in living]
                target = living[int(np.argmin(dists))]  # lowest index on ties
                if min(dists) <= cfg.attack_range:
                    st.ally_hp[target] = max(0, st.ally_hp[target] - cfg.attack_damage)
                    if st.ally_hp[target] == 0:
                        deaths += 1
                else:
                    # full charge: every speed cell is spent, so a same-speed
                    # evader cannot stay out of reach forever
                    for _ in range(cfg.enemy_speed):
                        here = _cheb(st.enemy_pos[j], st.ally_pos[target])
                        moved = False
                        for a in (1, 2, 3, 4):
                            dx, dy = MOVES[a]
                            nx = st.enemy_pos[j, 0] + dx
                            ny = st.enemy_pos[j, 1] + dy
                            if not (0 <= nx < cfg.grid_width
                                    and 0 <= ny < cfg.grid_height):
                                continue
                            if _cheb((nx, ny), st.ally_pos[target]) < here:
                                st.enemy_pos[j] = (nx, ny)
                                moved = True
                                break
                        if not moved:
                            break

        st.step_count += 1
        allies_alive = bool((st.ally_hp > 0).any())
        enemies_alive = bool((st.enemy_hp > 0).any())
        win = not enemies_alive
        done = win or not allies_alive or st.step_count >= cfg.max_steps
        if win:
            reward += cfg.win_reward
        return self.observations(), StepResult(reward, deaths, done, win, invalid)


class CorridorEnv:
    """Hazard lane; see module docstring for the termination rules."""

    FEATS_PER_UNIT = 5

    def __init__(self, config: EnvConfig, worker_id: int = 0):
        config.validate()
        if config.env_type != "corridor":
            raise EnvError("CorridorEnv requires env_type=corridor")
        self.cfg = config
        self._rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, worker_id]))
        self.state: EnvState | None = None

    @property
    def n_agents(self) -> int:
        return self.cfg.n_allies

    @property
    def n_actions(self) -> int:
        return 2  # noop, advance

    @property
    def obs_len(self) -> int:
        return self.FEATS_PER_UNIT * (self.cfg.n_allies - 1) + self.cfg.sight_range + 2

    @property
    def state_len(self) -> int:
        return 3 * self.cfg.n_allies + self.cfg.grid_width

    def reset(self) -> list[np.ndarray]:
        cfg = self.cfg
        self.state = EnvState(
            ally_pos=np.zeros((cfg.n_allies, 2), dtype=np.int64),
            ally_hp=np.ones(cfg.n_allies, dtype=np.int64),
            enemy_pos=np.zeros((0, 2), dtype=np.int64),
            enemy_hp=np.zeros(0, dtype=np.int64),
            step_count=0,
            hazards=frozenset(cfg.hazards),
        )
        return self.observations()

    def observations(self) -> list[np.ndarray]:
        return [self._observe(i) for i in range(self.cfg.n_allies)]

    def _observe(self, i: int) -> np.ndarray:
        cfg, st = self.cfg, self.state
        obs = np.zeros(self.obs_len)
        if st.ally_hp[i] <= 0:
            return obs
        me = int(st.ally_pos[i, 0])
        span = max(cfg.grid_width - 1, 1)
        slot = 0
        for j in range(cfg.n_allies):
            if j == i:
                continue
            base = slot * self.FEATS_PER_UNIT
            slot += 1
            if st.ally_hp[j] <= 0 or abs(int(st.ally_pos[j, 0]) - me) > cfg.sight_range:
                continue
            obs[base + 0] = (st.ally_pos[j, 0] - me) / span
            obs[base + 1] = 0.0
            obs[base + 2] = abs(int(st.ally_pos[j, 0]) - me) / span
            obs[base + 3] = 1.0
            obs[base + 4] = 0.5
        base = self.FEATS_PER_UNIT * (cfg.n_allies - 1)
        for d in range(cfg.sight_range):
            cell = me + 1 + d
            obs[base + d] = 1.0 if cell in st.hazards else 0.0
        obs[-2] = 1.0  # own hp
        obs[-1] = me / span
        return obs

    def global_state(self) -> np.ndarray:
        cfg, st = self.cfg, self.state
        span = max(cfg.grid_width - 1, 1)
        out = []
        for i in range(cfg.n_allies):
            alive = 1.0 if st.ally_hp[i] > 0 else 0.0
            reached = 1.0 if st.ally_pos[i, 0] == cfg.grid_width - 1 else 0.0
            out += [st.ally_pos[i, 0] / span * alive, alive, reached * alive]
        hazard_map = [1.0 if c in st.hazards else 0.0 for c in range(cfg.grid_width)]
        return np.array(out + hazard_map)

    def avail_actions(self) -> np.ndarray:
        cfg, st = self.cfg, self.state
        avail = np.zeros((cfg.n_allies, self.n_actions), dtype=bool)
        avail[:, NOOP] = True
        for i in range(cfg.n_allies):
            if st.ally_hp[i] > 0 and st.ally_pos[i, 0] < cfg.grid_width - 1:
                avail[i, ADVANCE] = True
        return avail

    def step(self, joint_action) -> tuple[list[np.ndarray], StepResult]:
        cfg, st = self.cfg, self.state
        if st is None:
            raise EnvError("step before reset")
        actions = list(joint_action)
        if len(actions) != cfg.n_allies:
            raise EnvError(f"expected {cfg.n_allies} actions, got {len(actions)}")
        reward = 0.0
        deaths = 0
        goal = cfg.grid_width - 1
        hazards = set(st.hazards)
        for i, a in enumerate(actions):
            a = int(a)
            if not (0 <= a < self.n_actions):
                raise EnvError(f"agent {i}: malformed action index {a}")
            if st.ally_hp[i] <= 0:
                if a != NOOP:
                    raise EnvError(f"agent {i} is dead and must submit noop")
                continue
            if a != ADVANCE or st.ally_pos[i, 0] >= goal:
                continue
            st.ally_pos[i, 0] += 1
            reward += cfg.progress_reward
            cell = int(st.ally_pos[i, 0])
            if cell in hazards:
                hazards.discard(cell)  # single-use: the wreck clears the cell
                st.ally_hp[i] = 0
                deaths += 1
            elif cell == goal:
                reward += cfg.goal_bonus
        st.hazards = frozenset(hazards)
        st.step_count += 1

        alive = st.ally_hp > 0
        eliminated = int((~alive).sum())
        majority_lost = eliminated > cfg.n_allies / 2.0
        survivors_home = bool(alive.any()) and bool(
            (st.ally_pos[alive, 0] == goal).all())
        win = survivors_home and not majority_lost
        done = majority_lost or survivors_home or st.step_count >= cfg.max_steps
        return self.observations(), StepResult(reward, deaths, done, win)


def make_env(config: EnvConfig, worker_id: int = 0):
    config.validate()
    cls = BattleEnv if config.env_type == "battle" else CorridorEnv
    return cls(config, worker_id)


# ------------------------------------------------------------- trajectory log

LOG_MAGIC = "# marlbarrier-trajectory-v1"


@dataclass
class EpisodeRecord:
    episode_id: int
    actions: list[list[int]]
    rewards: list[float]
    deaths: list[int]
    done: bool
    win: bool

    @property
    def total_deaths(self) -> int:
        return int(sum(self.deaths))


class TrajectoryLogWriter:
    """Line-delimited episode log; one row per step, flushed per row."""

    def __init__(self, path, meta: dict | None = None):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(LOG_MAGIC + "\n")
        for key, value in (meta or {}).items():
            self._fh.write(f"# {key}={value}\n")
        self._fh.flush()

    def write_step(self, episode_id: int, step: int, actions, reward: float,
                   deaths: int, done: bool, win: bool) -> None:
        acts = ",".join(str(int(a)) for a in actions)
        self._fh.write(
            f"{episode_id} {step} {acts} {reward!r} {int(deaths)} "
            f"{int(done)} {int(win)}\n"
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory_log(path) -> list[EpisodeRecord]:
    """Parse a trajectory log; malformed lines are rejected with their number."""
    episodes: dict[int, EpisodeRecord] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise EnvError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                ep = int(parts[0])
                step = int(parts[1])
                actions = [int(x) for x in parts[2].split(",")]
                reward = float(parts[3])
                deaths = int(parts[4])
                done = bool(int(parts[5]))
                win = bool(int(parts[6]))
            except ValueError as err:
                raise EnvError(f"{path}:{lineno}: {err}") from None
            if deaths < 0:
                raise EnvError(f"{path}:{lineno}: negative death count")
            rec = episodes.setdefault(
                ep, EpisodeRecord(ep, [], [], [], done=False, win=False))
            if step != len(rec.actions):
                raise EnvError(
                    f"{path}:{lineno}: step {step} out of order for episode {ep}")
            if rec.done:
                raise EnvError(f"{path}:{lineno}: episode {ep} continues after done")
            rec.actions.append(actions)
            rec.rewards.append(reward)
            rec.deaths.append(deaths)
            rec.done, rec.win = done, win
    return [episodes[k] for k in sorted(episodes)]
