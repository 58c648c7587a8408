"""WindyGridworld, chain fixtures and tabular Q-learning policy pairs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .core import MDPSpec, TabularPolicy, Transition
from .errors import ConfigError

# (dx, dy) per action: up, right, down, left
ACTIONS = np.array([(0, 1), (1, 0), (0, -1), (-1, 0)], dtype=np.int64)
ACTION_NAMES = ("up", "right", "down", "left")

# Oracle concept id per block, indexed [block_y, block_x] with block_y = 0 at the bottom.
ORACLE_BLOCKS = np.array(
    [
        [0, 1, 1, 1, 1],
        [2, 0, 1, 1, 1],
        [2, 2, 0, 1, 1],
        [2, 2, 2, 3, 3],
        [2, 2, 2, 2, 3],
    ],
    dtype=np.int64,
)


def default_layout() -> tuple[np.ndarray, np.ndarray]:
    """Per-block wind ``(wx, wy)`` and penalty arrays, indexed ``[by, bx]``.

    Diagonal blocks and the goal corner are calm. Blocks south-east of the
    diagonal blow towards the bottom-right corner, blocks north-west of it
    towards the top-left. Strength is 2 next to the calm diagonal and 1
    further out; the penalty is ``-(|wx| + |wy|) / 2``.
    """
    wind = np.zeros((5, 5, 2), dtype=np.int64)
    for by in range(5):
        for bx in range(5):
            kind = ORACLE_BLOCKS[by, bx]
            strength = 2 if abs(bx - by) == 1 else 1
            if kind == 1:
                wind[by, bx] = (strength, -strength)
            elif kind == 2:
                wind[by, bx] = (-strength, strength)
    penalty = -np.abs(wind).sum(axis=2) / 2.0
    return wind, penalty


def _default_wind():
    return default_layout()[0]


def _default_penalty():
    return default_layout()[1]


@dataclass(frozen=True)
class GridworldConfig:
    width: int = 20
    height: int = 20
    block_size: int = 4
    step_size: int = 4
    goal: tuple[int, int] = (19, 19)
    horizon: int = 200
    goal_reward: float = 5.0
    away_penalty: float = -0.2
    wind: np.ndarray = field(default_factory=_default_wind)
    region_penalty: np.ndarray = field(default_factory=_default_penalty)

    def __post_init__(self):
        wind = np.asarray(self.wind, dtype=np.int64)
        pen = np.asarray(self.region_penalty, dtype=float)
        nb = self.n_blocks_side
        if self.width != 20 or self.height != 20 or self.block_size != 4:
            raise ConfigError("gridworld must be 20x20 with 4x4 blocks")
        if wind.shape != (nb, nb, 2) or pen.shape != (nb, nb):
            raise ConfigError("layout must give a (wx, wy, penalty) triple for each of the 25 blocks")
        if (np.abs(wind) > 2).any():
            raise ConfigError("wind magnitudes must lie in {0, 1, 2}")
        if (pen > 0).any():
            raise ConfigError("region penalties must be <= 0")
        wind.setflags(write=False)
        pen.setflags(write=False)
        object.__setattr__(self, "wind", wind)
        object.__setattr__(self, "region_penalty", pen)
        object.__setattr__(self, "goal", tuple(int(g) for g in self.goal))

    @property
    def n_blocks_side(self) -> int:
        return self.width // self.block_size

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def state_index(self, x: int, y: int) -> int:
        return int(y) * self.width + int(x)

    def coords(self, state) -> tuple:
        state = np.asarray(state)
        return state % self.width, state // self.width

    def block_of(self, state) -> tuple:
        x, y = self.coords(state)
        return x // self.block_size, y // self.block_size

    @property
    def goal_state(self) -> int:
        return self.state_index(*self.goal)

    def with_layout_csv(self, path) -> "GridworldConfig":
        wind, pen = read_layout_csv(path)
        return replace(self, wind=wind, region_penalty=pen)


def read_layout_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a layout override: 25 rows with header ``bx,by,wx,wy,penalty``."""
    wind = np.zeros((5, 5, 2), dtype=np.int64)
    pen = np.zeros((5, 5))
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"bx", "by", "wx", "wy", "penalty"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"layout CSV missing columns: {sorted(missing)}")
        for row in reader:
            bx, by = int(row["bx"]), int(row["by"])
            wind[by, bx] = (int(row["wx"]), int(row["wy"]))
            pen[by, bx] = float(row["penalty"])
            seen.add((bx, by))
    if len(seen) != 25:
        raise ConfigError(f"layout CSV must cover all 25 blocks, got {len(seen)}")
    return wind, pen


def write_layout_csv(path, cfg: GridworldConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bx", "by", "wx", "wy", "penalty"])
        for by in range(cfg.n_blocks_side):
            for bx in range(cfg.n_blocks_side):
                wx, wy = cfg.wind[by, bx]
                w.writerow([bx, by, int(wx), int(wy), float(cfg.region_penalty[by, bx])])


def _move(cfg: GridworldConfig, x: int, y: int, action: int) -> tuple[int, int]:
    bx, by = x // cfg.block_size, y // cfg.block_size
    dx, dy = ACTIONS[action] * cfg.step_size + cfg.wind[by, bx]
    nx = min(max(x + dx, 0), cfg.width - 1)
    ny = min(max(y + dy, 0), cfg.height - 1)
    return int(nx), int(ny)


def _reward(cfg: GridworldConfig, x: int, y: int, nx: int, ny: int) -> float:
    gx, gy = cfg.goal
    bx, by = x // cfg.block_size, y // cfg.block_size
    if (nx, ny) == (gx, gy):
        base = cfg.goal_reward
    elif abs(gx - nx) + abs(gy - ny) > abs(gx - x) + abs(gy - y):
        base = cfg.away_penalty
    else:
        base = 0.0
    return float(base + cfg.region_penalty[by, bx])


def gridworld_step(cfg: GridworldConfig, state: int, action: int, rng=None) -> Transition:
    """Move ``step_size`` cells, then apply the current block's wind and clamp.

    The dynamics are deterministic; ``rng`` is accepted for interface symmetry.
    Episode-length truncation is the caller's job.
    """
    x, y = int(state) % cfg.width, int(state) // cfg.width
    if not (0 <= x < cfg.width and 0 <= y < cfg.height):
        raise ConfigError(f"state {state} outside the grid")
    nx, ny = _move(cfg, x, y, int(action))
    reward = _reward(cfg, x, y, nx, ny)
    s2 = cfg.state_index(nx, ny)
    return Transition(int(state), int(action), reward, s2, s2 == cfg.goal_state)


def gridworld_reset(cfg: GridworldConfig, rng) -> int:
    """Uniform start over the non-goal cells."""
    k = int(rng.integers(cfg.n_states - 1))
    return k if k < cfg.goal_state else k + 1


class Gridworld:
    """WindyGridworld bound to a discount factor, with its tabular MDP form."""

    n_actions = 4

    def __init__(self, cfg: GridworldConfig | None = None, gamma: float = 0.99):
        self.cfg = cfg or GridworldConfig()
        self.gamma = gamma

    @property
    def n_states(self) -> int:
        return self.cfg.n_states

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    @cached_property
    def mdp(self) -> MDPSpec:
        cfg = self.cfg
        S, A = cfg.n_states, self.n_actions
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        for s in range(S):
            for a in range(A):
                tr = gridworld_step(cfg, s, a)
                P[s, a, tr.next_state] = 1.0
                R[s, a] = tr.reward
        d0 = np.full(S, 1.0 / (S - 1))
        d0[cfg.goal_state] = 0.0
        d0 /= d0.sum()
        term = np.zeros(S, dtype=bool)
        term[cfg.goal_state] = True
        # the goal is absorbing
        P[cfg.goal_state] = 0.0
        P[cfg.goal_state, :, cfg.goal_state] = 1.0
        R[cfg.goal_state] = 0.0
        return MDPSpec(P, R, self.gamma, cfg.horizon, d0, term)

    @cached_property
    def next_state_table(self) -> np.ndarray:
        return self.mdp.transition_probs.argmax(axis=2)


@dataclass(frozen=True)
class ChainConfig:
    n_states: int = 5
    n_actions: int = 2
    slip: float = 0.1
    horizon: int = 4
    gamma: float = 0.95
    start: int | None = None


def chain_mdp(cfg: ChainConfig = ChainConfig()) -> MDPSpec:
    """Line of states; action 0 moves left, 1 right, others stay.

    With probability ``slip`` a move goes the opposite way. Reward is
    ``s / (n_states - 1)`` for acting in state ``s``. Episodes start in
    ``cfg.start``, or uniformly when it is ``None``; the uniform start gives
    every (state, action) pair positive probability under any policy with
    full support.
    """
    n, A = cfg.n_states, cfg.n_actions
    if n < 2 or A < 2 or not 0.0 <= cfg.slip <= 1.0:
        raise ConfigError("chain needs >= 2 states, >= 2 actions and slip in [0, 1]")
    P = np.zeros((n, A, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        P[s, 0, left] += 1 - cfg.slip
        P[s, 0, right] += cfg.slip
        P[s, 1, right] += 1 - cfg.slip
        P[s, 1, left] += cfg.slip
        for a in range(2, A):
            P[s, a, s] = 1.0
    R = np.tile((np.arange(n) / (n - 1))[:, None], (1, A))
    if cfg.start is None:
        d0 = np.full(n, 1.0 / n)
    elif 0 <= cfg.start < n:
        d0 = np.eye(n)[cfg.start]
    else:
        raise ConfigError(f"chain start {cfg.start} outside 0..{n - 1}")
    return MDPSpec(P, R, cfg.gamma, cfg.horizon, d0)


LUMPED_CONCEPTS = np.array([0, 1, 1, 2, 2], dtype=np.int64)
LUMPED_WITHIN = np.array([1.0, 0.3, 0.7, 0.6, 0.4])
LUMPED_REWARD = np.array([[0.0, 0.1], [0.5, 0.2], [1.0, 0.3]])


def lumped_chain_mdp(slip: float = 0.2, horizon: int = 3, gamma: float = 0.9) -> tuple[MDPSpec, np.ndarray]:
    """Five-state fixture whose dynamics and rewards factor through three concepts.

    Concepts are levels ``{0}, {1, 2}, {3, 4}``. Action 1 climbs one level and
    action 0 descends one, each failing (staying put) with probability ``slip``.
    Inside the arrival level the state is drawn from fixed weights that do not
    depend on where the agent came from, and rewards depend only on
    ``(level, action)``. Under these conditions the concept process is itself
    Markov, so concept-conditioned importance sampling is exactly unbiased
    when concept policies are occupancy-weighted aggregates.

    Returns the MDP and the state -> concept id array.
    """
    levels = LUMPED_CONCEPTS
    n, L = len(levels), int(levels.max()) + 1
    P = np.zeros((n, 2, n))
    for s in range(n):
        c = levels[s]
        for a, target in ((0, max(c - 1, 0)), (1, min(c + 1, L - 1))):
            for lvl, p in ((target, 1 - slip), (c, slip)):
                members = np.flatnonzero(levels == lvl)
                P[s, a, members] += p * LUMPED_WITHIN[members]
    R = LUMPED_REWARD[levels]
    d0 = np.where(levels == 0, 0.4, 0.0) + np.where(levels == 1, 0.6 * LUMPED_WITHIN, 0.0)
    return MDPSpec(P, R, gamma, horizon, d0), levels.copy()


def softmax_policy(q: np.ndarray, temperature: float, name: str = "") -> TabularPolicy:
    q = np.asarray(q, dtype=float)
    if np.isinf(temperature):
        return TabularPolicy(np.full(q.shape, 1.0 / q.shape[1]), name=name)
    z = q / temperature
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return TabularPolicy(p, name=name)


def _as_mdp(env) -> MDPSpec:
    return env.mdp if isinstance(env, Gridworld) else env


def train_q_policies(
    env,
    episodes: int,
    snapshot_fracs=(0.5,),
    temperature: float = 1.0,
    seed: int = 0,
    alpha: float = 0.1,
    epsilon: float = 0.1,
) -> tuple[TabularPolicy, TabularPolicy]:
    """Q-learning with an epsilon-greedy learner; snapshots become a policy pair.

    The behaviour policy is the softmax of Q after ``snapshot_fracs[0] *
    episodes`` episodes, the evaluation policy the softmax of the final Q.
    Softmax keeps every action probability positive.
    """
    if isinstance(env, Gridworld) and episodes < 1000:
        raise ConfigError("gridworld policy training needs at least 1000 episodes")
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    frac = float(snapshot_fracs[0])
    if not 0.0 <= frac <= 1.0:
        raise ConfigError("snapshot fraction must lie in [0, 1]")
    mdp = _as_mdp(env)
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    Q = np.zeros((S, A))
    cdf = mdp._cdf
    d0cdf = np.cumsum(mdp.initial_dist)
    R, term, gamma = mdp.rewards, mdp.terminal, mdp.gamma
    snap_at = int(round(frac * episodes))
    snapshot = Q.copy()
    for ep in range(episodes):
        if ep == snap_at:
            snapshot = Q.copy()
        s = int(min(np.searchsorted(d0cdf, rng.random(), side="right"), S - 1))
        for _ in range(mdp.horizon):
            if rng.random() < epsilon:
                a = int(rng.integers(A))
            else:
                a = int(np.argmax(Q[s]))
            s2 = int(min(np.searchsorted(cdf[s, a], rng.random(), side="right"), S - 1))
            target = R[s, a] + (0.0 if term[s2] else gamma * Q[s2].max())
            Q[s, a] += alpha * (target - Q[s, a])
            if term[s2]:
                break
            s = s2
    if snap_at >= episodes:
        snapshot = Q.copy()
    behavior = softmax_policy(snapshot, temperature, name="behavior")
    evaluation = softmax_policy(Q, temperature, name="evaluation")
    return behavior, evaluation
