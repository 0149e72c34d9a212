"""Small MDPs, exact planning oracles and behaviour-policy datasets.

Two environments are provided:

* ``GridWorld`` - an N x N grid, four moves (up/down/left/right), a terminal
  goal cell and terminal hazard cells, optional action slip.
* ``LineWorld`` - a continuous position on [0, 1], two moves of +/- 0.05 with
  Gaussian jitter and a terminal goal band around 0.9.

States are always float vectors (``state_dim`` columns) so that attacks can
treat both environments through the same array interface.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.stats import norm

from . import _kernels
from .errors import ConfigError, DataError, NumericalError

GRID = "GridWorld"
LINE = "LineWorld"

# GridWorld moves: up, down, left, right as (d_row, d_col)
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)

LINE_STEP = 0.05
LINE_GOAL = 0.9
LINE_GOAL_HALF_WIDTH = 0.05
_GOAL_EPS = 1e-12

BEHAVIOR_EPSILON = {"random": 1.0, "medium": 0.4, "expert": 0.0}

# RNG stream ids mixed into user seeds, so that e.g. the evaluation stream of
# seed 7 never coincides with the dataset stream of seed 7.
STREAM_DATASET = 11
STREAM_EVAL = 23
STREAM_ATTACK = 37
STREAM_TRAIN = 41


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


@dataclass(frozen=True)
class MdpSpec:
    kind: str
    state_dim: int
    n_actions: int
    gamma: float
    horizon: int
    reward_spec: dict = field(default_factory=lambda: {"goal": 1.0, "step": -0.01, "hazard": -1.0})
    noise_std: float = 0.0
    seed: int = 0
    # GridWorld layout
    grid_size: int = 5
    goal: tuple = (4, 4)
    hazards: tuple = ()
    slip_prob: float = 0.0
    # None -> environment default start distribution
    start: Optional[tuple] = None

    @classmethod
    def gridworld(cls, size=5, gamma=0.9, horizon=50, goal=None, hazards=None, slip_prob=0.0,
                  start=None, seed=0, reward_spec=None):
        if goal is None:
            goal = (size - 1, size - 1)
        if hazards is None:
            hazards = ((1, 1), (1, 3), (3, 1), (3, 3)) if size >= 5 else ()
        return cls(
            kind=GRID, state_dim=2, n_actions=4, gamma=gamma, horizon=horizon,
            reward_spec=dict(reward_spec or {"goal": 1.0, "step": -0.01, "hazard": -1.0}),
            noise_std=0.0, seed=seed, grid_size=size, goal=tuple(goal),
            hazards=tuple(tuple(h) for h in hazards), slip_prob=slip_prob,
            start=None if start is None else tuple(start),
        )

    @classmethod
    def lineworld(cls, gamma=0.95, horizon=100, noise_std=0.01, start=None, seed=0, reward_spec=None):
        return cls(
            kind=LINE, state_dim=1, n_actions=2, gamma=gamma, horizon=horizon,
            reward_spec=dict(reward_spec or {"goal": 1.0, "step": -0.01, "hazard": -1.0}),
            noise_std=noise_std, seed=seed, start=None if start is None else tuple(start),
        )

    def validate(self) -> "MdpSpec":
        if self.kind not in (GRID, LINE):
            raise ConfigError("kind", f"unknown environment kind {self.kind!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma", f"must lie in (0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ConfigError("horizon", f"must be >= 1, got {self.horizon}")
        if self.n_actions < 2:
            raise ConfigError("n_actions", f"must be >= 2, got {self.n_actions}")
        for key in ("goal", "step", "hazard"):
            if key not in self.reward_spec or not math.isfinite(float(self.reward_spec[key])):
                raise ConfigError("reward_spec", f"missing or non-finite entry {key!r}")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise ConfigError("noise_std", f"must be finite and >= 0, got {self.noise_std}")
        if self.kind == GRID:
            if self.state_dim != 2:
                raise ConfigError("state_dim", "GridWorld states are (row, col); state_dim must be 2")
            if self.n_actions != 4:
                raise ConfigError("n_actions", "GridWorld has exactly 4 actions")
            if self.grid_size < 2:
                raise ConfigError("grid_size", f"must be >= 2, got {self.grid_size}")
            cells = [tuple(self.goal)] + [tuple(h) for h in self.hazards]
            for c in cells:
                if len(c) != 2 or not all(0 <= v < self.grid_size for v in c):
                    raise ConfigError("goal" if c == tuple(self.goal) else "hazards", f"cell {c} outside grid")
            if tuple(self.goal) in [tuple(h) for h in self.hazards]:
                raise ConfigError("hazards", "goal cell cannot also be a hazard")
            if not 0.0 <= self.slip_prob <= 1.0:
                raise ConfigError("slip_prob", f"must lie in [0, 1], got {self.slip_prob}")
            if self.start is not None and tuple(self.start) in cells:
                raise ConfigError("start", "start cell must be non-terminal")
        else:
            if self.state_dim != 1:
                raise ConfigError("state_dim", "LineWorld state_dim must be 1")
            if self.n_actions != 2:
                raise ConfigError("n_actions", "LineWorld has exactly 2 actions")
            if self.start is not None and len(self.start) not in (1, 2):
                raise ConfigError("start", "LineWorld start is (x,) or a (low, high) range")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["goal"] = list(self.goal)
        d["hazards"] = [list(h) for h in self.hazards]
        d["start"] = None if self.start is None else list(self.start)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MdpSpec":
        d = dict(d)
        d["goal"] = tuple(d.get("goal", (4, 4)))
        d["hazards"] = tuple(tuple(h) for h in d.get("hazards", ()))
        if d.get("start") is not None:
            d["start"] = tuple(d["start"])
        d["reward_spec"] = {k: float(v) for k, v in d.get("reward_spec", {}).items()} or {
            "goal": 1.0, "step": -0.01, "hazard": -1.0}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown MdpSpec field")
        return cls(**d)


# ---------------------------------------------------------------------------
# transitions and datasets


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    idx: int
    poisoned: bool = False


@dataclass
class TransitionDataset:
    """Columnar transition store; row ``i`` is the transition with ``idx[i]``."""

    spec: MdpSpec
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    poisoned: np.ndarray = None
    idx: np.ndarray = None
    behavior_tag: str = "medium"
    generation_seed: int = 0

    def __post_init__(self):
        n = len(self.r)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, -1)
        self.s_next = np.asarray(self.s_next, dtype=np.float64).reshape(n, -1)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.poisoned = np.zeros(n, bool) if self.poisoned is None else np.asarray(self.poisoned, dtype=bool)
        self.idx = np.arange(n, dtype=np.int64) if self.idx is None else np.asarray(self.idx, dtype=np.int64)
        self.check()

    def check(self):
        n = len(self.r)
        if n == 0:
            raise DataError("dataset is empty")
        d = self.spec.state_dim
        if self.s.shape != (n, d) or self.s_next.shape != (n, d):
            raise DataError(f"state arrays must have shape ({n}, {d})")
        for name in ("a", "terminal", "poisoned", "idx"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name!r} has wrong length")
        bad = np.flatnonzero((self.a < 0) | (self.a >= self.spec.n_actions))
        if bad.size:
            raise DataError("action out of range", idx=int(self.idx[bad[0]]))
        if not np.array_equal(np.sort(self.idx), np.arange(n)):
            raise DataError("idx values must be unique and dense")

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i) -> Transition:
        return Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s_next[i].copy(),
                          bool(self.terminal[i]), int(self.idx[i]), bool(self.poisoned[i]))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def copy(self, **changes) -> "TransitionDataset":
        fields_ = dict(spec=self.spec, s=self.s.copy(), a=self.a.copy(), r=self.r.copy(),
                       s_next=self.s_next.copy(), terminal=self.terminal.copy(),
                       poisoned=self.poisoned.copy(), idx=self.idx.copy(),
                       behavior_tag=self.behavior_tag, generation_seed=self.generation_seed)
        fields_.update(changes)
        return TransitionDataset(**fields_)

    def features_matrix(self) -> np.ndarray:
        """Raw (s, r, s_next) rows; what the detectors see."""
        return np.column_stack([self.s, self.r, self.s_next])

    def same_content(self, other: "TransitionDataset", flags=True) -> bool:
        cols = ["s", "a", "r", "s_next", "terminal", "idx"] + (["poisoned"] if flags else [])
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols)

    # -- serialization -----------------------------------------------------

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(dumps_record({"type": "header", "spec": self.spec.to_dict(),
                                   "generation_seed": int(self.generation_seed),
                                   "behavior_tag": self.behavior_tag, "n": len(self)}) + "\n")
            for i in range(len(self)):
                fh.write(dumps_record({
                    "idx": int(self.idx[i]), "s": self.s[i], "a": int(self.a[i]), "r": float(self.r[i]),
                    "s_next": self.s_next[i], "terminal": bool(self.terminal[i]),
                    "poisoned": bool(self.poisoned[i]),
                }) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "TransitionDataset":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty dataset file")
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise DataError(f"{path}: first record must be the header")
        recs = [json.loads(ln) for ln in lines[1:]]
        spec = MdpSpec.from_dict(header["spec"])
        return cls(
            spec=spec,
            s=np.array([r["s"] for r in recs], dtype=np.float64).reshape(len(recs), spec.state_dim),
            a=np.array([r["a"] for r in recs], dtype=np.int64),
            r=np.array([r["r"] for r in recs], dtype=np.float64),
            s_next=np.array([r["s_next"] for r in recs], dtype=np.float64).reshape(len(recs), spec.state_dim),
            terminal=np.array([r["terminal"] for r in recs], dtype=bool),
            poisoned=np.array([r["poisoned"] for r in recs], dtype=bool),
            idx=np.array([r["idx"] for r in recs], dtype=np.int64),
            behavior_tag=header.get("behavior_tag", ""),
            generation_seed=int(header.get("generation_seed", 0)),
        )


def fmt_num(x) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    x = float(x)
    if not math.isfinite(x):
        raise DataError(f"cannot serialize non-finite number {x}")
    return format(x, ".17g")


def dumps_record(obj) -> str:
    """JSON encoding with every float written at 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_record(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps_record(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_num(obj)
    if obj is None:
        return "null"
    return json.dumps(obj)


# ---------------------------------------------------------------------------
# environments


class Environment:
    spec: MdpSpec

    def __init__(self, spec: MdpSpec):
        self.spec = spec
        self.rng = rng_for(spec.seed, 0)

    @property
    def low(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def high(self) -> np.ndarray:
        raise NotImplementedError

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = rng_for(seed, 0)
        return self.sample_starts(self.rng, 1)[0]

    def step(self, state, action):
        """Single transition -> (s_next, r, terminal), using the env's own RNG."""
        state = np.asarray(state, dtype=np.float64).reshape(1, -1)
        noise = self.draw_noise(self.rng, 1, 1)
        s2, r, term = self.step_batch(state, np.array([int(action)]), {k: v[:, 0] for k, v in noise.items()})
        return s2[0], float(r[0]), bool(term[0])

    def sample_starts(self, rng, n) -> np.ndarray:
        raise NotImplementedError

    def draw_noise(self, rng, n_episodes, horizon) -> dict:
        raise NotImplementedError

    def step_batch(self, states, actions, noise):
        raise NotImplementedError


class GridWorld(Environment):
    def __init__(self, spec):
        super().__init__(spec)
        n = spec.grid_size
        self.terminal_kind = np.zeros((n, n), dtype=np.int64)  # 0 free, 1 goal, 2 hazard
        self.terminal_kind[spec.goal] = 1
        for h in spec.hazards:
            self.terminal_kind[tuple(h)] = 2
        self.free_cells = np.array([(i, j) for i in range(n) for j in range(n) if self.terminal_kind[i, j] == 0],
                                   dtype=np.float64)

    @property
    def low(self):
        return np.zeros(2)

    @property
    def high(self):
        return np.full(2, self.spec.grid_size - 1.0)

    @property
    def n_states(self):
        return self.spec.grid_size ** 2

    def cell_index(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        cells = np.rint(states).astype(np.int64)
        return cells[:, 0] * self.spec.grid_size + cells[:, 1]

    def sample_starts(self, rng, n):
        if self.spec.start is not None:
            rng.random(n)  # keep stream consumption independent of the start rule
            return np.tile(np.asarray(self.spec.start, dtype=np.float64), (n, 1))
        pick = rng.integers(0, len(self.free_cells), size=n)
        return self.free_cells[pick].copy()

    def draw_noise(self, rng, n_episodes, horizon):
        return {"slip_u": rng.random((n_episodes, horizon)),
                "slip_a": rng.integers(0, 4, size=(n_episodes, horizon))}

    def step_batch(self, states, actions, noise):
        spec = self.spec
        actions = np.asarray(actions, dtype=np.int64)
        if spec.slip_prob > 0:
            actions = np.where(noise["slip_u"] < spec.slip_prob, noise["slip_a"], actions)
        cells = np.rint(states).astype(np.int64)
        nxt = np.clip(cells + MOVES[actions], 0, spec.grid_size - 1)
        kind = self.terminal_kind[nxt[:, 0], nxt[:, 1]]
        rs = spec.reward_spec
        r = np.where(kind == 1, rs["goal"], np.where(kind == 2, rs["hazard"], rs["step"])).astype(np.float64)
        return nxt.astype(np.float64), r, kind > 0

    def model(self):
        """Explicit (states, expected reward, continuation kernel) for value iteration."""
        spec = self.spec
        n = spec.grid_size
        n_s = n * n
        r_exp = np.zeros((n_s, 4))
        cont = np.zeros((n_s, 4, n_s))
        states = np.array([(i, j) for i in range(n) for j in range(n)], dtype=np.float64)
        rs = spec.reward_spec
        for s in range(n_s):
            i, j = divmod(s, n)
            if self.terminal_kind[i, j]:
                continue  # absorbing, never the source of a transition
            for a in range(4):
                probs = np.full(4, spec.slip_prob / 4.0)
                probs[a] += 1.0 - spec.slip_prob
                for b in range(4):
                    if probs[b] == 0:
                        continue
                    ni, nj = np.clip(np.array([i, j]) + MOVES[b], 0, n - 1)
                    kind = self.terminal_kind[ni, nj]
                    reward = rs["goal"] if kind == 1 else rs["hazard"] if kind == 2 else rs["step"]
                    r_exp[s, a] += probs[b] * reward
                    if kind == 0:
                        cont[s, a, ni * n + nj] += probs[b]
        return states, r_exp, cont


class LineWorld(Environment):
    @property
    def low(self):
        return np.zeros(1)

    @property
    def high(self):
        return np.ones(1)

    def sample_starts(self, rng, n):
        start = self.spec.start
        u = rng.random(n)
        if start is not None and len(start) == 1:
            return np.full((n, 1), float(start[0]))
        lo, hi = (0.0, 0.8) if start is None else (float(start[0]), float(start[1]))
        return (lo + (hi - lo) * u).reshape(n, 1)

    def draw_noise(self, rng, n_episodes, horizon):
        return {"z": rng.standard_normal((n_episodes, horizon))}

    @staticmethod
    def in_goal(x):
        return np.abs(x - LINE_GOAL) < LINE_GOAL_HALF_WIDTH - _GOAL_EPS

    def step_batch(self, states, actions, noise):
        x = np.asarray(states, dtype=np.float64).reshape(-1)
        move = np.where(np.asarray(actions) == 1, LINE_STEP, -LINE_STEP)
        x2 = np.clip(x + move + self.spec.noise_std * noise["z"], 0.0, 1.0)
        goal = self.in_goal(x2)
        rs = self.spec.reward_spec
        r = np.where(goal, rs["goal"], rs["step"]).astype(np.float64)
        return x2.reshape(-1, 1), r, goal

    def model(self, resolution):
        """Discretize onto ``resolution`` evenly spaced points of [0, 1]."""
        m = resolution
        grid = np.linspace(0.0, 1.0, m)
        half = 0.5 / (m - 1)
        goal_bins = self.in_goal(grid)
        rs = self.spec.reward_spec
        r_exp = np.zeros((m, 2))
        cont = np.zeros((m, 2, m))
        edges = np.concatenate([[-np.inf], grid[:-1] + half, [np.inf]])
        for a in range(2):
            mean = grid + (LINE_STEP if a == 1 else -LINE_STEP)
            if self.spec.noise_std > 0:
                cdf = norm.cdf((edges[None, :] - mean[:, None]) / self.spec.noise_std)
                probs = np.diff(cdf, axis=1)
            else:
                probs = np.zeros((m, m))
                probs[np.arange(m), np.clip(np.rint(np.clip(mean, 0, 1) * (m - 1)).astype(int), 0, m - 1)] = 1.0
            probs /= probs.sum(axis=1, keepdims=True)
            r_exp[:, a] = probs @ np.where(goal_bins, rs["goal"], rs["step"])
            cont[:, a, :] = probs * (~goal_bins)[None, :]
        return grid.reshape(m, 1), r_exp, cont

    def bin_index(self, states, resolution) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64).reshape(-1)
        return np.clip(np.rint(x * (resolution - 1)).astype(np.int64), 0, resolution - 1)


def build_env(spec: MdpSpec) -> Environment:
    spec.validate()
    return GridWorld(spec) if spec.kind == GRID else LineWorld(spec)


# ---------------------------------------------------------------------------
# exact planning


@dataclass
class OptimalValues:
    spec: MdpSpec
    states: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray
    residuals: np.ndarray
    resolution: Optional[int] = None

    def index(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.spec.state_dim)
        if self.spec.kind == GRID:
            cells = np.rint(states).astype(np.int64)
            return cells[:, 0] * self.spec.grid_size + cells[:, 1]
        m = self.resolution
        return np.clip(np.rint(states[:, 0] * (m - 1)).astype(np.int64), 0, m - 1)

    def greedy_policy(self) -> "TablePolicy":
        return TablePolicy(self.policy, self.index)


def value_iteration_oracle(spec: MdpSpec, grid_resolution: int = 101, tol: float = 1e-8,
                           max_iter: int = 100_000) -> OptimalValues:
    if tol <= 0:
        raise ConfigError("tol", "must be > 0")
    env = build_env(spec)
    if spec.kind == LINE:
        if grid_resolution < 2:
            raise ConfigError("grid_resolution", "must be >= 2 for LineWorld")
        states, r_exp, cont = env.model(grid_resolution)
    else:
        states, r_exp, cont = env.model()
        grid_resolution = None
    q, v, residuals = _kernels.value_iteration(r_exp, cont, spec.gamma, tol, max_iter)
    if residuals[-1] >= tol:
        raise NumericalError(f"value iteration did not converge in {max_iter} sweeps; residual {residuals[-1]:.3e}")
    return OptimalValues(spec, states, v, q, np.argmax(q, axis=1), residuals, grid_resolution)


# ---------------------------------------------------------------------------
# policies and rollouts

Policy = Callable[[np.ndarray], np.ndarray]


class TablePolicy:
    """Greedy lookup policy over an index function (cells or bins)."""

    def __init__(self, actions, index_fn):
        self.actions = np.asarray(actions, dtype=np.int64)
        self.index_fn = index_fn

    def __call__(self, states):
        return self.actions[self.index_fn(states)]


class ConstantPolicy:
    def __init__(self, action):
        self.action = int(action)

    def __call__(self, states):
        return np.full(len(states), self.action, dtype=np.int64)


def _rollout_batch(env, policy, starts, noise, explore_eps=0.0, explore_u=None, explore_a=None):
    """Run len(starts) episodes in lockstep. Returns per-step arrays (E, H) and a mask."""
    n_ep = len(starts)
    horizon = env.spec.horizon
    d = env.spec.state_dim
    S = np.zeros((n_ep, horizon, d))
    A = np.zeros((n_ep, horizon), dtype=np.int64)
    R = np.zeros((n_ep, horizon))
    S2 = np.zeros((n_ep, horizon, d))
    T = np.zeros((n_ep, horizon), dtype=bool)
    alive = np.zeros((n_ep, horizon), dtype=bool)
    state = np.asarray(starts, dtype=np.float64).copy()
    active = np.ones(n_ep, dtype=bool)
    for t in range(horizon):
        if not active.any():
            break
        act = np.asarray(policy(state), dtype=np.int64)
        if explore_eps > 0:
            act = np.where(explore_u[:, t] < explore_eps, explore_a[:, t], act)
        s2, r, term = env.step_batch(state, act, {k: v[:, t] for k, v in noise.items()})
        S[:, t], A[:, t], R[:, t], S2[:, t], T[:, t] = state, act, r, s2, term
        alive[:, t] = active
        active = active & ~term
        state = np.where(active[:, None], s2, state)
    return S, A, R, S2, T, alive


def generate_dataset(env: Environment, n_transitions: int, quality: str = "medium", seed: int = 0,
                     oracle: Optional[OptimalValues] = None, batch_episodes: int = 64) -> TransitionDataset:
    if n_transitions < 1:
        raise ConfigError("n_transitions", "must be >= 1")
    if quality not in BEHAVIOR_EPSILON:
        raise ConfigError("quality", f"expected one of {sorted(BEHAVIOR_EPSILON)}, got {quality!r}")
    eps = BEHAVIOR_EPSILON[quality]
    if eps < 1.0 and oracle is None:
        oracle = value_iteration_oracle(env.spec)
    policy = oracle.greedy_policy() if eps < 1.0 else ConstantPolicy(0)
    rng = rng_for(seed, STREAM_DATASET)
    n_a, horizon = env.spec.n_actions, env.spec.horizon
    chunks = []
    total = 0
    while total < n_transitions:
        starts = env.sample_starts(rng, batch_episodes)
        noise = env.draw_noise(rng, batch_episodes, horizon)
        eu = rng.random((batch_episodes, horizon))
        ea = rng.integers(0, n_a, size=(batch_episodes, horizon))
        S, A, R, S2, T, alive = _rollout_batch(env, policy, starts, noise, eps, eu, ea)
        # episode-major order
        sel = alive.reshape(-1)
        chunk = (S.reshape(-1, env.spec.state_dim)[sel], A.reshape(-1)[sel], R.reshape(-1)[sel],
                 S2.reshape(-1, env.spec.state_dim)[sel], T.reshape(-1)[sel])
        chunks.append(chunk)
        total += int(sel.sum())
    cols = [np.concatenate([c[k] for c in chunks])[:n_transitions] for k in range(5)]
    return TransitionDataset(spec=env.spec, s=cols[0], a=cols[1], r=cols[2], s_next=cols[3], terminal=cols[4],
                             behavior_tag=quality, generation_seed=int(seed))


@dataclass
class MeanReturn:
    mean: float
    se: float
    returns: np.ndarray


def evaluate_policy(env: Environment, policy: Policy, n_episodes: int = 1000, seed: int = 0) -> MeanReturn:
    """Undiscounted return over seeded rollouts.

    The random stream depends only on ``seed``, not on the policy, so two
    policies evaluated with the same seed face identical starts and noise.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes", "must be >= 1")
    rng = rng_for(seed, STREAM_EVAL)
    starts = env.sample_starts(rng, n_episodes)
    noise = env.draw_noise(rng, n_episodes, env.spec.horizon)
    _, _, R, _, _, alive = _rollout_batch(env, policy, starts, noise)
    returns = (R * alive).sum(axis=1)
    se = float(returns.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else float("nan")
    return MeanReturn(float(returns.mean()), se, returns)


def robust_scale(x: np.ndarray) -> np.ndarray:
    """Per-column robust std: 1.4826 * MAD, falling back to std, then to 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    med = np.median(x, axis=0)
    scale = 1.4826 * np.median(np.abs(x - med), axis=0)
    std = x.std(axis=0)
    scale = np.where(scale > 0, scale, std)
    return np.where(scale > 0, scale, 1.0)
