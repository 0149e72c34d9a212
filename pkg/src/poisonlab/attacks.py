"""Dataset poisoning strategies with exact energy accounting.

Perturbations are planned in scaled coordinates: each perturbable column is
divided by its robust std (``units="robust"``) so one epsilon means the same
thing for rewards and states. Energies are reported in those units.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .allocator import global_allocate
from .envlab import STREAM_ATTACK, TransitionDataset, build_env, dumps_record, rng_for, robust_scale
from .errors import ConfigError, DataError
from .sensitivity import SURFACES, SensitivityTable, top_k_by_sensitivity

log = logging.getLogger(__name__)

RANDOM_NOISE = "RandomNoise"
RANDOM_SUBSET = "RandomSubset"
LOCAL_GREEDY = "LocalGreedy"
GLOBAL_ALLOCATION = "GlobalAllocation"
STRATEGIES = (RANDOM_NOISE, RANDOM_SUBSET, LOCAL_GREEDY, GLOBAL_ALLOCATION)

_ALIASES = {s.lower(): s for s in STRATEGIES}
_ALIASES.update({"random_noise": RANDOM_NOISE, "random_subset": RANDOM_SUBSET,
                 "local_greedy": LOCAL_GREEDY, "global_allocation": GLOBAL_ALLOCATION, "global": GLOBAL_ALLOCATION})

MAX_ROUNDS = 5


def canonical_strategy(name: str) -> str:
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError("strategy", f"unknown strategy {name!r}; expected one of {STRATEGIES}") from None


@dataclass
class AttackConfig:
    strategy: str
    rho: Optional[float] = None
    epsilon_local: Optional[float] = None
    c_total: Optional[float] = None
    surface: str = "reward"
    support: str = "all"
    seed: int = 0
    units: str = "robust"
    perturb_next_state: bool = False
    n_rounds: int = 1

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)

    def validate(self) -> "AttackConfig":
        if self.surface not in SURFACES:
            raise ConfigError("surface", f"expected one of {SURFACES}, got {self.surface!r}")
        if self.units not in ("robust", "raw"):
            raise ConfigError("units", f"expected 'robust' or 'raw', got {self.units!r}")
        if not 1 <= int(self.n_rounds) <= MAX_ROUNDS:
            raise ConfigError("n_rounds", f"must lie in [1, {MAX_ROUNDS}]")
        needs_rho = self.strategy != GLOBAL_ALLOCATION or self.support == "top_rho"
        if self.strategy == GLOBAL_ALLOCATION:
            if self.support not in ("all", "top_rho"):
                raise ConfigError("support", f"expected 'all' or 'top_rho', got {self.support!r}")
            if self.c_total is None:
                raise ConfigError("c_total", "required by GlobalAllocation")
            if not (math.isfinite(self.c_total) and self.c_total > 0):
                raise ConfigError("c_total", f"must be finite and > 0, got {self.c_total}")
        else:
            if self.epsilon_local is None:
                raise ConfigError("epsilon_local", f"required by {self.strategy}")
            if not (math.isfinite(self.epsilon_local) and self.epsilon_local >= 0):
                raise ConfigError("epsilon_local", f"must be finite and >= 0, got {self.epsilon_local}")
        if needs_rho:
            if self.rho is None:
                raise ConfigError("rho", f"required by {self.strategy}")
            if not 0 < self.rho <= 1:
                raise ConfigError("rho", f"must lie in (0, 1], got {self.rho}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "AttackConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown attack field")
        return cls(**d)


def budget_matched(strategy, rho, epsilon_local, n, **kw) -> AttackConfig:
    """Config whose total energy equals rho * n * epsilon_local**2 for every strategy."""
    strategy = canonical_strategy(strategy)
    if strategy == GLOBAL_ALLOCATION:
        return AttackConfig(strategy, rho=rho, c_total=rho * n * epsilon_local ** 2, **kw)
    return AttackConfig(strategy, rho=rho, epsilon_local=epsilon_local, **kw)


@dataclass
class PoisonedDataset:
    base: TransitionDataset
    config: AttackConfig
    rows: np.ndarray  # dataset row of each perturbation
    d_r: np.ndarray
    d_s: np.ndarray
    d_s_next: np.ndarray
    scale_reward: float
    scale_state: np.ndarray
    planned_energy: float
    objective: float  # sum |delta_i| * eps_i at scoring time
    status: str = "ok"
    zero_gradient_count: int = 0
    epsilons: np.ndarray = field(default=None)

    @property
    def idx(self) -> np.ndarray:
        return self.base.idx[self.rows]

    @property
    def n_poisoned(self) -> int:
        return len(self.rows)

    def eta(self) -> np.ndarray:
        """Delivered perturbations in scaled units, one row per perturbed transition."""
        return np.column_stack([self.d_r / self.scale_reward, self.d_s / self.scale_state[None, :],
                                self.d_s_next / self.scale_state[None, :]])

    @property
    def total_l2_energy(self) -> float:
        return float(np.sum(self.eta() ** 2))

    @property
    def clipping_loss(self) -> float:
        return max(0.0, self.planned_energy - self.total_l2_energy)

    def manifest(self) -> dict:
        return {"config": self.config.to_dict(), "n_poisoned": self.n_poisoned,
                "planned_energy": self.planned_energy, "total_l2_energy": self.total_l2_energy,
                "clipping_loss": self.clipping_loss, "objective": self.objective, "status": self.status,
                "zero_gradient_count": self.zero_gradient_count, "scale_reward": self.scale_reward,
                "scale_state": self.scale_state}

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(dumps_record({"type": "header", **self.manifest()}) + "\n")
            for k in range(self.n_poisoned):
                rec = {"idx": int(self.idx[k]), "d_r": float(self.d_r[k]), "d_s": self.d_s[k]}
                if self.config.perturb_next_state:
                    rec["d_s_next"] = self.d_s_next[k]
                fh.write(dumps_record(rec) + "\n")
        return path

    @classmethod
    def read(cls, path, base: TransitionDataset) -> "PoisonedDataset":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        head = json.loads(lines[0])
        recs = [json.loads(ln) for ln in lines[1:]]
        d = base.spec.state_dim
        pos = _row_lookup(base, np.array([r["idx"] for r in recs], dtype=np.int64))
        return cls(base, AttackConfig.from_dict(head["config"]), pos,
                   np.array([r["d_r"] for r in recs], dtype=np.float64),
                   np.array([r["d_s"] for r in recs], dtype=np.float64).reshape(len(recs), d),
                   np.array([r.get("d_s_next", [0.0] * d) for r in recs], dtype=np.float64).reshape(len(recs), d),
                   float(head["scale_reward"]), np.array(head["scale_state"], dtype=np.float64),
                   float(head["planned_energy"]), float(head["objective"]), head["status"],
                   int(head["zero_gradient_count"]))


def _row_lookup(data: TransitionDataset, idx: np.ndarray) -> np.ndarray:
    order = np.argsort(data.idx)
    pos = np.searchsorted(data.idx, idx, sorter=order)
    pos = np.clip(pos, 0, len(data) - 1)
    rows = order[pos]
    bad = np.flatnonzero(data.idx[rows] != idx)
    if bad.size:
        raise DataError("perturbation idx not present in dataset", idx=int(idx[bad[0]]))
    return rows


def energy_audit(poisoned: PoisonedDataset) -> float:
    """Independent recomputation of delivered energy, one transition at a time."""
    total = 0.0
    for k in range(poisoned.n_poisoned):
        e = (poisoned.d_r[k] / poisoned.scale_reward) ** 2
        for j in range(poisoned.d_s.shape[1]):
            e += (poisoned.d_s[k, j] / poisoned.scale_state[j]) ** 2
            e += (poisoned.d_s_next[k, j] / poisoned.scale_state[j]) ** 2
        total += e
    return total


# ---------------------------------------------------------------------------


def _scales(data, cfg):
    if cfg.units == "raw":
        return 1.0, np.ones(data.spec.state_dim)
    return float(robust_scale(data.r)[0]), robust_scale(data.s)


def _n_target(cfg, n):
    k = int(math.floor(cfg.rho * n + 1e-9))
    if k < 1:
        raise ConfigError("rho", f"rho * N = {cfg.rho * n:g} selects no transitions")
    return k


def _layout(cfg, d):
    """Column slices (reward, state, next_state) inside a scaled perturbation vector."""
    cols = {}
    pos = 0
    if cfg.surface in ("reward", "both"):
        cols["r"] = slice(pos, pos + 1)
        pos += 1
    if cfg.surface in ("state", "both"):
        cols["s"] = slice(pos, pos + d)
        pos += d
        if cfg.perturb_next_state:
            cols["s_next"] = slice(pos, pos + d)
            pos += d
    return cols, pos


def _build(data, cfg, rows, eta_scaled, planned, objective, sr, ss, status="ok", zero_grad=0, eps=None):
    """Map scaled perturbations to raw fields, clip states to the env box, drop zero rows."""
    d = data.spec.state_dim
    cols, _ = _layout(cfg, d)
    n = len(rows)
    d_r = np.zeros(n)
    d_s = np.zeros((n, d))
    d_s_next = np.zeros((n, d))
    if "r" in cols:
        d_r = eta_scaled[:, cols["r"]][:, 0] * sr
    if "s" in cols or "s_next" in cols:
        env = build_env(data.spec)
        if "s" in cols:
            target = np.clip(data.s[rows] + eta_scaled[:, cols["s"]] * ss, env.low, env.high)
            d_s = target - data.s[rows]
        if "s_next" in cols:
            target = np.clip(data.s_next[rows] + eta_scaled[:, cols["s_next"]] * ss, env.low, env.high)
            d_s_next = target - data.s_next[rows]
    keep = (d_r != 0) | np.any(d_s != 0, axis=1) | np.any(d_s_next != 0, axis=1)
    order = np.argsort(rows[keep], kind="stable")
    pick = np.flatnonzero(keep)[order]
    return PoisonedDataset(data, cfg, rows[pick], d_r[pick], d_s[pick], d_s_next[pick], sr, ss, float(planned),
                           float(objective), status, int(zero_grad), None if eps is None else eps[pick])


def _check_records(data, records, cfg):
    if len(records) != len(data) or not np.array_equal(records.idx, data.idx):
        raise DataError("sensitivity records are not aligned with the dataset")
    if cfg.surface != "reward" and records.surface == "reward":
        raise ConfigError("surface", f"records scored on {records.surface!r}, attack needs {cfg.surface!r}")
    if cfg.perturb_next_state and not records.perturb_next_state:
        raise ConfigError("perturb_next_state", "records were scored without next-state gradients")


def _unit_directions(records, cfg, sr, ss):
    g = _surface_gradient(records, cfg, sr, ss)
    norms = np.linalg.norm(g, axis=1)
    unit = np.zeros_like(g)
    nz = norms > 0
    unit[nz] = g[nz] / norms[nz, None]
    return unit, nz


def _surface_gradient(records, cfg, sr, ss):
    parts = []
    if cfg.surface in ("reward", "both"):
        parts.append((records.grad_reward * sr)[:, None])
    if cfg.surface in ("state", "both"):
        d = len(ss)
        parts.append(records.grad_state[:, :d] * ss[None, :])
        if cfg.perturb_next_state:
            parts.append(records.grad_state[:, d:2 * d] * ss[None, :])
    return np.concatenate(parts, axis=1)


def attack_random_noise(data: TransitionDataset, records: Optional[SensitivityTable], cfg: AttackConfig) -> PoisonedDataset:
    cfg = _expect(cfg, RANDOM_NOISE)
    n = len(data)
    k = _n_target(cfg, n)
    sr, ss = _scales(data, cfg)
    rng = rng_for(cfg.seed, STREAM_ATTACK)
    rows = np.sort(rng.choice(n, size=k, replace=False))
    _, width = _layout(cfg, data.spec.state_dim)
    eps = float(cfg.epsilon_local)
    eta = rng.uniform(-eps, eps, size=(k, width)) if eps > 0 else np.zeros((k, width))
    objective = 0.0
    if records is not None:
        objective = float(np.dot(records.abs_delta[rows], np.linalg.norm(eta, axis=1)))
    return _build(data, cfg, rows, eta, np.sum(eta ** 2), objective, sr, ss)


def _directional(data, records, cfg, rows):
    sr, ss = _scales(data, cfg)
    unit, nz = _unit_directions(records, cfg, sr, ss)
    sel_nz = nz[rows]
    zero = int((~sel_nz).sum())
    if zero:
        log.warning("%d selected transitions have zero attack gradient and stay clean", zero)
    eps = np.where(sel_nz, float(cfg.epsilon_local), 0.0)
    eta = unit[rows] * eps[:, None]
    objective = float(np.dot(records.abs_delta[rows], eps))
    return _build(data, cfg, rows, eta, float(np.sum(eps ** 2)), objective, sr, ss, zero_grad=zero, eps=eps)


def attack_random_subset(data: TransitionDataset, records: SensitivityTable, cfg: AttackConfig) -> PoisonedDataset:
    cfg = _expect(cfg, RANDOM_SUBSET)
    _check_records(data, records, cfg)
    k = _n_target(cfg, len(data))
    rng = rng_for(cfg.seed, STREAM_ATTACK)
    rows = np.sort(rng.choice(len(data), size=k, replace=False))
    return _directional(data, records, cfg, rows)


def attack_local_greedy(data: TransitionDataset, records: SensitivityTable, cfg: AttackConfig) -> PoisonedDataset:
    cfg = _expect(cfg, LOCAL_GREEDY)
    _check_records(data, records, cfg)
    k = _n_target(cfg, len(data))
    rows = np.sort(_row_lookup(data, top_k_by_sensitivity(records, k, "abs_delta")))
    return _directional(data, records, cfg, rows)


def attack_global_allocation(data: TransitionDataset, records: SensitivityTable, cfg: AttackConfig) -> PoisonedDataset:
    cfg = _expect(cfg, GLOBAL_ALLOCATION)
    _check_records(data, records, cfg)
    sr, ss = _scales(data, cfg)
    unit, nz = _unit_directions(records, cfg, sr, ss)
    if cfg.support == "top_rho":
        rows = np.sort(_row_lookup(data, top_k_by_sensitivity(records, _n_target(cfg, len(data)), "abs_delta")))
    else:
        rows = np.arange(len(data))
    # budget on a row with no usable direction could never be delivered
    weights = np.where(nz[rows], records.abs_delta[rows], 0.0)
    plan = global_allocate(weights, float(cfg.c_total))
    zero = int((~nz[rows] & (records.abs_delta[rows] > 0)).sum())
    if plan.status == "degenerate":
        log.warning("degenerate attack: every transition on the support has zero TD error or gradient")
        return _build(data, cfg, rows[:0], np.zeros((0, unit.shape[1])), 0.0, 0.0, sr, ss,
                      status="degenerate", zero_grad=zero, eps=np.zeros(0))
    eta = unit[rows] * plan.epsilons[:, None]
    return _build(data, cfg, rows, eta, plan.spent, plan.objective_value, sr, ss, zero_grad=zero,
                  eps=plan.epsilons)


_DISPATCH = {
    RANDOM_NOISE: attack_random_noise,
    RANDOM_SUBSET: attack_random_subset,
    LOCAL_GREEDY: attack_local_greedy,
    GLOBAL_ALLOCATION: attack_global_allocation,
}


def _expect(cfg, strategy):
    cfg.validate()
    if cfg.strategy != strategy:
        raise ConfigError("strategy", f"expected {strategy}, got {cfg.strategy}")
    return cfg


def run_attack(data: TransitionDataset, records: Optional[SensitivityTable], cfg: AttackConfig,
               rescore: Optional[Callable[[TransitionDataset], SensitivityTable]] = None) -> PoisonedDataset:
    """Dispatch on strategy. With ``n_rounds > 1`` the budget is split evenly over
    rounds and ``rescore`` refreshes the records against the partly poisoned data."""
    cfg.validate()
    fn = _DISPATCH[cfg.strategy]
    if cfg.n_rounds == 1:
        return fn(data, records, cfg)
    if rescore is None:
        raise ConfigError("n_rounds", "iterative attacks need a rescore callback")
    frac = 1.0 / cfg.n_rounds
    step_cfg = replace(cfg, n_rounds=1,
                       c_total=None if cfg.c_total is None else cfg.c_total * frac,
                       epsilon_local=None if cfg.epsilon_local is None else cfg.epsilon_local * math.sqrt(frac))
    current = data
    acc_r = np.zeros(len(data))
    acc_s = np.zeros_like(data.s)
    acc_s2 = np.zeros_like(data.s_next)
    planned = objective = 0.0
    last = None
    for rnd in range(cfg.n_rounds):
        step_cfg = replace(step_cfg, seed=cfg.seed + rnd)
        part = fn(current, records, step_cfg)
        acc_r[part.rows] += part.d_r
        acc_s[part.rows] += part.d_s
        acc_s2[part.rows] += part.d_s_next
        planned += part.planned_energy
        objective += part.objective
        current = apply(current, part)
        last = part
        if rnd + 1 < cfg.n_rounds:
            records = rescore(current)
    rows = np.flatnonzero((acc_r != 0) | np.any(acc_s != 0, axis=1) | np.any(acc_s2 != 0, axis=1))
    return PoisonedDataset(data, cfg, rows, acc_r[rows], acc_s[rows], acc_s2[rows], last.scale_reward,
                           last.scale_state, planned, objective, last.status)


def apply(data: TransitionDataset, poisoned: PoisonedDataset) -> TransitionDataset:
    """New dataset with the perturbations added; ``data`` itself is never mutated."""
    if len(poisoned.base) != len(data) or not np.array_equal(poisoned.base.idx, data.idx):
        raise DataError("poisoned dataset was built on a different base")
    out = data.copy()
    rows = poisoned.rows
    if np.any((rows < 0) | (rows >= len(data))):
        raise DataError("perturbation row outside dataset")
    out.r[rows] = out.r[rows] + poisoned.d_r
    out.s[rows] = out.s[rows] + poisoned.d_s
    out.s_next[rows] = out.s_next[rows] + poisoned.d_s_next
    out.poisoned[rows] = True
    return out
