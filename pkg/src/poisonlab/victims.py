"""Offline value-learning victims: tabular Q sweeps and linear fitted Q-iteration.

Every victim represents ``Q(s, a) = theta . phi(s, a)`` where ``phi`` places a
state feature vector into the block belonging to action ``a``. For the
tabular victim the state features are a one-hot bin indicator, so ``theta``
is the Q-table laid out action-major.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from . import _kernels
from .envlab import GRID, MdpSpec, TransitionDataset, dumps_record
from .errors import ConfigError, DataError, NumericalError

TABULAR = "Tabular"
RBF = "RbfGrid"
POLY = "Polynomial"

TABQ = "TabQ"
LINFQI = "LinFQI"
CONSLINFQI = "ConsLinFQI"

DIVERGENCE_LIMIT = 1e8


@dataclass(frozen=True)
class FeatureMap:
    kind: str
    n_actions: int
    state_dim: int
    low: tuple = (0.0,)
    high: tuple = (1.0,)
    # Tabular
    bins: tuple = ()
    # RbfGrid
    centers: tuple = ()
    bandwidth: float = 0.08
    # Polynomial
    degree: int = 0

    @classmethod
    def tabular(cls, bins, low, high, n_actions):
        bins = tuple(int(b) for b in np.atleast_1d(bins))
        low = tuple(float(v) for v in np.atleast_1d(low))
        high = tuple(float(v) for v in np.atleast_1d(high))
        return cls(TABULAR, n_actions, len(bins), low=low, high=high, bins=bins)

    @classmethod
    def rbf_grid(cls, n_centers=25, bandwidth=0.08, n_actions=2, low=0.0, high=1.0, state_dim=1):
        axes = [np.linspace(lo, hi, n_centers) for lo, hi in zip(np.broadcast_to(low, state_dim),
                                                                np.broadcast_to(high, state_dim))]
        centers = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return cls(RBF, n_actions, state_dim, low=tuple(np.broadcast_to(low, state_dim).astype(float)),
                   high=tuple(np.broadcast_to(high, state_dim).astype(float)),
                   centers=tuple(map(tuple, centers)), bandwidth=float(bandwidth))

    @classmethod
    def polynomial(cls, degree=3, n_actions=2, state_dim=1):
        return cls(POLY, n_actions, state_dim, low=(0.0,) * state_dim, high=(1.0,) * state_dim, degree=int(degree))

    # ------------------------------------------------------------------

    @property
    def differentiable(self) -> bool:
        return self.kind in (RBF, POLY)

    @property
    def n_base(self) -> int:
        if self.kind == TABULAR:
            return int(np.prod(self.bins))
        if self.kind == RBF:
            return len(self.centers)
        return len(self._exponents())

    @property
    def dim(self) -> int:
        return self.n_base * self.n_actions

    def _exponents(self):
        return [e for e in itertools.product(range(self.degree + 1), repeat=self.state_dim) if sum(e) <= self.degree]

    def bin_index(self, states, idx=None) -> np.ndarray:
        """Tabular bin of each state; raises DataError for states off the grid."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        low, high, bins = np.array(self.low), np.array(self.high), np.array(self.bins)
        rel = (states - low) / (high - low) * (bins - 1)
        pos = np.rint(rel).astype(np.int64)
        bad = np.flatnonzero(np.any((rel < -1e-9) | (rel > bins - 1 + 1e-9), axis=1))
        if bad.size:
            where = bad[0] if idx is None else int(idx[bad[0]])
            raise DataError("state outside tabular bin range", idx=where)
        flat = np.zeros(len(states), dtype=np.int64)
        for j in range(self.state_dim):
            flat = flat * bins[j] + pos[:, j]
        return flat

    def base(self, states) -> np.ndarray:
        """State features (n, n_base), shared by every action block."""
        states = np.ascontiguousarray(np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim))
        if self.kind == TABULAR:
            out = np.zeros((len(states), self.n_base))
            out[np.arange(len(states)), self.bin_index(states)] = 1.0
            return out
        if self.kind == RBF:
            return _kernels.rbf(states, np.asarray(self.centers, dtype=np.float64), self.bandwidth)
        exps = np.array(self._exponents())
        return np.prod(states[:, None, :] ** exps[None, :, :], axis=2)

    def base_jacobian(self, states) -> np.ndarray:
        """d base / d s, shape (n, n_base, state_dim)."""
        if not self.differentiable:
            raise ConfigError("feature_map", f"{self.kind} features have no state jacobian")
        states = np.ascontiguousarray(np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim))
        if self.kind == RBF:
            return _kernels.rbf_jacobian(states, np.asarray(self.centers, dtype=np.float64), self.bandwidth)
        exps = np.array(self._exponents())
        out = np.zeros((len(states), len(exps), self.state_dim))
        for j in range(self.state_dim):
            lowered = exps.copy()
            lowered[:, j] = np.maximum(lowered[:, j] - 1, 0)
            coef = exps[:, j].astype(np.float64)
            out[:, :, j] = coef[None, :] * np.prod(states[:, None, :] ** lowered[None, :, :], axis=2)
        return out

    def phi(self, states, actions) -> np.ndarray:
        b = self.base(states)
        n, k = b.shape
        out = np.zeros((n, self.dim))
        cols = np.asarray(actions, dtype=np.int64)[:, None] * k + np.arange(k)[None, :]
        out[np.arange(n)[:, None], cols] = b
        return out

    def jacobian(self, states, actions) -> np.ndarray:
        """d phi(s, a) / d s, shape (n, dim, state_dim)."""
        jb = self.base_jacobian(states)
        n, k, d = jb.shape
        out = np.zeros((n, self.dim, d))
        cols = np.asarray(actions, dtype=np.int64)[:, None] * k + np.arange(k)[None, :]
        out[np.arange(n)[:, None], cols, :] = jb
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centers"] = [list(c) for c in self.centers]
        for key in ("low", "high", "bins"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["centers"] = tuple(tuple(float(v) for v in c) for c in d.get("centers", ()))
        for key in ("low", "high", "bins"):
            d[key] = tuple(d.get(key, ()))
        return cls(**d)


def default_feature_map(spec: MdpSpec, kind: Optional[str] = None, **params) -> FeatureMap:
    """Tabular cells for GridWorld; 25-centre RBF (bandwidth 0.08) for LineWorld."""
    if kind is None:
        kind = TABULAR if spec.kind == GRID else RBF
    if kind == TABULAR:
        if spec.kind == GRID:
            n = spec.grid_size
            return FeatureMap.tabular((n, n), (0.0, 0.0), (n - 1.0, n - 1.0), spec.n_actions)
        return FeatureMap.tabular(params.get("bins", 101), 0.0, 1.0, spec.n_actions)
    if kind == RBF:
        high = spec.grid_size - 1.0 if spec.kind == GRID else 1.0
        return FeatureMap.rbf_grid(params.get("n_centers", 25 if spec.kind != GRID else spec.grid_size),
                                   params.get("bandwidth", 0.08 if spec.kind != GRID else 0.75),
                                   spec.n_actions, 0.0, high, spec.state_dim)
    if kind == POLY:
        return FeatureMap.polynomial(params.get("degree", 3), spec.n_actions, spec.state_dim)
    raise ConfigError("feature_map", f"unknown feature map kind {kind!r}")


@dataclass
class TrainConfig:
    n_iterations: int = 50
    ridge_lambda: float = 0.1
    conservative_beta: float = 0.0
    learning_rate: float = 0.01
    tol: float = 1e-8
    seed: int = 0

    def validate(self):
        if int(self.n_iterations) < 1:
            raise ConfigError("n_iterations", "must be >= 1")
        for name in ("ridge_lambda", "conservative_beta", "learning_rate", "tol"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(name, "must be finite")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda", "must be >= 0")
        if self.conservative_beta < 0:
            raise ConfigError("conservative_beta", "must be >= 0")
        return self


@dataclass
class VictimModel:
    feature_map: FeatureMap
    theta: np.ndarray
    gamma: float
    algo_tag: str
    train_log: list = field(default_factory=list)

    @property
    def table(self) -> np.ndarray:
        """theta viewed as (n_base, n_actions); for Tabular this is Q[bin, a]."""
        return self.theta.reshape(self.feature_map.n_actions, self.feature_map.n_base).T

    def q_all(self, states) -> np.ndarray:
        return self.feature_map.base(states) @ self.table

    def q(self, states, actions) -> np.ndarray:
        qa = self.q_all(states)
        return qa[np.arange(len(qa)), np.asarray(actions, dtype=np.int64)]

    @classmethod
    def from_table(cls, feature_map, q_table, gamma, algo_tag=TABQ):
        q_table = np.asarray(q_table, dtype=np.float64)
        return cls(feature_map, q_table.T.reshape(-1).copy(), gamma, algo_tag)

    # -- checkpoint --------------------------------------------------------

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(dumps_record({"type": "header", "algo_tag": self.algo_tag, "gamma": float(self.gamma),
                                   "feature_map": self.feature_map.to_dict()}) + "\n")
            fh.write(dumps_record({"theta": self.theta, "train_log": list(map(float, self.train_log))}) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "VictimModel":
        with open(path) as fh:
            header = json.loads(fh.readline())
            body = json.loads(fh.readline())
        return cls(FeatureMap.from_dict(header["feature_map"]), np.array(body["theta"], dtype=np.float64),
                   float(header["gamma"]), header["algo_tag"], list(body.get("train_log", [])))


class GreedyPolicy:
    """argmax_a Q(s, a), ties to the lowest action index."""

    def __init__(self, model: VictimModel):
        self.model = model

    def __call__(self, states):
        return np.argmax(self.model.q_all(states), axis=1)


def greedy_policy(model: VictimModel) -> GreedyPolicy:
    return GreedyPolicy(model)


def train_tabular_q(data: TransitionDataset, cfg: TrainConfig, feature_map: Optional[FeatureMap] = None,
                    q_init: Optional[np.ndarray] = None) -> VictimModel:
    """Repeated in-order TD(0) sweeps ``Q(s,a) += lr * delta`` over the dataset."""
    cfg.validate()
    fm = feature_map or default_feature_map(data.spec, TABULAR)
    if fm.kind != TABULAR:
        raise ConfigError("feature_map", "train_tabular_q needs a Tabular feature map")
    if not 0.0 <= cfg.learning_rate <= 1.0:
        raise ConfigError("learning_rate", "must lie in [0, 1]")
    order = np.argsort(data.idx, kind="stable")
    s_bin = fm.bin_index(data.s[order], data.idx[order])
    nb = fm.bin_index(data.s_next[order], data.idx[order])
    q = np.zeros((fm.n_base, fm.n_actions)) if q_init is None else np.array(q_init, dtype=np.float64)
    q, log = _kernels.tabq_sweeps(s_bin, data.a[order], data.r[order], nb, data.terminal[order], q,
                                  float(cfg.learning_rate), float(data.spec.gamma), int(cfg.n_iterations),
                                  float(cfg.tol))
    if not np.all(np.isfinite(q)):
        raise NumericalError("tabular Q became non-finite")
    model = VictimModel.from_table(fm, q, data.spec.gamma, TABQ)
    model.train_log = [float(v) for v in log]
    return model


def train_linear_fqi(data: TransitionDataset, cfg: TrainConfig,
                     feature_map: Optional[FeatureMap] = None) -> VictimModel:
    """Fitted Q-iteration with an exact ridge solve per iteration.

    With ``conservative_beta > 0`` each target is lowered by
    ``beta * (mean_a Q(s, a) - Q(s, a_data))`` from the previous iterate.
    """
    cfg.validate()
    fm = feature_map or default_feature_map(data.spec, RBF)
    gamma = data.spec.gamma
    base_s = fm.base(data.s)
    base_next = fm.base(data.s_next)
    phi = fm.phi(data.s, data.a)
    gram = phi.T @ phi
    if cfg.ridge_lambda > 0:
        gram[np.diag_indices_from(gram)] += cfg.ridge_lambda
    try:
        chol = linalg.cho_factor(gram)
        if not np.all(np.isfinite(chol[0])) or np.min(np.abs(np.diag(chol[0]))) < 1e-12 * np.sqrt(np.max(np.diag(gram))):
            raise linalg.LinAlgError
    except linalg.LinAlgError:
        raise NumericalError("normal matrix is singular; use ridge_lambda > 0") from None
    cont = gamma * (~data.terminal)
    n_a, k = fm.n_actions, fm.n_base
    rows = np.arange(len(data))
    theta = np.zeros(fm.dim)
    log = []
    for _ in range(int(cfg.n_iterations)):
        table = theta.reshape(n_a, k).T
        y = data.r + cont * np.max(base_next @ table, axis=1)
        if cfg.conservative_beta > 0:
            q_s = base_s @ table
            y = y - cfg.conservative_beta * (q_s.mean(axis=1) - q_s[rows, data.a])
        new = linalg.cho_solve(chol, phi.T @ y)
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > DIVERGENCE_LIMIT:
            raise NumericalError(f"fitted Q-iteration diverged (|theta|_inf > {DIVERGENCE_LIMIT:g})")
        change = float(np.max(np.abs(new - theta)))
        log.append(change)
        theta = new
        if change < cfg.tol:
            break
    tag = CONSLINFQI if cfg.conservative_beta > 0 else LINFQI
    return VictimModel(fm, theta, gamma, tag, log)


def train_victim(data: TransitionDataset, algo_tag: str, cfg: TrainConfig,
                 feature_map: Optional[FeatureMap] = None) -> VictimModel:
    if algo_tag == TABQ:
        return train_tabular_q(data, cfg, feature_map)
    if algo_tag in (LINFQI, CONSLINFQI):
        if algo_tag == CONSLINFQI and cfg.conservative_beta <= 0:
            raise ConfigError("conservative_beta", "ConsLinFQI needs conservative_beta > 0")
        return train_linear_fqi(data, cfg, feature_map)
    raise ConfigError("algo_tag", f"unknown victim {algo_tag!r}")
