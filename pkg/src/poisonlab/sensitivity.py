"""Per-transition TD errors, attack gradients and influence scores.

Targets are frozen when differentiating: ``max_a' Q(s', a')`` is a constant
with respect to ``s`` and the Hessian is the Gauss-Newton one, ``sum phi phi^T``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .envlab import Transition, TransitionDataset
from .errors import ConfigError, NumericalError, UnsupportedSurfaceError
from .victims import VictimModel

SURFACES = ("reward", "state", "both")
MAX_ORACLE_DIM = 200
MAX_ORACLE_N = 20_000
MAX_CONDITION = 1e12


def _td_arrays(model: VictimModel, s, a, r, s_next, terminal):
    table = model.table
    fm = model.feature_map
    base_s = fm.base(s)
    q_s = base_s @ table
    q_next = fm.base(s_next) @ table
    rows = np.arange(len(r))
    q_sa = q_s[rows, a]
    boot = np.where(terminal, 0.0, q_next.max(axis=1))
    delta = r + model.gamma * boot - q_sa
    return delta, base_s, q_next


def td_error(model: VictimModel, t: Transition) -> float:
    """r + gamma * max_a' Q(s', a') - Q(s, a), bootstrap dropped on terminal."""
    delta, _, _ = _td_arrays(model, np.atleast_2d(t.s), np.array([t.a]), np.array([t.r], dtype=float),
                             np.atleast_2d(t.s_next), np.array([t.terminal]))
    if not np.isfinite(delta[0]):
        raise NumericalError(f"non-finite Q value at idx={t.idx}")
    return float(delta[0])


@dataclass
class SensitivityRecord:
    idx: int
    delta: float
    abs_delta: float
    grad_reward: float
    grad_state: np.ndarray
    grad_norm: float
    influence_proxy: float


@dataclass
class SensitivityTable:
    """Columnar form of a list of SensitivityRecord, aligned with dataset rows."""

    idx: np.ndarray
    delta: np.ndarray
    abs_delta: np.ndarray
    grad_reward: np.ndarray
    grad_state: np.ndarray  # (n, d) or (n, 2d) when s_next is perturbable, (n, 0) for reward surface
    grad_norm: np.ndarray
    influence_proxy: np.ndarray
    surface: str = "reward"
    perturb_next_state: bool = False

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i) -> SensitivityRecord:
        return SensitivityRecord(int(self.idx[i]), float(self.delta[i]), float(self.abs_delta[i]),
                                 float(self.grad_reward[i]), self.grad_state[i].copy(), float(self.grad_norm[i]),
                                 float(self.influence_proxy[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def gradient(self, scale_reward=1.0, scale_state=None) -> np.ndarray:
        """Attack gradient on the chosen surface, optionally in scaled coordinates.

        Perturbing a coordinate x = scale * u gives d|delta|/du = scale * d|delta|/dx.
        Columns: [reward] for reward, [state...] for state, [reward, state...] for both.
        """
        parts = []
        if self.surface in ("reward", "both"):
            parts.append((self.grad_reward * scale_reward)[:, None])
        if self.surface in ("state", "both"):
            g = self.grad_state
            if scale_state is not None:
                g = g * np.asarray(scale_state)[None, :]
            parts.append(g)
        return np.concatenate(parts, axis=1)

    def write_csv(self, path, epsilon: Optional[np.ndarray] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["idx", "delta", "abs_delta", "grad_norm", "influence_proxy"]
            if epsilon is not None:
                header.append("epsilon")
            w.writerow(header)
            for i in range(len(self)):
                row = [int(self.idx[i])] + [format(float(v), ".17g") for v in
                                            (self.delta[i], self.abs_delta[i], self.grad_norm[i],
                                             self.influence_proxy[i])]
                if epsilon is not None:
                    row.append(format(float(epsilon[i]), ".17g"))
                w.writerow(row)
        return path


def score_dataset(model: VictimModel, data: TransitionDataset, surface: str = "reward",
                  perturb_next_state: bool = False) -> SensitivityTable:
    if surface not in SURFACES:
        raise ConfigError("surface", f"expected one of {SURFACES}, got {surface!r}")
    fm = model.feature_map
    if surface != "reward" and not fm.differentiable:
        raise UnsupportedSurfaceError(surface, fm.kind)
    delta, base_s, q_next = _td_arrays(model, data.s, data.a, data.r, data.s_next, data.terminal)
    bad = np.flatnonzero(~np.isfinite(delta))
    if bad.size:
        raise NumericalError(f"non-finite Q value at idx={int(data.idx[bad[0]])}")
    sign = np.sign(delta)
    n, d = data.s.shape
    theta_blocks = model.theta.reshape(fm.n_actions, fm.n_base)  # row a -> weights of action a

    grad_state = np.zeros((n, 0))
    if surface != "reward":
        jb = fm.base_jacobian(data.s)  # (n, k, d)
        # d Q(s, a) / d s = sum_k theta[a, k] * d b_k / d s
        dq_ds = np.einsum("nkd,nk->nd", jb, theta_blocks[data.a])
        grad_state = -sign[:, None] * dq_ds
        if perturb_next_state:
            best = np.argmax(q_next, axis=1)
            jb_next = fm.base_jacobian(data.s_next)
            dmax_ds2 = np.einsum("nkd,nk->nd", jb_next, theta_blocks[best])
            cont = model.gamma * (~data.terminal)
            grad_state = np.concatenate([grad_state, (sign * cont)[:, None] * dmax_ds2], axis=1)

    table = SensitivityTable(
        idx=data.idx.copy(), delta=delta, abs_delta=np.abs(delta), grad_reward=sign, grad_state=grad_state,
        grad_norm=np.zeros(n), influence_proxy=np.abs(delta) * np.linalg.norm(base_s, axis=1),
        surface=surface, perturb_next_state=perturb_next_state,
    )
    table.grad_norm = np.linalg.norm(table.gradient(), axis=1)
    return table


def bellman_loss_grad(model: VictimModel, data: TransitionDataset) -> np.ndarray:
    """Per-sample d/dtheta of 0.5 * delta^2 with frozen targets: -delta * phi(s, a)."""
    delta, _, _ = _td_arrays(model, data.s, data.a, data.r, data.s_next, data.terminal)
    return -delta[:, None] * model.feature_map.phi(data.s, data.a)


@dataclass
class InfluenceOracleResult:
    influence_norms: np.ndarray
    hessian_condition_number: float
    rank_correlation_vs_proxy: float  # nan when undefined
    influence_proxy: np.ndarray

    @property
    def correlation_defined(self) -> bool:
        return bool(np.isfinite(self.rank_correlation_vs_proxy))


def exact_influence_oracle(model: VictimModel, data: TransitionDataset, damping: float = 1e-3) -> InfluenceOracleResult:
    """Exact ``||H^-1 grad L(z)||`` per sample for a linear Q model."""
    fm = model.feature_map
    if damping < 0:
        raise ConfigError("damping", "must be >= 0")
    if fm.dim > MAX_ORACLE_DIM:
        raise ConfigError("feature_map", f"exact oracle limited to dim <= {MAX_ORACLE_DIM}, got {fm.dim}")
    if len(data) > MAX_ORACLE_N:
        raise ConfigError("data", f"exact oracle limited to <= {MAX_ORACLE_N} transitions")
    phi = fm.phi(data.s, data.a)
    hess = phi.T @ phi + damping * np.eye(fm.dim)
    cond = float(np.linalg.cond(hess))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"Hessian condition number {cond:.3e} exceeds {MAX_CONDITION:g}; increase damping")
    delta, base_s, _ = _td_arrays(model, data.s, data.a, data.r, data.s_next, data.terminal)
    grads = -delta[:, None] * phi
    solved = np.linalg.solve(hess, grads.T)  # (dim, n)
    norms = np.linalg.norm(solved, axis=0)
    proxy = np.abs(delta) * np.linalg.norm(base_s, axis=1)
    if np.ptp(norms) == 0 or np.ptp(proxy) == 0:
        rho = float("nan")
    else:
        rho = float(stats.spearmanr(norms, proxy).statistic)
    return InfluenceOracleResult(norms, cond, rho, proxy)


def top_k_by_sensitivity(records: SensitivityTable, k: int, key: str = "abs_delta") -> np.ndarray:
    """idx values of the k largest records by ``key``; ties go to the lower idx."""
    n = len(records)
    if not 1 <= k <= n:
        raise ConfigError("k", f"must satisfy 1 <= k <= {n}, got {k}")
    if key not in ("abs_delta", "influence_proxy"):
        raise ConfigError("key", f"unknown key {key!r}")
    values = getattr(records, key)
    order = np.lexsort((records.idx, -values))
    return records.idx[order[:k]].copy()
