"""Poison detectors that screen raw transition features.

The defender has no access to the victim's Q-function: every detector scores
rows of the ``(s, r, s_next)`` matrix of the (possibly poisoned) dataset.
Poison flags are only consulted afterwards, to compute recall/precision/AUC.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

ROBUST_Z = "RobustZ"
MAHALANOBIS = "Mahalanobis"
SPECTRAL = "Spectral"
DETECTORS = (ROBUST_Z, MAHALANOBIS, SPECTRAL)

MIN_ROWS = 10
DIAG_LOADING = 1e-6


@dataclass
class DetectionReport:
    detector: str
    scores: np.ndarray
    flagged: np.ndarray  # row positions
    threshold: float
    recall: float
    precision: float
    max_score: float
    auc: float  # nan when the poison flags hold a single class

    @property
    def flagged_count(self) -> int:
        return len(self.flagged)

    def row(self, attack: str) -> dict:
        return {"detector": self.detector, "attack": attack, "recall": self.recall, "precision": self.precision,
                "auc": self.auc, "max_score": self.max_score, "flagged_count": self.flagged_count}


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _report(name, scores, flagged, threshold, truth):
    truth = np.zeros(len(scores), bool) if truth is None else np.asarray(truth, bool)
    n_true = int(truth.sum())
    hits = int(truth[flagged].sum()) if len(flagged) else 0
    return DetectionReport(
        detector=name, scores=scores, flagged=np.asarray(flagged, dtype=np.int64), threshold=float(threshold),
        recall=hits / n_true if n_true else 0.0,
        precision=hits / len(flagged) if len(flagged) else 0.0,
        max_score=float(np.max(scores)), auc=auc_score(scores, truth),
    )


# -- array-level scorers ----------------------------------------------------


def robust_z_scores(x: np.ndarray) -> np.ndarray:
    """max_j |0.6745 (x_j - median_j) / MAD_j| per row; MAD = 0 columns are skipped."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    med = np.median(x, axis=0)
    mad = np.median(np.abs(x - med), axis=0)
    usable = mad > 0
    if not usable.all():
        log.warning("robust z: skipping %d constant-MAD column(s)", int((~usable).sum()))
    if not usable.any():
        return np.zeros(len(x))
    z = 0.6745 * (x[:, usable] - med[usable]) / mad[usable]
    return np.max(np.abs(z), axis=1)


def mahalanobis_scores(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    cov[np.diag_indices_from(cov)] += DIAG_LOADING
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError("feature covariance is singular even after diagonal loading") from None
    white = np.linalg.solve(chol, centered.T)
    return np.sqrt(np.sum(white * white, axis=0))


def spectral_scores(x: np.ndarray) -> np.ndarray:
    """Squared projection of each centred row on the top right singular vector."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv.size == 0 or sv[0] <= 1e-12 * max(1.0, np.abs(x).max()):
        raise NumericalError("centred feature matrix has rank 0")
    return (centered @ vt[0]) ** 2


# -- dataset-level detectors ------------------------------------------------


def detect_robust_z(data, threshold: float = 3.5, truth: Optional[np.ndarray] = None) -> DetectionReport:
    if threshold <= 0:
        raise ConfigError("threshold", "must be > 0")
    if len(data) < MIN_ROWS:
        raise DataError(f"robust z needs at least {MIN_ROWS} transitions")
    scores = robust_z_scores(np.column_stack([data.s, data.r]))
    flagged = np.flatnonzero(scores > threshold)
    return _report(ROBUST_Z, scores, flagged, threshold, data.poisoned if truth is None else truth)


def detect_mahalanobis(data, threshold_quantile: float = 0.999, truth: Optional[np.ndarray] = None) -> DetectionReport:
    if not 0 < threshold_quantile < 1:
        raise ConfigError("threshold_quantile", "must lie in (0, 1)")
    scores = mahalanobis_scores(data.features_matrix())
    threshold = float(np.quantile(scores, threshold_quantile))
    flagged = np.flatnonzero(scores > threshold)
    return _report(MAHALANOBIS, scores, flagged, threshold, data.poisoned if truth is None else truth)


def detect_spectral(data, k_remove: int, truth: Optional[np.ndarray] = None) -> DetectionReport:
    x = data.features_matrix()
    if len(x) <= x.shape[1]:
        raise DataError("spectral detector needs more transitions than feature columns")
    if k_remove < 0:
        raise ConfigError("k_remove", "must be >= 0")
    scores = spectral_scores(x)
    k = min(int(k_remove), len(scores))
    order = np.lexsort((np.arange(len(scores)), -scores))
    flagged = np.sort(order[:k])
    threshold = float(scores[order[k - 1]]) if k else float("inf")
    return _report(SPECTRAL, scores, flagged, threshold, data.poisoned if truth is None else truth)


def run_detectors(data, k_remove: int, z_threshold: float = 3.5, quantile: float = 0.999,
                  detectors: Sequence[str] = DETECTORS) -> list:
    out = []
    for name in detectors:
        if name == ROBUST_Z:
            out.append(detect_robust_z(data, z_threshold))
        elif name == MAHALANOBIS:
            out.append(detect_mahalanobis(data, quantile))
        elif name == SPECTRAL:
            out.append(detect_spectral(data, k_remove))
        else:
            raise ConfigError("detectors", f"unknown detector {name!r}")
    return out


def stealth_comparison(clean, attacks: Sequence, names: Optional[Sequence[str]] = None, k_remove: Optional[int] = None,
                       z_threshold: float = 3.5, quantile: float = 0.999) -> list:
    """Run every detector on every poisoned dataset; one row per (attack, detector)."""
    from .attacks import apply  # local import: attacks -> defense would be circular otherwise

    names = list(names) if names is not None else [p.config.strategy for p in attacks]
    if len(names) != len(attacks):
        raise ConfigError("names", "one name per attack is required")
    rows = []
    for name, poisoned in zip(names, attacks):
        if not poisoned.base.same_content(clean, flags=False):
            raise ConfigError("attacks", f"attack {name!r} was not derived from the given clean dataset")
        data = apply(clean, poisoned)
        k = poisoned.n_poisoned if k_remove is None else k_remove
        for rep in run_detectors(data, k, z_threshold, quantile):
            rows.append(rep.row(name))
    return rows


def write_detection_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["detector", "attack", "recall", "precision", "auc", "max_score", "flagged_count"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else format(float(r[c]), ".17g") for c in cols])
    return path
