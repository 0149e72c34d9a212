"""Experiment orchestration and report emission.

One experiment = one environment, a list of victims and a grid of attacks,
repeated over ``n_seeds`` seeds. Seed ``k`` of a run with base seed ``S``
uses ``S + k`` for dataset generation, attack randomness and evaluation, so a
single cell can be reproduced from the CLI with ``--seed S+k``.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .attacks import (GLOBAL_ALLOCATION, LOCAL_GREEDY, RANDOM_NOISE, RANDOM_SUBSET, STRATEGIES, AttackConfig,
                      apply, budget_matched, canonical_strategy, energy_audit, run_attack)
from .defense import DETECTORS, run_detectors
from .envlab import MdpSpec, build_env, evaluate_policy, generate_dataset, value_iteration_oracle
from .errors import ConfigError, PoisonLabError
from .sensitivity import score_dataset
from .victims import CONSLINFQI, LINFQI, TABQ, TrainConfig, default_feature_map, greedy_policy, train_victim

log = logging.getLogger(__name__)

HIERARCHY = (GLOBAL_ALLOCATION, LOCAL_GREEDY, RANDOM_SUBSET, RANDOM_NOISE)
UNITS_NOTE = ("epsilon is measured in per-column robust-std units of the clean dataset "
              "(1.4826*MAD, std when MAD is 0); energies are sums of squared scaled perturbations")
LOCAL_BOUND_SLACK = 1e-12
GLOBAL_BUDGET_RTOL = 1e-6

TABLE1_CONFIGS = ((0.01, 0.5), (0.015, 0.33), (0.02, 0.25), (0.025, 0.2), (0.033, 0.15), (0.05, 0.1), (0.1, 0.05))


def reduction_pct(clean: float, attacked: float) -> float:
    """100 * (clean - attacked) / clean."""
    if clean == 0:
        raise ConfigError("clean", "reduction is undefined for a clean score of 0")
    return 100.0 * (clean - attacked) / clean


# ---------------------------------------------------------------------------
# configuration


@dataclass
class VictimSpec:
    algo_tag: str
    train: TrainConfig = field(default_factory=TrainConfig)
    feature_map: dict = field(default_factory=dict)  # {"kind": ..., **params}; empty -> env default

    @property
    def label(self) -> str:
        return self.algo_tag

    def build_feature_map(self, spec: MdpSpec):
        fm = dict(self.feature_map)
        kind = fm.pop("kind", None)
        if kind is None and self.algo_tag == TABQ:
            kind = "Tabular"
        return default_feature_map(spec, kind, **fm)


@dataclass
class AttackEntry:
    """An attack plus the Table-1 style (rho, epsilon) label it belongs to."""

    config: AttackConfig
    rho: float
    epsilon: float

    @property
    def label(self) -> str:
        return f"({self.rho:g}, {self.epsilon:g})"


@dataclass
class ExperimentConfig:
    env: MdpSpec
    dataset_size: int = 20_000
    dataset_quality: str = "medium"
    victims: list = field(default_factory=list)
    attack_grid: list = field(default_factory=list)
    n_eval_episodes: int = 1000
    n_seeds: int = 5
    seed: int = 0
    detectors: dict = field(default_factory=lambda: {"names": list(DETECTORS), "z_threshold": 3.5,
                                                     "quantile": 0.999})
    output_dir: Optional[str] = None
    n_workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    def validate(self) -> "ExperimentConfig":
        self.env.validate()
        if self.n_seeds < 1:
            raise ConfigError("n_seeds", "must be >= 1")
        if self.dataset_size < 1:
            raise ConfigError("dataset.size", "must be >= 1")
        if not self.victims:
            raise ConfigError("victims", "at least one victim is required")
        if not self.attack_grid:
            raise ConfigError("attack_grid", "must be non-empty")
        if self.n_eval_episodes < 1:
            raise ConfigError("n_eval_episodes", "must be >= 1")
        for v in self.victims:
            if v.algo_tag not in (TABQ, LINFQI, CONSLINFQI):
                raise ConfigError("victims.algo_tag", f"unknown victim {v.algo_tag!r}")
            v.train.validate()
        for a in self.attack_grid:
            a.config.validate()
        for name in self.detectors.get("names", []):
            if name not in DETECTORS:
                raise ConfigError("detectors.names", f"unknown detector {name!r}")
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()[:16]


def _train_config(d) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    extra = set(d) - known
    if extra:
        raise ConfigError(f"victims.train.{sorted(extra)[0]}", "unknown field")
    return TrainConfig(**d)


def _expand_attacks(tree, n) -> list:
    out = []
    grid = tree.get("attack_grid")
    if grid is None:
        raise ConfigError("attack_grid", "missing")
    if isinstance(grid, dict):
        grid = [grid]
    for block in grid:
        block = dict(block)
        if "configs" in block:  # budget-matched (rho, epsilon) sweep
            strategies = block.pop("strategies", list(STRATEGIES))
            configs = block.pop("configs")
            if configs == "table1":
                configs = TABLE1_CONFIGS
            for rho, eps in configs:
                for st in strategies:
                    kw = {k: v for k, v in block.items() if k in ("surface", "support", "units", "perturb_next_state",
                                                                  "n_rounds")}
                    if canonical_strategy(st) != GLOBAL_ALLOCATION:
                        kw.pop("support", None)
                    out.append(AttackEntry(budget_matched(st, float(rho), float(eps), n, **kw), float(rho), float(eps)))
        else:
            label = block.pop("label", None)
            cfg = AttackConfig.from_dict(block)
            rho = cfg.rho if cfg.rho is not None else float("nan")
            eps = cfg.epsilon_local if cfg.epsilon_local is not None else (
                math.sqrt(cfg.c_total / (rho * n)) if cfg.c_total and cfg.rho else float("nan"))
            if label is not None:
                rho, eps = label
            out.append(AttackEntry(cfg, float(rho), float(eps)))
    return out


def config_from_tree(tree: dict) -> ExperimentConfig:
    tree = copy.deepcopy(tree)
    if "env" not in tree:
        raise ConfigError("env", "missing environment section")
    env_tree = dict(tree["env"])
    kind = env_tree.pop("kind", None)
    if kind == "GridWorld":
        spec = MdpSpec.gridworld(**{k: v for k, v in env_tree.items()})
    elif kind == "LineWorld":
        spec = MdpSpec.lineworld(**{k: v for k, v in env_tree.items()})
    else:
        raise ConfigError("env.kind", f"expected GridWorld or LineWorld, got {kind!r}")
    ds = tree.get("dataset", {})
    size = int(ds.get("size", 20_000))
    victims = []
    if "victim" in tree:
        tree.setdefault("victims", [tree["victim"]])
    if "seed" not in tree and "seed" in ds:
        tree["seed"] = ds["seed"]
    for v in tree.get("victims", []):
        if "algo_tag" not in v:
            raise ConfigError("victims.algo_tag", "missing")
        victims.append(VictimSpec(v["algo_tag"], _train_config(v.get("train", {})), dict(v.get("feature_map", {}))))
    det = {"names": list(DETECTORS), "z_threshold": 3.5, "quantile": 0.999}
    det.update(tree.get("detectors", {}))
    cfg = ExperimentConfig(
        env=spec, dataset_size=size, dataset_quality=ds.get("quality", "medium"), victims=victims,
        attack_grid=_expand_attacks(tree, size), n_eval_episodes=int(tree.get("n_eval_episodes", 1000)),
        n_seeds=int(tree.get("n_seeds", 5)), seed=int(tree.get("seed", 0)), detectors=det,
        output_dir=tree.get("output_dir"), n_workers=int(tree.get("n_workers", 1)), raw=tree,
    )
    return cfg.validate()


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError("config", f"{path} must hold a key-value tree")
    if seed is not None:
        tree["seed"] = int(seed)
    return config_from_tree(tree)


# ---------------------------------------------------------------------------
# running


def _audit(entry: AttackEntry, poisoned) -> tuple:
    """(ok, message) for the energy invariants of one strategy."""
    cfg = entry.config
    recomputed = energy_audit(poisoned)
    if not math.isclose(recomputed, poisoned.total_l2_energy, rel_tol=1e-9, abs_tol=1e-12):
        return False, "energy accounting mismatch"
    if poisoned.total_l2_energy > poisoned.planned_energy * (1 + 1e-9) + 1e-12:
        return False, "delivered energy exceeds plan"
    if cfg.strategy in (LOCAL_GREEDY, RANDOM_SUBSET):
        eta = poisoned.eta()
        norms = np.linalg.norm(eta, axis=1) if len(eta) else np.zeros(0)
        if np.any(norms > cfg.epsilon_local + LOCAL_BOUND_SLACK):
            return False, "local bound violated"
    if cfg.strategy == GLOBAL_ALLOCATION and poisoned.status != "degenerate":
        if abs(poisoned.planned_energy - cfg.c_total) > GLOBAL_BUDGET_RTOL * cfg.c_total:
            return False, "global budget not matched"
    return True, ""


def _fmt_err(exc) -> str:
    return f"{type(exc).__name__}: {exc}"


def run_seed(cfg: ExperimentConfig, k: int) -> list:
    seed = cfg.seed + k
    env = build_env(cfg.env)
    oracle = value_iteration_oracle(cfg.env) if cfg.dataset_quality != "random" else None
    data = generate_dataset(env, cfg.dataset_size, cfg.dataset_quality, seed, oracle)
    n = len(data)
    rows = []
    for victim in cfg.victims:
        fm = victim.build_feature_map(cfg.env)
        base = {"victim": victim.label, "env": cfg.env.kind, "seed": seed}
        try:
            model = train_victim(data, victim.algo_tag, victim.train, fm)
            clean = evaluate_policy(env, greedy_policy(model), cfg.n_eval_episodes, seed)
        except Exception as exc:  # noqa: BLE001 - failure isolation per cell
            for entry in cfg.attack_grid:
                rows.append({**base, **_entry_fields(entry), "status": "failed", "error": _fmt_err(exc)})
            continue
        record_cache = {}
        for entry in cfg.attack_grid:
            acfg = replace(entry.config, seed=seed)
            row = {**base, **_entry_fields(entry), "clean_score": clean.mean, "clean_se": clean.se}
            try:
                records = None
                if acfg.strategy != RANDOM_NOISE:
                    key = (acfg.surface, acfg.perturb_next_state)
                    if key not in record_cache:
                        record_cache[key] = score_dataset(model, data, acfg.surface, acfg.perturb_next_state)
                    records = record_cache[key]

                def rescore(d, _s=acfg.surface, _p=acfg.perturb_next_state):
                    return score_dataset(train_victim(d, victim.algo_tag, victim.train, fm), d, _s, _p)

                poisoned = run_attack(data, records, acfg, rescore)
                attacked_data = apply(data, poisoned)
                attacked_model = train_victim(attacked_data, victim.algo_tag, victim.train, fm)
                post = evaluate_policy(env, greedy_policy(attacked_model), cfg.n_eval_episodes, seed)
                ok, msg = _audit(entry, poisoned)
                expected = max(1, int(math.floor(entry.rho * n + 1e-9))) if math.isfinite(entry.rho) else poisoned.n_poisoned
                det = {}
                for rep in run_detectors(attacked_data, expected, cfg.detectors.get("z_threshold", 3.5),
                                         cfg.detectors.get("quantile", 0.999), cfg.detectors.get("names", DETECTORS)):
                    det[rep.detector] = {"auc": rep.auc, "recall": rep.recall, "precision": rep.precision,
                                         "max_score": rep.max_score, "flagged_count": rep.flagged_count}
                row.update({
                    "post_attack_score": post.mean, "post_attack_se": post.se,
                    "reduction_pct": reduction_pct(clean.mean, post.mean) if clean.mean != 0 else None,
                    "energy_spent": poisoned.total_l2_energy, "planned_energy": poisoned.planned_energy,
                    "clipping_loss": poisoned.clipping_loss, "n_poisoned": poisoned.n_poisoned,
                    "objective": poisoned.objective, "attack_status": poisoned.status,
                    "energy_audit_ok": ok, "energy_audit_msg": msg, "detectors": det, "status": "ok",
                })
            except Exception as exc:  # noqa: BLE001
                row.update({"status": "failed", "error": _fmt_err(exc)})
            rows.append(row)
    return rows


def _entry_fields(entry: AttackEntry) -> dict:
    c = entry.config
    return {"config": entry.label, "rho": entry.rho, "epsilon": entry.epsilon, "strategy": c.strategy,
            "surface": c.surface, "support": c.support if c.strategy == GLOBAL_ALLOCATION else None,
            "c_total": c.c_total, "epsilon_local": c.epsilon_local, "units": c.units}


def run_experiment(cfg: ExperimentConfig) -> "ExperimentReport":
    cfg.validate()
    if cfg.n_workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_workers) as pool:
            per_seed = list(pool.map(run_seed, [cfg] * cfg.n_seeds, range(cfg.n_seeds)))
    else:
        per_seed = [run_seed(cfg, k) for k in range(cfg.n_seeds)]
    rows = [r for chunk in per_seed for r in chunk]
    victim_order = {v.label: i for i, v in enumerate(cfg.victims)}
    config_order = {}
    for e in cfg.attack_grid:
        config_order.setdefault(e.label, len(config_order))
    strat_order = {s: i for i, s in enumerate(STRATEGIES)}
    rows.sort(key=lambda r: (victim_order[r["victim"]], config_order[r["config"]], strat_order[r["strategy"]],
                             str(r.get("support")), r["seed"]))
    header = {
        "package_version": __version__, "config_hash": cfg.config_hash(), "config": cfg.raw,
        "seeds": [cfg.seed + k for k in range(cfg.n_seeds)], "units_note": UNITS_NOTE,
        "train_defaults": {v.label: asdict(v.train) for v in cfg.victims},
    }
    return ExperimentReport(header, rows, aggregate(rows))


# ---------------------------------------------------------------------------
# aggregation


def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return None, None
    return float(v.mean()), (float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else None)


def _paired_gap(lo_rows, hi_rows):
    """mean and SE of (hi - lo) across shared seeds."""
    lo = {r["seed"]: r["post_attack_score"] for r in lo_rows}
    hi = {r["seed"]: r for r in hi_rows}
    diffs = [hi[s]["post_attack_score"] - lo[s] for s in sorted(lo) if s in hi]
    return _mean_se(diffs)


def aggregate(rows) -> dict:
    ok = [r for r in rows if r.get("status") == "ok"]
    cells = {}
    for r in ok:
        key = (r["victim"], r["config"], r["strategy"], str(r.get("support")))
        cells.setdefault(key, []).append(r)
    summary = []
    for (victim, config, strategy, support), group in cells.items():
        m, se = _mean_se([g["post_attack_score"] for g in group])
        cm, cse = _mean_se([g["clean_score"] for g in group])
        summary.append({"victim": victim, "config": config, "strategy": strategy,
                        "support": None if support == "None" else support,
                        "n": len(group), "post_attack_mean": m, "post_attack_se": se, "clean_mean": cm,
                        "clean_se": cse, "reduction_pct": reduction_pct(cm, m) if cm else None,
                        "energy_mean": _mean_se([g["energy_spent"] for g in group])[0],
                        "energy_audit_ok": all(g["energy_audit_ok"] for g in group),
                        "detector_auc": {d: _mean_se([g["detectors"][d]["auc"] for g in group
                                                      if d in g["detectors"]])[0]
                                         for d in (group[0]["detectors"] or {})}})
    verdicts = []
    by_vc = {}
    for r in ok:
        by_vc.setdefault((r["victim"], r["config"]), []).append(r)
    for (victim, config), group in by_vc.items():
        strat_rows = {s: [g for g in group if g["strategy"] == s] for s in HIERARCHY}
        if not all(strat_rows.values()):
            continue
        means = {s: _mean_se([g["post_attack_score"] for g in strat_rows[s]])[0] for s in HIERARCHY}
        seeds = sorted({g["seed"] for g in group})
        clean_mean = _mean_se([next(g["clean_score"] for g in group if g["seed"] == s) for s in seeds])[0]
        chain = [means[s] for s in HIERARCHY] + [clean_mean]
        ordered = all(a <= b for a, b in zip(chain, chain[1:]))
        g_gap, g_se = _paired_gap(strat_rows[GLOBAL_ALLOCATION], strat_rows[LOCAL_GREEDY])
        l_gap, l_se = _paired_gap(strat_rows[LOCAL_GREEDY], strat_rows[RANDOM_NOISE])
        sig_g = g_se is not None and g_gap > 2 * g_se
        sig_l = l_se is not None and l_gap > 2 * l_se
        verdicts.append({"victim": victim, "config": config, "means": {**means, "Clean": clean_mean},
                         "ordered": ordered, "global_vs_local_gap": g_gap, "global_vs_local_se": g_se,
                         "global_lt_local_2se": sig_g, "local_vs_noise_gap": l_gap, "local_vs_noise_se": l_se,
                         "local_lt_noise_2se": sig_l, "holds": bool(ordered and sig_g and sig_l)})
    return {"cells": summary, "hierarchy": verdicts}


# ---------------------------------------------------------------------------
# reports


def _clean_json(obj):
    if isinstance(obj, dict):
        return {str(k): _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean_json(obj.tolist())
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean_json(obj), sort_keys=True, indent=1, allow_nan=False)


@dataclass
class ExperimentReport:
    header: dict
    rows: list
    summary: dict

    def to_json(self) -> str:
        return canonical_json({"header": self.header, "rows": self.rows, "summary": self.summary}) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["header"], d["rows"], d["summary"])

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls.from_json(Path(path).read_text())

    CSV_COLUMNS = ("victim", "env", "config", "rho", "epsilon", "strategy", "support", "surface", "seed",
                   "clean_score", "post_attack_score", "reduction_pct", "energy_spent", "planned_energy",
                   "clipping_loss", "n_poisoned", "objective", "energy_audit_ok", "status", "error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        det_names = sorted({d for r in self.rows for d in (r.get("detectors") or {})})
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.CSV_COLUMNS) + [f"{d}_{m}" for d in det_names for m in ("auc", "recall", "precision")])
        for r in self.rows:
            line = [_csv_cell(r.get(c)) for c in self.CSV_COLUMNS]
            for d in det_names:
                rep = (r.get("detectors") or {}).get(d, {})
                line += [_csv_cell(rep.get(m)) for m in ("auc", "recall", "precision")]
            w.writerow(line)
        return buf.getvalue()

    def to_markdown(self) -> str:
        """Victim x config grid of mean post-attack scores; the row minimum is bold."""
        lines = [f"<!-- config {self.header.get('config_hash')} | {self.header.get('units_note')} -->", ""]
        lines.append("| Victim | Config (rho, eps) | Clean | " + " | ".join(HIERARCHY[::-1]) + " | Reduction (%) |")
        lines.append("|" + "---|" * (4 + len(HIERARCHY)))
        table = {}
        for c in self.summary["cells"]:
            table.setdefault((c["victim"], c["config"]), {})[c["strategy"]] = c
        for (victim, config), cells in table.items():
            scores = {s: cells[s]["post_attack_mean"] for s in HIERARCHY if s in cells}
            low = min(scores.values()) if scores else None
            clean = next(iter(cells.values()))["clean_mean"]
            parts = []
            for s in HIERARCHY[::-1]:
                if s not in scores:
                    parts.append("-")
                    continue
                txt = f"{scores[s]:.4f}"
                parts.append(f"**{txt}**" if scores[s] == low else txt)
            red = cells.get(GLOBAL_ALLOCATION, {}).get("reduction_pct")
            red_txt = "-" if red is None else f"{red:.1f}%"
            lines.append(f"| {victim} | {config} | {clean:.4f} | " + " | ".join(parts) + f" | {red_txt} |")
        lines.append("")
        for v in self.summary["hierarchy"]:
            lines.append(f"- hierarchy {v['victim']} {v['config']}: ordered={v['ordered']} "
                         f"global<local(2SE)={v['global_lt_local_2se']} local<noise(2SE)={v['local_lt_noise_2se']} "
                         f"-> {'HOLDS' if v['holds'] else 'FAILS'}")
        return "\n".join(lines) + "\n"


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


FORMATS = ("json", "csv", "markdown")


def emit_report(report: ExperimentReport, out_dir, formats=FORMATS) -> list:
    if isinstance(formats, str):
        formats = FORMATS if formats == "all" else (formats,)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PoisonLabError(f"cannot create output directory {out}: {exc}") from exc
    if not report.rows:
        raise ConfigError("rows", "a report needs at least one row")
    written = []
    for fmt in formats:
        if fmt == "json":
            path, text = out / "report.json", report.to_json()
        elif fmt == "csv":
            path, text = out / "report.csv", report.to_csv()
        elif fmt in ("markdown", "md", "markdown-table"):
            path, text = out / "report.md", report.to_markdown()
        else:
            raise ConfigError("format", f"unknown format {fmt!r}; expected one of {FORMATS}")
        try:
            path.write_text(text)
        except OSError as exc:
            raise PoisonLabError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written


def default_output_dir() -> str:
    return os.environ.get("POISONLAB_OUT", "poisonlab_out")
