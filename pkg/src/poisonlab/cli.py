"""Command line entry point: ``poisonlab <subcommand> [flags]``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .attacks import AttackConfig, apply, run_attack
from .defense import DETECTORS, run_detectors, write_detection_csv
from .envlab import MdpSpec, TransitionDataset, build_env, evaluate_policy, generate_dataset
from .errors import ConfigError, DataError, PoisonLabError
from .harness import (FORMATS, ExperimentReport, VictimSpec, default_output_dir, emit_report, load_config,
                      run_experiment)
from .sensitivity import SURFACES, score_dataset
from .victims import CONSLINFQI, LINFQI, TABQ, TrainConfig, VictimModel, greedy_policy, train_victim

log = logging.getLogger("poisonlab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML/JSON experiment config")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default $POISONLAB_OUT)")
    p.add_argument("--format", default=argparse.SUPPRESS, help=f"report format: {', '.join(FORMATS)} or all")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="poisonlab", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"poisonlab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("generate", "generate a behavior dataset")
    p.add_argument("--env", choices=["GridWorld", "LineWorld"], help="environment (overrides config)")
    p.add_argument("--size", type=int, help="number of transitions")
    p.add_argument("--quality", choices=["random", "medium", "expert"])

    p = add("train", "train a victim on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--victim", choices=[TABQ, LINFQI, CONSLINFQI])

    p = add("score", "per-transition TD errors and gradients")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--surface", choices=SURFACES, default="reward")
    p.add_argument("--perturb-next-state", action="store_true")

    p = add("attack", "poison a dataset with one strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="victim checkpoint (not needed for RandomNoise)")
    p.add_argument("--strategy", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--epsilon", type=float, dest="epsilon_local")
    p.add_argument("--c-total", type=float, dest="c_total")
    p.add_argument("--surface", choices=SURFACES, default="reward")
    p.add_argument("--support", default="all")
    p.add_argument("--units", default="robust")
    p.add_argument("--perturb-next-state", action="store_true")
    p.add_argument("--n-rounds", type=int, default=1)

    p = add("detect", "run the detectors on a (poisoned) dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--k-remove", type=int, help="spectral removal count (default: number of poisoned rows)")
    p.add_argument("--detectors", nargs="+", choices=DETECTORS, default=list(DETECTORS))

    p = add("evaluate", "roll out the greedy policy of a victim")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset whose header supplies the environment")
    p.add_argument("--episodes", type=int)

    add("run", "full experiment from a config file")

    p = add("report", "re-emit a stored report.json")
    p.add_argument("--input", required=True)
    return parser


def _defaults(args):
    for name, value in (("seed", None), ("config", None), ("out", None), ("format", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, value)
    if args.out is None:
        args.out = default_output_dir()
    return args


def _tree(args) -> dict:
    if args.config is None:
        return {}
    try:
        with open(args.config) as fh:
            tree = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {args.config}: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError("config", "config file must hold a key-value tree")
    return tree


def _env_spec(tree, kind=None) -> MdpSpec:
    env = dict(tree.get("env", {}))
    kind = kind or env.pop("kind", None)
    env.pop("kind", None)
    if kind is None:
        raise ConfigError("env", "pass --env or a --config with an env section")
    if kind == "GridWorld":
        return MdpSpec.gridworld(**env)
    if kind == "LineWorld":
        return MdpSpec.lineworld(**env)
    raise ConfigError("env.kind", f"unknown environment {kind!r}")


def _victim(tree, override=None):
    vs = tree.get("victims") or ([tree["victim"]] if "victim" in tree else [])
    v = dict(vs[0]) if vs else {}
    tag = override or v.get("algo_tag")
    if tag is None:
        raise ConfigError("victim", "pass --victim or a --config with a victims section")
    return tag, TrainConfig(**v.get("train", {})).validate(), dict(v.get("feature_map", {}))


def _seed(args, tree) -> int:
    if args.seed is not None:
        return args.seed
    return int(tree.get("seed", tree.get("dataset", {}).get("seed", 0)))


def _emit_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    print(path)


def cmd_generate(args):
    tree = _tree(args)
    spec = _env_spec(tree, args.env)
    ds = tree.get("dataset", {})
    size = args.size or int(ds.get("size", 20_000))
    quality = args.quality or ds.get("quality", "medium")
    data = generate_dataset(build_env(spec), size, quality, _seed(args, tree))
    print(data.write(Path(args.out) / "dataset.jsonl"))


def cmd_train(args):
    tree = _tree(args)
    data = TransitionDataset.read(args.data)
    tag, tcfg, fm_params = _victim(tree, args.victim)
    fm = VictimSpec(tag, tcfg, fm_params).build_feature_map(data.spec)
    model = train_victim(data, tag, tcfg, fm)
    print(model.write(Path(args.out) / "model.jsonl"))


def cmd_score(args):
    data = TransitionDataset.read(args.data)
    model = VictimModel.read(args.model)
    table = score_dataset(model, data, args.surface, args.perturb_next_state)
    print(table.write_csv(Path(args.out) / "sensitivity.csv"))


def cmd_attack(args):
    data = TransitionDataset.read(args.data)
    cfg = AttackConfig(args.strategy, rho=args.rho, epsilon_local=args.epsilon_local, c_total=args.c_total,
                       surface=args.surface, support=args.support, seed=args.seed or 0, units=args.units,
                       perturb_next_state=args.perturb_next_state, n_rounds=args.n_rounds).validate()
    records = None
    rescore = None
    if cfg.strategy != "RandomNoise":
        if args.model is None:
            raise ConfigError("model", f"{cfg.strategy} needs --model")
        model = VictimModel.read(args.model)
        records = score_dataset(model, data, cfg.surface, cfg.perturb_next_state)
        if cfg.n_rounds > 1:
            tcfg = TrainConfig()
            rescore = lambda d: score_dataset(train_victim(d, model.algo_tag, tcfg, model.feature_map), d,  # noqa: E731
                                              cfg.surface, cfg.perturb_next_state)
    poisoned = run_attack(data, records, cfg, rescore)
    out = Path(args.out)
    print(poisoned.write(out / "perturbations.jsonl"))
    print(apply(data, poisoned).write(out / "poisoned.jsonl"))


def cmd_detect(args):
    data = TransitionDataset.read(args.data)
    k = args.k_remove if args.k_remove is not None else int(data.poisoned.sum())
    reports = run_detectors(data, k, detectors=args.detectors)
    print(write_detection_csv([r.row(data.behavior_tag) for r in reports], Path(args.out) / "detection.csv"))


def cmd_evaluate(args):
    tree = _tree(args)
    model = VictimModel.read(args.model)
    if args.data is not None:
        spec = TransitionDataset.read(args.data).spec
    else:
        spec = _env_spec(tree)
    episodes = args.episodes or int(tree.get("n_eval_episodes", 1000))
    res = evaluate_policy(build_env(spec), greedy_policy(model), episodes, _seed(args, tree))
    _emit_json({"mean": res.mean, "se": None if res.se != res.se else res.se, "n_episodes": episodes,
                "seed": _seed(args, tree)}, Path(args.out) / "evaluation.json")


def cmd_run(args):
    if args.config is None:
        raise ConfigError("config", "run needs --config")
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out if args.out != default_output_dir() or cfg.output_dir is None else cfg.output_dir)
    report = run_experiment(cfg)
    for path in emit_report(report, out, args.format or "all"):
        print(path)


def cmd_report(args):
    try:
        report = ExperimentReport.read(args.input)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read report {args.input}: {exc}") from None
    for path in emit_report(report, args.out, args.format or "all"):
        print(path)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "score": cmd_score, "attack": cmd_attack,
            "detect": cmd_detect, "evaluate": cmd_evaluate, "run": cmd_run, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _defaults(parser.parse_args(argv))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, DataError, TypeError) as exc:
        field = getattr(exc, "field", None)
        print(f"validation error{f' [{field}]' if field else ''}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PoisonLabError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
