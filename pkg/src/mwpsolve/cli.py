"""Command-line pipeline: preprocess, train, generate-equations, distill,
eval, baseline, oracle, make-synthetic.

Configuration comes from an optional TOML file (sections [paths],
[preprocess], [train], [search], top-level seed); command-line flags override
file values, and MWPSOLVE_* environment variables override paths only.
Exit codes: 0 success, 1 data-quality failure, 2 usage/environment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .corpus import (
    PreprocessConfig,
    Problem,
    build_vocab,
    load_cache,
    preprocess_corpus,
    save_cache,
    scan_corpus,
    split_corpus,
)
from .equation import DEFAULT_CAPACITY, OperatorVocab, TripletStep
from .search import SearchBudget, brute_force_oracle, random_equation_sampling
from .synthetic import make_corpus
from .training import (
    LabelledInstance,
    TrainConfig,
    evaluate,
    generate_dataset,
    init_operand_dict,
    lr_at,
    prepare_instances,
    train_supervised,
    train_warm,
)

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
DATA_ERROR = 1

ENV_PATHS = {"cache": "MWPSOLVE_CACHE", "corpus": "MWPSOLVE_CORPUS",
             "checkpoints": "MWPSOLVE_CHECKPOINTS", "reports": "MWPSOLVE_REPORTS",
             "gold": "MWPSOLVE_GOLD"}


class UsageError(RuntimeError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config parse error in {path}: {exc}")


def _dataclass_from(section: dict, cls, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {cls.__name__}: {exc}")


def _resolve_path(name: str, cli_value, config: dict):
    if cli_value is not None:
        return cli_value
    env = os.environ.get(ENV_PATHS.get(name, ""))
    if env:
        return env
    return config.get("paths", {}).get(name)


def _require_path(name, value):
    if value is None:
        raise UsageError(f"missing required path: {name}")
    return Path(value)


def _pre_config(config: dict) -> tuple[PreprocessConfig, int, int]:
    section = dict(config.get("preprocess", {}))
    min_count = int(section.pop("min_count", 1))
    capacity = int(section.pop("capacity", DEFAULT_CAPACITY))
    pre = _dataclass_from(section, PreprocessConfig)
    return pre, min_count, capacity


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands -----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    config = _load_config(args.config)
    pre, _, _ = _pre_config(config)
    src = Path(args.corpus)
    if not src.exists():
        raise UsageError(f"corpus file not found: {src}")
    problems, issues = scan_corpus(src)
    for lineno, msg in issues:
        print(f"line {lineno}: {msg}", file=sys.stderr)
    if issues and not args.lenient:
        print(f"{len(issues)} malformed record(s); rerun with --lenient to skip",
              file=sys.stderr)
        return DATA_ERROR
    pairs = preprocess_corpus(problems, pre)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cache(args.out, pairs)
    counts = [len(pp.numbers) for _, pp in pairs]
    _print_json({
        "instances": len(pairs),
        "skipped": len(issues),
        "numbers_per_problem_mean": float(np.mean(counts)) if counts else 0.0,
        "numbers_per_problem_max": int(max(counts)) if counts else 0,
    })
    return 0


def _load_instances(cache_path, pre, capacity, use_gold=False, min_count=1,
                    vocab=None):
    pairs = load_cache(cache_path)
    if vocab is None:
        vocab = build_vocab((pp for _, pp in pairs), min_count=min_count)
    instances, skipped = prepare_instances(pairs, vocab, pre, capacity, use_gold)
    return instances, vocab, skipped, pairs


def cmd_train(args) -> int:
    config = _load_config(args.config)
    pre, min_count, capacity = _pre_config(config)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    cfg = _dataclass_from(config.get("train", {}), TrainConfig, seed=seed)
    budget = _dataclass_from(config.get("search", {}), SearchBudget,
                             beam_width=args.beam_width)

    cache = _require_path("cache", _resolve_path("cache", args.cache, config))
    if not cache.exists():
        raise UsageError(f"cache file not found: {cache}")
    reports = Path(_resolve_path("reports", args.reports, config) or "reports")
    ckdir = Path(_resolve_path("checkpoints", args.checkpoints, config)
                 or "checkpoints")
    reports.mkdir(parents=True, exist_ok=True)
    ckdir.mkdir(parents=True, exist_ok=True)

    pairs = load_cache(cache)
    if args.split_ratio < 1.0:
        problems = [p for p, _ in pairs]
        train_set, test_set = split_corpus(problems, args.split_ratio,
                                           args.split_seed)
        train_ids = {p.id for p in train_set}
        by_id = {p.id: (p, pp) for p, pp in pairs}
        save_cache(reports / "train-split.jsonl",
                   [by_id[p.id] for p in train_set])
        save_cache(reports / "test-split.jsonl",
                   [by_id[p.id] for p in test_set])
        pairs = [by_id[pid] for pid in (p.id for p in train_set)]
        logger.info("split: %d train / %d test", len(train_ids), len(test_set))

    vocab = build_vocab((pp for _, pp in pairs), min_count=min_count)
    d2, _ = prepare_instances(pairs, vocab, pre, capacity, use_gold=False)

    d1 = []
    if args.mode == "warm-s":
        gold_path = _resolve_path("gold", args.gold, config)
        if gold_path is None:
            raise UsageError("--mode warm-s requires --gold")
        gold_pairs = load_cache(gold_path)
        d1, skipped = prepare_instances(gold_pairs, vocab, pre, capacity,
                                        use_gold=True)
        d1 = [inst for inst in d1 if inst.gold_steps is not None]
        if skipped:
            logger.warning("%d gold equation(s) could not be grounded", skipped)

    result = train_warm(d2, d1, vocab, cfg, budget,
                        checkpoint_dir=ckdir,
                        resume_from=args.resume)

    with open(reports / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for row in result.metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_labelled(reports / "discovered.jsonl", result.discovered.values())
    _print_json({"discovery_rate": result.metrics[-1]["discovery_rate"],
                 "epochs": len(result.metrics),
                 "checkpoint": str(ckdir / "best.ckpt")})
    return 0


def _write_labelled(path, labelled) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labelled:
            fh.write(json.dumps({
                "id": lab.problem.id,
                "text": lab.problem.text,
                "answer": lab.problem.answer,
                "equation": lab.equation,
                "steps": [[s.op, s.left, s.right, s.result] for s in lab.steps],
                "source": lab.source,
            }, sort_keys=True) + "\n")


def _read_labelled(path) -> list[LabelledInstance]:
    labelled = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            steps = [TripletStep(op, int(l), int(r), float(v))
                     for op, l, r, v in obj["steps"]]
            problem = Problem(id=str(obj["id"]), text=obj["text"],
                              answer=float(obj["answer"]))
            labelled.append(LabelledInstance(problem, steps, obj["equation"],
                                             obj.get("source", "discovered")))
    return labelled


def _load_model_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return ckpt.load_model(path)


def cmd_generate_equations(args) -> int:
    config = _load_config(args.config)
    pre, min_count, capacity = _pre_config(config)
    params, vocab, _ = _load_model_checkpoint(args.checkpoint)
    instances, _, _, _ = _load_instances(args.cache, pre, params.config.capacity,
                                         vocab=vocab)
    budget = _dataclass_from(config.get("search", {}), SearchBudget)
    labelled, metrics = generate_dataset(params, instances, budget,
                                         pre.answer_eps)
    _write_labelled(args.out, labelled)
    _print_json({"equation_generation_accuracy": metrics.equation_generation_accuracy,
                 "kept": len(labelled), "total": len(instances)})
    return 0


def cmd_distill(args) -> int:
    config = _load_config(args.config)
    pre, _, capacity = _pre_config(config)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    cfg = _dataclass_from(config.get("train", {}), TrainConfig, seed=seed)
    labelled = _read_labelled(args.labelled)
    if not labelled:
        print("labelled dataset is empty", file=sys.stderr)
        return DATA_ERROR
    budget = _dataclass_from(config.get("search", {}), SearchBudget)
    params, vocab = train_supervised(labelled, cfg, pre, capacity=capacity,
                                     budget=budget)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_model(args.out, params, vocab, extra={"source": "distill"})
    _print_json({"checkpoint": str(args.out), "instances": len(labelled)})
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    pre, min_count, _ = _pre_config(config)
    params, vocab, _ = _load_model_checkpoint(args.checkpoint)
    instances, _, _, _ = _load_instances(args.cache, pre, params.config.capacity,
                                         vocab=vocab)
    budget = _dataclass_from(config.get("search", {}), SearchBudget)
    metrics = evaluate(params, instances, budget, pre.answer_eps)
    _print_json({"answer_accuracy": metrics.answer_accuracy,
                 "instances": len(instances)})
    return 0


def cmd_baseline(args) -> int:
    config = _load_config(args.config)
    pre, _, capacity = _pre_config(config)
    pairs = load_cache(args.cache)
    budget = SearchBudget(k=args.k, d=args.depth)
    rng = np.random.default_rng(args.seed if args.seed is not None
                                else config.get("seed", 0))
    found = 0
    for problem, pp in pairs:
        opdict = init_operand_dict(pp, pre, capacity)
        steps = random_equation_sampling(opdict, problem.answer, budget, rng,
                                         answer_eps=pre.answer_eps)
        found += steps is not None
    _print_json({"discovery_rate": found / len(pairs) if pairs else 0.0,
                 "k": args.k, "d": args.depth, "instances": len(pairs)})
    return 0


def cmd_oracle(args) -> int:
    config = _load_config(args.config)
    pre, _, capacity = _pre_config(config)
    pairs = load_cache(args.cache)
    ops = OperatorVocab()
    per_depth = {depth: 0 for depth in range(1, args.max_steps + 1)}
    unreachable = 0
    for problem, pp in pairs:
        opdict = init_operand_dict(pp, pre, capacity)
        steps = brute_force_oracle(opdict, ops, args.max_steps, problem.answer,
                                   pre.answer_eps)
        if steps is None:
            unreachable += 1
        else:
            per_depth[len(steps)] += 1
    _print_json({
        "instances": len(pairs),
        "reachable_by_depth": {str(k): v for k, v in per_depth.items()},
        "unreachable": unreachable,
        "max_steps": args.max_steps,
    })
    return 0


def cmd_make_synthetic(args) -> int:
    problems = make_corpus(args.n, args.seed, depth2_fraction=args.depth2,
                           distractor_prob=args.distractor)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps({
                "id": p.id, "text": p.text, "answer": p.answer,
                "equation": p.equation, "type": p.qtype,
                "difficulty": p.difficulty,
            }, sort_keys=True) + "\n")
    _print_json({"written": len(problems), "path": str(args.out)})
    return 0


# -- argument wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mwpsolve",
        description="Weakly supervised equation discovery for word problems")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="validate + preprocess a JSONL corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--lenient", action="store_true",
                   help="skip malformed records instead of failing")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="equation-discovery training")
    p.add_argument("--config")
    p.add_argument("--cache", help="preprocessed corpus (from `preprocess`)")
    p.add_argument("--mode", choices=("warm", "warm-s"), default="warm")
    p.add_argument("--gold", help="equation-annotated cache for warm-s")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam-width", type=int, dest="beam_width")
    p.add_argument("--split-ratio", type=float, default=0.8,
                   help="train fraction; 1.0 disables splitting")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--checkpoints")
    p.add_argument("--reports")
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate-equations",
                       help="greedy beam pass producing the noisy dataset")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_equations)

    p = sub.add_parser("distill", help="supervised training on a labelled set")
    p.add_argument("--config")
    p.add_argument("--labelled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="greedy answer accuracy on a cache")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="uniform random equation sampling")
    p.add_argument("--config")
    p.add_argument("--cache", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--depth", "-d", type=int, default=40)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("oracle", help="brute-force reachability statistics")
    p.add_argument("--config")
    p.add_argument("--cache", required=True)
    p.add_argument("--max-steps", type=int, default=3)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("make-synthetic", help="write a templated toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth2", type=float, default=0.6)
    p.add_argument("--distractor", type=float, default=0.0)
    p.set_defaults(func=cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
