"""Command-line entry point: ``hopqa <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import read_dataset, write_dataset
from .evaluation import evaluate, format_table, parse_flag_set, run_ablation, with_flags
from .kg import build_graph, index_relations, linearize
from .synth import KINDS, generate_dataset, generate_world

log = logging.getLogger("hopqa")


def _split_paths(data: str) -> tuple[Path, Path | None]:
    """A dataset argument is a JSONL file or a directory holding train/dev files."""
    p = Path(data)
    if p.is_dir():
        dev = p / "dev.jsonl"
        return p / "train.jsonl", dev if dev.exists() else None
    return p, None


def _seeds(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _load_config(path: str | None) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    world = generate_world(args.seed)
    kinds = tuple(k.strip() for k in args.kinds.split(",")) if args.kinds else KINDS
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ValueError(f"unknown kinds {bad}; choose from {list(KINDS)}")
    # distinct example streams for each split, all derived from --seed
    train_seed, dev_seed, test_seed = (int(s) for s in np.random.SeedSequence(args.seed).generate_state(3))
    out = Path(args.out)
    splits = [("train", args.n_train, train_seed), ("dev", args.n_dev, dev_seed), ("test", args.n_test, test_seed)]
    for name, n, seed in splits:
        if name != "train" and n == 0:
            continue
        examples = generate_dataset(world, n, seed, kinds=kinds, n_sources=args.sources_per_question, prefix=name)
        write_dataset(examples, world, out / f"{name}.jsonl")
        print(f"wrote {n} examples to {out / f'{name}.jsonl'}")
    return 0


def cmd_build_kg(args) -> int:
    examples, world = read_dataset(args.data)
    relations = index_relations(world.relations)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        for ex in examples:
            graph = build_graph(ex.sources, world.lexicon, relations)
            lin = linearize(graph, world.entities, world.relation_names, args.max_length)
            heads = lin.graph.heads
            labels = {}
            for s in ex.sources:
                mentioned = set(graph.source_entities.get(s.id, ()))
                labels[s.id] = [k for k, h in enumerate(heads) if h in mentioned]
            rec = {
                "id": ex.id,
                "linearized": lin.text,
                "heads": heads,
                "head_spans": lin.head_spans,
                "truncated": lin.truncated,
                "alignment_labels": labels,
            }
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(examples)} graphs to {out}")
    return 0


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    changes = {k: getattr(args, k) for k in ("steps", "lr", "seed") if getattr(args, k) is not None}
    config = replace(config, **changes)
    flags = {f: True for f in ("no_fusion", "no_kg", "encoder_retrieval", "no_retrieval") if getattr(args, f)}
    if flags:
        config = replace(config, model=ModelConfig(**{**vars(config.model), **flags}))
    return config


def cmd_train(args) -> int:
    from .training import save_checkpoint, train_loop

    train_path, dev_path = _split_paths(args.data)
    train, world = read_dataset(train_path)
    dev = read_dataset(dev_path)[0] if dev_path else None
    config = _apply_overrides(_load_config(args.config), args)
    out = Path(args.out)
    log_path = out.with_suffix(".log.jsonl")
    result = train_loop(train, world, config, dev=dev, log_path=log_path)
    save_checkpoint(out, result.model.store, result.model.vocab, config)
    print(f"saved checkpoint to {out} (best step {result.best_step}); log in {log_path}")
    return 0


def cmd_eval(args) -> int:
    examples, world = read_dataset(args.data)
    report = evaluate(args.ckpt, examples, world)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_inspect(args) -> int:
    from .training import model_from_checkpoint

    examples, world = read_dataset(args.data)
    chosen = [ex for ex in examples if ex.id == args.example]
    if not chosen:
        raise KeyError(f"no example with id {args.example!r}")
    ex = chosen[0]
    pred = model_from_checkpoint(args.ckpt, world).predict(ex)
    print(json.dumps({"id": ex.id, "question": ex.question, "gold_answer": ex.answer,
                      "gold_evidence": ex.gold_evidence, "answer": pred.answer,
                      "retrieved": pred.retrieved}))
    for rec in pred.trace:
        print(json.dumps(rec))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    rep = gradcheck(seed=args.seed, eps=args.eps, tol=args.tol)
    print(f"checked {rep.checked} scalars ({rep.skipped} below floor), "
          f"max relative error {rep.max_rel_error:.3e}, {rep.seconds:.1f}s")
    for name, i, a, n in rep.failures[:20]:
        print(f"  {name}[{i}]: analytic {a:.6e} numeric {n:.6e}")
    return 0 if rep.ok else 1


def cmd_ablate(args) -> int:
    train_path, dev_path = _split_paths(args.data)
    train, world = read_dataset(train_path)
    if args.test:
        test = read_dataset(args.test)[0]
    else:
        test_path = train_path.with_name("test.jsonl")
        if not test_path.exists():
            raise FileNotFoundError(f"{test_path} missing; pass --test")
        test = read_dataset(test_path)[0]
    base = _load_config(args.config)
    flag_sets = [parse_flag_set(s) for s in args.flags.split(",")]
    rows = run_ablation(train, test, world, base, flag_sets, _seeds(args.seeds))
    print(format_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hopqa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-dev", type=int, default=100)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--kinds", default="", help=f"comma-separated subset of {','.join(KINDS)}")
    g.add_argument("--sources-per-question", type=int, default=6)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    k = sub.add_parser("build-kg", help="write linearized graphs and alignment labels")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--max-length", type=int, default=ModelConfig().max_kg_len)
    k.set_defaults(func=cmd_build_kg)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True, help="train.jsonl or a directory with train/dev files")
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    for flag in ("no-fusion", "no-kg", "encoder-retrieval", "no-retrieval"):
        t.add_argument(f"--{flag}", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print the decoder trace for one example")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--example", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and score several flag sets over several seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--test", help="held-out JSONL (default: test.jsonl beside the training file)")
    a.add_argument("--config")
    a.add_argument("--flags", default="full,no-fusion", help="comma-separated flag sets, e.g. full,no-fusion+no-kg")
    a.add_argument("--seeds", default="0-4")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # report, then fail the process
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
