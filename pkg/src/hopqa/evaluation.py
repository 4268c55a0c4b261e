"""Corpus evaluation and the ablation runner."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

from .config import ModelConfig, TrainConfig
from .data import TrainingExample, World
from .metrics import MetricsReport, aggregate, score_example
from .model import HopQAModel, Prediction

ABLATION_FLAGS = ("no_fusion", "no_kg", "encoder_retrieval", "no_retrieval")


def predict_all(model: HopQAModel, examples: list[TrainingExample]) -> list[Prediction]:
    return [model.predict(ex) for ex in examples]


def evaluate_model(model: HopQAModel, examples: list[TrainingExample]) -> MetricsReport:
    scores = []
    for ex in examples:
        pred = model.predict(ex)
        scores.append(score_example(ex, pred.answer, pred.retrieved))
    return aggregate(scores)


def evaluate(checkpoint, examples: list[TrainingExample], world: World) -> MetricsReport:
    from .training import model_from_checkpoint

    model = model_from_checkpoint(checkpoint, world)
    return evaluate_model(model, examples)


def parse_flag_set(spec: str) -> tuple[str, ...]:
    """``"full"`` or ``"no-fusion+encoder-retrieval"`` style names -> flag tuple."""
    spec = spec.strip()
    if spec in ("", "full"):
        return ()
    flags = tuple(f.strip().replace("-", "_") for f in spec.split("+"))
    bad = [f for f in flags if f not in ABLATION_FLAGS]
    if bad:
        raise ValueError(f"unknown ablation flags {bad}; choose from {ABLATION_FLAGS}")
    return flags


def flag_set_name(flags: tuple[str, ...]) -> str:
    return "+".join(f.replace("_", "-") for f in flags) or "full"


def with_flags(config: TrainConfig, flags: tuple[str, ...], seed: int) -> TrainConfig:
    model = replace(config.model, **{f: True for f in flags})
    return replace(config, model=ModelConfig(**vars(model)), seed=seed)


@dataclass
class AblationRow:
    name: str
    runs: list[dict]

    def stat(self, key: str) -> tuple[float, float]:
        vals = [r[key] for r in self.runs]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return statistics.fmean(vals), sd

    def to_dict(self) -> dict:
        out = {"config": self.name, "runs": self.runs}
        for key in ("em", "f1", "retr_p", "retr_r", "retr_f1"):
            mean, sd = self.stat(key)
            out[f"{key}_mean"] = mean
            out[f"{key}_std"] = sd
        return out


def run_ablation(
    train: list[TrainingExample],
    test: list[TrainingExample],
    world: World,
    base: TrainConfig,
    flag_sets: list[tuple[str, ...]],
    seeds: list[int],
    dev: list[TrainingExample] | None = None,
) -> list[AblationRow]:
    """Train and evaluate every (flag set, seed) pair; one row per flag set."""
    from .training import train_loop

    rows = []
    for flags in flag_sets:
        runs = []
        for seed in seeds:
            cfg = with_flags(base, flags, seed)
            result = train_loop(train, world, cfg, dev=dev)
            rep = evaluate_model(result.model, test)
            runs.append({"seed": seed, "em": rep.em, "f1": rep.f1, "retr_p": rep.retr_p,
                         "retr_r": rep.retr_r, "retr_f1": rep.retr_f1})
        rows.append(AblationRow(flag_set_name(flags), runs))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    lines = [f"{'config':<32} {'EM':>14} {'F1':>14} {'Retr-F1':>14}"]
    for row in rows:
        cells = []
        for key in ("em", "f1", "retr_f1"):
            mean, sd = row.stat(key)
            cells.append(f"{mean:.3f}±{sd:.3f}")
        lines.append(f"{row.name:<32} " + " ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
