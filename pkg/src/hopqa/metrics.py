"""Answer and retrieval metrics, plus corpus-level aggregation."""

from __future__ import annotations

import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field

_PUNCT = string.punctuation


def normalize_answer(s: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation."""
    return " ".join(s.lower().split()).strip(_PUNCT + " ")


def exact_match(prediction: str, gold: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(gold))


def token_f1(prediction: str, gold: str) -> float:
    pred = normalize_answer(prediction).split()
    ref = normalize_answer(gold).split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p = common / len(pred)
    r = common / len(ref)
    return 2 * p * r / (p + r)


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def retrieval_prf(predicted, gold) -> tuple[float, float, float]:
    """Set precision / recall / F1; order is ignored."""
    pred, ref = set(predicted), set(gold)
    hit = len(pred & ref)
    if not pred:
        p = 1.0 if not ref else 0.0
    else:
        p = hit / len(pred)
    r = 1.0 if not ref else hit / len(ref)
    return p, r, harmonic(p, r)


@dataclass
class ExampleScore:
    example_id: str
    kind: str
    hops: int
    n_sources: int
    em: int
    f1: float
    retr_p: float
    retr_r: float
    retr_f1: float


@dataclass
class MetricsReport:
    em: float
    f1: float
    retr_p: float
    retr_r: float
    retr_f1: float
    count: int
    by_kind: dict[str, dict] = field(default_factory=dict)
    by_hops: dict[str, dict] = field(default_factory=dict)
    by_sources: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "retr_p": self.retr_p,
            "retr_r": self.retr_r,
            "retr_f1": self.retr_f1,
            "count": self.count,
            "by_kind": self.by_kind,
            "by_hops": self.by_hops,
            "by_sources": self.by_sources,
        }


def _means(scores: list[ExampleScore]) -> dict:
    n = len(scores)
    if n == 0:
        return {"em": 0.0, "f1": 0.0, "retr_p": 0.0, "retr_r": 0.0, "retr_f1": 0.0, "count": 0}
    out = {k: sum(getattr(s, k) for s in scores) / n for k in ("em", "f1", "retr_p", "retr_r", "retr_f1")}
    out["count"] = n
    return out


def aggregate(scores: list[ExampleScore]) -> MetricsReport:
    # sort so the float sums do not depend on dataset order
    scores = sorted(scores, key=lambda s: s.example_id)
    overall = _means(scores)
    buckets = {"kind": defaultdict(list), "hops": defaultdict(list), "sources": defaultdict(list)}
    for s in scores:
        buckets["kind"][s.kind].append(s)
        buckets["hops"][str(s.hops)].append(s)
        buckets["sources"][str(s.n_sources)].append(s)
    return MetricsReport(
        em=overall["em"],
        f1=overall["f1"],
        retr_p=overall["retr_p"],
        retr_r=overall["retr_r"],
        retr_f1=overall["retr_f1"],
        count=overall["count"],
        by_kind={k: _means(v) for k, v in sorted(buckets["kind"].items())},
        by_hops={k: _means(v) for k, v in sorted(buckets["hops"].items())},
        by_sources={k: _means(v) for k, v in sorted(buckets["sources"].items())},
    )


def score_example(example, answer: str, retrieved) -> ExampleScore:
    p, r, f = retrieval_prf(retrieved, example.gold_evidence)
    return ExampleScore(
        example.id,
        example.kind,
        example.hops,
        len(example.sources),
        exact_match(answer, example.answer),
        token_f1(answer, example.answer),
        p,
        r,
        f,
    )
