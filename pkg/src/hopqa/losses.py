"""The five training objectives and their sum.

Binary terms take logits rather than probabilities so saturated gates and
confidences stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _zero() -> Tensor:
    return Tensor(np.zeros((), dtype=ad.default_dtype()))


def _pick(log_probs: Tensor, rows: list[int], cols: list[int]) -> Tensor:
    return log_probs[(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))]


def _bce_with_logits(logits: Tensor, labels) -> Tensor:
    y = np.asarray(labels, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ad.ShapeError("bce", logits.shape, y.shape)
    # -(y log s(z) + (1 - y) log s(-z))
    pos = ad.multiply(ad.log_sigmoid(logits), y)
    negs = ad.multiply(ad.log_sigmoid(ad.neg(logits)), 1.0 - y)
    return ad.neg(ad.mean(ad.add(pos, negs)))


def loss_alignment(similarity: Tensor, targets: list[int | None]) -> Tensor:
    """Cross-entropy of each source's similarity row against its aligned head.

    Sources without a target (no head entity) are left out of the mean.
    """
    rows = [i for i, t in enumerate(targets) if t is not None]
    if not rows or similarity.shape[1] == 0:
        return _zero()
    lp = ad.log_softmax(similarity[np.asarray(rows)])
    picked = _pick(lp, list(range(len(rows))), [targets[i] for i in rows])
    return ad.neg(ad.mean(picked))


def loss_confidence(confidence_logits: Tensor, labels) -> Tensor:
    return _bce_with_logits(confidence_logits, labels)


def loss_retrieval(alpha: Tensor | None, targets: list[int]) -> Tensor:
    if alpha is None or not targets:
        return _zero()
    if alpha.shape[0] != len(targets):
        raise ad.ShapeError("loss_retrieval", alpha.shape, (len(targets),))
    lp = ad.log_softmax(alpha)
    return ad.neg(ad.mean(_pick(lp, list(range(len(targets))), targets)))


def loss_stop(gate_logits: Tensor | None, labels) -> Tensor:
    if gate_logits is None:
        return _zero()
    return _bce_with_logits(gate_logits, labels)


def loss_generation(log_probs: Tensor, answer_ids: list[int]) -> Tensor:
    """Summed (not averaged) negative log-likelihood of the answer tokens."""
    if log_probs.shape[0] != len(answer_ids):
        raise ad.ShapeError("loss_generation", log_probs.shape, (len(answer_ids),))
    return ad.neg(ad.sum_(_pick(log_probs, list(range(len(answer_ids))), answer_ids)))


@dataclass
class LossBreakdown:
    alignment: float
    confidence: float
    retrieval: float
    stop: float
    generation: float
    total: float
    tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {
            "L_a": self.alignment,
            "L_c": self.confidence,
            "L_r": self.retrieval,
            "L_s": self.stop,
            "L_g": self.generation,
            "L": self.total,
        }


def total_loss(parts) -> LossBreakdown:
    """Unweighted sum of (L_a, L_c, L_r, L_s, L_g); accepts Tensors or floats."""
    parts = [p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=ad.default_dtype())) for p in parts]
    if len(parts) != 5:
        raise ValueError("expected five loss terms")
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    vals = [p.item() for p in parts]
    return LossBreakdown(*vals, total=float(sum(vals)), tensor=total)
