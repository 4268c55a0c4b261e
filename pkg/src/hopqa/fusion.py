"""Entity-centered fusion: score sources against KG head entities, align, fuse.

Alignment is a hard decision (argmax over head entities, gated by a
confidence threshold) and carries no gradient; the fused sum does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import ModelConfig
from .encoders import EncodedKG, encode_kg_back, span_mean_matrix


def init_fusion(store: ParamStore, dim: int, rng: np.random.Generator) -> None:
    store["fusion.ws"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)).astype(np.float32))
    store["fusion.wp"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * dim), (2 * dim, 1)).astype(np.float32))


@dataclass
class AlignmentResult:
    similarity: np.ndarray  # (n, N)
    confidence: np.ndarray  # (n,)
    assignment: list[int | None]  # per source: aligned head index or None
    sets: list[list[int]] = field(default_factory=list)  # per head: aligned source indices

    @property
    def empty(self) -> bool:
        return all(a is None for a in self.assignment)


@dataclass
class FusedKG:
    h_plus: Tensor  # H^{G+}
    h_star: Tensor  # H^{G*}
    entity_reps: Tensor | None  # updated head reps, (N, D)


def similarity_scores(pooled: Tensor, head_reps: Tensor, ws: Tensor) -> Tensor:
    """s[i, k] = (pooled_i @ W^s) . head_k, shape (n, N)."""
    if head_reps.shape[0] == 0:
        return Tensor(np.zeros((pooled.shape[0], 0), dtype=pooled.data.dtype))
    return ad.matmul(ad.matmul(pooled, ws), ad.transpose(head_reps))


def confidence_logits(pooled: Tensor, kg_cls: Tensor, wp: Tensor) -> Tensor:
    """Pre-sigmoid confidence, shape (n,)."""
    n, d = pooled.shape
    cls = ad.add(Tensor(np.zeros((n, d), dtype=pooled.data.dtype)), ad.reshape(kg_cls, (1, d)))
    z = ad.matmul(ad.concat([pooled, cls], axis=1), wp)
    return ad.reshape(z, (n,))


def confidence_scores(pooled: Tensor, kg_cls: Tensor, wp: Tensor) -> Tensor:
    return ad.sigmoid(confidence_logits(pooled, kg_cls, wp))


def align_sources(similarity, confidence, threshold: float = 0.5) -> AlignmentResult:
    """Source i joins the set of its best head (lowest index on ties) iff confidence > threshold."""
    sim = np.asarray(similarity.data if isinstance(similarity, Tensor) else similarity, dtype=np.float64)
    conf = np.asarray(confidence.data if isinstance(confidence, Tensor) else confidence, dtype=np.float64)
    n = conf.shape[0]
    num_heads = sim.shape[1] if sim.ndim == 2 else 0
    assignment: list[int | None] = [None] * n
    sets: list[list[int]] = [[] for _ in range(num_heads)]
    if num_heads:
        best = np.argmax(sim, axis=1)  # first maximum wins
        for i in range(n):
            if conf[i] > threshold:
                k = int(best[i])
                assignment[i] = k
                sets[k].append(i)
    return AlignmentResult(sim, conf, assignment, sets)


def fusion_matrix(alignment: AlignmentResult, head_spans: list[tuple[int, int]], length: int) -> np.ndarray:
    """(L, n) matrix adding each aligned source's pooled vector to every token of its head's span."""
    m = np.zeros((length, len(alignment.assignment)), dtype=ad.default_dtype())
    for i, k in enumerate(alignment.assignment):
        if k is not None:
            s, e = head_spans[k]
            m[s:e, i] = 1.0
    return m


def fuse(encoded: EncodedKG, alignment: AlignmentResult, pooled: Tensor, head_spans) -> Tensor:
    """H^{G+}: shift each aligned head span so its mean absorbs the aligned pooled vectors."""
    if alignment.empty:
        return encoded.token_reps
    m = fusion_matrix(alignment, head_spans, encoded.token_reps.shape[0])
    return ad.add(encoded.token_reps, ad.matmul(Tensor(m), pooled))


def fuse_and_reencode(
    store: ParamStore,
    cfg: ModelConfig,
    encoded: EncodedKG,
    alignment: AlignmentResult,
    pooled: Tensor,
    head_spans: list[tuple[int, int]],
    fusion_layer: int | None = None,
) -> FusedKG:
    h_plus = fuse(encoded, alignment, pooled, head_spans)
    h_star = encode_kg_back(store, cfg, h_plus, fusion_layer)
    ent = None
    if head_spans:
        ent = ad.matmul(Tensor(span_mean_matrix(head_spans, h_plus.shape[0])), h_plus)
    return FusedKG(h_plus, h_star, ent)
