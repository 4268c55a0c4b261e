"""Text, image and knowledge-graph encoders.

Text input layout is ``[CLS] question title body`` and pools at position 0.
Image input layout is ``patches [CLS] question caption`` and also pools at
position 0, which is the first patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .config import ModelConfig


class SequenceTooLong(ValueError):
    pass


@dataclass
class EncodedSource:
    source_id: str
    token_reps: Tensor  # (L, D)
    pooled: Tensor  # (D,)


@dataclass
class EncodedBatch:
    """Several sources of one modality encoded together (right-padded)."""

    source_ids: list[str]
    reps: Tensor  # (B, Lmax, D)
    lengths: list[int]

    @property
    def pooled(self) -> Tensor:
        return self.reps[:, 0, :]

    def source(self, i: int) -> EncodedSource:
        rep = self.reps[i, : self.lengths[i], :]
        return EncodedSource(self.source_ids[i], rep, self.reps[i, 0, :])


@dataclass
class EncodedKG:
    token_reps: Tensor  # H^G, (L, D)
    cls_rep: Tensor  # (D,)
    entity_reps: Tensor  # (num spans, D), mean over each span
    spans: list[tuple[int, int]]


def init_encoders(store: ParamStore, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> None:
    d = cfg.dim
    store["tok_emb"] = Tensor(rng.normal(0.0, 0.5, (vocab_size, d)).astype(np.float32))
    store["pos.text"] = Tensor(rng.normal(0.0, 0.1, (cfg.max_source_len, d)).astype(np.float32))
    store["pos.image"] = Tensor(rng.normal(0.0, 0.1, (cfg.max_source_len, d)).astype(np.float32))
    nn.init_linear(store, "patch_proj", cfg.patch_dim, d, rng)
    for enc in ("text_enc", "image_enc"):
        for i in range(cfg.encoder_layers):
            nn.init_encoder_layer(store, f"{enc}.{i}", d, cfg.ffn_dim, rng)
        nn.init_layer_norm(store, f"{enc}.ln_f", d)
    if not cfg.no_kg:
        store["pos.kg"] = Tensor(rng.normal(0.0, 0.1, (cfg.max_kg_len, d)).astype(np.float32))
        for i in range(cfg.kg_layers):
            nn.init_encoder_layer(store, f"kg_enc.{i}", d, cfg.ffn_dim, rng)
        nn.init_layer_norm(store, "kg_enc.ln_f", d)


def _run_stack(store, cfg, prefix, x, key_mask, layers) -> Tensor:
    for i in layers:
        x = nn.encoder_layer(store, f"{prefix}.{i}", x, key_mask, cfg.heads)
    return x


def _pad(rows: list[list[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def text_inputs(store, cfg, question_ids, texts, cls_id, pad_id=0) -> tuple[Tensor, np.ndarray, list[int]]:
    """Embedded input batch, key mask and lengths for ``encode_texts``."""
    rows = []
    for sid, title, body in texts:
        row = [cls_id, *question_ids, *title, *body]
        if len(row) > cfg.max_source_len:
            raise SequenceTooLong(f"text source {sid!r}: {len(row)} tokens > {cfg.max_source_len}")
        rows.append(row)
    ids, mask = _pad(rows, pad_id)
    x = ad.add(ad.embedding(store["tok_emb"], ids), store["pos.text"][: ids.shape[1]])
    return x, mask, [len(r) for r in rows]


def encode_texts(
    store: ParamStore,
    cfg: ModelConfig,
    question_ids: list[int],
    texts: list[tuple[str, list[int], list[int]]],
    cls_id: int,
    pad_id: int = 0,
) -> EncodedBatch:
    """Encode ``(source_id, title_ids, body_ids)`` triples as one padded batch."""
    x, mask, lengths = text_inputs(store, cfg, question_ids, texts, cls_id, pad_id)
    x = _run_stack(store, cfg, "text_enc", x, mask, range(cfg.encoder_layers))
    x = nn.layer_norm(store, "text_enc.ln_f", x)
    return EncodedBatch([t[0] for t in texts], x, lengths)


def encode_text(store, cfg, question_ids, source_id, title_ids, body_ids, cls_id, pad_id=0) -> EncodedSource:
    return encode_texts(store, cfg, question_ids, [(source_id, title_ids, body_ids)], cls_id, pad_id).source(0)


def image_inputs(store, cfg, question_ids, images, cls_id, pad_id=0) -> tuple[Tensor, np.ndarray, list[int]]:
    """Projected patches plus embedded caption tokens, key mask and lengths."""
    cells = cfg.patch_size * cfg.patch_size
    rows, grids = [], []
    for sid, caption, patches in images:
        patches = np.asarray(patches)
        if patches.shape != (cfg.patch_size, cfg.patch_size, cfg.patch_dim):
            raise ad.ShapeError(f"encode_image[{sid}]", patches.shape, (cfg.patch_size, cfg.patch_size, cfg.patch_dim))
        row = [cls_id, *question_ids, *caption]
        if cells + len(row) > cfg.max_source_len:
            raise SequenceTooLong(f"image source {sid!r}: {cells + len(row)} positions > {cfg.max_source_len}")
        rows.append(row)
        grids.append(patches.reshape(cells, cfg.patch_dim))
    ids, tok_mask = _pad(rows, pad_id)
    feats = Tensor(np.stack(grids).astype(ad.default_dtype()))
    patch_x = nn.linear(store, "patch_proj", feats)
    x = ad.concat([patch_x, ad.embedding(store["tok_emb"], ids)], axis=1)
    x = ad.add(x, store["pos.image"][: x.shape[1]])
    mask = np.concatenate([np.ones((len(rows), cells), dtype=bool), tok_mask], axis=1)
    return x, mask, [cells + len(r) for r in rows]


def encode_images(
    store: ParamStore,
    cfg: ModelConfig,
    question_ids: list[int],
    images: list[tuple[str, list[int], np.ndarray]],
    cls_id: int,
    pad_id: int = 0,
) -> EncodedBatch:
    """Encode ``(source_id, caption_ids, patches)`` triples; patches are P x P x patch_dim."""
    x, mask, lengths = image_inputs(store, cfg, question_ids, images, cls_id, pad_id)
    x = _run_stack(store, cfg, "image_enc", x, mask, range(cfg.encoder_layers))
    x = nn.layer_norm(store, "image_enc.ln_f", x)
    return EncodedBatch([t[0] for t in images], x, lengths)


def encode_image(store, cfg, question_ids, source_id, caption_ids, patches, cls_id, pad_id=0) -> EncodedSource:
    return encode_images(store, cfg, question_ids, [(source_id, caption_ids, patches)], cls_id, pad_id).source(0)


def span_mean_matrix(spans: list[tuple[int, int]], length: int) -> np.ndarray:
    m = np.zeros((len(spans), length), dtype=ad.default_dtype())
    for k, (s, e) in enumerate(spans):
        if not 0 <= s < e <= length:
            raise ad.ShapeError("span_mean", (s, e), (length,))
        m[k, s:e] = 1.0 / (e - s)
    return m


def encode_kg_front(
    store: ParamStore,
    cfg: ModelConfig,
    kg_ids: list[int],
    spans: list[tuple[int, int]],
    fusion_layer: int | None = None,
) -> EncodedKG:
    """Embedding plus the KG layers that run before fusion; entity reps are span means."""
    fusion_layer = cfg.fusion_layer if fusion_layer is None else fusion_layer
    if not 0 <= fusion_layer <= cfg.kg_layers:
        raise ValueError(f"fusion layer {fusion_layer} outside [0, {cfg.kg_layers}]")
    if len(kg_ids) > cfg.max_kg_len:
        raise SequenceTooLong(f"linearized KG has {len(kg_ids)} tokens > {cfg.max_kg_len}")
    ids = np.asarray(kg_ids, dtype=np.int64)
    x = ad.add(ad.embedding(store["tok_emb"], ids), store["pos.kg"][: len(ids)])
    x = _run_stack(store, cfg, "kg_enc", x, None, range(fusion_layer))
    if spans:
        ent = ad.matmul(Tensor(span_mean_matrix(spans, len(ids))), x)
    else:
        ent = Tensor(np.zeros((0, cfg.dim), dtype=x.data.dtype))
    return EncodedKG(x, x[0], ent, list(spans))


def encode_kg_back(store: ParamStore, cfg: ModelConfig, h_plus: Tensor, fusion_layer: int | None = None) -> Tensor:
    fusion_layer = cfg.fusion_layer if fusion_layer is None else fusion_layer
    x = _run_stack(store, cfg, "kg_enc", h_plus, None, range(fusion_layer, cfg.kg_layers))
    return nn.layer_norm(store, "kg_enc.ln_f", x)
