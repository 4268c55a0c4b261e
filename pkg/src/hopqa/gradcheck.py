"""Finite-difference check of the full training loss on a tiny model.

The alignment step is an argmax, so it is frozen at the base point; every
other computation is differentiated as in training. Perturbing one scalar
only recomputes the stages downstream of its parameter, which keeps a check
of every parameter inside a couple of minutes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .config import ModelConfig
from .decoder import DecoderPass, build_memory, teacher_forced_heads, teacher_forced_inputs
from .encoders import encode_kg_front, image_inputs, text_inputs
from .fusion import confidence_logits, fuse_and_reencode, similarity_scores
from .model import Encoded, HopQAModel, build_gold_labels, build_vocab
from .synth import WorldSizes, generate_dataset, generate_world

TINY = ModelConfig(
    dim=16,
    heads=2,
    ffn_dim=16,
    encoder_layers=2,
    kg_layers=2,
    fusion_layer=1,
    decoder_layers=2,
    max_source_len=32,
    max_kg_len=64,
    max_decoder_len=16,
)


@dataclass
class GradcheckReport:
    checked: int
    skipped: int
    max_rel_error: float
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale == 0 else abs(analytic - numeric) / scale


def tiny_problem(seed: int = 0, n_examples: int = 2, cfg: ModelConfig = TINY):
    """Model in float64 plus a closure computing the batch-mean loss."""
    world = generate_world(seed, WorldSizes(entities=8, relations=3, out_degree=2))
    kinds = ("text-image-2hop", "text-text-2hop")
    examples = generate_dataset(world, n_examples, seed, kinds=kinds, n_sources=3, prefix="gc")
    with ad.precision(np.float64):
        model = HopQAModel(cfg, build_vocab(world, examples), world, seed=seed)
        model.store.astype(np.float64)
        items = []
        for i, ex in enumerate(examples):
            prep = model.prepare(ex)
            with ad.no_grad():
                alignment = model.encode(prep).alignment
            labels = build_gold_labels(prep, np.random.default_rng([seed, i]))
            items.append((prep, alignment, labels))

    def loss_fn() -> ad.Tensor:
        with ad.precision(np.float64):
            total = None
            for prep, alignment, labels in items:
                part = model.loss_from(prep, model.encode(prep, alignment), labels).tensor
                total = part if total is None else ad.add(total, part)
            return ad.multiply(total, 1.0 / len(items))

    loss_fn.items = items  # type: ignore[attr-defined]
    return model, loss_fn


# What each parameter group forces to be recomputed. Fusion weights only score
# the alignment, which is frozen, so the fused graph does not depend on them.
_DOWNSTREAM = ("fusion", "kg_back", "decoder")
DIRTY = {
    "all": {"text", "image", "kg_front", *_DOWNSTREAM},
    "text": {"text", *_DOWNSTREAM},
    "image": {"image", *_DOWNSTREAM},
    "kg_front": {"kg_front", *_DOWNSTREAM},
    "fusion": {"fusion", "decoder"},
    "kg_back": {"kg_back", "decoder"},
    "decoder": {"decoder"},
}
_ENCODERS = {"text_enc": "text", "image_enc": "image"}


def stage_of(name: str, cfg: ModelConfig) -> tuple[str, int]:
    """Stage a parameter belongs to, plus where to restart inside a stack.

    Restart 0 rebuilds the stack input, i + 1 reruns from layer i, and
    layers + 1 only redoes the final norm and whatever reads it.
    """
    parts = name.split(".")
    head = parts[0]
    if head == "tok_emb":
        return "all", 0
    if name == "pos.text":
        return "text", 0
    if name == "pos.image" or head == "patch_proj":
        return "image", 0
    if head in _ENCODERS:
        return _ENCODERS[head], int(parts[1]) + 1 if parts[1].isdigit() else cfg.encoder_layers + 1
    if name == "pos.kg":
        return "kg_front", 0
    if head == "kg_enc":
        return ("kg_front", 0) if parts[1].isdigit() and int(parts[1]) < cfg.fusion_layer else ("kg_back", 0)
    if head == "fusion":
        return "fusion", 0
    if head == "dec" and parts[1].isdigit():
        return "decoder", int(parts[1]) + 1
    if name == "pos.dec":
        return "decoder", 0
    return "decoder", cfg.decoder_layers + 1


class StagedLoss:
    """Batch-mean loss that caches each example's intermediate stages.

    Text and image encoders also keep every layer's output, so a parameter
    in layer i restarts that stack at layer i. The decoder runs the whole
    batch at once, padded, with the same per-layer caching; padded keys get
    exactly zero weight so each example's loss is unchanged.
    """

    def __init__(self, model: HopQAModel, items):
        self.model = model
        self.items = items
        self.cache: list[dict] = [{} for _ in items]
        self.mod: dict = {}
        self.dec: dict = {}

    def _modality(self, kind: str, start: int) -> None:
        """Encode one modality's sources from every example as a single padded batch."""
        m, cfg, store = self.model, self.model.cfg, self.model.store
        mc = self.mod.setdefault(kind, {})
        owners = [(b, t[0]) for b, (prep, _, _) in enumerate(self.items) for t in getattr(prep, f"{kind}s")]
        for c in self.cache:
            c[kind] = []
        if not owners:
            return
        prefix = f"{kind}_enc"
        if start == 0:
            build = text_inputs if kind == "text" else image_inputs
            xs, masks, lengths = [], [], []
            for prep, _, _ in self.items:
                sources = getattr(prep, f"{kind}s")
                if sources:
                    x, mask, lens = build(store, cfg, prep.question_ids, [t[1:] for t in sources],
                                          m.vocab.cls, m.vocab.pad)
                    xs.append(x)
                    masks.append(mask)
                    lengths += lens
            width = max(x.shape[1] for x in xs)
            mc["acts"] = [ad.concat([_pad_axis1(x, width) for x in xs], axis=0)] + [None] * cfg.encoder_layers
            mc["mask"] = np.concatenate([np.pad(k, ((0, 0), (0, width - k.shape[1]))) for k in masks], axis=0)
            mc["lengths"] = lengths
        acts = mc["acts"]
        for i in range(max(start, 1), cfg.encoder_layers + 1):
            acts[i] = nn.encoder_layer(store, f"{prefix}.{i - 1}", acts[i - 1], mc["mask"], cfg.heads)
        x = nn.layer_norm(store, f"{prefix}.ln_f", acts[-1])
        for j, (b, idx) in enumerate(owners):
            self.cache[b][kind].append((idx, x[j, : mc["lengths"][j], :], x[j, 0, :]))

    def _encode(self, prep, alignment, c: dict, dirty: set[str]) -> Encoded:
        cfg, store = self.model.cfg, self.model.store
        if "text" in dirty or "image" in dirty:
            parts = sorted(c["text"] + c["image"], key=lambda r: r[0])
            c["reps"] = [r[1] for r in parts]
            c["pooled"] = ad.concat([ad.reshape(r[2], (1, cfg.dim)) for r in parts], axis=0)
        if "kg_front" in dirty:
            c["front"] = encode_kg_front(store, cfg, prep.kg_ids, prep.head_spans)
        pooled, front = c["pooled"], c["front"]
        if "fusion" in dirty:
            c["sim"] = similarity_scores(pooled, front.entity_reps, store["fusion.ws"])
            c["conf"] = confidence_logits(pooled, front.cls_rep, store["fusion.wp"])
        if "kg_back" in dirty:
            fused = fuse_and_reencode(store, cfg, front, alignment, pooled, prep.head_spans)
            c["memory"] = build_memory(c["reps"], fused.h_star, pooled)
        return Encoded(memory=c["memory"], pooled=pooled, similarity=c["sim"], conf_logits=c["conf"], alignment=alignment)

    def _decoder_batch(self, encs: list[Encoded]) -> None:
        m, cfg, store = self.model, self.model.cfg, self.model.store
        tins = [
            teacher_forced_inputs(store, cfg, prep.question_ids, enc.memory, labels.retrieval_targets,
                                  labels.answer_ids, m.vocab.ans)
            for (prep, _, labels), enc in zip(self.items, encs)
        ]
        lens = [t.x.shape[0] for t in tins]
        mlens = [enc.memory.reps.shape[0] for enc in encs]
        width, mwidth = max(lens), max(mlens)
        mask = np.zeros((len(tins), width, mwidth), dtype=bool)
        for b, t in enumerate(tins):
            mask[b, : lens[b], : mlens[b]] = t.cross_mask
            mask[b, lens[b]:, 0] = True  # padded queries read something; their outputs are dropped
        self.dec = {
            "tins": tins,
            "lens": lens,
            "mlens": mlens,
            "mask": mask,
            "memory": _stack_padded([enc.memory.reps for enc in encs], mwidth),
            "acts": [_stack_padded([t.x for t in tins], width)] + [None] * cfg.decoder_layers,
            "scores": [None] * cfg.decoder_layers,
        }

    def _decoder_losses(self, encs: list[Encoded], start: int) -> float:
        cfg, store = self.model.cfg, self.model.store
        if start == 0:
            self._decoder_batch(encs)
        d = self.dec
        acts, scores = d["acts"], d["scores"]
        for i in range(max(start - 1, 0), cfg.decoder_layers):
            out = nn.decoder_layer(store, f"dec.{i}", acts[i], d["memory"], d["mask"], cfg.heads)
            acts[i + 1], scores[i] = out.hidden, out.cross_scores
        hidden = nn.layer_norm(store, "dec.ln_f", acts[-1])
        total = 0.0
        for b, ((prep, _, labels), enc) in enumerate(zip(self.items, encs)):
            n, nm = d["lens"][b], d["mlens"][b]
            dpass = DecoderPass(hidden[b, :n], [sc[b, :, :n, :nm] for sc in scores], [])
            out = teacher_forced_heads(store, cfg, d["tins"][b], dpass, enc.memory)
            total += self.model.loss_from(prep, enc, labels, out).tensor.item()
        return total

    def __call__(self, stage: str = "all", start: int = 0) -> float:
        dirty = DIRTY[stage]
        with ad.precision(np.float64), ad.no_grad():
            for kind in ("text", "image"):
                if kind in dirty:
                    self._modality(kind, start)
            encs = [
                self._encode(prep, alignment, c, dirty)
                for (prep, alignment, _), c in zip(self.items, self.cache)
            ]
            total = self._decoder_losses(encs, start if stage == "decoder" else 0)
        return total / len(self.items)


def _pad_axis1(x: ad.Tensor, width: int) -> ad.Tensor:
    b, n, d = x.shape
    if n == width:
        return x
    return ad.concat([x, ad.Tensor(np.zeros((b, width - n, d), dtype=x.data.dtype))], axis=1)


def _stack_padded(rows: list[ad.Tensor], width: int) -> ad.Tensor:
    """(L_i, D) tensors -> (B, width, D), zero-padded at the end."""
    out = []
    for r in rows:
        if r.shape[0] < width:
            r = ad.concat([r, ad.Tensor(np.zeros((width - r.shape[0], r.shape[1]), dtype=r.data.dtype))], axis=0)
        out.append(ad.reshape(r, (1, *r.shape)))
    return ad.concat(out, axis=0)


def gradcheck(seed: int = 0, eps: float = 1e-4, tol: float = 1e-3, floor: float = 1e-8) -> GradcheckReport:
    """Compare backward() against central differences for every scalar with |g| > floor."""
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    started = time.time()
    model, loss_fn = tiny_problem(seed)
    store = model.store
    store.zero_grad()
    loss = loss_fn()
    analytic = ad.backward(loss, store)
    staged = StagedLoss(model, loss_fn.items)
    base = staged("all")
    if not math.isclose(base, loss.item(), rel_tol=1e-12, abs_tol=1e-12):
        raise AssertionError(f"staged loss {base} differs from the model loss {loss.item()}")

    def evaluate(stage: str, start: int) -> float:
        val = staged(stage, start)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val}")
        return val

    checked = skipped = 0
    worst = 0.0
    failures = []
    for name, t in store.items():
        stage, start = stage_of(name, model.cfg)
        flat = t.data.reshape(-1)
        g = analytic[name].reshape(-1)
        live = np.flatnonzero(np.abs(g) > floor)
        for i in live:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate(stage, start)
            flat[i] = orig - eps
            down = evaluate(stage, start)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = relative_error(float(g[i]), numeric)
            worst = max(worst, err)
            checked += 1
            if err > tol:
                failures.append((name, int(i), float(g[i]), numeric))
        skipped += int(flat.size - live.size)
        if live.size:
            staged(stage, start)  # refresh the cache at the restored values
    return GradcheckReport(checked, skipped, worst, failures, time.time() - started)
