"""Full model: encoders, entity-centered fusion, retrieval-generation decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .config import ModelConfig
from .data import TrainingExample, World
from .decoder import Decoder, DecoderMemory, build_memory, forward_teacher_forced, init_decoder
from .encoders import EncodedKG, encode_images, encode_kg_back, encode_kg_front, encode_texts, init_encoders
from .fusion import (
    AlignmentResult,
    align_sources,
    confidence_logits,
    fuse_and_reencode,
    init_fusion,
    similarity_scores,
)
from .kg import LinearizedKG, build_graph, index_relations, linearize
from .losses import (
    LossBreakdown,
    loss_alignment,
    loss_confidence,
    loss_generation,
    loss_retrieval,
    loss_stop,
    total_loss,
)
from .vocab import EOS, SPECIALS, Vocabulary, detokenize, word_tokens

KG_MARKUP = ["Row", ":", ",", ";", "."]


class VocabularyMismatch(ValueError):
    pass


def build_vocab(world: World, examples: list[TrainingExample] = ()) -> Vocabulary:
    texts = list(world.entities.values()) + list(world.relation_names.values())
    texts += [v for vals in world.attribute_values.values() for v in vals] + list(world.attribute_values)
    for ex in examples:
        texts.append(ex.question)
        texts.append(ex.answer)
        for s in ex.sources:
            texts += [s.title, s.body, s.caption]
    # a graph has at most one row per entity
    numerals = [str(i) for i in range(1, len(world.entities) + 1)]
    return Vocabulary.from_texts(texts, extra=KG_MARKUP + numerals)


@dataclass
class PreparedExample:
    example: TrainingExample
    question_ids: list[int]
    texts: list[tuple[int, str, list[int], list[int]]]  # (source index, id, title, body)
    images: list[tuple[int, str, list[int], np.ndarray]]
    linearized: LinearizedKG | None
    kg_ids: list[int]
    head_spans: list[tuple[int, int]]
    contained_heads: list[list[int]]  # per source: indices of surviving heads it mentions
    answer_ids: list[int]  # ends with [EOS]
    gold: list[int]

    @property
    def n_sources(self) -> int:
        return len(self.example.sources)


@dataclass
class GoldLabels:
    align_targets: list[int | None]
    confidence_labels: list[int]
    retrieval_targets: list[int]
    gate_labels: list[int]
    answer_ids: list[int]


@dataclass
class Encoded:
    memory: DecoderMemory
    pooled: Tensor
    kg_front: EncodedKG | None = None
    kg_star: Tensor | None = None
    kg_plus: Tensor | None = None
    similarity: Tensor | None = None
    conf_logits: Tensor | None = None
    alignment: AlignmentResult | None = None
    source_reps: list[Tensor] = field(default_factory=list)


@dataclass
class Prediction:
    example_id: str
    answer: str
    answer_ids: list[int]
    retrieved: list[str]
    trace: list[dict]
    alignment: list[int | None] | None = None


def build_gold_labels(prep: PreparedExample, rng: np.random.Generator) -> GoldLabels:
    """Alignment targets are sampled uniformly when a source mentions several heads."""
    targets: list[int | None] = []
    for heads in prep.contained_heads:
        if not heads:
            targets.append(None)
        elif len(heads) == 1:
            targets.append(heads[0])
        else:
            targets.append(heads[int(rng.integers(len(heads)))])
    m = len(prep.gold)
    return GoldLabels(
        align_targets=targets,
        confidence_labels=[int(bool(h)) for h in prep.contained_heads],
        retrieval_targets=list(prep.gold),
        gate_labels=[1] * m + [0],
        answer_ids=list(prep.answer_ids),
    )


class HopQAModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, world: World, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.world = world
        self._relations = index_relations(world.relations)
        if store is None:
            rng = np.random.default_rng(seed)
            store = ParamStore()
            init_encoders(store, cfg, len(vocab), rng)
            if cfg.uses_fusion:
                init_fusion(store, cfg.dim, rng)
            init_decoder(store, cfg, len(vocab), rng)
        self.store = store
        self._prep_cache: dict[str, PreparedExample] = {}

    # ------------------------------------------------------------ inputs

    def _ids(self, text: str, where: str) -> list[int]:
        toks = word_tokens(text)
        ids = self.vocab.ids(toks)
        if self.vocab.unk in ids:
            unknown = sorted({t for t, i in zip(toks, ids) if i == self.vocab.unk})
            raise VocabularyMismatch(f"{where}: tokens not in vocabulary: {unknown[:5]}")
        return ids

    def prepare(self, ex: TrainingExample) -> PreparedExample:
        cached = self._prep_cache.get(ex.id)
        if cached is not None and cached.example is ex:
            return cached
        q = self._ids(ex.question, f"{ex.id} question")
        texts, images = [], []
        for i, s in enumerate(ex.sources):
            if s.kind == "text":
                texts.append((i, s.id, self._ids(s.title, s.id), self._ids(s.body, s.id)))
            else:
                images.append((i, s.id, self._ids(s.caption, s.id), s.patches))
        lin = None
        kg_ids: list[int] = []
        head_spans: list[tuple[int, int]] = []
        contained: list[list[int]] = [[] for _ in ex.sources]
        if not self.cfg.no_kg:
            graph = build_graph(ex.sources, self.world.lexicon, self._relations)
            lin = linearize(graph, self.world.entities, self.world.relation_names, self.cfg.max_kg_len)
            kg_ids = self.vocab.ids(lin.tokens)
            head_spans = lin.head_spans
            heads = lin.graph.heads
            for i, s in enumerate(ex.sources):
                mentioned = set(graph.source_entities.get(s.id, ()))
                contained[i] = [k for k, h in enumerate(heads) if h in mentioned]
        answer = self._ids(ex.answer, f"{ex.id} answer") + [self.vocab.eos]
        prep = PreparedExample(ex, q, texts, images, lin, kg_ids, head_spans, contained, answer, ex.gold_indices)
        self._prep_cache[ex.id] = prep
        return prep

    # ------------------------------------------------------------ encoding

    def encode(self, prep: PreparedExample, alignment: AlignmentResult | None = None) -> Encoded:
        cfg, store = self.cfg, self.store
        n = prep.n_sources
        reps: list[Tensor | None] = [None] * n
        pooled_parts, order = [], []
        if prep.texts:
            tb = encode_texts(store, cfg, prep.question_ids, [t[1:] for t in prep.texts], self.vocab.cls, self.vocab.pad)
            for j, t in enumerate(prep.texts):
                reps[t[0]] = tb.reps[j, : tb.lengths[j], :]
            pooled_parts.append(tb.pooled)
            order += [t[0] for t in prep.texts]
        if prep.images:
            ib = encode_images(store, cfg, prep.question_ids, [t[1:] for t in prep.images], self.vocab.cls, self.vocab.pad)
            for j, t in enumerate(prep.images):
                reps[t[0]] = ib.reps[j, : ib.lengths[j], :]
            pooled_parts.append(ib.pooled)
            order += [t[0] for t in prep.images]
        pooled = ad.concat(pooled_parts, axis=0) if len(pooled_parts) > 1 else pooled_parts[0]
        if order != list(range(n)):
            pooled = pooled[np.argsort(np.asarray(order))]

        enc = Encoded(memory=None, pooled=pooled, source_reps=reps)  # type: ignore[arg-type]
        kg_star = None
        if not cfg.no_kg:
            front = encode_kg_front(store, cfg, prep.kg_ids, prep.head_spans)
            enc.kg_front = front
            if cfg.uses_fusion:
                enc.similarity = similarity_scores(pooled, front.entity_reps, store["fusion.ws"])
                enc.conf_logits = confidence_logits(pooled, front.cls_rep, store["fusion.wp"])
                if alignment is None:
                    alignment = align_sources(
                        enc.similarity.data, ad._sigmoid_np(enc.conf_logits.data), cfg.confidence_threshold
                    )
                enc.alignment = alignment
                fused = fuse_and_reencode(store, cfg, front, alignment, pooled, prep.head_spans)
                enc.kg_plus, kg_star = fused.h_plus, fused.h_star
            else:
                enc.kg_plus = front.token_reps
                kg_star = encode_kg_back(store, cfg, front.token_reps)
        enc.kg_star = kg_star
        enc.memory = build_memory(reps, kg_star, pooled)
        return enc

    # ------------------------------------------------------------ training

    def loss(self, ex: TrainingExample, rng: np.random.Generator, alignment: AlignmentResult | None = None):
        prep = self.prepare(ex)
        labels = build_gold_labels(prep, rng)
        enc = self.encode(prep, alignment)
        return self.loss_from(prep, enc, labels)

    def loss_from(self, prep: PreparedExample, enc: Encoded, labels: GoldLabels, out=None) -> LossBreakdown:
        """``out`` takes precomputed teacher-forced decoder outputs."""
        cfg, store = self.cfg, self.store
        zero = 0.0
        l_a = l_c = zero
        if cfg.uses_fusion:
            l_a = loss_alignment(enc.similarity, labels.align_targets)
            l_c = loss_confidence(enc.conf_logits, labels.confidence_labels)
        if out is None:
            out = forward_teacher_forced(
                store, cfg, prep.question_ids, enc.memory, labels.retrieval_targets, labels.answer_ids, self.vocab.ans
            )
        if cfg.decoder_retrieval:
            l_r = loss_retrieval(out.alpha, labels.retrieval_targets)
            l_s = loss_stop(out.gate_logits, labels.gate_labels)
        elif cfg.encoder_retrieval:
            member = np.zeros(prep.n_sources)
            member[labels.retrieval_targets] = 1.0
            l_r = loss_confidence(self.encoder_retrieval_logits(enc.pooled), member)
            l_s = zero
        else:
            l_r = l_s = zero
        l_g = loss_generation(out.log_probs, labels.answer_ids)
        return total_loss([l_a, l_c, l_r, l_s, l_g])

    def encoder_retrieval_logits(self, pooled: Tensor) -> Tensor:
        z = nn.linear(self.store, "enc_retr", pooled)
        return ad.reshape(z, (pooled.shape[0],))

    # ------------------------------------------------------------ inference

    def decoder_for(self, enc: Encoded) -> Decoder:
        return Decoder(self.store, self.cfg, enc.memory, self.vocab.ans, self.vocab.eos)

    def predict(self, ex: TrainingExample, gate_script=None) -> Prediction:
        prep = self.prepare(ex)
        with ad.no_grad():
            enc = self.encode(prep)
        dec = self.decoder_for(enc)
        state = dec.read_question(prep.question_ids)
        if self.cfg.decoder_retrieval:
            retrieved, _ = dec.run_retrieval(state, gate_script=gate_script)
        elif self.cfg.encoder_retrieval:
            with ad.no_grad():
                z = self.encoder_retrieval_logits(enc.pooled).data
            retrieved = [i for i in range(prep.n_sources) if ad._sigmoid_np(z[i:i + 1])[0] > 0.5]
            dec.skip_retrieval(state, retrieved)
        else:
            retrieved = []
            dec.skip_retrieval(state, list(range(prep.n_sources)))
        gen = dec.generate_answer(state)
        toks = self.vocab.decode(gen.token_ids)
        ids = [ex.sources[i].id for i in retrieved]
        if enc.alignment is not None:
            state.trace.insert(0, {
                "stage": "alignment",
                "assignment": enc.alignment.assignment,
                "confidence": [round(float(c), 6) for c in enc.alignment.confidence],
                "heads": list(prep.linearized.graph.heads) if prep.linearized else [],
            })
        for rec in state.trace:
            if rec.get("chosen") is not None:
                rec["chosen_id"] = ex.sources[rec["chosen"]].id
            if "token" in rec:
                rec["token_text"] = self.vocab.itos[rec["token"]]
        return Prediction(
            ex.id,
            detokenize(toks),
            gen.token_ids,
            ids if self.cfg.decoder_retrieval or self.cfg.encoder_retrieval else [],
            state.trace,
            enc.alignment.assignment if enc.alignment is not None else None,
        )
