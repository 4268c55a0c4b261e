"""Unified retrieval-generation decoder.

The decoder reads the question, retrieves evidence one source per step
while a gate keeps passing, then generates the answer.  All three stages
share one causal transformer; what changes per position is the slice of the
cross-attention memory it may see:

    reading     every source's tokens + the fused KG
    retrieval   the n pooled source vectors only
    generation  the retrieved sources' tokens + the fused KG

Position ``p`` produces the output for time step ``p + 1``, so the last
question position makes the first retrieval decision (time step ``|Q|``),
each fed-back evidence makes the next one, and the ``[ANS]`` position emits
the first answer token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .config import ModelConfig

READING, RETRIEVAL, GENERATION = "reading", "retrieval", "generation"


def init_decoder(store: ParamStore, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> None:
    d = cfg.dim
    store["pos.dec"] = Tensor(rng.normal(0.0, 0.1, (cfg.max_decoder_len, d)).astype(np.float32))
    for i in range(cfg.decoder_layers):
        nn.init_decoder_layer(store, f"dec.{i}", d, cfg.ffn_dim, rng)
    nn.init_layer_norm(store, "dec.ln_f", d)
    store["gate.wg"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, 1)).astype(np.float32))
    store["lm_head.b"] = Tensor(np.zeros(vocab_size, dtype=np.float32))
    if cfg.encoder_retrieval:
        nn.init_linear(store, "enc_retr", d, 1, rng)


@dataclass
class DecoderMemory:
    """Cross-attention memory laid out as [source tokens..., KG tokens, pooled vectors]."""

    reps: Tensor
    source_slices: list[tuple[int, int]]
    kg_slice: tuple[int, int] | None
    pooled_slice: tuple[int, int]
    pooled: Tensor  # (n, D), same vectors as the pooled slice

    @property
    def n_sources(self) -> int:
        return len(self.source_slices)

    def __len__(self) -> int:
        return self.reps.shape[0]

    def mask_for(self, stage: str, retrieved=()) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        if stage == RETRIEVAL:
            m[slice(*self.pooled_slice)] = True
            return m
        srcs = range(self.n_sources) if stage == READING else retrieved
        for i in srcs:
            m[slice(*self.source_slices[i])] = True
        if self.kg_slice is not None:
            m[slice(*self.kg_slice)] = True
        if not m.any():
            # nothing to read (no KG and nothing retrieved): fall back to the pooled vectors
            m[slice(*self.pooled_slice)] = True
        return m


def build_memory(source_reps: list[Tensor], kg_reps: Tensor | None, pooled: Tensor) -> DecoderMemory:
    parts, slices = [], []
    pos = 0
    for r in source_reps:
        slices.append((pos, pos + r.shape[0]))
        parts.append(r)
        pos += r.shape[0]
    kg_slice = None
    if kg_reps is not None:
        kg_slice = (pos, pos + kg_reps.shape[0])
        parts.append(kg_reps)
        pos += kg_reps.shape[0]
    parts.append(pooled)
    pooled_slice = (pos, pos + pooled.shape[0])
    return DecoderMemory(ad.concat(parts, axis=0), slices, kg_slice, pooled_slice, pooled)


@dataclass
class DecoderPass:
    hidden: Tensor  # (L, D) final-layer outputs
    cross_scores: list[Tensor]  # per layer, (H, L, Lm) pre-softmax
    cross_weights: list[Tensor]


def embed_inputs(store: ParamStore, cfg: ModelConfig, inputs: list[tuple[str, int]], memory: DecoderMemory) -> Tensor:
    """``inputs`` items are ("tok", vocab id) or ("src", source index)."""
    if len(inputs) > cfg.max_decoder_len:
        raise ValueError(f"decoder sequence of {len(inputs)} exceeds {cfg.max_decoder_len}")
    tok_rows = [i for i, (k, _) in enumerate(inputs) if k == "tok"]
    src_rows = [i for i, (k, _) in enumerate(inputs) if k == "src"]
    pieces = []
    if tok_rows:
        pieces.append(ad.embedding(store["tok_emb"], [inputs[i][1] for i in tok_rows]))
    if src_rows:
        pieces.append(memory.pooled[np.asarray([inputs[i][1] for i in src_rows])])
    x = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    order = np.argsort(np.asarray(tok_rows + src_rows))
    if src_rows and tok_rows:
        x = x[order]
    return ad.add(x, store["pos.dec"][: len(inputs)])


def run_decoder(store, cfg, x: Tensor, memory: DecoderMemory, cross_mask: np.ndarray) -> DecoderPass:
    scores, weights = [], []
    for i in range(cfg.decoder_layers):
        out = nn.decoder_layer(store, f"dec.{i}", x, memory.reps, cross_mask, cfg.heads)
        x = out.hidden
        scores.append(out.cross_scores)
        weights.append(out.cross_weights)
    return DecoderPass(nn.layer_norm(store, "dec.ln_f", x), scores, weights)


def retrieval_alpha(dpass: DecoderPass, memory: DecoderMemory, positions) -> Tensor:
    """Layer-summed, head-averaged pre-softmax scores on the pooled slots: (len(positions), n)."""
    pos = np.asarray(positions, dtype=np.int64)
    s, e = memory.pooled_slice
    total = None
    for sc in dpass.cross_scores:
        per = ad.mean(sc[:, pos, s:e], axis=0)
        total = per if total is None else ad.add(total, per)
    return total


def gate_logits(store, hidden: Tensor) -> Tensor:
    return ad.reshape(ad.matmul(hidden, store["gate.wg"]), (hidden.shape[0],))


def lm_logits(store, hidden: Tensor) -> Tensor:
    return ad.add(ad.matmul(hidden, ad.transpose(store["tok_emb"])), store["lm_head.b"])


# ---------------------------------------------------------------- teacher forcing


@dataclass
class TeacherForcedOutputs:
    alpha: Tensor | None  # (M, n)
    gate_logits: Tensor | None  # (M + 1,)
    log_probs: Tensor  # (|A|, V)
    layout: list[str]
    dpass: DecoderPass


def teacher_forced_layout(q_len: int, hops: int, ans_len: int, retrieval: bool) -> list[str]:
    """Stage of every decoder position for a gold sequence."""
    if q_len < 1:
        raise ValueError("empty question")
    if retrieval:
        return [READING] * (q_len - 1) + [RETRIEVAL] * (hops + 1) + [GENERATION] * ans_len
    return [READING] * q_len + [GENERATION] * ans_len


@dataclass
class TeacherForcedInputs:
    x: Tensor  # (L, D) embedded gold sequence
    cross_mask: np.ndarray  # (L, Lm)
    layout: list[str]
    q_len: int
    hops: int


def teacher_forced_inputs(
    store: ParamStore,
    cfg: ModelConfig,
    question_ids: list[int],
    memory: DecoderMemory,
    gold: list[int],
    answer_ids: list[int],
    ans_id: int,
    generation_sources: list[int] | None = None,
) -> TeacherForcedInputs:
    n = memory.n_sources
    for g in gold:
        if not 0 <= g < n:
            raise IndexError(f"gold evidence index {g} outside {n} sources")
    retrieval = cfg.decoder_retrieval
    hops = len(gold) if retrieval else 0
    inputs = [("tok", t) for t in question_ids]
    if retrieval:
        inputs += [("src", g) for g in gold]
    inputs += [("tok", ans_id)] + [("tok", t) for t in answer_ids[:-1]]
    layout = teacher_forced_layout(len(question_ids), hops, len(answer_ids), retrieval)
    if generation_sources is None:
        generation_sources = gold if retrieval else list(range(n))
    rows = {
        READING: memory.mask_for(READING),
        RETRIEVAL: memory.mask_for(RETRIEVAL),
        GENERATION: memory.mask_for(GENERATION, generation_sources),
    }
    mask = np.stack([rows[s] for s in layout])
    x = embed_inputs(store, cfg, inputs, memory)
    return TeacherForcedInputs(x, mask, layout, len(question_ids), hops)


def teacher_forced_heads(
    store: ParamStore, cfg: ModelConfig, tin: TeacherForcedInputs, dpass: DecoderPass, memory: DecoderMemory
) -> TeacherForcedOutputs:
    """Gate logits, retrieval scores and answer log-probs from a decoder pass."""
    q, hops = tin.q_len, tin.hops
    alpha = gates = None
    if cfg.decoder_retrieval:
        ret_pos = list(range(q - 1, q + hops))
        gates = gate_logits(store, dpass.hidden[q - 1: q + hops])
        alpha = retrieval_alpha(dpass, memory, ret_pos[:hops]) if hops else None
        gen_start = q + hops
    else:
        gen_start = q
    logits = lm_logits(store, dpass.hidden[gen_start:])
    return TeacherForcedOutputs(alpha, gates, ad.log_softmax(logits), tin.layout, dpass)


def forward_teacher_forced(
    store: ParamStore,
    cfg: ModelConfig,
    question_ids: list[int],
    memory: DecoderMemory,
    gold: list[int],
    answer_ids: list[int],
    ans_id: int,
    generation_sources: list[int] | None = None,
) -> TeacherForcedOutputs:
    """Gold sequence: question, gold pooled vectors, [ANS], answer (shifted).

    ``answer_ids`` should end with [EOS].  Without decoder retrieval the
    evidence segment is dropped and generation reads ``generation_sources``.
    """
    tin = teacher_forced_inputs(store, cfg, question_ids, memory, gold, answer_ids, ans_id, generation_sources)
    dpass = run_decoder(store, cfg, tin.x, memory, tin.cross_mask)
    return teacher_forced_heads(store, cfg, tin, dpass, memory)


# ---------------------------------------------------------------- inference


@dataclass
class DecoderState:
    stage: str
    t: int  # next time step to produce
    inputs: list[tuple[str, int]]
    stages: list[str]
    retrieved: list[int] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    @property
    def retrieved_mask(self) -> np.ndarray:
        return np.asarray(self.retrieved, dtype=np.int64)


@dataclass
class RetrievalStepResult:
    alpha: np.ndarray  # (n,)
    candidate: int | None
    gate: float
    decision: str  # continue | stop


@dataclass
class GenerationOutput:
    token_ids: list[int]
    distributions: list[np.ndarray]


class Decoder:
    """Greedy inference over one question, recomputing the full pass each step."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, memory: DecoderMemory, ans_id: int, eos_id: int):
        self.store, self.cfg, self.memory = store, cfg, memory
        self.ans_id, self.eos_id = ans_id, eos_id

    def _pass(self, state: DecoderState) -> DecoderPass:
        masks = {
            READING: self.memory.mask_for(READING),
            RETRIEVAL: self.memory.mask_for(RETRIEVAL),
            GENERATION: self.memory.mask_for(GENERATION, state.retrieved),
        }
        mask = np.stack([masks[s] for s in state.stages])
        with ad.no_grad():
            x = embed_inputs(self.store, self.cfg, state.inputs, self.memory)
            return run_decoder(self.store, self.cfg, x, self.memory, mask)

    def read_question(self, question_ids: list[int]) -> DecoderState:
        if not question_ids:
            raise ValueError("empty question")
        q = len(question_ids)
        last = RETRIEVAL if self.cfg.decoder_retrieval else READING
        stages = [READING] * (q - 1) + [last]
        stage = RETRIEVAL if self.cfg.decoder_retrieval else GENERATION
        state = DecoderState(stage, q, [("tok", t) for t in question_ids], stages)
        state.trace.append({"stage": READING, "t": q, "question_len": q})
        return state

    def retrieval_step(self, state: DecoderState, gate_override: float | None = None) -> RetrievalStepResult:
        if state.stage != RETRIEVAL:
            raise RuntimeError(f"retrieval_step in stage {state.stage}")
        n = self.memory.n_sources
        dpass = self._pass(state)
        last = len(state.inputs) - 1
        alpha = retrieval_alpha(dpass, self.memory, [last]).data[0].astype(np.float64)
        open_ = np.ones(n, dtype=bool)
        open_[state.retrieved_mask] = False
        if not open_.any():
            return RetrievalStepResult(alpha, None, 0.0, "stop")
        candidate = int(np.argmax(np.where(open_, alpha, -np.inf)))
        if gate_override is None:
            z = float(gate_logits(self.store, dpass.hidden[last:last + 1]).data[0])
            gate = float(ad._sigmoid_np(np.array([z]))[0])
        else:
            gate = float(gate_override)
        decision = "continue" if gate > self.cfg.gate_threshold else "stop"
        return RetrievalStepResult(alpha, candidate, gate, decision)

    def run_retrieval(
        self,
        state: DecoderState,
        max_steps: int | None = None,
        gate_script: Callable[[int], float] | None = None,
    ) -> tuple[list[int], list[RetrievalStepResult]]:
        """Retrieve until the gate fails or ``max_steps`` is hit, then emit [ANS]."""
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        steps: list[RetrievalStepResult] = []
        while True:
            if len(state.retrieved) >= max_steps:
                res = RetrievalStepResult(np.zeros(self.memory.n_sources), None, 0.0, "stop")
                forced = True
            else:
                override = gate_script(len(steps)) if gate_script is not None else None
                res = self.retrieval_step(state, override)
                forced = False
            steps.append(res)
            state.trace.append({
                "stage": RETRIEVAL,
                "t": state.t,
                "alpha": [round(float(a), 6) for a in res.alpha],
                "gate": round(res.gate, 6),
                "decision": res.decision,
                "chosen": res.candidate if res.decision == "continue" else None,
                "forced": forced,
            })
            state.t += 1
            if res.decision == "continue":
                state.retrieved.append(res.candidate)
                state.inputs.append(("src", res.candidate))
                state.stages.append(RETRIEVAL)
            else:
                self._start_generation(state)
                return list(state.retrieved), steps

    def _start_generation(self, state: DecoderState) -> None:
        state.inputs.append(("tok", self.ans_id))
        state.stages.append(GENERATION)
        state.stage = GENERATION

    def skip_retrieval(self, state: DecoderState, sources: list[int]) -> None:
        """Used when retrieval is done outside the decoder (or not at all)."""
        state.retrieved = list(sources)
        self._start_generation(state)

    def generate_answer(self, state: DecoderState, max_len: int | None = None) -> GenerationOutput:
        if state.stage != GENERATION:
            raise RuntimeError(f"generate_answer in stage {state.stage}")
        max_len = self.cfg.max_answer_len if max_len is None else max_len
        tokens, dists = [], []
        for _ in range(max_len + 1):
            dpass = self._pass(state)
            with ad.no_grad():
                logits = lm_logits(self.store, dpass.hidden[-1:])
            p = ad.softmax(logits).data[0].astype(np.float64)
            tok = int(np.argmax(p))
            dists.append(p)
            state.trace.append({"stage": GENERATION, "t": state.t, "token": tok, "prob": round(float(p[tok]), 6)})
            state.t += 1
            if tok == self.eos_id:
                break
            tokens.append(tok)
            if len(tokens) >= max_len:
                break
            state.inputs.append(("tok", tok))
            state.stages.append(GENERATION)
        return GenerationOutput(tokens, dists)
