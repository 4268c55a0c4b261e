"""Joint-loss training loop, Adam, and the binary checkpoint format."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import TrainConfig
from .data import TrainingExample, World
from .model import HopQAModel, build_vocab
from .vocab import Vocabulary

log = logging.getLogger(__name__)

MAGIC = b"SKRG"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: ParamStore, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.data.dtype)


def linear_decay(step: int, total: int, base: float) -> float:
    return base * max(0.0, 1.0 - step / max(total, 1))


@dataclass
class TrainResult:
    model: HopQAModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_score: float = -1.0


def _collect_grads(store: ParamStore) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in store.items()}


def train_loop(
    train: list[TrainingExample],
    world: World,
    config: TrainConfig,
    dev: list[TrainingExample] | None = None,
    vocab: Vocabulary | None = None,
    log_path=None,
    evaluate_fn=None,
) -> TrainResult:
    """Adam with linear learning-rate decay on the summed five-part loss.

    Keeps the parameters with the best dev score (EM + retrieval F1, or
    training loss when no dev set is given).
    """
    if not train:
        raise ValueError("empty training set")
    vocab = vocab or build_vocab(world, list(train) + list(dev or []))
    model = HopQAModel(config.model, vocab, world, seed=config.seed)
    opt = Adam(model.store, config.lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(model, config)
    per_update = config.batch_size * config.grad_accum
    epoch, cursor = 0, 0
    perm = order_rng.permutation(len(train))
    best_state = None
    log_fh = open(log_path, "w") if log_path else None
    if evaluate_fn is None and dev:
        from .evaluation import evaluate_model as evaluate_fn
    started = time.time()
    try:
        for step in range(1, config.steps + 1):
            model.store.zero_grad()
            parts = np.zeros(6)
            for _ in range(per_update):
                if cursor >= len(perm):
                    epoch += 1
                    cursor = 0
                    perm = order_rng.permutation(len(train))
                idx = int(perm[cursor])
                cursor += 1
                label_rng = np.random.default_rng([config.seed, epoch, idx])
                lb = model.loss(train[idx], label_rng)
                if not math.isfinite(lb.total):
                    raise NonFiniteLoss(f"step {step}: non-finite loss on {train[idx].id}: {lb.as_dict()}")
                ad.backward(ad.multiply(lb.tensor, 1.0 / per_update))
                parts += np.array(list(lb.as_dict().values())) / per_update
            grads = _collect_grads(model.store)
            if config.clip_norm:
                norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
                if norm > config.clip_norm:
                    scale = config.clip_norm / norm
                    grads = {k: g * scale for k, g in grads.items()}
            lr = linear_decay(step - 1, config.steps, config.lr)
            opt.step(grads, lr)
            rec = dict(zip(("L_a", "L_c", "L_r", "L_s", "L_g", "L"), map(float, parts)))
            rec.update(step=step, lr=lr, epoch=epoch)
            result.history.append(rec)
            if log_fh and (step % config.log_every == 0 or step == 1):
                log_fh.write(json.dumps(rec) + "\n")
            if step % config.log_every == 0:
                log.info("step %d loss %.4f (%.1fs)", step, rec["L"], time.time() - started)
            if step % config.eval_every == 0 or step == config.steps:
                if dev:
                    report = evaluate_fn(model, dev)
                    score = report.em + report.retr_f1
                    ev = {"step": step, "em": report.em, "f1": report.f1, "retr_f1": report.retr_f1}
                else:
                    window = result.history[-config.log_every:]
                    score = -float(np.mean([h["L"] for h in window]))
                    ev = {"step": step, "train_loss": -score}
                result.evals.append(ev)
                if log_fh:
                    log_fh.write(json.dumps({"eval": ev}) + "\n")
                if score > result.best_score or best_state is None:
                    result.best_score = score
                    result.best_step = step
                    best_state = model.store.state()
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        model.store.load_state(best_state)
    return result


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore, vocab: Vocabulary, config: TrainConfig) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for blob in (config.to_json().encode(), json.dumps(vocab.itos).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(store)))
    for name, t in store.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamStore, Vocabulary, TrainConfig]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint (format version {FORMAT_VERSION} expected)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != {FORMAT_VERSION}")
    (n,) = struct.unpack("<I", take(4))
    config = TrainConfig.from_json(bytes(take(n)).decode())
    (n,) = struct.unpack("<I", take(4))
    vocab = Vocabulary.from_list(json.loads(bytes(take(n)).decode()))
    (count,) = struct.unpack("<I", take(4))
    store = ParamStore()
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = bytes(take(ln)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        store[name] = Tensor(arr)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return store, vocab, config


def model_from_checkpoint(path, world: World) -> HopQAModel:
    store, vocab, config = load_checkpoint(path)
    return HopQAModel(config.model, vocab, world, store=store)
