"""Optimiser, schedule, loss, training/evaluation loops, checkpoints and attention export."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import TOKENS, ForwardCache, ModelConfig, ThreeMformer
from .skeleton import SkeletonSequence, preprocess, split_blocks
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 60
    lr_drops: tuple[int, ...] = (40, 50)
    seed: int = 0
    torso_index: int = 0

    def __post_init__(self):
        self.lr_drops = tuple(self.lr_drops)
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if list(self.lr_drops) != sorted(self.lr_drops):
            raise ValueError("lr_drops must be sorted ascending")


@dataclass
class Metrics:
    top1: float
    top5: float
    loss: float
    history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# optimisation primitives


def lr_at_epoch(lr0: float, drops, epoch: int) -> float:
    """lr0 divided by 10 for every drop epoch already reached (epochs are 1-based)."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return lr0 * 10.0 ** -sum(1 for e in drops if epoch >= e)


def sgd_step(params, grads, state: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum v + (g + wd p); p <- p - lr v. ``state`` holds velocities by position."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {data.shape}")
        step = g + weight_decay * data
        v = state.get(k)
        v = step.copy() if v is None else momentum * v + step
        state[k] = v
        data -= lr * v


def cross_entropy(logits, labels) -> Tensor:
    """Mean -log softmax(logits)[label] over the batch."""
    logits = T.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    lp = T.log_softmax(logits, axis=-1)
    picked = T.getitem(lp, (np.arange(len(labels)), labels))
    return T.scale(T.reduce(picked, kind="mean"), -1.0)


def topk_hits(logits: np.ndarray, labels, k: int) -> np.ndarray:
    """Whether each label is among the k largest logits; ties go to the lower class index."""
    order = np.argsort(-np.asarray(logits), axis=-1, kind="stable")[:, :k]
    return np.any(order == np.asarray(labels)[:, None], axis=1)


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Prepared:
    blocks: np.ndarray  # (subjects, tau, J, C*T)
    label: int


def fit_blocks(blocks: np.ndarray, tau: int) -> np.ndarray:
    """Crop to the first tau blocks, or repeat blocks cyclically up to tau."""
    return blocks[np.arange(tau) % len(blocks)]


def prepare(dataset, mcfg: ModelConfig, torso_index: int = 0) -> list[Prepared]:
    out = []
    for seq in dataset:
        if seq.torso_index != torso_index:
            seq = SkeletonSequence(seq.frames, seq.label, seq.second, torso_index)
        seq = preprocess(seq)
        if seq.num_joints != mcfg.J or seq.frames.shape[2] != mcfg.C:
            raise ValueError(f"sequence has {seq.num_joints} joints x {seq.frames.shape[2]} coords, "
                             f"model expects {mcfg.J} x {mcfg.C}")
        subj = [fit_blocks(split_blocks(s, mcfg.T, mcfg.S).blocks, mcfg.tau) for s in seq.subjects]
        out.append(Prepared(np.stack(subj), int(seq.label)))
    return out


def collate(items) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    blocks = np.concatenate([it.blocks for it in items])
    owners = np.concatenate([np.full(len(it.blocks), b) for b, it in enumerate(items)])
    labels = np.array([it.label for it in items])
    return blocks, owners, labels


# --------------------------------------------------------------------------
# loops


def train(model: ThreeMformer, data, cfg: TrainConfig, log=None) -> list[dict]:
    """SGD over prepared samples; returns per-epoch {epoch, lr, loss, train_top1}."""
    if not data:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed + 7919)
    params = model.parameters()
    state: dict = {}
    keep = 1.0 - model.mlp.drop
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg.lr0, cfg.lr_drops, epoch)
        order = rng.permutation(len(data))
        losses, hits = [], 0
        for start in range(0, len(data), cfg.batch_size):
            batch = [data[k] for k in order[start:start + cfg.batch_size]]
            blocks, owners, labels = collate(batch)
            masks = None
            if keep < 1.0:
                K, tau, J = blocks.shape[:3]
                masks = rng.random((K * tau, J, model.mlp.hidden_width)) < keep
            logits = model(blocks, owners, masks)
            loss = cross_entropy(logits, labels)
            grads = T.backward(loss)
            sgd_step(params, [grads.get(p.tape_id) for p in params], state, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss.item() * len(batch))
            hits += int(topk_hits(logits.data, labels, 1).sum())
        rec = {"epoch": epoch, "lr": lr, "loss": sum(losses) / len(data), "train_top1": hits / len(data)}
        history.append(rec)
        if log is not None:
            log(rec)
    return history


def predict(model: ThreeMformer, data, batch_size: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            blocks, owners, _ = collate(data[start:start + batch_size])
            out.append(model(blocks, owners).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate(model: ThreeMformer, data, batch_size: int = 32) -> Metrics:
    if not data:
        return Metrics(0.0, 0.0, 0.0)
    logits = predict(model, data, batch_size)
    labels = np.array([d.label for d in data])
    loss = cross_entropy(logits, labels).item()
    return Metrics(float(topk_hits(logits, labels, 1).mean()), float(topk_hits(logits, labels, 5).mean()), loss)


# --------------------------------------------------------------------------
# checkpoints: magic, JSON config, then (name, shape, float64 values) records, little-endian

_MAGIC = b"MMFCKPT1"


def save_checkpoint(path, model: ThreeMformer) -> None:
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    named = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}Q", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ThreeMformer:
    buf = Path(path).read_bytes()
    if not buf.startswith(_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (n,) = struct.unpack("<I", take(4))
    raw_cfg = json.loads(take(n))
    known = {f.name for f in fields(ModelConfig)}
    model = ThreeMformer(ModelConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                        for k, v in raw_cfg.items() if k in known}))
    params = dict(model.named_parameters())
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (nd,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{nd}Q", take(8 * nd))
        values = np.frombuffer(take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8").reshape(shape)
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"{path}: parameter {name} {shape} does not fit the configured model")
        params[name].data[...] = values
    return model


# --------------------------------------------------------------------------
# attention export


def attention_matrix(model: ThreeMformer, sample: Prepared, which: str) -> np.ndarray:
    if which not in TOKENS:
        raise ValueError(f"unknown token type {which!r}; choose from {TOKENS}")
    cache = ForwardCache()
    with T.no_grad():
        model(sample.blocks, np.zeros(len(sample.blocks), dtype=np.int64), cache=cache)
    if which not in cache.attention:
        raise ValueError(f"token type {which!r} is not used by variant {model.cfg.variant!r}")
    return cache.attention[which][0]


def write_pgm(path, mat: np.ndarray) -> None:
    lo, hi = float(mat.min()), float(mat.max())
    scaled = np.zeros(mat.shape) if hi == lo else (mat - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


def export_attention(model: ThreeMformer, sample: Prepared, which: str, prefix) -> tuple[Path, Path]:
    """Write ``prefix.csv`` (full precision, row-major) and ``prefix.pgm`` (min-max scaled)."""
    mat = attention_matrix(model, sample, which)
    prefix = Path(prefix)
    csv_path, pgm_path = prefix.with_suffix(".csv"), prefix.with_suffix(".pgm")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])
    write_pgm(pgm_path, mat)
    return csv_path, pgm_path
