"""Margin triplet loss, adaptive hard-triplet mining, and the train loop.

Each epoch re-embeds the whole training split in eval mode, mines the
hardest positive (farthest same-collection icon) and a hard negative
(nearest icon of one randomly chosen other collection) per reference,
then optimizes with ADAM on mini-batches of triplets. Per-epoch rngs are
derived from (seed, epoch), so a run resumed from a checkpoint replays
the exact rng streams of an uninterrupted one.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import Manifest, augment, corner_crop, load_icon, resize_bilinear
from .errors import ShapeError, TrainingDiverged
from .nn import Checkpoint, Model, save_checkpoint
from .tensor import Graph, Tensor, backward, slice_rows


@dataclass(frozen=True)
class Triplet:
    reference_id: str
    positive_id: str
    negative_id: str


@dataclass
class TrainConfig:
    margin: float = 0.2
    batch_size: int = 16
    base_lr: float = 1e-4
    lr_decay_every: int = 60
    lr_decay_factor: float = 10.0
    epochs: int = 140
    triplets_per_epoch: Optional[int] = None  # None -> number of train icons
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be > 1")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
            step=0,
        )

    def as_dict(self):
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(m=dict(d["m"]), v=dict(d["v"]), step=int(d["step"]))


def triplet_loss(f_ref: Tensor, f_pos: Tensor, f_neg: Tensor, margin: float) -> Tensor:
    """Batch hinge loss: sum of [|fR-fP|^2 - |fR-fN|^2 + margin]_+ over rows."""
    if not (f_ref.shape == f_pos.shape == f_neg.shape):
        raise ShapeError("triplet embeddings must share shape", f_ref.shape, f_pos.shape, f_neg.shape)
    if margin <= 0:
        raise ValueError("margin must be > 0")
    d_pos = (f_ref - f_pos).square().sum(axis=1)
    d_neg = (f_ref - f_neg).square().sum(axis=1)
    offset = Tensor(np.full(d_pos.shape, margin, dtype=d_pos.dtype))
    return (d_pos - d_neg + offset).relu().sum()


def triplet_satisfaction(
    embeddings: Mapping[str, np.ndarray], triplets: Sequence[Triplet]
) -> float:
    """Fraction of triplets with the positive strictly nearer than the negative."""
    ok = 0
    for t in triplets:
        r = embeddings[t.reference_id]
        dp = float(((r - embeddings[t.positive_id]) ** 2).sum())
        dn = float(((r - embeddings[t.negative_id]) ** 2).sum())
        ok += dp < dn
    return ok / max(len(triplets), 1)


def sample_uniform_triplets(manifest: Manifest, n: int, rng: np.random.Generator) -> list:
    """Uniformly sampled triplets (no hardness selection), with replacement.

    References come from collections with at least 2 members; the negative
    is a uniform icon of a uniform other collection.
    """
    by_coll = {c: [r.id for r in recs] for c, recs in manifest.by_collection().items()}
    eligible = [c for c, ids in by_coll.items() if len(ids) >= 2]
    if not eligible or len(by_coll) < 2:
        raise ValueError("need >= 2 collections and a collection with >= 2 icons")
    collections = list(by_coll)
    out = []
    for _ in range(n):
        c = eligible[int(rng.integers(0, len(eligible)))]
        ref, pos = (by_coll[c][int(k)] for k in rng.choice(len(by_coll[c]), size=2, replace=False))
        others = [cc for cc in collections if cc != c]
        oc = others[int(rng.integers(0, len(others)))]
        neg = by_coll[oc][int(rng.integers(0, len(by_coll[oc])))]
        out.append(Triplet(ref, pos, neg))
    return out


def mine_triplets(
    embeddings: Mapping[str, np.ndarray],
    manifest: Manifest,
    n_triplets: int,
    rng: np.random.Generator,
) -> list:
    """Adaptive hard sampling over one split's embeddings.

    References are drawn uniformly without repetition, cycling the pool if
    n_triplets exceeds it. The positive is the same-collection icon at
    maximum squared distance; the negative is the closest icon within one
    randomly chosen other collection. Ties resolve to the earliest record.
    """
    by_coll = {c: [r.id for r in recs] for c, recs in manifest.by_collection().items()}
    if len(by_coll) < 2:
        raise ValueError("triplet mining needs at least 2 collections")
    for c, ids in by_coll.items():
        if len(ids) < 2:
            raise ValueError(f"collection {c!r} has fewer than 2 icons")
    collections = list(by_coll)
    all_ids = [r.id for r in manifest.records]
    coll_of = {r.id: r.collection for r in manifest.records}

    triplets = []
    while len(triplets) < n_triplets:
        order = rng.permutation(len(all_ids))
        for k in order:
            if len(triplets) >= n_triplets:
                break
            ref = all_ids[int(k)]
            e_ref = embeddings[ref]
            same = [i for i in by_coll[coll_of[ref]] if i != ref]
            d_same = [float(((e_ref - embeddings[i]) ** 2).sum()) for i in same]
            positive = same[int(np.argmax(d_same))]
            others = [c for c in collections if c != coll_of[ref]]
            neg_coll = others[int(rng.integers(0, len(others)))]
            candidates = by_coll[neg_coll]
            d_neg = [float(((e_ref - embeddings[i]) ** 2).sum()) for i in candidates]
            negative = candidates[int(np.argmin(d_neg))]
            triplets.append(Triplet(ref, positive, negative))
    return triplets


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """In-place ADAM update with bias correction; missing grads are skipped."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base_lr divided by factor every decay interval."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.base_lr / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch, stream)))


_STREAM_MINE, _STREAM_AUG, _STREAM_DROPOUT, _STREAM_VAL, _STREAM_SAT = 0, 1, 2, 3, 4


def _embed_arrays(model: Model, arrays: list, batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings of a list of [1,S,S] image arrays."""
    chunks = []
    for lo in range(0, len(arrays), batch_size):
        batch = Tensor(np.stack(arrays[lo : lo + batch_size]).astype(np.float32))
        chunks.append(model.embed(batch, mode="eval").data)
    return np.concatenate(chunks, axis=0)


class _ImageCache:
    """Stored images plus their resized-to-input variants, loaded once."""

    def __init__(self, manifest: Manifest, input_size: int):
        self.manifest = manifest
        self.input_size = input_size
        self.stored: dict[str, np.ndarray] = {}
        self.resized: dict[str, np.ndarray] = {}
        for rec in manifest.records:
            img = load_icon(manifest, rec)
            self.stored[rec.id] = img.data
            self.resized[rec.id] = resize_bilinear(img, input_size).data

    def resized_list(self, ids):
        return [self.resized[i] for i in ids]

    def train_view(self, icon_id: str, rng: np.random.Generator) -> np.ndarray:
        img = augment(Tensor(self.stored[icon_id]), rng)
        return corner_crop(img, self.input_size, rng=rng).data


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list


def train(
    manifest: Manifest,
    model: Model,
    config: TrainConfig,
    callbacks: Sequence[Callable[[dict], Optional[bool]]] = (),
    log_path=None,
    checkpoint_path=None,
    optimizer_state: Optional[AdamState] = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Run the epoch loop; returns the best-validation and final models.

    Per-epoch metrics {epoch, lr, train_loss, val_loss,
    triplet_satisfaction} go to ``callbacks`` and, as JSON lines, to
    ``log_path``. Losses are per-triplet means of the batch-sum hinge.
    A callback returning True stops training after that epoch.
    """
    train_split = manifest.subset("train")
    val_split = manifest.subset("val")
    if len(train_split) == 0:
        raise ValueError("manifest has no train records")
    cache = _ImageCache(manifest, model.config.input_size)

    params = model.named_parameters()
    state = optimizer_state if optimizer_state is not None else AdamState.for_params(params)
    n_per_epoch = config.triplets_per_epoch or len(train_split)
    train_ids = train_split.ids()

    # validation triplets: mined once from the starting model, frozen;
    # resized images, no augmentation
    val_triplets: list = []
    if len(val_split) >= 2 and len(val_split.by_collection()) >= 2 and all(
        len(v) >= 2 for v in val_split.by_collection().values()
    ):
        val_ids = val_split.ids()
        val_emb = dict(zip(val_ids, _embed_arrays(model, cache.resized_list(val_ids))))
        val_triplets = mine_triplets(
            val_emb, val_split, len(val_ids), _epoch_rng(config.seed, start_epoch, _STREAM_VAL)
        )

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    best_val = float("inf")
    best_ckpt: Optional[Checkpoint] = None
    history = []
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            # 1) embeddings for mining (eval mode; epoch 0 uses the
            # freshly initialized weights)
            emb = dict(zip(train_ids, _embed_arrays(model, cache.resized_list(train_ids))))
            triplets = mine_triplets(
                emb, train_split, n_per_epoch, _epoch_rng(config.seed, epoch, _STREAM_MINE)
            )
            # progress metric on uniformly sampled (not hard-mined) triplets
            satisfaction = triplet_satisfaction(
                emb,
                sample_uniform_triplets(
                    train_split, 1000, _epoch_rng(config.seed, epoch, _STREAM_SAT)
                ),
            )

            aug_rng = _epoch_rng(config.seed, epoch, _STREAM_AUG)
            drop_rng = _epoch_rng(config.seed, epoch, _STREAM_DROPOUT)
            total = 0.0
            for lo in range(0, len(triplets), config.batch_size):
                chunk = triplets[lo : lo + config.batch_size]
                ref = [cache.train_view(t.reference_id, aug_rng) for t in chunk]
                pos = [cache.train_view(t.positive_id, aug_rng) for t in chunk]
                neg = [cache.train_view(t.negative_id, aug_rng) for t in chunk]
                batch = Tensor(np.stack(ref + pos + neg))
                b = len(chunk)
                model.zero_grad()
                with Graph() as g:
                    emb = model.embed(batch, mode="train", rng=drop_rng)
                    f_ref = slice_rows(emb, 0, b)
                    f_pos = slice_rows(emb, b, 2 * b)
                    f_neg = slice_rows(emb, 2 * b, 3 * b)
                    loss = triplet_loss(f_ref, f_pos, f_neg, config.margin)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss {value} at epoch {epoch}, batch {lo // config.batch_size}"
                    )
                backward(loss, g)
                adam_step(
                    params, state, lr,
                    beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
                )
                total += value
            train_loss = total / len(triplets)

            val_loss = None
            if val_triplets:
                v_ids = val_split.ids()
                v_emb = dict(zip(v_ids, _embed_arrays(model, cache.resized_list(v_ids))))
                v_total = 0.0
                for t in val_triplets:
                    dp = float(((v_emb[t.reference_id] - v_emb[t.positive_id]) ** 2).sum())
                    dn = float(((v_emb[t.reference_id] - v_emb[t.negative_id]) ** 2).sum())
                    v_total += max(0.0, dp - dn + config.margin)
                val_loss = v_total / len(val_triplets)

            metrics = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "triplet_satisfaction": satisfaction,
            }
            history.append(metrics)
            if log_fh:
                log_fh.write(json.dumps(metrics) + "\n")
                log_fh.flush()

            selector = train_loss if val_loss is None else val_loss
            if selector < best_val:
                best_val = selector
                best_ckpt = _snapshot(model, state, epoch)
                if checkpoint_path:
                    save_checkpoint(model, state.as_dict(), checkpoint_path, epoch=epoch)

            stop = any(bool(cb(metrics)) for cb in callbacks)
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()

    final_ckpt = _snapshot(model, state, history[-1]["epoch"] if history else start_epoch)
    if best_ckpt is None:
        best_ckpt = final_ckpt
    return TrainResult(best=best_ckpt, final=final_ckpt, history=history)


def _snapshot(model: Model, state: AdamState, epoch: int) -> Checkpoint:
    copy = Model(model.config)
    for name, t in model.params.items():
        copy.params[name] = Tensor(t.data.copy(), requires_grad=True)
    for name, buf in model.buffers.items():
        copy.buffers[name] = buf.copy()
    opt = {
        "step": state.step,
        "m": {n: a.copy() for n, a in state.m.items()},
        "v": {n: a.copy() for n, a in state.v.items()},
    }
    return Checkpoint(model=copy, optimizer_state=opt, epoch=epoch)
