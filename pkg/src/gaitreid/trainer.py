"""Metric-learning trainer: p x k x c batches, flips, Batch-All triplet loss.

A batch holds p identities with k tracklet draws each; every draw keeps c
frames, so the effective frame batch is p*k*c.  The loss is the Batch-All
triplet hinge, computed per feature strip with Euclidean distances and
averaged over strips; by default all valid triplets count toward the mean
(zero-loss ones included), with a nonzero-only variant available.

Optimization is plain Adam.  Training keeps the checkpoint with the best
validation mAP, evaluated cross-camera on full tracklets every
``checkpoint_every`` iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import retrieval
from .embedder import embed, embed_batch, embed_batch_backward
from .errors import InsufficientIdentities, InvalidConfig, NoValidTriplets


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 4
    c: int = 30
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise InvalidConfig(f"p must be >= 2 (no negatives otherwise), got {self.p}")
        if self.k < 2:
            raise InvalidConfig(f"k must be >= 2 (no positives otherwise), got {self.k}")
        if self.c < 1:
            raise InvalidConfig(f"c must be >= 1, got {self.c}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    averaging: str = "all-triplets"  # or "nonzero-only"

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidConfig(f"margin must be >= 0, got {self.margin}")
        if self.averaging not in ("all-triplets", "nonzero-only"):
            raise InvalidConfig(f"unknown averaging mode {self.averaging!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfig(f"learning rate must be > 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise InvalidConfig(f"iterations must be >= 1, got {self.iterations}")
        if self.checkpoint_every < 1:
            raise InvalidConfig("checkpoint_every must be >= 1")


def flip_tracklet(frames):
    """Mirror every frame left-right (column j -> width-1-j)."""
    return np.asarray(frames)[..., ::-1]


def sample_batch(dataset, spec, rng):
    """Draw a p x k x c batch of silhouette frames with identity labels.

    Identities are distinct; tracklets are drawn without replacement when
    an identity has at least k, otherwise with replacement; frames are
    uniform without replacement when the tracklet has at least c frames,
    otherwise with replacement.  Each drawn tracklet is horizontally
    flipped as a whole with probability ``flip_prob``.
    """
    if len(dataset.identities) < spec.p:
        raise InsufficientIdentities(
            f"need {spec.p} identities, dataset has {len(dataset.identities)}"
        )
    pids = rng.choice(np.asarray(dataset.identities, dtype=object), size=spec.p, replace=False)
    frames = []
    labels = []
    for pid in pids:
        tracklets = dataset.by_identity(pid)
        t_idx = rng.choice(len(tracklets), size=spec.k, replace=len(tracklets) < spec.k)
        for ti in t_idx:
            tk = tracklets[int(ti)]
            t_count = tk.frames.shape[0]
            f_idx = rng.choice(t_count, size=spec.c, replace=t_count < spec.c)
            sample = tk.frames[f_idx]
            if rng.random() < spec.flip_prob:
                sample = flip_tracklet(sample)
            frames.append(sample)
            labels.append(pid)
    return np.stack(frames), list(labels)


# --- Batch-All triplet loss ----------------------------------------------------


def _triplet_masks(labels):
    labels = np.asarray(labels, dtype=object)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    pos_pair = same & ~np.eye(n, dtype=bool)
    valid = pos_pair[:, :, None] & ~same[:, None, :]  # (anchor, positive, negative)
    return valid


def _triplet_core(embeddings, labels, cfg, with_grad):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 2:  # allow (n, D) as a single strip
        emb = emb[:, None, :]
    n, s, d = emb.shape
    if n != len(labels):
        raise ValueError(f"{n} embeddings vs {len(labels)} labels")
    valid = _triplet_masks(labels)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidTriplets("labels admit no (anchor, positive, negative) triplet")

    strips = emb.transpose(1, 0, 2)  # (S, n, D)
    diff = strips[:, :, None, :] - strips[:, None, :, :]
    dist = np.sqrt(np.einsum("sijd,sijd->sij", diff, diff))
    # hinge[s, a, p, neg] = margin + d[a, p] - d[a, neg]
    hinge = cfg.margin + dist[:, :, :, None] - dist[:, :, None, :]
    active = (hinge > 0) & valid[None]
    clipped = np.where(active, hinge, 0.0)

    per_strip_sums = clipped.sum(axis=(1, 2, 3))
    active_counts = active.sum(axis=(1, 2, 3))
    if cfg.averaging == "all-triplets":
        denom = np.full(s, float(n_valid))
    else:
        denom = np.maximum(active_counts, 1).astype(np.float64)
    per_strip = per_strip_sums / denom
    loss = float(per_strip.mean())
    nonzero = int(active_counts.sum())
    if not with_grad:
        return loss, per_strip, nonzero, None

    # dL/d dist[s,a,b] = coef_s * (# active with (a,p=b)) - coef_s * (# active with (a,neg=b))
    coef = (1.0 / s) / denom  # (S,)
    w_pos = active.sum(axis=3)  # (S, n, n) count over negatives for pair (a, p)
    w_neg = active.sum(axis=2)  # (S, n, n) count over positives for pair (a, neg)
    w_dist = (w_pos - w_neg) * coef[:, None, None]
    m = w_dist + w_dist.transpose(0, 2, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(dist > 0, m / np.where(dist > 0, dist, 1.0), 0.0)
    grad = strips * r.sum(axis=2)[:, :, None] - np.einsum("sij,sjd->sid", r, strips)
    return loss, per_strip, nonzero, grad.transpose(1, 0, 2)


def batch_all_triplet_loss(embeddings, labels, cfg=LossConfig()):
    """Mean-over-strips Batch-All triplet loss.

    Returns (loss, per-strip losses, number of active (strip, triplet)
    pairs).  Embeddings are (n, strips, D); labels length n.
    """
    loss, per_strip, nonzero, _ = _triplet_core(embeddings, labels, cfg, with_grad=False)
    return loss, per_strip, nonzero


def batch_all_triplet_loss_grad(embeddings, labels, cfg=LossConfig()):
    """Loss plus d loss / d embeddings, shape (n, strips, D)."""
    return _triplet_core(embeddings, labels, cfg, with_grad=True)


def triplet_count(labels):
    """Number of valid (anchor, positive, negative) triplets for the labels."""
    return int(_triplet_masks(labels).sum())


# --- optimizer -------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a dict of weight tensors."""

    def __init__(self, weights, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.weights = weights
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for key, w in self.weights.items():
            g = grads[key]
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            w -= (self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(w.dtype)


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: object  # best checkpoint (by validation mAP when available)
    history: list = field(default_factory=list)  # (iter, loss, nonzero_frac, val_mAP)
    best_map: float = math.nan
    best_iteration: int = -1


def embed_dataset(model, dataset):
    """Embed every tracklet with all of its frames; returns eval arrays."""
    ids, pids, cams, feats = [], [], [], []
    for tk in dataset:
        e = embed(model, tk.frames)
        ids.append(tk.tracklet_id)
        pids.append(tk.person_id)
        cams.append(tk.camera_id)
        feats.append(np.asarray(e, dtype=np.float64).ravel())
    return ids, pids, cams, np.stack(feats)


def validation_map(model, dataset):
    _, pids, cams, feats = embed_dataset(model, dataset)
    report = retrieval.cross_camera_eval(feats, pids, cams)
    return report.map


def train(model, train_dataset, spec, loss_cfg, train_cfg, val_dataset=None):
    """Run Adam over Batch-All triplet batches; keep the best-mAP checkpoint.

    Mutates ``model`` in place (final weights) and returns a TrainResult
    whose ``model`` is the best validation checkpoint (the final weights
    when no validation set is given).  Identical seeds and inputs give a
    bit-identical history.
    """
    if val_dataset is not None:
        overlap = set(train_dataset.identities) & set(val_dataset.identities)
        if overlap:
            raise ValueError(f"train/validation identities overlap: {sorted(overlap)[:5]}")
    rng = np.random.default_rng(spec.seed)
    opt = Adam(
        model.weights,
        lr=train_cfg.learning_rate,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        epsilon=train_cfg.epsilon,
    )
    history = []
    best_model = None
    best_map = -math.inf
    best_iter = -1
    n_strips = model.strip_count
    for it in range(1, train_cfg.iterations + 1):
        frames, labels = sample_batch(train_dataset, spec, rng)
        embeddings, cache = embed_batch(model, frames)
        loss, _, nonzero, grad = batch_all_triplet_loss_grad(embeddings, labels, loss_cfg)
        grads = embed_batch_backward(model, cache, grad)
        opt.step(grads)
        val_map = math.nan
        if val_dataset is not None and (
            it % train_cfg.checkpoint_every == 0 or it == train_cfg.iterations
        ):
            val_map = validation_map(model, val_dataset)
            if val_map > best_map:
                best_map = val_map
                best_iter = it
                best_model = model.copy()
        nz_frac = nonzero / float(triplet_count(labels) * n_strips)
        history.append((it, loss, nz_frac, val_map))
    if best_model is None:
        best_model = model.copy()
        best_iter = train_cfg.iterations
        best_map = math.nan
    return TrainResult(model=best_model, history=history, best_map=best_map, best_iteration=best_iter)


def save_history_csv(path, history):
    lines = ["iteration,loss,nonzero_fraction,val_mAP"]
    for it, loss, nz, vmap in history:
        vm = "" if (isinstance(vmap, float) and math.isnan(vmap)) else f"{vmap:.6f}"
        lines.append(f"{it},{loss:.8f},{nz:.6f},{vm}")
    from .dataio import atomic_write_bytes

    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
