"""Set-pooled convolutional gait embedder with horizontal pyramid pooling.

The embedder maps an unordered set of 64x44 binary silhouettes to a
strips x dims matrix:

  1. three conv stages (5x5 then 3x3 kernels, leaky rectifier, two 2x2
     max-pool downsamples) shared across frames -> per-frame maps of
     16x11 spatial size;
  2. elementwise max over the frame set (order-invariant by construction);
  3. horizontal pyramid pooling: the set-level map is sliced into
     horizontal bands at several scales, each band is reduced to a
     channel vector by global-max plus global-mean, and every band has
     its own projection matrix to the strip dimension.

With ``branches=2`` a second pipeline set-pools the stage-2 maps,
downsamples and convolves them at set level, and contributes its own
strip block, doubling the strip count.

Everything runs on plain numpy arrays, forward and backward.  All max
operations route gradients to the first argmax element (frame index
first, then row-major spatial order), so gradients are deterministic
even under ties.  Weight tensors live in a plain dict so optimizers can
treat them uniformly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagic, EmptySet, IndivisibleHeight, InvalidConfig, ShapeMismatch, Truncated
from .silhouette import SIL_HEIGHT, SIL_WIDTH

CHECKPOINT_MAGIC = b"GBM1"

# spatial size of the last conv stage for 64x44 input (two 2x downsamples)
FEATURE_H = SIL_HEIGHT // 4
FEATURE_W = SIL_WIDTH // 4

_KERNELS = (5, 3, 3)  # per-stage kernel sizes; the branch conv uses 3x3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The desk-scale default (7 strips x 32 dims) trains in minutes on a
    laptop; ``paper_scale()`` gives the 62-strip x 256-dim layout of the
    full-size model.
    """

    conv_channels: tuple = (8, 16, 32)
    pyramid_scales: tuple = (1, 2, 4)
    strip_dim: int = 32
    branches: int = 1
    leaky_slope: float = 0.1
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pyramid_scales", tuple(int(s) for s in self.pyramid_scales))
        if len(self.conv_channels) != 3 or any(c <= 0 for c in self.conv_channels):
            raise InvalidConfig(f"need 3 positive stage widths, got {self.conv_channels}")
        if not self.pyramid_scales or any(s <= 0 for s in self.pyramid_scales):
            raise InvalidConfig(f"pyramid scales must be positive, got {self.pyramid_scales}")
        if self.strip_dim <= 0:
            raise InvalidConfig(f"strip_dim must be positive, got {self.strip_dim}")
        if self.branches not in (1, 2):
            raise InvalidConfig(f"branches must be 1 or 2, got {self.branches}")
        if self.leaky_slope < 0:
            raise InvalidConfig(f"leaky_slope must be >= 0, got {self.leaky_slope}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def strip_count(self):
        return self.branches * sum(self.pyramid_scales)

    @classmethod
    def paper_scale(cls, seed=0, dtype="float32"):
        return cls(
            conv_channels=(32, 64, 128),
            pyramid_scales=(1, 2, 4, 8, 16),
            strip_dim=256,
            branches=2,
            seed=seed,
            dtype=dtype,
        )

    def to_dict(self):
        return {
            "conv_channels": list(self.conv_channels),
            "pyramid_scales": list(self.pyramid_scales),
            "strip_dim": self.strip_dim,
            "branches": self.branches,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
            "dtype": self.dtype,
        }


@dataclass
class GaitModel:
    config: ModelConfig
    weights: dict = field(default_factory=dict)

    @property
    def strip_count(self):
        return self.config.strip_count

    @property
    def embedding_dim(self):
        return self.config.strip_count * self.config.strip_dim

    def copy(self):
        return GaitModel(self.config, {k: v.copy() for k, v in self.weights.items()})


def init_model(config):
    """Draw weights from a zero-mean uniform fan-in scheme, deterministically."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    c1, c2, c3 = config.conv_channels

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    k1, k2, k3 = _KERNELS
    weights = {}
    weights["conv1_w"] = uniform((c1, 1, k1, k1), 1 * k1 * k1)
    weights["conv1_b"] = uniform((c1,), 1 * k1 * k1)
    weights["conv2_w"] = uniform((c2, c1, k2, k2), c1 * k2 * k2)
    weights["conv2_b"] = uniform((c2,), c1 * k2 * k2)
    weights["conv3_w"] = uniform((c3, c2, k3, k3), c2 * k3 * k3)
    weights["conv3_b"] = uniform((c3,), c2 * k3 * k3)
    if config.branches == 2:
        weights["branch_w"] = uniform((c3, c2, 3, 3), c2 * 9)
        weights["branch_b"] = uniform((c3,), c2 * 9)
    weights["proj"] = uniform((config.strip_count, c3, config.strip_dim), c3)
    return GaitModel(config, weights)


# --- layer primitives ---------------------------------------------------------


def _conv_forward(x, w, b):
    """Same-padded stride-1 convolution via im2col; returns (out, cols)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * kh * kw)
    out = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)), cols


def _conv_backward(g, cols, w, x_shape):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
    grad_w = (gm.T @ cols).reshape(o, c, kh, kw)
    grad_b = gm.sum(axis=0)
    gc = (gm @ w.reshape(o, -1)).reshape(n, h, wd, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    ph, pw = kh // 2, kw // 2
    grad_xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            grad_xp[:, :, u : u + h, v : v + wd] += gc[:, :, :, :, u, v]
    return grad_xp[:, :, ph : ph + h, pw : pw + wd], grad_w, grad_b


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _leaky_grad(g, z, slope):
    return g * np.where(z > 0, 1.0, slope).astype(g.dtype)


def _pool_forward(x):
    """2x2 max pool, stride 2; argmax kept in row-major window order."""
    n, c, h, w = x.shape
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = np.ascontiguousarray(r).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(g, idx, x_shape):
    n, c, h, w = x_shape
    r = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(r, idx[..., None], g[..., None], axis=-1)
    return r.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _set_max(a):
    """Max over the frame axis (axis 1); argmax is the first maximal frame."""
    idx = a.argmax(axis=1)
    out = np.take_along_axis(a, idx[:, None], axis=1)[:, 0]
    return out, idx


def _set_max_backward(g, idx, shape):
    out = np.zeros(shape, dtype=g.dtype)
    np.put_along_axis(out, idx[:, None], g[:, None], axis=1)
    return out


# --- public operations ---------------------------------------------------------


def frame_features(model, frame):
    """Per-frame conv features: (C3, 16, 11) map for one 64x44 silhouette."""
    x = _as_frames(model, [frame])
    cache = _stages_forward(model, x[None])
    return cache["a3"][0]


def set_pool(features):
    """Elementwise maximum over a non-empty list of same-shape tensors."""
    features = list(features)
    if not features:
        raise EmptySet("set pooling needs at least one tensor")
    stack = [np.asarray(f) for f in features]
    shape = stack[0].shape
    for f in stack[1:]:
        if f.shape != shape:
            raise ShapeMismatch(f"set members disagree: {f.shape} vs {shape}")
    return np.maximum.reduce(stack)


def hpp(set_feature, scales, projections):
    """Horizontal pyramid pooling of one set-level map.

    For each scale the height is split into that many equal bands; each
    band pools to global-max plus global-mean per channel and is sent
    through its own projection matrix.  Strips are ordered by scale
    (ascending) then band index.
    """
    set_feature = np.asarray(set_feature)
    projections = np.asarray(projections)
    out, _ = _hpp_forward(set_feature[None], tuple(scales), projections)
    return out[0]


def embed(model, frames):
    """Embed one tracklet: an unordered set of silhouettes -> (strips, dim)."""
    x = _as_frames(model, frames)
    emb, _ = embed_batch(model, x[None])
    return emb[0]


def backward(model, frames, upstream):
    """Weight gradients of ``sum(upstream * embed(model, frames))``."""
    x = _as_frames(model, frames)
    upstream = np.asarray(upstream, dtype=model.config.dtype)
    s, d = model.strip_count, model.config.strip_dim
    if upstream.shape != (s, d):
        raise ShapeMismatch(f"upstream gradient must be ({s}, {d}), got {upstream.shape}")
    _, cache = embed_batch(model, x[None])
    return embed_batch_backward(model, cache, upstream[None])


# --- batched forward/backward ---------------------------------------------------


def _as_frames(model, frames):
    arr = np.asarray(frames)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (SIL_HEIGHT, SIL_WIDTH):
        raise ShapeMismatch(f"frames must be (T, {SIL_HEIGHT}, {SIL_WIDTH}), got {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptySet("cannot embed an empty frame set")
    return arr.astype(model.config.dtype, copy=False)


def _stages_forward(model, x):
    """Shared conv stages over a flat frame batch (N, c?, 64, 44)."""
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    wts = model.weights
    slope = model.config.leaky_slope
    z1, cols1 = _conv_forward(flat, wts["conv1_w"], wts["conv1_b"])
    a1 = _leaky(z1, slope)
    p1, i1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, wts["conv2_w"], wts["conv2_b"])
    a2 = _leaky(z2, slope)
    p2, i2 = _pool_forward(a2)
    z3, cols3 = _conv_forward(p2, wts["conv3_w"], wts["conv3_b"])
    a3 = _leaky(z3, slope)
    return {
        "n": n, "c": c,
        "flat_shape": flat.shape,
        "z1": z1, "cols1": cols1, "i1": i1, "p1_shape": p1.shape,
        "z2": z2, "cols2": cols2, "i2": i2, "p2_shape": p2.shape,
        "z3": z3, "cols3": cols3,
        "a2": a2, "a3": a3,
    }


def _hpp_forward(maps, scales, projections):
    """Batched HPP: maps (n, C, H, W) -> (n, strips, D) plus cache."""
    n, c, h, w = maps.shape
    strips = []
    cache = []
    k = 0
    for s in scales:
        if h % s != 0:
            raise IndivisibleHeight(f"scale {s} does not divide height {h}")
        hb = h // s
        for b in range(s):
            band = maps[:, :, b * hb : (b + 1) * hb, :].reshape(n, c, hb * w)
            am = band.argmax(axis=-1)
            mx = np.take_along_axis(band, am[..., None], axis=-1)[..., 0]
            mn = band.mean(axis=-1)
            vec = mx + mn
            strips.append(np.einsum("nc,cd->nd", vec, projections[k]))
            cache.append((b * hb, hb, am, vec))
            k += 1
    return np.stack(strips, axis=1), cache


def _hpp_backward(grad, cache, projections, maps_shape, dtype):
    n, c, h, w = maps_shape
    grad_maps = np.zeros(maps_shape, dtype=dtype)
    grad_proj = np.zeros_like(projections)
    for k, (lo, hb, am, vec) in enumerate(cache):
        gk = grad[:, k]  # (n, D)
        grad_proj[k] = vec.T @ gk
        gvec = gk @ projections[k].T  # (n, C)
        band_grad = np.zeros((n, c, hb * w), dtype=dtype)
        np.put_along_axis(band_grad, am[..., None], gvec[..., None], axis=-1)
        band_grad += (gvec / (hb * w))[..., None]
        grad_maps[:, :, lo : lo + hb, :] += band_grad.reshape(n, c, hb, w)
    return grad_maps, grad_proj


def embed_batch(model, frames_batch):
    """Embed n tracklet samples of c frames each: (n, c, 64, 44) -> (n, S, D)."""
    x = np.asarray(frames_batch).astype(model.config.dtype, copy=False)
    if x.ndim != 4 or x.shape[2:] != (SIL_HEIGHT, SIL_WIDTH):
        raise ShapeMismatch(f"expected (n, c, {SIL_HEIGHT}, {SIL_WIDTH}), got {x.shape}")
    if x.shape[1] == 0:
        raise EmptySet("cannot embed an empty frame set")
    cfg = model.config
    cache = _stages_forward(model, x)
    n, c = cache["n"], cache["c"]
    c3 = cfg.conv_channels[2]
    per_branch = sum(cfg.pyramid_scales)
    proj = model.weights["proj"]

    a3 = cache["a3"].reshape(n, c, c3, FEATURE_H, FEATURE_W)
    g1, set1_idx = _set_max(a3)
    out1, hpp1 = _hpp_forward(g1, cfg.pyramid_scales, proj[:per_branch])
    cache.update(set1_idx=set1_idx, hpp1=hpp1, g1_shape=g1.shape)

    if cfg.branches == 2:
        c2 = cfg.conv_channels[1]
        a2 = cache["a2"].reshape(n, c, c2, FEATURE_H * 2, FEATURE_W * 2)
        g2, set2_idx = _set_max(a2)
        q, iq = _pool_forward(g2)
        zb, colsb = _conv_forward(q, model.weights["branch_w"], model.weights["branch_b"])
        ab = _leaky(zb, cfg.leaky_slope)
        out2, hpp2 = _hpp_forward(ab, cfg.pyramid_scales, proj[per_branch:])
        cache.update(
            set2_idx=set2_idx, g2_shape=g2.shape, iq=iq, q_shape=q.shape,
            zb=zb, colsb=colsb, hpp2=hpp2,
        )
        embedding = np.concatenate([out1, out2], axis=1)
    else:
        embedding = out1
    return embedding, cache


def embed_batch_backward(model, cache, grad_embeddings):
    """Reverse-mode gradients for a prior ``embed_batch`` call."""
    cfg = model.config
    dtype = np.dtype(cfg.dtype)
    grad = np.asarray(grad_embeddings, dtype=dtype)
    n, c = cache["n"], cache["c"]
    s, d = model.strip_count, cfg.strip_dim
    if grad.shape != (n, s, d):
        raise ShapeMismatch(f"gradient must be ({n}, {s}, {d}), got {grad.shape}")
    per_branch = sum(cfg.pyramid_scales)
    proj = model.weights["proj"]
    slope = cfg.leaky_slope
    grads = {}

    grad_g1, gp1 = _hpp_backward(
        grad[:, :per_branch], cache["hpp1"], proj[:per_branch], cache["g1_shape"], dtype
    )
    grad_proj = np.zeros_like(proj)
    grad_proj[:per_branch] = gp1
    a3_shape = (n, c) + cache["g1_shape"][1:]
    grad_a3 = _set_max_backward(grad_g1, cache["set1_idx"], a3_shape)
    grad_a3 = grad_a3.reshape((n * c,) + cache["g1_shape"][1:])

    grad_z3 = _leaky_grad(grad_a3, cache["z3"], slope)
    grad_p2, grads["conv3_w"], grads["conv3_b"] = _conv_backward(
        grad_z3, cache["cols3"], model.weights["conv3_w"], cache["p2_shape"]
    )
    grad_a2 = _pool_backward(grad_p2, cache["i2"], cache["z2"].shape)

    if cfg.branches == 2:
        grad_ab, gp2 = _hpp_backward(
            grad[:, per_branch:], cache["hpp2"], proj[per_branch:],
            (n,) + cache["zb"].shape[1:], dtype,
        )
        grad_proj[per_branch:] = gp2
        grad_zb = _leaky_grad(grad_ab, cache["zb"], slope)
        grad_q, grads["branch_w"], grads["branch_b"] = _conv_backward(
            grad_zb, cache["colsb"], model.weights["branch_w"], cache["q_shape"]
        )
        grad_g2 = _pool_backward(grad_q, cache["iq"], cache["g2_shape"])
        grad_a2_set = _set_max_backward(grad_g2, cache["set2_idx"], (n, c) + cache["g2_shape"][1:])
        grad_a2 += grad_a2_set.reshape(grad_a2.shape)

    grad_z2 = _leaky_grad(grad_a2, cache["z2"], slope)
    grad_p1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
        grad_z2, cache["cols2"], model.weights["conv2_w"], cache["p1_shape"]
    )
    grad_a1 = _pool_backward(grad_p1, cache["i1"], cache["z1"].shape)
    grad_z1 = _leaky_grad(grad_a1, cache["z1"], slope)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
        grad_z1, cache["cols1"], model.weights["conv1_w"], cache["flat_shape"]
    )
    grads["proj"] = grad_proj
    return grads


# --- checkpoints -----------------------------------------------------------------


def save_model(path, model):
    """Write a GBM1 checkpoint: config JSON block plus named f32 tensors."""
    from .dataio import atomic_write_bytes

    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg_json)), cfg_json]
    names = sorted(model.weights)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        t = np.asarray(model.weights[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise Truncated(f"{path}: checkpoint cut short")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (cfg_len,) = take("<I")
    if pos + cfg_len > len(data):
        raise Truncated(f"{path}: config block cut short")
    cfg_dict = json.loads(data[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    config = ModelConfig(
        conv_channels=tuple(cfg_dict["conv_channels"]),
        pyramid_scales=tuple(cfg_dict["pyramid_scales"]),
        strip_dim=cfg_dict["strip_dim"],
        branches=cfg_dict["branches"],
        leaky_slope=cfg_dict["leaky_slope"],
        seed=cfg_dict["seed"],
        dtype=cfg_dict.get("dtype", "float64"),
    )
    (count,) = take("<I")
    weights = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(data):
            raise Truncated(f"{path}: tensor name cut short")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims)) if dims else 1
        if pos + 4 * numel > len(data):
            raise Truncated(f"{path}: tensor {name!r} data cut short")
        arr = np.frombuffer(data, dtype="<f4", count=numel, offset=pos).reshape(dims)
        pos += 4 * numel
        weights[name] = arr.astype(config.dtype)
    if pos != len(data):
        raise Truncated(f"{path}: {len(data) - pos} trailing bytes")
    return GaitModel(config, weights)
