"""Binary gait silhouettes from body-part label maps.

A label map assigns one of seven ids to each pixel: 0 background, 1 head,
2 torso, 3 upper arms, 4 lower arms, 5 upper legs, 6 lower legs.  A
silhouette is the union of a chosen subset of part masks, optionally gated
by the largest instance mask, then aligned into a canonical 64x44 frame.

The alignment frame is always computed from the *full-body* silhouette so
that partial silhouettes (e.g. torso removed) land in the same canonical
coordinates as their full-body counterpart.  This makes partial outputs a
pixelwise subset of full ones, which downstream code relies on.

All functions are pure: frames of a tracklet can be processed in parallel
and results are bit-identical regardless of schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllFramesDropped, DimensionMismatch, EmptySilhouette

BACKGROUND, HEAD, TORSO, UPPER_ARMS, LOWER_ARMS, UPPER_LEGS, LOWER_LEGS = range(7)

FULL_BODY = frozenset({HEAD, TORSO, UPPER_ARMS, LOWER_ARMS, UPPER_LEGS, LOWER_LEGS})
PARTIAL = frozenset(FULL_BODY - {TORSO})

SIL_HEIGHT = 64
SIL_WIDTH = 44

# 4-connectivity for the optional largest-component instance fallback
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


@dataclass(frozen=True)
class AlignmentFrame:
    """Canonical-frame parameters derived from a full-body silhouette.

    row_top/row_bottom are the first/last rows containing foreground,
    scale maps the cropped height onto 64 rows, and center_x is the
    foreground x-centroid measured in the rescaled image.
    """

    row_top: int
    row_bottom: int
    scale: float
    center_x: float


def validate_parts(parts):
    parts = frozenset(int(p) for p in parts)
    if not parts:
        raise ValueError("part subset must be non-empty")
    if not parts <= FULL_BODY:
        raise ValueError(f"part ids must be in 1..6, got {sorted(parts)}")
    return parts


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def resize_bilinear(img, out_h, out_w):
    """Resize a 2-D float array with bilinear interpolation.

    Sample positions use the half-pixel-center convention
    (src = (dst + 0.5) * in/out - 0.5) with edge clamping, so an
    identity-size resize is an exact copy.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1.0 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1.0 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy


def compose_silhouette(label_map, parts, instance_masks=()):
    """Union of the selected part masks, gated by the largest instance.

    A pixel is foreground iff its label is in ``parts`` and, when any
    instance masks are given, it lies inside the mask with the largest
    foreground area (ties broken by lowest list index).
    """
    label_map = np.asarray(label_map)
    parts = validate_parts(parts)
    out = np.isin(label_map, sorted(parts))
    masks = list(instance_masks)
    if masks:
        areas = []
        for m in masks:
            m = np.asarray(m)
            if m.shape != label_map.shape:
                raise DimensionMismatch(
                    f"instance mask shape {m.shape} != label map shape {label_map.shape}"
                )
            areas.append(int(np.count_nonzero(m)))
        largest = int(np.argmax(areas))  # argmax returns the first maximum
        out &= np.asarray(masks[largest]).astype(bool)
    return out


def connected_component_masks(binary):
    """4-connected components of a binary grid, one mask each, scan order."""
    binary = np.asarray(binary).astype(bool)
    labeled, n = ndimage.label(binary, structure=_CONN4)
    return [labeled == i for i in range(1, n + 1)]


def _crop_and_scale(grid, frame_or_rows):
    """Row-crop, rescale to height 64 (aspect preserved), threshold at 0.5."""
    if isinstance(frame_or_rows, AlignmentFrame):
        top, bottom, scale = frame_or_rows.row_top, frame_or_rows.row_bottom, frame_or_rows.scale
    else:
        top, bottom, scale = frame_or_rows
    crop = np.asarray(grid, dtype=np.float64)[top : bottom + 1]
    out_w = max(1, _round_half_up(crop.shape[1] * scale))
    return resize_bilinear(crop, SIL_HEIGHT, out_w) >= 0.5


def compute_alignment(full_body):
    """Derive the canonical alignment frame from a full-body silhouette."""
    fb = np.asarray(full_body).astype(bool)
    if fb.ndim != 2:
        raise DimensionMismatch(f"expected 2-D grid, got shape {fb.shape}")
    if not fb.any():
        raise EmptySilhouette("no foreground pixels")
    rows = np.flatnonzero(fb.any(axis=1))
    row_top, row_bottom = int(rows[0]), int(rows[-1])
    scale = SIL_HEIGHT / (row_bottom - row_top + 1)
    scaled = _crop_and_scale(fb, (row_top, row_bottom, scale))
    if not scaled.any():
        raise EmptySilhouette("foreground vanished after rescale")
    center_x = float(np.nonzero(scaled)[1].mean())
    return AlignmentFrame(row_top, row_bottom, scale, center_x)


def apply_alignment(target, frame):
    """Map a grid into the canonical 64x44 frame.

    The target must dimension-match the grid the frame was computed from.
    Rows are cropped to the frame's span, rescaled to height 64, and a
    44-column window centered at round(center_x) is extracted with zero
    padding outside the rescaled image.
    """
    scaled = _crop_and_scale(np.asarray(target).astype(bool), frame)
    c = _round_half_up(frame.center_x)
    out = np.zeros((SIL_HEIGHT, SIL_WIDTH), dtype=bool)
    src_lo = c - SIL_WIDTH // 2
    w = scaled.shape[1]
    dst_lo = max(0, -src_lo)
    dst_hi = min(SIL_WIDTH, w - src_lo)
    if dst_lo < dst_hi:
        out[:, dst_lo:dst_hi] = scaled[:, src_lo + dst_lo : src_lo + dst_hi]
    if not out.any():
        raise EmptySilhouette("aligned silhouette is empty")
    return out


def process_tracklet(
    label_maps,
    parts,
    instance_masks=None,
    *,
    min_foreground=16,
    component_fallback=False,
):
    """Convert a tracklet of label maps into aligned silhouettes.

    Per frame: the full-body grid defines the alignment frame; the grid
    composed from ``parts`` is aligned by it.  Frames with an empty
    full-body grid, or whose aligned output has fewer than
    ``min_foreground`` pixels, are dropped and reported.  Order is
    preserved.

    Returns (silhouettes, drops) where drops is a list of
    (frame index, reason) pairs.  Raises AllFramesDropped if nothing
    survives.
    """
    label_maps = list(label_maps)
    if not label_maps:
        raise AllFramesDropped("tracklet has no frames")
    parts = validate_parts(parts)
    sils = []
    drops = []
    for i, lm in enumerate(label_maps):
        inst = instance_masks[i] if instance_masks is not None else ()
        if not inst and component_fallback:
            inst = connected_component_masks(compose_silhouette(lm, FULL_BODY))
        full = compose_silhouette(lm, FULL_BODY, inst)
        try:
            frame = compute_alignment(full)
        except EmptySilhouette:
            drops.append((i, "empty-full-body"))
            continue
        tgt = compose_silhouette(lm, parts, inst)
        try:
            sil = apply_alignment(tgt, frame)
        except EmptySilhouette:
            drops.append((i, "below-min-foreground"))
            continue
        if int(sil.sum()) < min_foreground:
            drops.append((i, "below-min-foreground"))
            continue
        sils.append(sil)
    if not sils:
        raise AllFramesDropped(f"all {len(label_maps)} frames dropped")
    return sils, drops


def subtract_torso(silhouette_img, torso_mask):
    """Remove torso pixels from an existing binary silhouette (AND NOT)."""
    sil = np.asarray(silhouette_img).astype(bool)
    torso = np.asarray(torso_mask).astype(bool)
    if sil.shape != torso.shape:
        raise DimensionMismatch(f"silhouette {sil.shape} vs torso mask {torso.shape}")
    return sil & ~torso
