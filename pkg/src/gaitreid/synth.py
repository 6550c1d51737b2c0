"""Deterministic synthetic articulated runners emitting body-part label maps.

Each identity is a 2-D stick figure built from filled capsules (head,
torso, paired upper/lower arms and legs) walking in place with a periodic
arm and leg swing.  Identity is carried mainly by the arm swing amplitude
and limb proportions; torso dimensions are drawn from deliberately narrow
ranges so that the static outline says little about who is who.

In the frontal view the arm swing is modeled the way it confuses binary
silhouettes: the forward-swinging arm crosses in front of the torso (its
part labels stay visible because it is painted after the torso), while
the backward arm is painted first and mostly hidden behind the torso.
The full-body union therefore barely changes over the cycle, but the
torso-removed silhouette exposes the whole swept arm region, so the
motion signal survives exactly when the torso is subtracted.

All randomness is seeded; regenerating a dataset with the same seed gives
byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import silhouette as sil
from .dataio import TrackletRecord, write_manifest, write_pgm
from .errors import InvalidCanvas

CANVAS_H = 128
CANVAS_W = 96

# (low, high) draw ranges; torso kept narrow on purpose (weak identity cue),
# arm dynamics wide (strong identity cue)
PARAM_RANGES = {
    "head_radius": (5.5, 7.8),
    "torso_w": (15.0, 20.0),
    "torso_h": (28.5, 33.5),
    "upper_arm": (10.0, 13.0),
    "lower_arm": (6.5, 9.5),
    "arm_radius": (1.8, 3.1),
    "upper_leg": (17.0, 22.0),
    "lower_leg": (14.5, 19.5),
    "leg_radius": (2.2, 3.4),
    "arm_amp": (0.20, 1.20),
    "leg_amp": (0.30, 0.50),
    "phase": (0.0, 1.0),
}
PERIOD_RANGE = (18, 30)  # gait period in frames (inclusive)

_VIEWS = ("frontal", "oblique", "lateral")


@dataclass(frozen=True)
class IdentityParams:
    head_radius: float
    torso_w: float
    torso_h: float
    upper_arm: float
    lower_arm: float
    arm_radius: float
    upper_leg: float
    lower_leg: float
    leg_radius: float
    arm_amp: float  # radians, sagittal arm swing
    leg_amp: float  # radians
    phase: float  # cycle fraction in [0, 1)
    period: int  # frames per gait cycle

    @property
    def cadence(self):
        return 2.0 * np.pi / self.period


@dataclass(frozen=True)
class CameraSpec:
    view: str = "frontal"
    scale: float = 1.0
    mirror: bool = False
    noise: float = 0.0  # per-pixel dropout probability
    seed: int = 0

    def __post_init__(self):
        if self.view not in _VIEWS:
            raise ValueError(f"view must be one of {_VIEWS}, got {self.view!r}")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if not 0.0 <= self.noise <= 0.2:
            raise ValueError(f"noise must be in [0, 0.2], got {self.noise}")


def gen_identity(seed):
    """Draw identity parameters uniformly from the documented ranges."""
    rng = np.random.default_rng(seed)
    values = {name: rng.uniform(lo, hi) for name, (lo, hi) in PARAM_RANGES.items()}
    period = int(rng.integers(PERIOD_RANGE[0], PERIOD_RANGE[1] + 1))
    return IdentityParams(period=period, **values)


# --- rasterization ------------------------------------------------------------


def _grid():
    ys, xs = np.mgrid[0:CANVAS_H, 0:CANVAS_W]
    return ys.astype(np.float64), xs.astype(np.float64)


_YS, _XS = _grid()


def _paint_capsule(canvas, label, p0, p1, radius):
    """Fill all pixels within ``radius`` of the segment p0-p1 with ``label``."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    seg2 = dy * dy + dx * dx
    if seg2 == 0.0:
        d2 = (_YS - y0) ** 2 + (_XS - x0) ** 2
    else:
        t = np.clip(((_YS - y0) * dy + (_XS - x0) * dx) / seg2, 0.0, 1.0)
        d2 = (_YS - (y0 + t * dy)) ** 2 + (_XS - (x0 + t * dx)) ** 2
    canvas[d2 <= radius * radius] = label


def _check_extent(parts_and_radii):
    for _, p0, p1, r in parts_and_radii:
        for (y, x) in (p0, p1):
            if y - r < 0 or y + r > CANVAS_H - 1 or x - r < 0 or x + r > CANVAS_W - 1:
                raise InvalidCanvas(
                    f"figure exceeds the {CANVAS_H}x{CANVAS_W} canvas at ({y:.1f}, {x:.1f})"
                )


def _figure_segments(params, camera, cycle_frac):
    """Capsule list [(label, p0, p1, radius)] in painter's order for one frame."""
    s = camera.scale
    hr = params.head_radius * s
    tw2 = params.torso_w * s / 2.0
    th = params.torso_h * s
    ua, la = params.upper_arm * s, params.lower_arm * s
    ul, ll = params.upper_leg * s, params.lower_leg * s
    ar, lr = params.arm_radius * s, params.leg_radius * s

    phi = 2.0 * np.pi * cycle_frac
    fig_h = 2.0 * hr + th + ul + ll
    y_top = (CANVAS_H - fig_h) / 2.0
    cx = CANVAS_W / 2.0

    view = camera.view
    torso_r = tw2 * {"frontal": 1.0, "oblique": 0.82, "lateral": 0.62}[view]
    y_neck = y_top + 2.0 * hr
    head = (sil.HEAD, (y_top + hr, cx), (y_top + hr, cx), hr)
    torso = (sil.TORSO, (y_neck + torso_r, cx), (y_neck + th - torso_r, cx), torso_r)

    back, front = [], []
    legs = []
    for side in (-1.0, 1.0):
        theta_a = params.arm_amp * np.sin(phi) * side
        theta_l = params.leg_amp * np.sin(phi) * -side

        # arms
        if view == "frontal":
            # Arms are short enough to stay within the torso's vertical span.
            # The forward arm swings inward across the chest, entirely inside
            # the torso outline, with strong foreshortening; the backward arm
            # holds a static pose whose outer sliver pokes past the torso
            # edge.  The full-body union therefore barely moves over the
            # cycle while the torso-removed silhouette sees the whole
            # forward arm appear, shrink and swing.
            shoulder = (y_neck + 2.0 * s, cx + side * (torso_r - 4.0 * s))
            in_front = theta_a > 0
            if in_front:
                fore = 0.50 + 0.50 * np.cos(theta_a)
                a1 = -side * 0.50 * theta_a
                a2 = a1 - side * 0.15 * theta_a
            else:
                fore = 0.92
                a1 = side * 0.22
                a2 = a1 + side * 0.20
        elif view == "lateral":
            shoulder = (y_neck + 3.0 * s, cx + side * 1.5)
            fore = 1.0
            a1 = theta_a + 0.10
            a2 = a1 + 0.45
            in_front = side > 0  # near arm occludes the torso
        else:  # oblique
            shoulder = (y_neck + 3.0 * s, cx + side * (torso_r - 1.0) * 0.8)
            fore = 0.80 + 0.20 * np.cos(theta_a)
            a1 = side * 0.12 + 0.60 * theta_a
            a2 = a1 + side * 0.18 + 0.15 * theta_a
            in_front = theta_a > 0
        elbow = (shoulder[0] + ua * fore * np.cos(a1), shoulder[1] + ua * fore * np.sin(a1))
        wrist = (elbow[0] + la * fore * 0.95 * np.cos(a2), elbow[1] + la * fore * 0.95 * np.sin(a2))
        arm = [
            (sil.UPPER_ARMS, shoulder, elbow, ar),
            (sil.LOWER_ARMS, elbow, wrist, ar * 0.9),
        ]
        (front if in_front else back).extend(arm)

        # legs
        hip = (y_neck + th - 2.0 * s, cx + side * tw2 * 0.45)
        if view == "frontal":
            # leg swing is sagittal: almost invisible from the front
            l1 = side * 0.10 + 0.03 * theta_l
            l2 = l1 * 1.15
            lfore = 1.0
        elif view == "lateral":
            l1 = theta_l
            l2 = theta_l * 1.35
            lfore = 1.0
        else:
            l1 = side * 0.06 + 0.60 * theta_l
            l2 = l1 * 1.2
            lfore = 0.85 + 0.15 * np.cos(theta_l)
        knee = (hip[0] + ul * lfore * np.cos(l1), hip[1] + ul * lfore * np.sin(l1))
        foot = (knee[0] + ll * lfore * np.cos(l2), knee[1] + ll * lfore * np.sin(l2))
        legs.append((sil.UPPER_LEGS, hip, knee, lr))
        legs.append((sil.LOWER_LEGS, knee, foot, lr))

    return legs + back + [torso] + front + [head]


def render_frame(params, camera, t, phase_shift=0.0, noise_rng=None):
    """Render one label map; ``t`` indexes the gait cycle."""
    cycle_frac = (t % params.period) / params.period + params.phase + phase_shift
    segments = _figure_segments(params, camera, cycle_frac)
    _check_extent(segments)
    canvas = np.zeros((CANVAS_H, CANVAS_W), dtype=np.uint8)
    for label, p0, p1, radius in segments:
        _paint_capsule(canvas, label, p0, p1, radius)
    if camera.mirror:
        canvas = canvas[:, ::-1]
    if camera.noise > 0.0 and noise_rng is not None:
        canvas = np.where(noise_rng.random(canvas.shape) < camera.noise, 0, canvas)
    return np.ascontiguousarray(canvas)


def render_sequence(params, camera, frames, phase_shift=0.0, noise_salt=0):
    """Render ``frames`` consecutive label maps, deterministic per seeds."""
    if frames < 1:
        raise ValueError("frame count must be >= 1")
    noise_rng = None
    if camera.noise > 0.0:
        noise_rng = np.random.default_rng([int(camera.seed), int(noise_salt)])
    return [render_frame(params, camera, t, phase_shift, noise_rng) for t in range(frames)]


# --- dataset emission -----------------------------------------------------------


def default_cameras(noise=0.02):
    return (
        CameraSpec(view="frontal", scale=1.0, mirror=False, noise=noise, seed=101),
        CameraSpec(view="frontal", scale=0.92, mirror=False, noise=noise, seed=202),
    )


def gen_dataset(
    root,
    n_identities,
    cameras=None,
    tracklets_per_camera=2,
    frames=24,
    seed=0,
    split_fractions=(0.5, 0.2, 0.3),
):
    """Generate label-map tracklets plus a JSON-lines manifest under ``root``.

    Identity splits are disjoint by construction: the first fraction of
    identities is train, then val, then test.  Returns the written
    records; the manifest lands at ``root/manifest.jsonl`` with frame
    paths relative to ``root``.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split_fractions must be three values summing to 1")
    cameras = list(cameras) if cameras is not None else list(default_cameras())
    root = os.path.abspath(root)
    os.makedirs(root, exist_ok=True)

    n_train = int(round(split_fractions[0] * n_identities))
    n_val = int(round(split_fractions[1] * n_identities))
    ss = np.random.SeedSequence(seed)
    id_seeds = ss.spawn(n_identities)
    records = []
    for i in range(n_identities):
        pid = f"id{i:03d}"
        params = gen_identity(id_seeds[i])
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        for ci, camera in enumerate(cameras):
            cam_id = f"cam{ci}"
            for r in range(tracklets_per_camera):
                tid = f"{pid}-{cam_id}-t{r}"
                tr_rng = np.random.default_rng([seed, i, ci, r])
                phase_shift = float(tr_rng.random())
                noise_salt = int(tr_rng.integers(0, 2**31))
                maps = render_sequence(params, camera, frames, phase_shift, noise_salt)
                rel_paths = []
                for t, lm in enumerate(maps):
                    rel = os.path.join("maps", tid, f"f{t:04d}.pgm")
                    write_pgm(os.path.join(root, rel), lm)
                    rel_paths.append(rel)
                records.append(
                    TrackletRecord(
                        tracklet_id=tid,
                        person_id=pid,
                        camera_id=cam_id,
                        split=split,
                        frames=rel_paths,
                    )
                )
    write_manifest(os.path.join(root, "manifest.jsonl"), records)
    return records
