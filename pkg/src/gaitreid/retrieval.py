"""Distances, feature fusion, and re-identification evaluation protocols.

Two protocols are implemented: cross-camera retrieval (each tracklet
queries the tracklets of every *other* camera; positives share its
identity) and the cross-view walking protocol (gallery is the first four
normal-walk sequences, probes are ranked per view pair, identical-view
pairs are excluded from the averages).

mAP uses standard retrieval average precision: for each query, the mean
over its positives of precision-at-that-rank, averaged over queries with
at least one positive.  Queries without any positive are excluded and
counted.  Ranking ties are broken by stable gallery order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    MissingView,
    NoPositives,
    NoValidQueries,
    ZeroVector,
)

CASIA_VIEWS = tuple(range(0, 181, 18))
FRONTAL_VIEWS = (0, 180)
LATERAL_VIEWS = (90,)
OBLIQUE_VIEWS = tuple(v for v in CASIA_VIEWS if v not in FRONTAL_VIEWS + LATERAL_VIEWS)

GALLERY_SEQS = {"NM": (1, 2, 3, 4)}
PROBE_SEQS = {"NM": (5, 6), "BG": (1, 2), "CL": (1, 2)}


def l2_normalize(v):
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def fuse(a, b):
    """Concatenate two feature vectors after l2-normalizing each."""
    return np.concatenate([l2_normalize(a), l2_normalize(b)])


def distance_matrix(queries, gallery):
    """Pairwise Euclidean distances, (n_queries, n_gallery)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))


def average_precision(flags):
    """AP of a ranked boolean relevance list (rank 1 first)."""
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise NoPositives("ranking contains no positive")
    ranks = np.flatnonzero(flags) + 1  # 1-based ranks of the positives
    hits = np.arange(1, n_pos + 1, dtype=np.float64)
    return float((hits / ranks).mean())


@dataclass
class MetricsReport:
    map: float
    rank: dict
    per_query_ap: list = field(default_factory=list)
    excluded: int = 0
    num_queries: int = 0

    def to_dict(self):
        return {
            "mAP": self.map,
            "rank": {str(k): v for k, v in sorted(self.rank.items())},
            "excluded_queries": self.excluded,
            "num_queries": self.num_queries,
        }


def cross_camera_eval(features, identities, cameras, ranks=(1, 5, 10)):
    """Evaluate retrieval where the gallery is every *other* camera.

    Each tracklet acts as query once; its gallery is all tracklets whose
    camera differs from the query's, and positives are those sharing its
    identity.  Queries with no positive are excluded (and counted).
    """
    feats = np.asarray(features, dtype=np.float64)
    pids = np.asarray(identities, dtype=object)
    cams = np.asarray(cameras, dtype=object)
    n = feats.shape[0]
    if not (len(pids) == len(cams) == n):
        raise DimensionMismatch("features/identities/cameras lengths differ")
    dist = distance_matrix(feats, feats)
    aps = []
    hit_at = {k: [] for k in ranks}
    excluded = 0
    for i in range(n):
        gal = np.flatnonzero(cams != cams[i])
        positives = pids[gal] == pids[i]
        if gal.size == 0 or not positives.any():
            excluded += 1
            continue
        order = np.argsort(dist[i, gal], kind="stable")
        flags = positives[order]
        aps.append(average_precision(flags))
        first_hit = int(np.flatnonzero(flags)[0]) + 1
        for k in ranks:
            hit_at[k].append(1.0 if first_hit <= k else 0.0)
    if not aps:
        raise NoValidQueries("every query lacked a cross-camera positive")
    return MetricsReport(
        map=float(np.mean(aps)),
        rank={k: float(np.mean(v)) for k, v in hit_at.items()},
        per_query_ap=aps,
        excluded=excluded,
        num_queries=len(aps),
    )


@dataclass
class CasiaReport:
    probe_condition: str
    matrix: np.ndarray  # (11, 11) rank-1 accuracy, NaN on the diagonal
    per_view: np.ndarray  # (11,) mean over the 10 non-identical gallery views
    frontal: float
    oblique: float
    lateral: float
    mean: float

    def to_dict(self):
        return {
            "probe_condition": self.probe_condition,
            "views": list(CASIA_VIEWS),
            "rank1_matrix": [
                [None if np.isnan(x) else float(x) for x in row] for row in self.matrix
            ],
            "per_view": [float(x) for x in self.per_view],
            "frontal": self.frontal,
            "oblique": self.oblique,
            "lateral": self.lateral,
            "mean": self.mean,
        }

    def to_text(self):
        head = f"{'Probe':>8}  {'Frontal':>8} {'Oblique':>8} {'Lateral':>8} {'Mean':>8}"
        row = (
            f"{self.probe_condition:>8}  {100 * self.frontal:8.1f} {100 * self.oblique:8.1f}"
            f" {100 * self.lateral:8.1f} {100 * self.mean:8.1f}"
        )
        return head + "\n" + row


def casia_b_eval(features, identities, views, conditions, seqs, probe_condition="NM"):
    """Cross-view rank-1 over the 11x11 view grid, identical views excluded.

    Gallery: NM sequences 1-4 of every identity.  Probes: the sequences of
    ``probe_condition`` (NM -> 5-6, BG/CL -> 1-2).  Returns the full view
    matrix plus probe-view means grouped as frontal (0, 180), oblique
    (18-72, 108-162), lateral (90) and the mean over all 11 probe views.
    """
    probe_condition = probe_condition.upper()
    if probe_condition not in PROBE_SEQS:
        raise ValueError(f"unknown probe condition {probe_condition!r}")
    feats = np.asarray(features, dtype=np.float64)
    pids = np.asarray(identities, dtype=object)
    view_arr = np.asarray(views, dtype=int)
    cond_arr = np.asarray([c.upper() for c in conditions], dtype=object)
    seq_arr = np.asarray(seqs, dtype=int)

    gal_mask = (cond_arr == "NM") & np.isin(seq_arr, GALLERY_SEQS["NM"])
    probe_mask = (cond_arr == probe_condition) & np.isin(seq_arr, PROBE_SEQS[probe_condition])

    n_views = len(CASIA_VIEWS)
    matrix = np.full((n_views, n_views), np.nan)
    for pi, pv in enumerate(CASIA_VIEWS):
        p_idx = np.flatnonzero(probe_mask & (view_arr == pv))
        if p_idx.size == 0:
            raise MissingView(f"no {probe_condition} probes with view {pv}")
        for gi, gv in enumerate(CASIA_VIEWS):
            if gv == pv:
                continue
            g_idx = np.flatnonzero(gal_mask & (view_arr == gv))
            if g_idx.size == 0:
                raise MissingView(f"no NM#1-4 gallery entries with view {gv}")
            dist = distance_matrix(feats[p_idx], feats[g_idx])
            nearest = dist.argmin(axis=1)  # first minimum: stable tie-break
            matrix[pi, gi] = float(np.mean(pids[g_idx][nearest] == pids[p_idx]))
    per_view = np.nanmean(matrix, axis=1)
    by_view = dict(zip(CASIA_VIEWS, per_view))
    frontal = float(np.mean([by_view[v] for v in FRONTAL_VIEWS]))
    oblique = float(np.mean([by_view[v] for v in OBLIQUE_VIEWS]))
    lateral = float(np.mean([by_view[v] for v in LATERAL_VIEWS]))
    return CasiaReport(
        probe_condition=probe_condition,
        matrix=matrix,
        per_view=per_view,
        frontal=frontal,
        oblique=oblique,
        lateral=lateral,
        mean=float(per_view.mean()),
    )


def aggregate_external_features(frame_features, mode="frame-mean", chunk_size=None):
    """Pool per-frame feature vectors into one tracklet vector.

    ``frame-mean`` averages all frames.  ``chunk-mean`` splits the frames
    into non-overlapping consecutive chunks of ``chunk_size``, drops an
    incomplete final chunk unless it is the only one, averages within each
    chunk and then across chunks.
    """
    feats = np.asarray(frame_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[0] == 0:
        raise EmptyInput("no frame features to aggregate")
    if mode == "frame-mean":
        return feats.mean(axis=0)
    if mode != "chunk-mean":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if chunk_size is None or chunk_size < 1:
        raise ValueError("chunk-mean needs a positive chunk_size")
    t = feats.shape[0]
    n_chunks = t // chunk_size
    if n_chunks == 0:  # a single incomplete chunk is kept
        return feats.mean(axis=0)
    chunks = feats[: n_chunks * chunk_size].reshape(n_chunks, chunk_size, -1)
    return chunks.mean(axis=1).mean(axis=0)
