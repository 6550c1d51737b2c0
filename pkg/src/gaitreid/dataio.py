"""Manifests, image codecs, the embedding store, and dataset loading.

Manifests are JSON-lines, one tracklet record per line, with frame paths
relative to a dataset root.  Embeddings live in a small binary store
(magic ``GBE1``) holding 32-bit little-endian vectors keyed by tracklet
id.  Silhouettes and label maps are single-channel PGM (written here) or
PNG (read via Pillow).

Writers go through a temp file plus atomic rename, so concurrent readers
see either the old or the new complete file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    DimMismatch,
    DuplicateId,
    LayoutError,
    MalformedLine,
    Truncated,
)

STORE_MAGIC = b"GBE1"
STORE_VERSION = 1

CASIA_VIEWS = tuple(range(0, 181, 18))
CASIA_CONDITIONS = {"nm": 6, "bg": 2, "cl": 2}
CASIA_TRAIN_MAX_ID = 74


@dataclass
class TrackletRecord:
    tracklet_id: str
    person_id: str
    camera_id: str
    split: str
    frames: list = field(default_factory=list)
    view: int | None = None
    condition: str | None = None
    seq: int | None = None

    def to_dict(self):
        d = {
            "tracklet_id": self.tracklet_id,
            "person_id": self.person_id,
            "camera_id": self.camera_id,
            "split": self.split,
            "frames": list(self.frames),
        }
        if self.view is not None:
            d["view"] = self.view
        if self.condition is not None:
            d["condition"] = self.condition
        if self.seq is not None:
            d["seq"] = self.seq
        return d


_REQUIRED_FIELDS = ("tracklet_id", "person_id", "camera_id", "split", "frames")


def _record_from_dict(d, lineno):
    for key in _REQUIRED_FIELDS:
        if key not in d:
            raise MalformedLine(lineno, f"missing field {key!r}")
    frames = d["frames"]
    if not isinstance(frames, list) or not frames:
        raise MalformedLine(lineno, "frames must be a non-empty list")
    for key in ("tracklet_id", "person_id", "camera_id"):
        if not isinstance(d[key], str) or not d[key]:
            raise MalformedLine(lineno, f"{key} must be a non-empty string")
    if d["split"] not in ("train", "val", "test"):
        raise MalformedLine(lineno, f"unknown split {d['split']!r}")
    return TrackletRecord(
        tracklet_id=d["tracklet_id"],
        person_id=d["person_id"],
        camera_id=d["camera_id"],
        split=d["split"],
        frames=[str(f) for f in frames],
        view=int(d["view"]) if "view" in d else None,
        condition=str(d["condition"]) if "condition" in d else None,
        seq=int(d["seq"]) if "seq" in d else None,
    )


def parse_manifest(path):
    """Read a JSON-lines manifest, preserving record order."""
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(lineno, f"invalid JSON ({e.msg})") from e
            if not isinstance(d, dict):
                raise MalformedLine(lineno, "expected a JSON object")
            rec = _record_from_dict(d, lineno)
            if rec.tracklet_id in seen:
                raise DuplicateId(f"duplicate tracklet_id {rec.tracklet_id!r} at line {lineno}")
            seen.add(rec.tracklet_id)
            records.append(rec)
    return records


def atomic_write_bytes(path, data):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, records):
    seen = set()
    for rec in records:
        if rec.tracklet_id in seen:
            raise DuplicateId(f"duplicate tracklet_id {rec.tracklet_id!r}")
        seen.add(rec.tracklet_id)
    lines = [json.dumps(rec.to_dict(), sort_keys=True) for rec in records]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


# --- images ------------------------------------------------------------------


def write_pgm(path, array, maxval=255):
    """Write a 2-D uint8 array as binary PGM (P5)."""
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + arr.tobytes())


def pgm_bytes(array, maxval=255):
    arr = np.asarray(array, dtype=np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + arr.tobytes()


def _read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise BadMagic(f"{path}: not a binary PGM")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise Truncated(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval > 255:
        raise BadMagic(f"{path}: 16-bit PGM not supported")
    pixels = data[pos : pos + w * h]
    if len(pixels) < w * h:
        raise Truncated(f"{path}: expected {w * h} pixels, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def read_image(path):
    """Read a single-channel 8-bit PGM or PNG into a uint8 array."""
    path = str(path)
    if path.lower().endswith((".pgm", ".ppm")):
        return _read_pgm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def read_silhouette(path):
    """Read a binary silhouette image (nonzero = foreground)."""
    return read_image(path) > 0


def silhouette_to_u8(sil):
    return np.where(np.asarray(sil).astype(bool), 255, 0).astype(np.uint8)


# --- embedding store ----------------------------------------------------------


def write_embeddings(path, entries):
    """Write (tracklet_id, vector) pairs to a GBE1 store.

    Vectors are stored as 32-bit little-endian floats; all must share one
    dimensionality and ids must be unique.
    """
    entries = [(str(tid), np.asarray(vec, dtype="<f4").ravel()) for tid, vec in entries]
    if not entries:
        raise ValueError("refusing to write an empty embedding store")
    dim = entries[0][1].size
    seen = set()
    for tid, vec in entries:
        if vec.size != dim:
            raise DimMismatch(f"{tid!r}: vector length {vec.size} != {dim}")
        if tid in seen:
            raise DuplicateId(f"duplicate tracklet_id {tid!r}")
        seen.add(tid)
    parts = [STORE_MAGIC, struct.pack("<III", STORE_VERSION, dim, len(entries))]
    for tid, vec in entries:
        raw = tid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(vec.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_embeddings(path):
    """Read a GBE1 store back into (tracklet_id, float32 vector) pairs."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STORE_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise Truncated(f"{path}: header cut short")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != STORE_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    pos = 16
    entries = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise Truncated(f"{path}: record header past end of file")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + nlen + 4 * dim > len(data):
            raise Truncated(f"{path}: record data past end of file")
        tid = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).copy()
        pos += 4 * dim
        entries.append((tid, vec))
    if pos != len(data):
        raise Truncated(f"{path}: {len(data) - pos} trailing bytes")
    return entries


# --- CASIA-B layout -----------------------------------------------------------


def build_casia_manifest(root, out_path=None):
    """Build a manifest from an ID/COND-SEQ/VIEW directory tree.

    Expects, per identity, the ten condition-sequence directories
    (nm-01..06, bg-01..02, cl-01..02), each holding the eleven view
    directories 000..180 in 18-degree steps with at least one frame image.
    Identities numbered <= 74 go to the train split, the rest to test.
    """
    root = os.path.abspath(root)
    expected_conds = [
        f"{cond}-{i:02d}" for cond, n in CASIA_CONDITIONS.items() for i in range(1, n + 1)
    ]
    expected_views = [f"{v:03d}" for v in CASIA_VIEWS]
    problems = []
    records = []
    try:
        id_dirs = sorted(e for e in os.listdir(root) if os.path.isdir(os.path.join(root, e)))
    except FileNotFoundError:
        raise LayoutError(f"dataset root {root} does not exist") from None
    if not id_dirs:
        raise LayoutError(f"{root}: no identity directories")
    for pid in id_dirs:
        if not pid.isdigit():
            problems.append(f"{os.path.join(root, pid)}: identity directory must be numeric")
            continue
        split = "train" if int(pid) <= CASIA_TRAIN_MAX_ID else "test"
        for cond_seq in expected_conds:
            cond, seq = cond_seq.split("-")
            cs_dir = os.path.join(root, pid, cond_seq)
            if not os.path.isdir(cs_dir):
                problems.append(f"{cs_dir}: missing condition directory")
                continue
            for view in expected_views:
                v_dir = os.path.join(cs_dir, view)
                if not os.path.isdir(v_dir):
                    problems.append(f"{v_dir}: missing view directory")
                    continue
                frames = sorted(
                    f for f in os.listdir(v_dir) if f.lower().endswith((".png", ".pgm"))
                )
                if not frames:
                    problems.append(f"{v_dir}: no frame images")
                    continue
                rel = [os.path.join(pid, cond_seq, view, f) for f in frames]
                records.append(
                    TrackletRecord(
                        tracklet_id=f"{pid}-{cond_seq}-{view}",
                        person_id=pid,
                        camera_id=view,
                        split=split,
                        frames=rel,
                        view=int(view),
                        condition=cond.upper(),
                        seq=int(seq),
                    )
                )
    if problems:
        raise LayoutError("\n".join(problems))
    if out_path is not None:
        write_manifest(out_path, records)
    return records


# --- in-memory dataset ---------------------------------------------------------


@dataclass
class Tracklet:
    tracklet_id: str
    person_id: str
    camera_id: str
    frames: np.ndarray  # (T, 64, 44) bool
    view: int | None = None
    condition: str | None = None
    seq: int | None = None


class GaitDataset:
    """Silhouette tracklets grouped by identity."""

    def __init__(self, tracklets):
        self.tracklets = list(tracklets)
        self._by_pid = {}
        for t in self.tracklets:
            self._by_pid.setdefault(t.person_id, []).append(t)
        self.identities = sorted(self._by_pid)

    def by_identity(self, person_id):
        return self._by_pid[person_id]

    def __len__(self):
        return len(self.tracklets)

    def __iter__(self):
        return iter(self.tracklets)


def load_silhouette_dataset(manifest_path, root=None, split=None):
    """Load silhouette frames for every record (optionally one split)."""
    if root is None:
        root = os.path.dirname(os.path.abspath(manifest_path))
    records = parse_manifest(manifest_path)
    if split is not None:
        wanted = {split} if isinstance(split, str) else set(split)
        records = [r for r in records if r.split in wanted]
    tracklets = []
    for rec in records:
        frames = np.stack([read_silhouette(os.path.join(root, f)) for f in rec.frames])
        tracklets.append(
            Tracklet(
                tracklet_id=rec.tracklet_id,
                person_id=rec.person_id,
                camera_id=rec.camera_id,
                frames=frames,
                view=rec.view,
                condition=rec.condition,
                seq=rec.seq,
            )
        )
    return GaitDataset(tracklets)
