"""Frames, sequence files, windowing, attended-hand labels and model inputs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence as Seq

import numpy as np

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1
SIDE_NAMES = ("L", "R")

HEADER_MAGIC = "hoigaze-seq"
FPS = 30
DEFAULT_T = 15

# field name -> trailing shape given (N, J)
_VECTOR_FIELDS = ("head_pos", "head_dir", "eye_pos", "gaze_dir", "left_wrist", "right_wrist")
_DIRECTION_FIELDS = ("head_dir", "gaze_dir")
_POSITION_FIELDS = ("head_pos", "eye_pos", "left_wrist", "right_wrist", "left_hand", "right_hand", "objects")
ARRAY_FIELDS = _VECTOR_FIELDS + ("left_hand", "right_hand", "objects")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def side_name(side: int) -> str:
    return SIDE_NAMES[side]


def parse_side(s: str) -> int:
    s = s.strip().upper()
    if s in ("L", "LEFT"):
        return LEFT
    if s in ("R", "RIGHT"):
        return RIGHT
    raise DataError(f"unknown hand side {s!r}")


@dataclass
class Frame:
    head_pos: np.ndarray
    head_dir: np.ndarray
    eye_pos: np.ndarray
    gaze_dir: np.ndarray
    left_wrist: np.ndarray
    right_wrist: np.ndarray
    left_hand: np.ndarray   # N x 3
    right_hand: np.ndarray  # N x 3
    objects: np.ndarray     # J x 3


@dataclass
class Sequence:
    """A recorded sequence stored field-wise; index 0 of every array is time."""

    head_pos: np.ndarray
    head_dir: np.ndarray
    eye_pos: np.ndarray
    gaze_dir: np.ndarray
    left_wrist: np.ndarray
    right_wrist: np.ndarray
    left_hand: np.ndarray
    right_hand: np.ndarray
    objects: np.ndarray
    seq_id: str = ""
    hand_mode: str = "dynamic"

    def __len__(self) -> int:
        return self.head_pos.shape[0]

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self.frame(i)

    @property
    def n_joints(self) -> int:
        return self.left_hand.shape[1]

    @property
    def n_objects(self) -> int:
        return self.objects.shape[1]

    def frame(self, i: int) -> Frame:
        return Frame(**{name: getattr(self, name)[i] for name in ARRAY_FIELDS})

    def frames(self) -> list[Frame]:
        return list(self)

    @classmethod
    def from_frames(cls, frames: Seq[Frame], seq_id: str = "", hand_mode: str = "dynamic") -> "Sequence":
        if not frames:
            raise DataError("no frames")
        arrays = {name: np.stack([np.asarray(getattr(f, name), dtype=float) for f in frames])
                  for name in ARRAY_FIELDS}
        return cls(**arrays, seq_id=seq_id, hand_mode=hand_mode)


@dataclass
class FrameWindow:
    """T consecutive frames of one sequence, stored as arrays of length T."""

    head_pos: np.ndarray
    head_dir: np.ndarray
    eye_pos: np.ndarray
    gaze_dir: np.ndarray
    left_wrist: np.ndarray
    right_wrist: np.ndarray
    left_hand: np.ndarray
    right_hand: np.ndarray
    objects: np.ndarray
    seq_id: str = ""
    start: int = 0

    def __len__(self) -> int:
        return self.head_pos.shape[0]

    @property
    def key(self) -> tuple[str, int]:
        return (self.seq_id, self.start)

    @property
    def frames(self) -> list[Frame]:
        return [Frame(**{name: getattr(self, name)[i] for name in ARRAY_FIELDS}) for i in range(len(self))]


@dataclass
class AttendedLabel:
    per_frame: np.ndarray  # T ints in {LEFT, RIGHT}
    window: int


@dataclass
class DatasetManifest:
    paths: list[Path]
    n_joints: int
    n_objects: int
    fps: int = FPS
    hand_mode: str = "dynamic"
    labels: list[Path] = field(default_factory=list)


# sequence files ----------------------------------------------------------------

def _row_width(n: int, j: int) -> int:
    return 3 * len(_VECTOR_FIELDS) + 6 * n + 3 * j


def parse_header(line: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != HEADER_MAGIC or parts[1] != "v1":
        raise DataError(f"bad sequence header: {line.strip()!r}")
    meta = {}
    for tok in parts[2:]:
        if "=" not in tok:
            raise DataError(f"bad header token {tok!r}")
        k, v = tok.split("=", 1)
        meta[k] = v
    try:
        out = {"N": int(meta["N"]), "J": int(meta["J"]), "fps": int(meta.get("fps", FPS)),
               "hand_mode": meta.get("hand_mode", "dynamic")}
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad sequence header: {line.strip()!r}") from exc
    if out["N"] < 1 or out["J"] < 1:
        raise DataError("header needs N >= 1 and J >= 1")
    if out["hand_mode"] not in ("dynamic", "static"):
        raise DataError(f"unknown hand_mode {out['hand_mode']!r}")
    return out


def _renormalise(v: np.ndarray, what: str, path) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1)
    bad = np.abs(norm - 1.0) > 1e-2
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"{path}: frame {i}: {what} has norm {norm[i]:.4f}, not a unit vector")
    return v / norm[:, None]


def load_sequence(path, n_joints: int | None = None, n_objects: int | None = None) -> Sequence:
    """Read a sequence file; direction fields are renormalised to unit length."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DataError(f"{path}: no frames")
    meta = parse_header(lines[0])
    n, j = meta["N"], meta["J"]
    if n_joints is not None and n != n_joints:
        raise DataError(f"{path}: header N={n} but expected N={n_joints}")
    if n_objects is not None and j != n_objects:
        raise DataError(f"{path}: header J={j} but expected J={n_objects}")
    width = _row_width(n, j)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != width:
            raise DataError(f"{path}: line {lineno}: expected {width} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no frames")
    data = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite value")
    f = data.shape[0]
    cols = {}
    c = 0
    for name in _VECTOR_FIELDS:
        cols[name] = data[:, c:c + 3]
        c += 3
    cols["left_hand"] = data[:, c:c + 3 * n].reshape(f, n, 3)
    c += 3 * n
    cols["right_hand"] = data[:, c:c + 3 * n].reshape(f, n, 3)
    c += 3 * n
    cols["objects"] = data[:, c:c + 3 * j].reshape(f, j, 3)
    for name in _DIRECTION_FIELDS:
        cols[name] = _renormalise(cols[name], name, path)
    return Sequence(**cols, seq_id=path.stem, hand_mode=meta["hand_mode"])


def format_row(values: np.ndarray) -> str:
    return " ".join("%.9g" % v for v in np.asarray(values, dtype=np.float32).tolist())


def write_sequence(path, seq: Sequence) -> None:
    path = Path(path)
    n, j = seq.n_joints, seq.n_objects
    f = len(seq)
    flat = np.concatenate([getattr(seq, name).reshape(f, -1) for name in ARRAY_FIELDS], axis=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{HEADER_MAGIC} v1 N={n} J={j} fps={FPS} hand_mode={seq.hand_mode}\n")
        for row in flat:
            fh.write(format_row(row))
            fh.write("\n")


def read_manifest(path) -> list[Path]:
    """Sequence paths listed one per line; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def write_manifest(path, seq_paths: Seq, comment: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for p in seq_paths:
            p = Path(p)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            fh.write(f"{p.as_posix()}\n")


def load_manifest(path) -> list[Sequence]:
    """Load every sequence of a manifest, checking that all share N and J."""
    seqs = []
    n = j = None
    for p in read_manifest(path):
        s = load_sequence(p, n, j)
        n, j = s.n_joints, s.n_objects
        seqs.append(s)
    return seqs


def read_labels(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([parse_side(line) for line in fh if line.strip()], dtype=int)


def write_labels(path, sides: Seq[int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sides:
            fh.write(SIDE_NAMES[int(s)] + "\n")


# windows -----------------------------------------------------------------------

def split_windows(seq: Sequence, T: int = DEFAULT_T, stride: int = 1) -> list[FrameWindow]:
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be positive")
    if len(seq) < T:
        log.warning("sequence %s has %d frames, fewer than T=%d; no windows", seq.seq_id, len(seq), T)
        return []
    out = []
    for start in range(0, len(seq) - T + 1, stride):
        arrays = {name: getattr(seq, name)[start:start + T] for name in ARRAY_FIELDS}
        out.append(FrameWindow(**arrays, seq_id=seq.seq_id, start=start))
    return out


def normalize_window(window: FrameWindow) -> FrameWindow:
    """Translate positions so that the head sits at the origin in the first frame."""
    origin = window.head_pos[0].copy()
    changes = {name: getattr(window, name) - origin for name in _POSITION_FIELDS}
    return replace(window, **changes)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def hand_angles(window: FrameWindow) -> np.ndarray:
    """T x 2 angles (radians) between gaze and the eye-to-hand-centre directions."""
    out = np.empty((len(window), 2))
    gaze = _unit(window.gaze_dir)
    for side, joints in ((LEFT, window.left_hand), (RIGHT, window.right_hand)):
        d = joints.mean(axis=1) - window.eye_pos
        dist = np.linalg.norm(d, axis=-1)
        ok = dist >= 1e-9
        cos = np.einsum("ij,ij->i", gaze[ok], d[ok] / dist[ok, None])
        ang = np.full(len(window), math.pi)
        ang[ok] = np.arccos(np.clip(cos, -1.0, 1.0))
        out[:, side] = ang
    return out


def majority_side(per_frame: np.ndarray) -> int:
    n_left = int(np.sum(per_frame == LEFT))
    return LEFT if n_left > len(per_frame) - n_left else RIGHT


def label_attended_hand(window: FrameWindow) -> AttendedLabel:
    ang = hand_angles(window)
    per_frame = np.where(ang[:, RIGHT] < ang[:, LEFT], RIGHT, LEFT)
    return AttendedLabel(per_frame=per_frame, window=majority_side(per_frame))


def attended_joints(window: FrameWindow, side: int) -> np.ndarray:
    return window.left_hand if side == LEFT else window.right_hand


def nearest_objects(window: FrameWindow, attended_side: int, k: int = 1) -> list[int]:
    """Indices of the k objects closest on average to the attended hand's joints."""
    j = window.objects.shape[1]
    if k > j:
        raise ValueError(f"asked for {k} objects but the window has {j}")
    if k <= 0:
        return []
    joints = attended_joints(window, attended_side)                   # T x N x 3
    diff = joints[:, :, None, :] - window.objects[:, None, :, :]      # T x N x J x 3
    score = np.linalg.norm(diff, axis=-1).mean(axis=(0, 1))
    order = np.argsort(score, kind="stable")
    return [int(i) for i in order[:k]]


def build_recognizer_inputs(window: FrameWindow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Head directions (3 x T) and both hand graphs (3 x (N+3) x T)."""
    shared = np.stack([window.head_pos, window.left_wrist, window.right_wrist], axis=1)  # T x 3 x 3
    lh = np.concatenate([shared, window.left_hand], axis=1)
    rh = np.concatenate([shared, window.right_hand], axis=1)
    return window.head_dir.T.copy(), lh.transpose(2, 1, 0).copy(), rh.transpose(2, 1, 0).copy()


def build_estimator_input(window: FrameWindow, attended_side: int, object_indices: Seq[int]) -> np.ndarray:
    """Attended-hand graph with head, wrists, hand joints and chosen objects: 3 x (N+3+K) x T."""
    parts = [window.head_pos[:, None], window.left_wrist[:, None], window.right_wrist[:, None],
             attended_joints(window, attended_side)]
    idx = list(object_indices)
    if idx:
        parts.append(window.objects[:, idx])
    return np.concatenate(parts, axis=1).transpose(2, 1, 0).copy()


def windows_from_sequences(seqs: Seq[Sequence], T: int = DEFAULT_T, stride: int = 1,
                           normalise: bool = True) -> list[FrameWindow]:
    out = []
    for s in seqs:
        for w in split_windows(s, T, stride):
            out.append(normalize_window(w) if normalise else w)
    out.sort(key=lambda w: w.key)
    return out
