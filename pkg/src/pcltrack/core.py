"""Domain types, box geometry and MOTChallenge text I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np


class MOTFormatError(ValueError):
    """Raised for malformed MOTChallenge lines."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in (left, top, right, bottom) pixel coordinates."""

    left: float
    top: float
    right: float
    bottom: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.right > self.left and self.bottom > self.top):
            raise ValueError(f"degenerate box {self}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @classmethod
    def from_ltwh(cls, left, top, width, height, confidence=1.0) -> "Box":
        return cls(left, top, left + width, top + height, confidence)

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: Sequence[Box], boxes_b: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([(x.left, x.top, x.right, x.bottom) for x in boxes_a])
    b = np.array([(x.left, x.top, x.right, x.bottom) for x in boxes_b])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass(frozen=True)
class Detection:
    """One object in one frame. The null object has no box and no appearance.

    ``gt_identity`` is evaluation metadata; no loss or model code reads it.
    """

    frame: int
    local_index: int
    box: Optional[Box] = None
    appearance: Optional[np.ndarray] = field(default=None, compare=False)
    is_null: bool = False
    gt_identity: Optional[int] = None

    def __post_init__(self):
        if self.is_null and (self.box is not None or self.appearance is not None):
            raise ValueError("null detection cannot carry a box or appearance")
        if not self.is_null and self.box is None:
            raise ValueError("real detection requires a box")
        if self.appearance is not None:
            arr = np.asarray(self.appearance, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "appearance", arr)


@dataclass(frozen=True)
class FrameObjects:
    """Detections of one frame; the null object is always last."""

    frame: int
    detections: Tuple[Detection, ...]

    def __post_init__(self):
        dets = tuple(self.detections)
        object.__setattr__(self, "detections", dets)
        if not dets or not dets[-1].is_null:
            raise ValueError(f"frame {self.frame}: null object must be last")
        for pos, d in enumerate(dets):
            if d.local_index != pos or d.frame != self.frame:
                raise ValueError(f"frame {self.frame}: detection {pos} is mislabelled")
            if d.is_null and pos != len(dets) - 1:
                raise ValueError(f"frame {self.frame}: more than one null object")

    @classmethod
    def build(cls, frame: int, boxes: Iterable[Box], appearances=None, identities=None) -> "FrameObjects":
        boxes = list(boxes)
        appearances = list(appearances) if appearances is not None else [None] * len(boxes)
        identities = list(identities) if identities is not None else [None] * len(boxes)
        dets = [
            Detection(frame, i, box=b, appearance=a, gt_identity=g)
            for i, (b, a, g) in enumerate(zip(boxes, appearances, identities))
        ]
        dets.append(Detection(frame, len(dets), is_null=True))
        return cls(frame, tuple(dets))

    @property
    def n(self) -> int:
        """N_t, object count including null."""
        return len(self.detections)

    @property
    def real(self) -> Tuple[Detection, ...]:
        return self.detections[:-1]

    @property
    def null_index(self) -> int:
        return len(self.detections) - 1

    def with_detections(self, keep: Iterable[Detection]) -> "FrameObjects":
        """Rebuild the frame from a subset of its real detections."""
        keep = list(keep)
        return FrameObjects.build(
            self.frame,
            [d.box for d in keep],
            [d.appearance for d in keep],
            [d.gt_identity for d in keep],
        )


@dataclass(frozen=True)
class Clip:
    frames: Tuple[FrameObjects, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 2:
            raise ValueError("a clip needs at least two frames")
        for a, b in zip(frames, frames[1:]):
            if b.frame != a.frame + 1:
                raise ValueError(f"clip frames not contiguous at {a.frame}->{b.frame}")

    def __len__(self):
        return len(self.frames)

    @property
    def start(self) -> int:
        return self.frames[0].frame

    def at(self, frame: int) -> FrameObjects:
        return self.frames[frame - self.start]

    def window(self, start: int, length: int) -> "Clip":
        """Sub-clip of ``length`` frames starting at absolute frame ``start``."""
        i = start - self.start
        return Clip(self.frames[i : i + length])


def fill_frames(frames: Sequence[FrameObjects], first: Optional[int] = None, last: Optional[int] = None) -> List[FrameObjects]:
    """Insert null-only frames so that frame indices are contiguous."""
    by_frame = {f.frame: f for f in frames}
    if not by_frame and (first is None or last is None):
        return []
    lo = min(by_frame) if first is None else first
    hi = max(by_frame) if last is None else last
    return [by_frame.get(t) or FrameObjects.build(t, []) for t in range(lo, hi + 1)]


def load_mot(path) -> List[FrameObjects]:
    """Parse a MOTChallenge text file into frames sorted by index.

    Columns past the tenth, when present, are read as the appearance vector
    of the detection (the usual "detections + features" layout).
    """
    rows = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 6:
                raise MOTFormatError(f"{path}:{lineno}: expected at least 6 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                ident = int(float(parts[1]))
                left, top, w, h = (float(v) for v in parts[2:6])
                conf = float(parts[6]) if len(parts) > 6 else 1.0
                feats = [float(v) for v in parts[10:]]
            except ValueError as exc:
                raise MOTFormatError(f"{path}:{lineno}: {exc}") from None
            if w <= 0 or h <= 0:
                raise MOTFormatError(f"{path}:{lineno}: non-positive box size")
            # MOT uses -1 or values >1 for "unknown" confidence in gt files
            conf = conf if 0.0 <= conf <= 1.0 else 1.0
            box = Box.from_ltwh(left, top, w, h, conf)
            app = np.array(feats) if feats else None
            rows.setdefault(frame, []).append((box, app, ident if ident >= 0 else None))
    out = []
    for frame in sorted(rows):
        boxes, apps, ids = zip(*rows[frame])
        out.append(FrameObjects.build(frame, boxes, apps, ids))
    return out


def write_mot(tracks: Iterable[Tuple[int, int, Box]], path) -> None:
    """Write (frame, track_id, box) triples as MOTChallenge text, sorted by frame then id."""
    lines = []
    for frame, tid, box in sorted(tracks, key=lambda x: (x[0], x[1])):
        if tid < 0:
            raise ValueError(f"negative track id {tid}")
        lines.append(
            f"{frame},{tid},{box.left:.2f},{box.top:.2f},{box.width:.2f},{box.height:.2f},"
            f"{box.confidence:.4f},-1,-1,-1\n"
        )
    with open(path, "w") as fh:
        fh.writelines(lines)


def write_detections(frames: Iterable[FrameObjects], path, with_ids: bool = False, with_features: bool = True) -> None:
    """Dump detections as MOT text; ids become -1 unless ``with_ids``."""
    with open(path, "w") as fh:
        for f in frames:
            for d in f.real:
                b = d.box
                ident = d.gt_identity if (with_ids and d.gt_identity is not None) else -1
                row = (
                    f"{f.frame},{ident},{b.left:.2f},{b.top:.2f},{b.width:.2f},{b.height:.2f},"
                    f"{b.confidence:.4f},-1,-1,-1"
                )
                if with_features and d.appearance is not None:
                    row += "," + ",".join(f"{v:.6f}" for v in d.appearance)
                fh.write(row + "\n")


def frames_to_tracks(frames: Iterable[FrameObjects]) -> List[Tuple[int, int, Box]]:
    """Ground-truth (frame, id, box) triples from identity-labelled frames."""
    return [(f.frame, d.gt_identity, d.box) for f in frames for d in f.real if d.gt_identity is not None]


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
