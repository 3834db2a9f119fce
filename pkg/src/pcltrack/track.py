"""Online tracking with learned tracklet-object similarity blended with IoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Box, Detection, FrameObjects, iou
from .model import EmbeddingMatrix, ModelParams, embed_frame, match_matrix


class TrackerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    M: int = 4
    buffer_frames: int = 30
    new_track_threshold: float = 0.3
    blend_weight: float = 0.5
    prob_floor: float = 1e-12
    solver: str = "optimal"  # or "greedy"
    motion_max_gap: int = 1  # IoU term only for tracklets seen within this many frames

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.buffer_frames < 0:
            raise ValueError("buffer_frames must be >= 0")
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError("blend_weight must be in [0, 1]")
        if self.motion_max_gap < 1:
            raise ValueError("motion_max_gap must be >= 1")
        if self.solver not in ("optimal", "greedy"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class Tracklet:
    track_id: int
    history: List[Tuple[Detection, Optional[EmbeddingMatrix]]]  # newest last; embedding of the detection's whole frame
    last_seen_frame: int
    state: str = "active"

    @property
    def last_box(self) -> Box:
        return self.history[-1][0].box


@dataclass(frozen=True)
class Assignment:
    frame: int
    track_id: int
    detection_index: int
    score: float
    similarity: float
    motion: float
    new: bool


def similarity_from_probs(p_forward: Sequence[float], p_backward: Sequence[float], floor: float = 1e-12) -> float:
    """Mean over history entries of the geometric mean of forward/backward match probabilities."""
    pf = np.maximum(np.asarray(p_forward, dtype=float), floor)
    pb = np.maximum(np.asarray(p_backward, dtype=float), floor)
    return float(np.mean(np.sqrt(pf * pb)))


def tracklet_similarity(tracklet: Tracklet, candidate: Detection, current: EmbeddingMatrix, floor: float = 1e-12) -> float:
    """Similarity between a tracklet and one real detection of the frame embedded as ``current``."""
    if not tracklet.history:
        raise ValueError("empty tracklet")
    if candidate.is_null:
        raise ValueError("candidate must be a real detection")
    pf, pb = [], []
    for det, emb in tracklet.history:
        pf.append(match_matrix(emb, current).P[det.local_index, candidate.local_index])
        pb.append(match_matrix(current, emb).P[candidate.local_index, det.local_index])
    return similarity_from_probs(pf, pb, floor)


class Tracker:
    """Single-video online tracker. Feed frames in increasing order via :meth:`step`."""

    def __init__(self, params: Optional[ModelParams], config: TrackerConfig = TrackerConfig()):
        if params is None and config.blend_weight > 0:
            raise ValueError("a model is required when blend_weight > 0")
        self.params = params
        self.config = config
        self.tracklets: List[Tracklet] = []
        self.next_id = 1
        self.frame: Optional[int] = None

    def _similarity(self, frame: FrameObjects, cur: EmbeddingMatrix) -> np.ndarray:
        """Tracklet x real-detection similarity matrix."""
        n = len(frame.real)
        sim = np.zeros((len(self.tracklets), n))
        if not n or not self.tracklets:
            return sim
        fwd, bwd = {}, {}
        for t in self.tracklets:
            for d, emb in t.history:
                if d.frame not in fwd:
                    fwd[d.frame] = match_matrix(emb, cur).P
                    bwd[d.frame] = match_matrix(cur, emb).P
        for k, t in enumerate(self.tracklets):
            pf = np.array([fwd[d.frame][d.local_index, :n] for d, _ in t.history])
            pb = np.array([bwd[d.frame][:n, d.local_index] for d, _ in t.history])
            pf = np.maximum(pf, self.config.prob_floor)
            pb = np.maximum(pb, self.config.prob_floor)
            sim[k] = np.sqrt(pf * pb).mean(axis=0)
        return sim

    def _motion(self, frame: FrameObjects) -> np.ndarray:
        mot = np.zeros((len(self.tracklets), len(frame.real)))
        for k, t in enumerate(self.tracklets):
            if frame.frame - t.last_seen_frame > self.config.motion_max_gap:
                continue
            for j, d in enumerate(frame.real):
                mot[k, j] = iou(t.last_box, d.box)
        return mot

    def _solve(self, score: np.ndarray) -> List[Tuple[int, int]]:
        thr = self.config.new_track_threshold
        gated = np.where(score >= thr, score, 0.0)
        if self.config.solver == "greedy":
            pairs, used_r, used_c = [], set(), set()
            for flat in np.argsort(-gated, axis=None, kind="stable"):
                r, c = np.unravel_index(flat, gated.shape)
                if gated[r, c] <= 0:
                    break
                if r in used_r or c in used_c:
                    continue
                used_r.add(r)
                used_c.add(c)
                pairs.append((int(r), int(c)))
            return sorted(pairs)
        rows, cols = linear_sum_assignment(gated, maximize=True)
        return [(int(r), int(c)) for r, c in zip(rows, cols) if score[r, c] >= thr and gated[r, c] > 0]

    def step(self, frame: FrameObjects) -> List[Assignment]:
        if self.frame is not None and frame.frame <= self.frame:
            raise TrackerError(f"frame {frame.frame} arrived after frame {self.frame}")
        self.frame = frame.frame
        cfg = self.config
        w = cfg.blend_weight
        n = len(frame.real)
        cur = embed_frame(self.params, frame) if w > 0 else None
        sim = self._similarity(frame, cur) if w > 0 else np.zeros((len(self.tracklets), n))
        mot = self._motion(frame) if w < 1 else np.zeros_like(sim)
        score = w * sim + (1 - w) * mot
        pairs = self._solve(score) if self.tracklets and n else []

        out: List[Assignment] = []
        matched_d = set()
        for k, j in pairs:
            t = self.tracklets[k]
            t.history.append((frame.detections[j], cur))
            del t.history[: -cfg.M]
            t.last_seen_frame = frame.frame
            t.state = "active"
            matched_d.add(j)
            out.append(Assignment(frame.frame, t.track_id, j, float(score[k, j]), float(sim[k, j]), float(mot[k, j]), False))
        for j in range(n):
            if j in matched_d:
                continue
            t = Tracklet(self.next_id, [(frame.detections[j], cur)], frame.frame)
            self.next_id += 1
            self.tracklets.append(t)
            out.append(Assignment(frame.frame, t.track_id, j, 0.0, 0.0, 0.0, True))
        keep = []
        for k, t in enumerate(self.tracklets):
            if t.last_seen_frame != frame.frame:
                t.state = "buffered"
                if frame.frame - t.last_seen_frame > cfg.buffer_frames:
                    continue
            keep.append(t)
        self.tracklets = keep
        out.sort(key=lambda a: a.detection_index)
        return out


def run_tracker(frames: Sequence[FrameObjects], params: Optional[ModelParams], config: TrackerConfig = TrackerConfig()):
    """Track a whole video; returns MOT triples and the per-frame assignment log."""
    tracker = Tracker(params, config)
    tracks, log = [], []
    for f in frames:
        for a in tracker.step(f):
            tracks.append((f.frame, a.track_id, f.detections[a.detection_index].box))
            log.append(a)
    return tracks, log


def write_assignment_log(log: Sequence[Assignment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "track_id", "detection_index", "score", "similarity", "motion", "new"])
        for a in log:
            w.writerow([a.frame, a.track_id, a.detection_index, f"{a.score:.6f}", f"{a.similarity:.6f}", f"{a.motion:.6f}", int(a.new)])
