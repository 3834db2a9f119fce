"""Identity metrics and the two ablation protocols (match accuracy by distance, occlusion sweep)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Box, Clip, FrameObjects, frames_to_tracks, iou_matrix
from .model import ModelParams, embed_frame, match_matrix
from .sim import Scene, extend_occlusions

DISTANCE_BUCKETS: Tuple[Tuple[int, int], ...] = ((1, 4), (5, 8), (9, 16), (17, 32), (33, 48))
SWEEP_L = (0, 10, 20, 30, 40, 50, 60)

Track = Tuple[int, int, Box]


@dataclass
class EvalReport:
    idf1: float = 0.0
    idsw: int = 0
    accuracy: Dict[str, float] = field(default_factory=dict)
    idf1_by_L: Dict[str, Dict[int, float]] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, str, str]]:
        out = [("idf1", "", f"{self.idf1:.6f}"), ("idsw", "", str(self.idsw))]
        for bucket, acc in self.accuracy.items():
            out.append(("match_accuracy", bucket, f"{acc:.4f}"))
        for tracker, curve in self.idf1_by_L.items():
            for L, v in curve.items():
                out.append((f"idf1_L[{tracker}]", str(L), f"{v:.6f}"))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "key", "value"])
            w.writerows(self.rows())

    def summary(self) -> str:
        lines = [f"IDF1  {self.idf1 * 100:6.2f}", f"IDsw  {self.idsw:6d}"]
        if self.accuracy:
            lines.append("match accuracy by |t-r|: " + "  ".join(f"{k}: {v:5.1f}" for k, v in self.accuracy.items()))
        for tracker, curve in self.idf1_by_L.items():
            lines.append(f"IDF1 vs L [{tracker}]: " + "  ".join(f"L={L}: {v * 100:5.1f}" for L, v in curve.items()))
        return "\n".join(lines)


def _by_frame(tracks: Iterable[Track]) -> Dict[int, List[Tuple[int, Box]]]:
    out: Dict[int, List[Tuple[int, Box]]] = {}
    for frame, tid, box in tracks:
        out.setdefault(frame, []).append((tid, box))
    return out


def idf1(gt, pred: Sequence[Track], threshold: float = 0.5) -> Tuple[float, int]:
    """IDF1 under the optimal one-to-one gt/pred identity mapping, plus ID switches.

    ``gt`` is a Scene, a list of FrameObjects or (frame, id, box) triples.
    A gt and a predicted box may correspond in a frame when IoU >= threshold.
    """
    span = None
    if isinstance(gt, Scene):
        gt = gt.clip.frames
    if gt and isinstance(gt[0], FrameObjects):
        gt_tracks = frames_to_tracks(gt)
        span = (gt[0].frame, gt[-1].frame)
    else:
        gt_tracks = list(gt)
        if gt_tracks:
            span = (min(f for f, _, _ in gt_tracks), max(f for f, _, _ in gt_tracks))
    pred = list(pred)
    if not gt_tracks and not pred:
        return 1.0, 0
    g_frames, p_frames = _by_frame(gt_tracks), _by_frame(pred)
    if span is not None:
        stray = sorted(f for f in p_frames if not span[0] <= f <= span[1])
        if stray:
            raise ValueError(f"prediction frame {stray[0]} outside the ground-truth range {span[0]}..{span[1]}")
    g_ids = sorted({t for _, t, _ in gt_tracks})
    p_ids = sorted({t for _, t, _ in pred})
    gi = {t: k for k, t in enumerate(g_ids)}
    pi = {t: k for k, t in enumerate(p_ids)}
    overlap = np.zeros((len(g_ids), len(p_ids)))
    idsw = 0
    last: Dict[int, int] = {}
    for frame in sorted(g_frames):
        g = g_frames[frame]
        p = p_frames.get(frame, [])
        if not p:
            continue
        ious = iou_matrix([b for _, b in g], [b for _, b in p])
        hit = ious >= threshold
        for a, b in zip(*np.nonzero(hit)):
            overlap[gi[g[a][0]], pi[p[b][0]]] += 1
        # per-frame CLEAR-style correspondence for switch counting
        rows, cols = linear_sum_assignment(np.where(hit, ious, 0.0), maximize=True)
        for a, b in zip(rows, cols):
            if not hit[a, b]:
                continue
            gid, pid = g[a][0], p[b][0]
            if gid in last and last[gid] != pid:
                idsw += 1
            last[gid] = pid
    idtp = 0.0
    if overlap.size:
        r, c = linear_sum_assignment(overlap, maximize=True)
        idtp = overlap[r, c].sum()
    denom = len(gt_tracks) + len(pred)
    return (2 * idtp / denom if denom else 1.0), idsw


Matcher = Callable[[FrameObjects, FrameObjects], np.ndarray]


def model_matcher(params: ModelParams) -> Matcher:
    cache: Dict[int, object] = {}

    def emb(f: FrameObjects):
        if f.frame not in cache:
            cache[f.frame] = embed_frame(params, f)
        return cache[f.frame]

    return lambda a, b: match_matrix(emb(a), emb(b)).P


def _bucket_name(lo, hi):
    return f"{lo}-{hi}"


def match_accuracy_by_distance(
    params: Optional[ModelParams],
    scene,
    buckets: Sequence[Tuple[int, int]] = DISTANCE_BUCKETS,
    clip_length: int = 48,
    matcher: Optional[Matcher] = None,
) -> Dict[str, float]:
    """Percentage of objects whose argmax match at distance |t - r| is correct.

    Every real object of frame t is paired with every later frame r of the
    same non-overlapping window; the correct target is the detection with the
    same ground-truth identity, or null when that identity is absent at r.
    Empty buckets are omitted.
    """
    clip = scene.clip if isinstance(scene, Scene) else scene
    matcher = matcher or model_matcher(params)
    hits = {b: 0 for b in buckets}
    total = {b: 0 for b in buckets}
    frames = clip.frames
    for w0 in range(0, len(frames) - 1, clip_length):
        window = frames[w0 : w0 + clip_length]
        for a in range(len(window)):
            fa = window[a]
            if not fa.real:
                continue
            for b in range(a + 1, len(window)):
                dist = b - a
                bucket = next((bk for bk in buckets if bk[0] <= dist <= bk[1]), None)
                if bucket is None:
                    continue
                fb = window[b]
                P = matcher(fa, fb)
                where = {d.gt_identity: d.local_index for d in fb.real}
                best = np.argmax(P[: len(fa.real)], axis=1)
                for d, j in zip(fa.real, best):
                    target = where.get(d.gt_identity, fb.null_index)
                    hits[bucket] += int(j == target)
                    total[bucket] += 1
    return {_bucket_name(*b): 100.0 * hits[b] / total[b] for b in buckets if total[b]}


def occlusion_sweep(
    params: Optional[ModelParams],
    scene: Scene,
    L_values: Sequence[int] = SWEEP_L,
    tracker_config=None,
    include_baseline: bool = True,
) -> Dict[str, Dict[int, float]]:
    """IDF1 of the learned tracker (and the IoU-only baseline) after extending occlusions to L."""
    from dataclasses import replace

    from .track import TrackerConfig, run_tracker

    cfg = tracker_config or TrackerConfig()
    variants = {}
    if params is not None:
        variants["model"] = (params, cfg)
    if include_baseline:
        variants["iou"] = (None, replace(cfg, blend_weight=0.0))
    curves: Dict[str, Dict[int, float]] = {k: {} for k in variants}
    for L in L_values:
        ext = extend_occlusions(scene, L)
        for name, (p, c) in variants.items():
            tracks, _ = run_tracker(ext.clip.frames, p, c)
            curves[name][L] = idf1(ext, tracks)[0]
    return curves
