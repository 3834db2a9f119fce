"""Deterministic synthetic scenes with ground-truth identities and occlusions."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .core import Box, Clip, FrameObjects, fill_frames


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    num_identities: int = 10
    num_frames: int = 96
    arena: Tuple[float, float] = (640.0, 480.0)
    speed_range: Tuple[float, float] = (0.5, 3.0)
    appearance_dim: int = 8
    appearance_noise: float = 0.1
    box_jitter: float = 0.5
    occlusion_rate: float = 0.5
    occlusion_length_range: Tuple[int, int] = (3, 12)
    entry_exit: bool = False
    seed: int = 0
    box_size_range: Tuple[float, float] = (24.0, 40.0)
    # innovation std-dev of an AR(1) "pose" component added to the appearance;
    # its correlation over a gap g is (1 - drift**2) ** (g / 2). 0 keeps
    # appearance a fixed latent plus noise. The pose has std-dev drift_scale and
    # lives in the last drift_dims coordinates (0 means all of them).
    appearance_drift: float = 0.0
    drift_scale: float = 1.0
    drift_dims: int = 0
    turn_prob: float = 0.02

    def validate(self):
        if self.num_identities < 1:
            raise SceneConfigError("num_identities must be >= 1")
        if self.num_frames < 2:
            raise SceneConfigError("num_frames must be >= 2")
        lo, hi = self.occlusion_length_range
        if lo > hi or lo < 1:
            raise SceneConfigError(f"bad occlusion_length_range {self.occlusion_length_range}")
        if min(self.appearance_noise, self.box_jitter, self.appearance_drift) < 0:
            raise SceneConfigError("noise scales must be non-negative")
        if self.appearance_drift > 1:
            raise SceneConfigError("appearance_drift must be <= 1")
        if self.drift_scale < 0 or not 0 <= self.drift_dims <= self.appearance_dim:
            raise SceneConfigError("drift_scale must be >= 0 and drift_dims within appearance_dim")
        if self.speed_range[0] > self.speed_range[1] or self.speed_range[0] < 0:
            raise SceneConfigError(f"bad speed_range {self.speed_range}")
        w, h = self.arena
        smax = self.box_size_range[1]
        if w <= 2 * smax or h <= 4 * smax:
            raise SceneConfigError(f"arena {self.arena} too small for boxes of width up to {smax}")
        if self.num_identities * (smax * 2 * smax) > w * h:
            raise SceneConfigError(
                f"arena {self.arena} too small to place {self.num_identities} identities without full overlap"
            )


@dataclass(frozen=True)
class Scene:
    clip: Clip
    gt_occlusions: Tuple[Tuple[int, int, int], ...]  # (identity, start, end) with end exclusive
    config: Optional[SceneConfig] = None

    @property
    def frames(self):
        return self.clip.frames


def _trajectories(cfg: SceneConfig, rng: np.random.Generator):
    """Clean box tracks, shape (identities, frames, 4) as (l, t, r, b)."""
    W, H = cfg.arena
    n, T = cfg.num_identities, cfg.num_frames
    widths = rng.uniform(*cfg.box_size_range, size=n)
    heights = 2.0 * widths
    cx = rng.uniform(widths / 2, W - widths / 2)
    cy = rng.uniform(heights / 2, H - heights / 2)
    angle = rng.uniform(0, 2 * np.pi, size=n)
    speed = rng.uniform(*cfg.speed_range, size=n)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    out = np.empty((n, T, 4))
    for t in range(T):
        out[:, t] = np.stack([cx - widths / 2, cy - heights / 2, cx + widths / 2, cy + heights / 2], axis=1)
        turn = rng.random(n) < cfg.turn_prob
        new_angle = rng.uniform(0, 2 * np.pi, size=n)
        vx = np.where(turn, speed * np.cos(new_angle), vx)
        vy = np.where(turn, speed * np.sin(new_angle), vy)
        cx, cy = cx + vx, cy + vy
        # reflect off the arena walls
        lo_x, hi_x = widths / 2, W - widths / 2
        lo_y, hi_y = heights / 2, H - heights / 2
        hit = (cx < lo_x) | (cx > hi_x)
        cx = np.where(cx < lo_x, 2 * lo_x - cx, np.where(cx > hi_x, 2 * hi_x - cx, cx))
        vx = np.where(hit, -vx, vx)
        hit = (cy < lo_y) | (cy > hi_y)
        cy = np.where(cy < lo_y, 2 * lo_y - cy, np.where(cy > hi_y, 2 * hi_y - cy, cy))
        vy = np.where(hit, -vy, vy)
    return out


def _sample_occlusions(cfg: SceneConfig, rng: np.random.Generator, spans):
    occ = []
    lo, hi = cfg.occlusion_length_range
    for ident, (first, last) in enumerate(spans):
        count = rng.poisson(cfg.occlusion_rate) if cfg.occlusion_rate > 0 else 0
        taken: List[Tuple[int, int]] = []
        for _ in range(count):
            length = int(rng.integers(lo, hi + 1))
            # keep the identity visible on its first frame
            latest = last - length + 1
            if latest <= first:
                continue
            start = int(rng.integers(first + 1, latest + 1))
            end = start + length
            # one frame of visibility between occlusions of the same identity
            if any(start <= e and s <= end for s, e in taken):
                continue
            taken.append((start, end))
        occ.extend((ident + 1, s, e) for s, e in sorted(taken))
    return occ


def generate_scene(config: SceneConfig) -> Scene:
    """Simulate a scene. Identities are numbered from 1, frames from 1."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, T = config.num_identities, config.num_frames
    tracks = _trajectories(config, rng)
    latent = rng.normal(size=(n, config.appearance_dim))
    pose = np.zeros((T, n, config.appearance_dim))
    if config.appearance_drift > 0:
        d = config.appearance_drift
        pose[0] = rng.normal(size=(n, config.appearance_dim))
        steps = rng.normal(size=(T, n, config.appearance_dim))
        for t in range(1, T):
            pose[t] = np.sqrt(1 - d * d) * pose[t - 1] + d * steps[t]
        pose *= config.drift_scale
        if config.drift_dims:
            pose[:, :, : config.appearance_dim - config.drift_dims] = 0.0
    noise = rng.normal(size=(T, n, config.appearance_dim)) * config.appearance_noise
    jitter = rng.normal(size=(T, n, 4)) * config.box_jitter

    if config.entry_exit:
        spans = []
        for _ in range(n):
            a, b = sorted(int(x) for x in rng.integers(1, T + 1, size=2))
            spans.append((a, max(b, a + 1)) if a < T else (T - 1, T))
    else:
        spans = [(1, T)] * n
    occlusions = _sample_occlusions(config, rng, spans)
    hidden = np.zeros((n, T + 1), dtype=bool)
    for ident, s, e in occlusions:
        hidden[ident - 1, s:e] = True

    W, H = config.arena
    frames = []
    for t in range(1, T + 1):
        boxes, apps, ids = [], [], []
        for i in range(n):
            first, last = spans[i]
            if not (first <= t <= last) or hidden[i, t]:
                continue
            l, tp, r, b = tracks[i, t - 1] + jitter[t - 1, i]
            l, r = max(l, 0.0), min(r, W)
            tp, b = max(tp, 0.0), min(b, H)
            if r - l < 1.0 or b - tp < 1.0:
                continue
            app = latent[i] + pose[t - 1, i] + noise[t - 1, i]
            boxes.append(Box(float(l), float(tp), float(r), float(b), 1.0))
            apps.append(app)
            ids.append(i + 1)
        frames.append(FrameObjects.build(t, boxes, apps, ids))
    return Scene(Clip(tuple(frames)), tuple(occlusions), config)


def extend_occlusions(scene: Scene, L: int) -> Scene:
    """Lengthen every occlusion shorter than ``L`` frames to exactly ``L``.

    Detections are dropped after the original occlusion; deletions stop at the
    last frame of the scene. Occlusions already at least ``L`` long are kept.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    if L == 0:
        return scene
    last = scene.clip.frames[-1].frame
    drop = {}
    new_occ = []
    for ident, s, e in scene.gt_occlusions:
        if e - s < L:
            e2 = min(s + L, last + 1)
            drop.setdefault(ident, []).append((e, e2))
            new_occ.append((ident, s, e2))
        else:
            new_occ.append((ident, s, e))

    def dropped(det):
        return any(a <= det.frame < b for a, b in drop.get(det.gt_identity, ()))

    frames = [f.with_detections(d for d in f.real if not dropped(d)) for f in scene.clip.frames]
    return replace(scene, clip=Clip(tuple(fill_frames(frames))), gt_occlusions=tuple(new_occ))


def detection_count(scene: Scene) -> int:
    return sum(len(f.real) for f in scene.clip.frames)


def save_scene(scene: Scene, directory) -> None:
    """Write ``gt.txt`` (ids + features), ``det.txt`` (features only) and ``scene.json``."""
    from .core import write_detections

    os.makedirs(directory, exist_ok=True)
    write_detections(scene.clip.frames, os.path.join(directory, "gt.txt"), with_ids=True)
    write_detections(scene.clip.frames, os.path.join(directory, "det.txt"), with_ids=False)
    meta = {
        "first_frame": scene.clip.start,
        "last_frame": scene.clip.frames[-1].frame,
        "occlusions": [list(o) for o in scene.gt_occlusions],
    }
    if scene.config is not None:
        meta["config"] = asdict(scene.config)
    with open(os.path.join(directory, "scene.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(directory) -> Scene:
    """Inverse of :func:`save_scene`, up to the text precision of the files."""
    from .core import load_mot

    with open(os.path.join(directory, "scene.json")) as fh:
        meta = json.load(fh)
    frames = fill_frames(load_mot(os.path.join(directory, "gt.txt")), meta["first_frame"], meta["last_frame"])
    config = None
    if "config" in meta:
        config = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    occ = tuple(tuple(int(v) for v in o) for o in meta["occlusions"])
    return Scene(Clip(tuple(frames)), occ, config)
