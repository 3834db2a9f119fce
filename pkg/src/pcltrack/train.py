"""Adam training loop over the path consistency objective."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import NumericalError
from .core import Clip
from .model import ModelParams, backward, init_params, load_checkpoint, save_checkpoint
from .pathloss import LossConfig, PreparedClip, prepare_clip, total_loss
from .sim import Scene

log = logging.getLogger(__name__)

STATS_COLUMNS = ["step", "clip_id", "L_PC", "L_OM", "L_BC", "L_view", "total", "degenerate", "mean_path_length", "mean_skip_length"]


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 200
    clip_length: int = 48
    G: int = 25
    S: Optional[int] = None
    s_max: Optional[int] = None
    sigma: float = 0.5
    min_span: int = 8
    path_sampling: str = "sparse"
    two_view: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    D: int = 32
    hidden: int = 64
    depth: int = 2
    scale: float = 5.0
    checkpoint_every: int = 0
    max_degenerate_rate: float = 0.05

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            G=self.G, S=self.S, s_max=self.s_max, sigma=self.sigma, min_span=self.min_span,
            path_sampling=self.path_sampling, two_view=self.two_view,
        )

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainReport:
    rows: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STATS_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def extract_clips(sources: Sequence[Union[Scene, Clip]], length: int) -> List[Clip]:
    """Windows of ``length`` frames at stride ``length // 2``; the tail window is end-aligned."""
    clips = []
    for src in sources:
        clip = src.clip if isinstance(src, Scene) else src
        n = len(clip)
        if n < length:
            if n >= 2:
                clips.append(clip)
            continue
        stride = max(length // 2, 1)
        starts = list(range(0, n - length + 1, stride))
        if starts[-1] != n - length:
            starts.append(n - length)
        clips.extend(clip.window(clip.start + s, length) for s in starts)
    return clips


class Adam:
    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        """Pure in (params, grads, moments, t); returns new params, updates moments."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.map(lambda m, g: b1 * m + (1 - b1) * g, grads)
        self.v = self.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grads)
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        return params.map(lambda p, m, v: p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps), self.m, self.v)


def _rng_meta(name: str, rng: np.random.Generator) -> Dict[str, int]:
    st = rng.bit_generator.state
    return {
        f"{name}_state": st["state"]["state"], f"{name}_inc": st["state"]["inc"],
        f"{name}_has_uint32": st["has_uint32"], f"{name}_uinteger": st["uinteger"],
    }


def _restore_rng(name: str, rng: np.random.Generator, meta: Dict[str, int]) -> None:
    if f"{name}_state" not in meta:
        raise ValueError(f"checkpoint has no {name} random state; cannot resume exactly")
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": meta[f"{name}_state"], "inc": meta[f"{name}_inc"]},
        "has_uint32": meta[f"{name}_has_uint32"], "uinteger": meta[f"{name}_uinteger"],
    }


def _save(path, params, opt: Adam, rngs: Dict[str, np.random.Generator]):
    meta = {"step": opt.t}
    for name, rng in rngs.items():
        meta.update(_rng_meta(name, rng))
    save_checkpoint(params, path, extra={"adam_m": opt.m, "adam_v": opt.v}, meta=meta)


def train(
    sources: Sequence[Union[Scene, Clip]],
    config: TrainConfig,
    out_dir: Optional[str] = None,
    init: Optional[ModelParams] = None,
    resume: Optional[str] = None,
    arena=None,
) -> "tuple[ModelParams, TrainReport]":
    """Train the embedding model; deterministic given ``config.seed``.

    ``resume`` restarts from a checkpoint written by a previous run
    (parameters, Adam moments and step counter).
    """
    t0 = time.time()
    rng = np.random.default_rng(config.seed)
    init_rng, clip_rng, path_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3))
    clips = extract_clips(sources, config.clip_length)
    if not clips:
        raise ValueError("no clip of at least two frames in the training data")
    if arena is None:
        arena = next((s.config.arena for s in sources if isinstance(s, Scene) and s.config), None)
    if arena is None:
        arena = _extent(clips)
    dim = _appearance_dim(clips)
    params = init or init_params(dim, config.D, config.hidden, init_rng, arena, config.depth, config.scale)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    if resume:
        params, extra, meta = load_checkpoint(resume, with_extra=True)
        opt.m, opt.v, opt.t = extra["adam_m"], extra["adam_v"], meta.get("step", 0)
        _restore_rng("clip_rng", clip_rng, meta)
        _restore_rng("path_rng", path_rng, meta)
    rngs = {"clip_rng": clip_rng, "path_rng": path_rng}
    loss_cfg = config.loss_config()
    prepared: Dict[int, PreparedClip] = {}
    report = TrainReport()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last_good = os.path.join(out_dir, "last_good.ckpt") if out_dir else None
    if not any(prepared_queries(clips, i, params, loss_cfg, prepared) for i in range(len(clips))):
        raise ValueError("no clip yields a query sample; check sigma/min_span")
    while opt.t < config.steps:
        cid = int(clip_rng.integers(0, len(clips)))
        prep = prepared.get(cid) or prepared.setdefault(cid, prepare_clip(clips[cid], params, loss_cfg))
        try:
            value, tape, stats = total_loss(prep, params, loss_cfg, path_rng)
            if not np.isfinite(value):
                raise NumericalError("non-finite loss")
            grads = backward(params, tape)
        except NumericalError as exc:
            if last_good:
                _save(last_good, params, opt, rngs)
            raise TrainingAborted(f"step {opt.t}: {exc}") from exc
        if stats["degenerate_rate"] > config.max_degenerate_rate:
            if last_good:
                _save(last_good, params, opt, rngs)
            raise TrainingAborted(
                f"step {opt.t}: {stats['degenerate_rate']:.1%} of hops lost all mass to the spatial mask (S={prep.S})"
            )
        params = opt.step(params, grads)
        report.rows.append({
            "step": opt.t, "clip_id": cid,
            "L_PC": stats.get("L_pc", 0.0), "L_OM": stats["L_om"], "L_BC": stats["L_bc"],
            "L_view": stats.get("L_view", 0.0), "total": value,
            "degenerate": stats["degenerate"], "mean_path_length": stats["mean_path_length"],
            "mean_skip_length": stats["mean_skip"],
        })
        if opt.t % 50 == 0:
            log.info("step %d loss %.4f (pc %.4f om %.4f bc %.4f)", opt.t, value, stats.get("L_pc", 0.0), stats["L_om"], stats["L_bc"])
        if out_dir and config.checkpoint_every and opt.t % config.checkpoint_every == 0:
            _save(os.path.join(out_dir, f"step{opt.t:06d}.ckpt"), params, opt, rngs)
    if out_dir:
        report.checkpoint = os.path.join(out_dir, "model.ckpt")
        _save(report.checkpoint, params, opt, rngs)
    report.wall_time = time.time() - t0
    return params, report


def prepared_queries(clips, i, params, loss_cfg, cache) -> bool:
    if i not in cache:
        cache[i] = prepare_clip(clips[i], params, loss_cfg)
    return bool(cache[i].queries)


def _appearance_dim(clips: Sequence[Clip]) -> int:
    for c in clips:
        for f in c.frames:
            for d in f.real:
                if d.appearance is None:
                    raise ValueError(f"frame {f.frame}: detections carry no appearance vectors")
                return len(d.appearance)
    raise ValueError("training data contains no detections")


def _extent(clips: Sequence[Clip]):
    W = max((d.box.right for c in clips for f in c.frames for d in f.real), default=1.0)
    H = max((d.box.bottom for c in clips for f in c.frames for d in f.real), default=1.0)
    return (float(W), float(H))
