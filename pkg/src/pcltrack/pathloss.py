"""Path consistency objective and its two regularisers.

Two implementations live here. The per-object functions (``propagate``,
``path_distribution``, ``pcl``, ``one_to_one_loss``, ``bidirectional_loss``)
are plain numpy over ``MatchMatrix`` objects and serve as the reference.
``total_loss`` evaluates the same quantities for a whole clip at once on the
autodiff tape, padding every frame to a common object count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .core import Clip, FrameObjects, iou_matrix
from .model import LossTape, MatchMatrix, ModelParams, frame_features, params_as_leaves


@dataclass(frozen=True)
class QuerySample:
    query: Tuple[int, int]  # (start frame, local index)
    end_frame: int
    chain: Tuple[Tuple[int, int], ...]

    @property
    def start_frame(self) -> int:
        return self.query[0]


@dataclass(frozen=True)
class Path:
    frames: Tuple[int, ...]

    def __post_init__(self):
        f = tuple(self.frames)
        object.__setattr__(self, "frames", f)
        if len(f) < 2 or any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError(f"invalid path {f}")

    @property
    def max_skip(self) -> int:
        return max(b - a - 1 for a, b in zip(self.frames, self.frames[1:]))

    @property
    def hops(self):
        return list(zip(self.frames, self.frames[1:]))


@dataclass(frozen=True)
class PathSet:
    paths: Tuple[Path, ...]

    def __len__(self):
        return len(self.paths)


@dataclass(frozen=True)
class SpatialMask:
    src_frame: int
    dst_frame: int
    C: np.ndarray


@dataclass(frozen=True)
class AssocDistribution:
    query: Tuple[int, int]
    frame: int
    q: np.ndarray


# --------------------------------------------------------------------------
# query selection


def select_frame_pairs(clip: Clip, sigma: float = 0.5, min_span: int = 8) -> List[QuerySample]:
    """Greedy IoU chains; one query per chain, chain members never reused."""
    used = set()
    frames = clip.frames
    boxes = [[d.box for d in f.real] for f in frames]
    ious = [iou_matrix(boxes[k], boxes[k + 1]) for k in range(len(frames) - 1)]
    out = []
    for k, f in enumerate(frames):
        for d in f.real:
            if (f.frame, d.local_index) in used:
                continue
            chain = [(f.frame, d.local_index)]
            used.add(chain[0])
            cur, kk = d.local_index, k
            while kk + 1 < len(frames):
                row = ious[kk][cur].copy()
                for j in range(len(row)):
                    if (frames[kk + 1].frame, j) in used:
                        row[j] = -1.0
                if len(row) == 0 or row.max() < sigma:
                    break
                cur = int(np.argmax(row))
                kk += 1
                chain.append((frames[kk].frame, cur))
                used.add(chain[-1])
            span = chain[-1][0] - chain[0][0]
            if span >= max(min_span, 1):
                out.append(QuerySample(chain[0], chain[-1][0], tuple(chain)))
    return out


# --------------------------------------------------------------------------
# path sampling


@lru_cache(maxsize=4096)
def _ways(K: int, s: int) -> Tuple[Tuple[int, ...], ...]:
    """ways[p][m]: admissible continuations from kept position p keeping m more intermediates.

    Positions run 0 (start) .. K + 1 (end); a hop may skip at most ``s`` frames.
    """
    end = K + 1
    ways = [[0] * (K + 1) for _ in range(end + 1)]
    ways[end][0] = 1
    for p in range(end - 1, -1, -1):
        for q in range(p + 1, min(p + s + 1, end) + 1):
            if q == end:
                ways[p][0] += 1
            else:
                for m in range(1, K + 1):
                    ways[p][m] += ways[q][m - 1]
    return tuple(tuple(r) for r in ways)


def count_paths(t_s: int, t_e: int, s_max: Optional[int] = None) -> int:
    K = t_e - t_s - 1
    s = K if s_max is None else min(s_max, K)
    return sum(_ways(K, s)[0])


def _enumerate(K: int, s: int):
    out = []

    def rec(p, acc):
        if p == K + 1:
            out.append(tuple(acc))
            return
        for q in range(p + 1, min(p + s + 1, K + 1) + 1):
            rec(q, acc + ([q] if q <= K else []))

    rec(0, [])
    return out


def _sample_size(ways, K, s, m, rng) -> Tuple[int, ...]:
    acc, p = [], 0
    while p != K + 1:
        total = ways[p][m]
        u = int(rng.integers(0, total))
        for q in range(p + 1, min(p + s + 1, K + 1) + 1):
            w = (1 if m == 0 else 0) if q == K + 1 else (ways[q][m - 1] if m >= 1 else 0)
            if u < w:
                break
            u -= w
        if q <= K:
            acc.append(q)
            m -= 1
        p = q
    return tuple(acc)


def sample_paths(t_s: int, t_e: int, G: int, s_max: Optional[int], rng: np.random.Generator, mode: str = "sparse") -> PathSet:
    """Observation paths from ``t_s`` to ``t_e`` with at most ``s_max`` consecutive skips.

    All admissible paths are returned when there are at most ``G`` of them.
    Otherwise the dense path is kept and ``G - 1`` distinct others are drawn.
    ``mode="stratified"`` draws the number of observed intermediate frames
    uniformly first, then a uniform admissible path of that size;
    ``mode="sparse"`` draws that number with weight 1 / (m + 1)^2, favouring
    few long hops; ``mode="uniform"`` draws uniformly over all admissible paths.
    """
    if t_e - t_s < 1 or G < 1:
        raise ValueError("need t_e > t_s and G >= 1")
    K = t_e - t_s - 1
    s = K if s_max is None else min(s_max, K)
    if s < 0 or (s_max is not None and s_max < 0):
        raise ValueError("s_max must be >= 0")
    ways = _ways(K, s)
    total = sum(ways[0])

    def to_path(inter):
        return Path((t_s,) + tuple(t_s + q for q in inter) + (t_e,))

    if total <= G:
        return PathSet(tuple(to_path(x) for x in _enumerate(K, s)))
    dense = tuple(range(1, K + 1))
    chosen = [dense]
    seen = {dense}
    sizes = [m for m in range(K + 1) if ways[0][m] > 0]
    size_w = np.array([ways[0][m] for m in sizes], dtype=float)
    sparse_w = 1.0 / (np.array(sizes, dtype=float) + 1.0) ** 2
    while len(chosen) < G:
        if mode == "stratified":
            m = sizes[int(rng.integers(0, len(sizes)))]
        elif mode == "sparse":
            m = sizes[int(rng.choice(len(sizes), p=sparse_w / sparse_w.sum()))]
        elif mode == "uniform":
            m = sizes[int(rng.choice(len(sizes), p=size_w / size_w.sum()))]
        else:
            raise ValueError(f"unknown path sampling mode {mode!r}")
        inter = _sample_size(ways, K, s, m, rng)
        if inter not in seen:
            seen.add(inter)
            chosen.append(inter)
    return PathSet(tuple(to_path(x) for x in chosen))


# --------------------------------------------------------------------------
# spatial mask and propagation (reference implementations)


def _centers(frame: FrameObjects) -> np.ndarray:
    return np.array([d.box.center for d in frame.real]).reshape(-1, 2)


def mask_array(src_centers: np.ndarray, dst_centers: np.ndarray, S: int) -> np.ndarray:
    """Mask over (N_src real + null) x (N_dst real + null)."""
    ns, nd = len(src_centers), len(dst_centers)
    C = np.ones((ns + 1, nd + 1))
    if S <= 0 or nd <= S or ns == 0:
        return C
    dist = np.linalg.norm(src_centers[:, None, :] - dst_centers[None, :, :], axis=-1)
    # stable order: ties broken by lower index being kept
    far = np.argsort(-dist, axis=1, kind="stable")[:, :S]
    np.put_along_axis(C[:ns, :nd], far, 0.0, axis=1)
    return C


def spatial_mask(src: FrameObjects, dst: FrameObjects, S: int) -> SpatialMask:
    """Zero the ``S`` farthest real destinations (box-centre distance) of every real source."""
    if S < 0:
        raise ValueError("S must be >= 0")
    return SpatialMask(src.frame, dst.frame, mask_array(_centers(src), _centers(dst), S))


def auto_S(clips: Sequence[Clip]) -> int:
    """S = round(sqrt(mean real objects per frame))."""
    counts = [len(f.real) for c in clips for f in c.frames]
    return int(round(math.sqrt(np.mean(counts)))) if counts else 0


def propagate(q_prev: AssocDistribution, P: MatchMatrix, C: SpatialMask, stats: Optional[dict] = None) -> AssocDistribution:
    if P.P.shape != C.C.shape or P.P.shape[0] != len(q_prev.q):
        raise ValueError("shape mismatch in propagate")
    M = P.P * C.C
    M[-1, :] = 0.0
    M[-1, -1] = 1.0
    q = q_prev.q @ M
    Z = q.sum()
    if Z <= 0:
        q = np.zeros_like(q)
        q[-1] = 1.0
        if stats is not None:
            stats["degenerate"] = stats.get("degenerate", 0) + 1
    else:
        q = q / Z
    return AssocDistribution(q_prev.query, P.dst_frame, q)


def path_distribution(query: Tuple[int, int], path: Path, matrices: Dict[Tuple[int, int], MatchMatrix], masks: Dict[Tuple[int, int], SpatialMask], stats: Optional[dict] = None) -> AssocDistribution:
    """Fold ``propagate`` along the hops of ``path`` starting from a one-hot on the query."""
    t_s, i = query
    first = matrices[path.hops[0]]
    q0 = np.zeros(first.P.shape[0])
    q0[i] = 1.0
    q = AssocDistribution(query, t_s, q0)
    for hop in path.hops:
        q = propagate(q, matrices[hop], masks[hop], stats)
    return q


def _entropy(q: np.ndarray) -> float:
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())


def pcl_unsimplified(qs: Sequence[np.ndarray]) -> float:
    qhat = np.mean(qs, axis=0)
    return float(np.mean([_kl(q, qhat) + _entropy(q) for q in qs]))


def pcl(distributions: Sequence, debug: bool = False) -> float:
    """Entropy of the mean association distribution over paths."""
    qs = [np.asarray(d.q if isinstance(d, AssocDistribution) else d, dtype=float) for d in distributions]
    if not qs:
        raise ValueError("pcl needs at least one distribution")
    if len({len(q) for q in qs}) != 1:
        raise ValueError("distributions have different lengths")
    value = _entropy(np.mean(qs, axis=0))
    if debug:
        other = pcl_unsimplified(qs)
        assert abs(other - value) < 1e-9, (other, value)
    return value


def one_to_one_loss(matrices: Sequence[MatchMatrix]) -> float:
    """Mean over frame pairs of the mean real-column max(1, real column sum)."""
    terms = []
    for m in matrices:
        n_dst = m.P.shape[1] - 1
        if n_dst == 0:
            continue
        colsum = m.P[:-1, :-1].sum(axis=0)
        terms.append(np.maximum(1.0, colsum).sum() / n_dst)
    return float(np.mean(terms)) if terms else 0.0


def bidirectional_loss(pairs: Sequence[Tuple[MatchMatrix, MatchMatrix]]) -> float:
    """Mean squared gap between P[t->r][i, j] and P[r->t][j, i] over real entries."""
    terms = []
    for fwd, bwd in pairs:
        a = fwd.P[:-1, :-1]
        b = bwd.P[:-1, :-1].T
        if a.size == 0:
            continue
        terms.append(((a - b) ** 2).mean())
    return float(np.mean(terms)) if terms else 0.0


def view_consistency(view_a: Sequence[MatchMatrix], view_b: Sequence[MatchMatrix]) -> float:
    """Mean squared difference of real-to-real match probabilities across two views."""
    terms = [((a.P[:-1, :-1] - b.P[:-1, :-1]) ** 2).mean() for a, b in zip(view_a, view_b) if a.P[:-1, :-1].size]
    return float(np.mean(terms)) if terms else 0.0


# --------------------------------------------------------------------------
# batched, differentiable objective


@dataclass(frozen=True)
class LossConfig:
    G: int = 25
    S: Optional[int] = None  # None: round(sqrt(mean objects per frame)) of the clip
    s_max: Optional[int] = None
    sigma: float = 0.5
    min_span: int = 8
    path_sampling: str = "sparse"
    two_view: bool = False
    aug_appearance: float = 0.1
    aug_shift: float = 2.0
    w_pc: float = 1.0
    w_om: float = 1.0
    w_bc: float = 1.0
    w_view: float = 1.0


@dataclass
class PreparedClip:
    """Padded per-clip arrays, computed once and reused across steps."""

    clip: Clip
    n_real: np.ndarray  # (T,)
    features: np.ndarray  # (R, F) real objects, frame-major
    slot_source: np.ndarray  # (T * Nmax,) row of [features..., null, zero]
    real: np.ndarray  # (T, Nmax) bool
    valid: np.ndarray  # (T, Nmax) bool, real or null
    null_pos: np.ndarray  # (T,)
    mask: np.ndarray  # (T, T, Nmax, Nmax)
    queries: List[QuerySample]
    S: int
    boxes: np.ndarray  # (R, 4) raw pixel boxes, for augmentation

    @property
    def T(self):
        return len(self.n_real)

    @property
    def nmax(self):
        return self.real.shape[1]


def prepare_clip(clip: Clip, params: ModelParams, config: LossConfig) -> PreparedClip:
    T = len(clip)
    n_real = np.array([len(f.real) for f in clip.frames])
    nmax = int(n_real.max()) + 1
    feats = [frame_features(f, params.appearance_dim, params.arena) for f in clip.frames]
    features = np.vstack(feats) if n_real.sum() else np.zeros((0, params.input_dim))
    R = len(features)
    slot = np.full((T, nmax), R + 1, dtype=np.int64)  # R + 1: zero row
    real = np.zeros((T, nmax), dtype=bool)
    valid = np.zeros((T, nmax), dtype=bool)
    offset = 0
    for t, n in enumerate(n_real):
        slot[t, :n] = np.arange(offset, offset + n)
        slot[t, n] = R  # null row
        real[t, :n] = True
        valid[t, : n + 1] = True
        offset += n
    S = auto_S([clip]) if config.S is None else config.S
    centers = [_centers(f) for f in clip.frames]
    mask = np.zeros((T, T, nmax, nmax))
    for a in range(T):
        for b in range(T):
            C = mask_array(centers[a], centers[b], S)
            # null source row: absorbing, only the null destination matters
            mask[a, b, : n_real[a] + 1, : n_real[b] + 1] = C
    boxes = np.array([(d.box.left, d.box.top, d.box.right, d.box.bottom) for f in clip.frames for d in f.real]).reshape(-1, 4)
    queries = select_frame_pairs(clip, config.sigma, config.min_span)
    return PreparedClip(clip, n_real, features, slot.ravel(), real, valid, n_real.copy(), mask, queries, S, boxes)


def match_tensor(prep: PreparedClip, leaves: Dict[str, ad.Tensor], n_layers: int, scale: float, features: Optional[np.ndarray] = None) -> ad.Tensor:
    """All pairwise match probabilities of a clip, shape (T, T, Nmax, Nmax).

    Padding columns are exactly 0; the null source row is one-hot on the null
    destination; padding source rows are all zero.
    """
    from .model import mlp

    T, nmax = prep.T, prep.nmax
    feats = prep.features if features is None else features
    D = leaves["null"].shape[0]
    real_h = mlp(leaves, feats, n_layers, scale) if len(feats) else ad.Tensor(np.zeros((0, D)), op="const")
    table = ad.concat([real_h, ad.reshape(leaves["null"], (1, D)), ad.as_tensor(np.zeros((1, D)))], axis=0)
    H = ad.take_rows(table, prep.slot_source)  # (T*Nmax, D)
    logits = ad.matmul(H, ad.transpose(H))
    logits = ad.transpose(ad.reshape(logits, (T, nmax, T, nmax)), (0, 2, 1, 3))
    P = ad.masked_softmax(logits, np.broadcast_to(prep.valid[None, :, None, :], (T, T, nmax, nmax)))
    real_rows = prep.real[:, None, :, None].astype(float)
    null_onehot = np.zeros((T, T, nmax, nmax))
    a, b = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    null_onehot[a, b, prep.null_pos[a], prep.null_pos[b]] = 1.0
    return P * real_rows + null_onehot


def _pair_mask(prep: PreparedClip) -> np.ndarray:
    T = prep.T
    return ~np.eye(T, dtype=bool)


def one_to_one_tensor(P: ad.Tensor, prep: PreparedClip) -> ad.Tensor:
    real_src = prep.real[:, None, :, None].astype(float)
    colsum = ad.tsum(P * real_src, axis=2)  # (T, T, Nmax)
    real_dst = np.broadcast_to(prep.real[None, :, :], colsum.shape).astype(float)
    per_pair = ad.tsum(ad.maximum(colsum, 1.0) * real_dst, axis=2)  # (T, T)
    pairs = _pair_mask(prep) & (prep.n_real[None, :] > 0)
    if not pairs.any():
        return ad.Tensor(0.0, op="const")
    denom = np.where(pairs, np.maximum(prep.n_real[None, :], 1), 1.0)
    weights = np.where(pairs, 1.0 / denom, 0.0) / pairs.sum()
    return ad.tsum(per_pair * weights)


def bidirectional_tensor(P: ad.Tensor, prep: PreparedClip) -> ad.Tensor:
    back = ad.transpose(P, (1, 0, 3, 2))
    sq = ad.square(P - back)
    block = (prep.real[:, None, :, None] & prep.real[None, :, None, :]).astype(float)
    per_pair = ad.tsum(ad.tsum(sq * block, axis=3), axis=2)  # (T, T)
    pairs = _pair_mask(prep) & (prep.n_real[:, None] > 0) & (prep.n_real[None, :] > 0)
    if not pairs.any():
        return ad.Tensor(0.0, op="const")
    size = np.maximum(prep.n_real[:, None] * prep.n_real[None, :], 1)
    weights = np.where(pairs, 1.0 / size, 0.0) / pairs.sum()
    return ad.tsum(per_pair * weights)


@dataclass
class PathBatch:
    src: np.ndarray  # (rows, hops) clip-relative source frame per hop
    dst: np.ndarray
    active: np.ndarray  # (rows, hops) bool
    start_idx: np.ndarray  # (rows,)
    owner: np.ndarray  # (rows,) query number
    n_queries: int
    path_lengths: List[int]
    skips: List[int]


def build_path_batch(prep: PreparedClip, config: LossConfig, rng: np.random.Generator) -> Optional[PathBatch]:
    rows = []
    for qn, qs in enumerate(prep.queries):
        ps = sample_paths(qs.start_frame, qs.end_frame, config.G, config.s_max, rng, config.path_sampling)
        for p in ps.paths:
            rows.append((qn, qs.query[1], [f - prep.clip.start for f in p.frames]))
    if not rows:
        return None
    hops = max(len(r[2]) - 1 for r in rows)
    n = len(rows)
    src = np.zeros((n, hops), dtype=np.int64)
    dst = np.zeros((n, hops), dtype=np.int64)
    active = np.zeros((n, hops), dtype=bool)
    lengths, skips = [], []
    for k, (_, _, fr) in enumerate(rows):
        h = len(fr) - 1
        src[k, :h] = fr[:-1]
        dst[k, :h] = fr[1:]
        active[k, :h] = True
        lengths.append(len(fr))
        skips.extend(b - a - 1 for a, b in zip(fr, fr[1:]))
    return PathBatch(
        src, dst, active,
        np.array([r[1] for r in rows]), np.array([r[0] for r in rows]),
        len(prep.queries), lengths, skips,
    )


def pcl_tensor(P: ad.Tensor, prep: PreparedClip, batch: PathBatch, stats: dict) -> ad.Tensor:
    """Mean over query samples of the entropy of the path-averaged end distribution."""
    T, nmax = prep.T, prep.nmax
    blocks = ad.reshape(P * prep.mask, (T * T, nmax, nmax))
    n_rows = len(batch.start_idx)
    q0 = np.zeros((n_rows, nmax))
    q0[np.arange(n_rows), batch.start_idx] = 1.0
    q, degenerate = ad.propagate_paths(
        blocks, batch.src * T + batch.dst, batch.active, q0, prep.null_pos[batch.dst]
    )
    avg = np.zeros((batch.n_queries, n_rows))
    avg[batch.owner, np.arange(n_rows)] = 1.0
    avg /= avg.sum(axis=1, keepdims=True)
    qhat = ad.matmul(ad.as_tensor(avg), q)
    stats["degenerate"] = stats.get("degenerate", 0) + degenerate
    stats["hops"] = stats.get("hops", 0) + int(batch.active.sum())
    stats["final_q"] = q.data
    return ad.mean(ad.entropy(qhat, axis=1))


def augment_features(prep: PreparedClip, params: ModelParams, config: LossConfig, rng: np.random.Generator) -> np.ndarray:
    """A randomly shifted, appearance-jittered copy of the clip's model inputs."""
    feats = prep.features.copy()
    if not len(feats):
        return feats
    A = params.appearance_dim
    W, H = params.arena
    feats[:, :A] += rng.normal(size=(len(feats), A)) * config.aug_appearance
    dx, dy = rng.normal(size=2) * config.aug_shift
    feats[:, A + 0] += dx / W
    feats[:, A + 2] += dx / W
    feats[:, A + 1] += dy / H
    feats[:, A + 3] += dy / H
    return feats


def view_consistency_tensor(Pa: ad.Tensor, Pb: ad.Tensor, prep: PreparedClip) -> ad.Tensor:
    block = (prep.real[:, None, :, None] & prep.real[None, :, None, :]).astype(float)
    per_pair = ad.tsum(ad.tsum(ad.square(Pa - Pb) * block, axis=3), axis=2)
    pairs = _pair_mask(prep) & (prep.n_real[:, None] > 0) & (prep.n_real[None, :] > 0)
    if not pairs.any():
        return ad.Tensor(0.0, op="const")
    size = np.maximum(prep.n_real[:, None] * prep.n_real[None, :], 1)
    return ad.tsum(per_pair * (np.where(pairs, 1.0 / size, 0.0) / pairs.sum()))


def two_view_loss(clip, params: ModelParams, rng: np.random.Generator, config: Optional[LossConfig] = None) -> float:
    config = config or LossConfig()
    prep = clip if isinstance(clip, PreparedClip) else prepare_clip(clip, params, config)
    leaves = params_as_leaves(params)
    n = len(params.layers)
    Pa = match_tensor(prep, leaves, n, params.scale, augment_features(prep, params, config, rng))
    Pb = match_tensor(prep, leaves, n, params.scale, augment_features(prep, params, config, rng))
    return view_consistency_tensor(Pa, Pb, prep).item()


def total_loss(clip, params: ModelParams, config: Optional[LossConfig] = None, rng: Optional[np.random.Generator] = None):
    """Full objective for one clip: PCL + one-to-one + bidirectional (+ two-view).

    Returns ``(value, tape, stats)``. Clips with no query sample contribute
    no PCL term; ``stats["skipped"]`` flags them.
    """
    config = config or LossConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    prep = clip if isinstance(clip, PreparedClip) else prepare_clip(clip, params, config)
    leaves = params_as_leaves(params)
    n_layers = len(params.layers)
    P = match_tensor(prep, leaves, n_layers, params.scale)
    stats: dict = {"queries": len(prep.queries), "S": prep.S}
    terms = {}
    batch = build_path_batch(prep, config, rng)
    if batch is not None:
        terms["pc"] = pcl_tensor(P, prep, batch, stats)
        stats["path_counts"] = np.bincount(batch.owner, minlength=batch.n_queries).tolist()
        stats["mean_path_length"] = float(np.mean(batch.path_lengths))
        stats["mean_skip"] = float(np.mean(batch.skips))
        stats["skip_gt8"] = float(np.mean(np.array(batch.skips) > 8))
        stats["skipped"] = False
    else:
        stats.update(degenerate=0, hops=0, path_counts=[], mean_path_length=0.0, mean_skip=0.0, skip_gt8=0.0, skipped=True)
    terms["om"] = one_to_one_tensor(P, prep)
    terms["bc"] = bidirectional_tensor(P, prep)
    if config.two_view:
        Pa = match_tensor(prep, leaves, n_layers, params.scale, augment_features(prep, params, config, rng))
        Pb = match_tensor(prep, leaves, n_layers, params.scale, augment_features(prep, params, config, rng))
        terms["view"] = view_consistency_tensor(Pa, Pb, prep)
    weights = {"pc": config.w_pc, "om": config.w_om, "bc": config.w_bc, "view": config.w_view}
    root = None
    for name, t in terms.items():
        stats[f"L_{name}"] = t.item()
        contrib = t * weights[name]
        root = contrib if root is None else root + contrib
    stats["total"] = root.item()
    stats["degenerate_rate"] = stats["degenerate"] / max(stats["hops"], 1)
    stats["P"] = P.data
    return root.item(), LossTape(root, leaves), stats


def clip_match_matrices(clip: Clip, params: ModelParams) -> Dict[Tuple[int, int], MatchMatrix]:
    """Reference per-pair match matrices for every ordered pair t != r."""
    from .model import embed_frame, match_matrix

    emb = {f.frame: embed_frame(params, f) for f in clip.frames}
    return {(a, b): match_matrix(emb[a], emb[b]) for a in emb for b in emb if a != b}
