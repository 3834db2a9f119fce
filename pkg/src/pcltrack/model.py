"""Object embedding model and pairwise match matrices.

Each real object is embedded from its appearance descriptor concatenated with
its arena-normalised box (l, t, r, b, confidence): tanh hidden layers, a linear
output layer, then projection onto the sphere of radius ``scale``. Fixing the
norm stops a few large embeddings from winning every softmax. The null object
has a free learned embedding of its own. Matching probabilities are row softmaxes over
embedding dot products; the null source row is fixed to the destination null.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .core import FrameObjects

CHECKPOINT_MAGIC = "pcltrack-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """MLP weights, the null embedding and the arena used to normalise boxes.

    The same container holds gradients and optimizer moments.
    """

    layers: List[Tuple[np.ndarray, np.ndarray]]
    null_embedding: np.ndarray
    arena: Tuple[float, float] = (640.0, 480.0)
    scale: float = 5.0

    @property
    def D(self) -> int:
        return int(self.null_embedding.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[0])

    @property
    def appearance_dim(self) -> int:
        return self.input_dim - 5

    def named(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        out["null"] = self.null_embedding
        return out

    @classmethod
    def from_named(cls, arrays: Dict[str, np.ndarray], arena=(640.0, 480.0), scale: float = 5.0) -> "ModelParams":
        n = sum(1 for k in arrays if k.startswith("w"))
        layers = [(arrays[f"w{i}"], arrays[f"b{i}"]) for i in range(n)]
        return cls(layers, arrays["null"], tuple(arena), scale)

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        mine = self.named()
        theirs = [o.named() for o in others]
        return ModelParams.from_named({k: fn(v, *(t[k] for t in theirs)) for k, v in mine.items()}, self.arena, self.scale)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.named().values()])


Gradients = ModelParams


def init_params(appearance_dim: int, D: int = 32, hidden: int = 64, rng=None, arena=(640.0, 480.0), depth: int = 2, scale: float = 5.0) -> ModelParams:
    """Glorot-uniform MLP ``(appearance_dim + 5) -> hidden -> ... -> D``."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = [appearance_dim + 5] + [hidden] * (depth - 1) + [D]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
    null = rng.normal(scale=0.1, size=D)
    return ModelParams(layers, null, tuple(float(a) for a in arena), float(scale))


def frame_features(frame: FrameObjects, appearance_dim: int, arena) -> np.ndarray:
    """Model inputs of the real objects, shape (N_t - 1, appearance_dim + 5)."""
    W, H = arena
    rows = []
    for d in frame.real:
        if d.appearance is None:
            raise ValueError(f"frame {frame.frame}: detection {d.local_index} has no appearance vector")
        app = np.asarray(d.appearance, dtype=float)
        if app.shape != (appearance_dim,):
            raise ValueError(
                f"frame {frame.frame}: appearance has shape {app.shape}, model expects ({appearance_dim},)"
            )
        b = d.box
        rows.append(np.concatenate([app, [b.left / W, b.top / H, b.right / W, b.bottom / H, b.confidence]]))
    return np.array(rows).reshape(len(rows), appearance_dim + 5)


NORM_EPS = 1e-12


def mlp(params_t: Dict[str, ad.Tensor], x, n_layers: int, scale: float) -> ad.Tensor:
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = ad.matmul(h, params_t[f"w{i}"]) + params_t[f"b{i}"]
        if i < n_layers - 1:
            h = ad.tanh(h)
    norm = ad.sqrt(ad.tsum(ad.square(h), axis=1, keepdims=True) + NORM_EPS)
    return h / norm * scale


def mlp_numpy(params: ModelParams, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < len(params.layers) - 1:
            h = np.tanh(h)
    return h / np.sqrt((h * h).sum(axis=1, keepdims=True) + NORM_EPS) * params.scale


@dataclass(frozen=True)
class EmbeddingMatrix:
    frame: int
    H: np.ndarray  # (N_t, D), last row is the null embedding


@dataclass(frozen=True)
class MatchMatrix:
    src_frame: int
    dst_frame: int
    P: np.ndarray


def embed_frame(params: ModelParams, frame: FrameObjects) -> EmbeddingMatrix:
    x = frame_features(frame, params.appearance_dim, params.arena)
    real = mlp_numpy(params, x) if len(x) else np.zeros((0, params.D))
    return EmbeddingMatrix(frame.frame, np.vstack([real, params.null_embedding[None, :]]))


def match_logits_to_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_matrix(H_src: EmbeddingMatrix, H_dst: EmbeddingMatrix) -> MatchMatrix:
    if H_src.H.shape[1] != H_dst.H.shape[1]:
        raise ValueError("embedding dimensions differ")
    P = match_logits_to_probs(H_src.H @ H_dst.H.T)
    P[-1, :] = 0.0
    P[-1, -1] = 1.0
    return MatchMatrix(H_src.frame, H_dst.frame, P)


def params_as_leaves(params: ModelParams) -> Dict[str, ad.Tensor]:
    return {k: ad.Tensor(v) for k, v in params.named().items()}


@dataclass
class LossTape:
    """Root of a recorded loss computation and the parameter leaves it read."""

    root: ad.Tensor
    leaves: Dict[str, ad.Tensor]
    scale: float = 1.0

    def scaled(self, factor: float) -> "LossTape":
        return LossTape(self.root, self.leaves, self.scale * factor)


def backward(params: ModelParams, tape: LossTape) -> Gradients:
    """Exact reverse-mode gradient of the recorded scalar loss w.r.t. ``params``."""
    ad.backward(tape.root, seed=tape.scale)
    grads = {}
    for k, v in params.named().items():
        leaf = tape.leaves.get(k)
        grads[k] = np.zeros_like(v) if leaf is None or leaf.grad is None else leaf.grad.copy()
    return ModelParams.from_named(grads, params.arena, params.scale)


def save_checkpoint(params: ModelParams, path, extra: Optional[Dict[str, ModelParams]] = None, meta: Optional[Dict[str, int]] = None) -> None:
    """Text checkpoint with shape headers; values stored as float.hex for bitwise round-trips.

    ``extra`` holds further parameter-shaped groups (optimizer moments),
    ``meta`` integer bookkeeping such as the step counter.
    """
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n", f"arena {float(params.arena[0]).hex()} {float(params.arena[1]).hex()}\n",
             f"scale {float(params.scale).hex()}\n"]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {int(value)}\n")
    groups = {"params": params}
    groups.update(extra or {})
    for group, p in groups.items():
        for name, arr in p.named().items():
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"tensor {group}.{name} float64 {shape}\n")
            lines.append(" ".join(float(v).hex() for v in arr.ravel()) + "\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def load_checkpoint(path, with_extra: bool = False):
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if header[1] != f"v{CHECKPOINT_VERSION}":
            raise ValueError(f"{path}: unsupported checkpoint version {header[1]}")
        tag, aw, ah = fh.readline().split()
        arena = (float.fromhex(aw), float.fromhex(ah))
        tag, sc = fh.readline().split()
        if tag != "scale":
            raise ValueError(f"{path}: malformed checkpoint header")
        scale = float.fromhex(sc)
        groups: Dict[str, Dict[str, np.ndarray]] = {}
        meta: Dict[str, int] = {}
        while True:
            head = fh.readline()
            if not head:
                break
            if head.startswith("meta "):
                _, key, value = head.split()
                meta[key] = int(value)
                continue
            _, full, dtype, shape = head.split()
            group, name = full.split(".", 1)
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            body = fh.readline().split()
            arr = np.array([float.fromhex(v) for v in body], dtype=np.float64).reshape(dims)
            groups.setdefault(group, {})[name] = arr
    params = ModelParams.from_named(groups.pop("params"), arena, scale)
    if with_extra:
        return params, {g: ModelParams.from_named(a, arena, scale) for g, a in groups.items()}, meta
    return params
