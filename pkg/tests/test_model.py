import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcltrack.core import Box, FrameObjects
from pcltrack.model import (
    EmbeddingMatrix, ModelParams, backward, embed_frame, frame_features, init_params, load_checkpoint,
    match_logits_to_probs, match_matrix, save_checkpoint,
)
from pcltrack.pathloss import LossConfig, total_loss
from pcltrack.sim import SceneConfig, generate_scene


def frame_with(n, dim=3, seed=0, frame=1):
    rng = np.random.default_rng(seed)
    boxes = [Box.from_ltwh(*rng.uniform(0, 500, 2), *rng.uniform(10, 40, 2)) for _ in range(n)]
    return FrameObjects.build(frame, boxes, list(rng.normal(size=(n, dim))))


def test_null_only_frame_embeds_to_null():
    p = init_params(3, D=4, rng=np.random.default_rng(0))
    e = embed_frame(p, FrameObjects.build(1, []))
    assert e.H.shape == (1, 4) and np.array_equal(e.H[0], p.null_embedding)


def test_identical_detections_identical_rows():
    p = init_params(2, D=4, rng=np.random.default_rng(0))
    b = Box(1, 2, 3, 4)
    e = embed_frame(p, FrameObjects.build(1, [b, b], [np.ones(2), np.ones(2)]))
    assert np.array_equal(e.H[0], e.H[1])


def test_zero_weights_give_constant_rows():
    p = init_params(3, D=4, hidden=5, rng=np.random.default_rng(0), depth=1)
    w, b = p.layers[0]
    bias = np.array([3.0, 0.0, 4.0, 0.0])
    p = ModelParams([(np.zeros_like(w), bias)], p.null_embedding, p.arena, scale=2.0)
    e = embed_frame(p, frame_with(3))
    # one linear layer on zero weights leaves the bias, projected to radius 2
    assert np.allclose(e.H[:3], [1.2, 0.0, 1.6, 0.0])


def test_features_layout_and_errors():
    f = FrameObjects.build(1, [Box(64, 48, 128, 96, 0.5)], [np.array([1.0, 2.0])])
    x = frame_features(f, 2, (640.0, 480.0))
    assert np.allclose(x, [[1, 2, 0.1, 0.1, 0.2, 0.2, 0.5]])
    with pytest.raises(ValueError, match="shape"):
        frame_features(f, 3, (640.0, 480.0))
    with pytest.raises(ValueError, match="no appearance"):
        frame_features(FrameObjects.build(1, [Box(0, 0, 1, 1)]), 2, (640.0, 480.0))


def test_match_matrix_examples():
    src = EmbeddingMatrix(1, np.array([[0.0, 0.0], [1.0, 1.0]]))
    dst = EmbeddingMatrix(2, np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [0.0, 1.0]]))
    P = match_matrix(src, dst).P
    assert np.allclose(P[0], 0.25)
    assert np.array_equal(P[-1], [0, 0, 0, 1])
    only_null = match_matrix(src, EmbeddingMatrix(2, np.array([[0.5, 0.5]]))).P
    assert np.allclose(only_null, 1.0)
    assert np.allclose(match_logits_to_probs(np.array([0.0, np.log(3.0)])), [0.25, 0.75])
    with pytest.raises(ValueError):
        match_matrix(src, EmbeddingMatrix(2, np.zeros((2, 3))))


_emb = st.integers(1, 8).flatmap(
    lambda n: arrays(np.float64, (n, 3), elements=st.floats(-30, 30, allow_nan=False))
)


@pytest.mark.criterion(8)
@settings(max_examples=1000, deadline=None)
@given(_emb, _emb)
def test_row_stochasticity(hs, hd):
    P = match_matrix(EmbeddingMatrix(1, hs), EmbeddingMatrix(2, hd)).P
    assert np.all((P >= 0) & (P <= 1))
    assert np.all(np.abs(P[:-1].sum(axis=1) - 1.0) < 1e-9)
    assert np.array_equal(P[-1], np.eye(len(hd))[-1])


@settings(max_examples=200, deadline=None)
@given(_emb, _emb, st.randoms(use_true_random=False))
def test_permutation_equivariance(hs, hd, rnd):
    perm = list(range(len(hd) - 1))
    rnd.shuffle(perm)
    perm = perm + [len(hd) - 1]
    P = match_matrix(EmbeddingMatrix(1, hs), EmbeddingMatrix(2, hd)).P
    Q = match_matrix(EmbeddingMatrix(1, hs), EmbeddingMatrix(2, hd[perm])).P
    assert np.allclose(Q[:-1], P[:-1][:, perm], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, c):
    assert np.allclose(match_logits_to_probs(logits), match_logits_to_probs(logits + c), atol=1e-12)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    p = init_params(4, D=6, hidden=7, rng=np.random.default_rng(3), arena=(123.5, 77.25), scale=3.3)
    m = p.map(lambda v: v * 0.1 + 1e-300)
    save_checkpoint(p, tmp_path / "a.ckpt", extra={"adam_m": m}, meta={"step": 12, "big": 2**100})
    q, extra, meta = load_checkpoint(tmp_path / "a.ckpt", with_extra=True)
    assert q.arena == p.arena and q.scale == p.scale
    for k, v in p.named().items():
        assert v.tobytes() == q.named()[k].tobytes()
        assert m.named()[k].tobytes() == extra["adam_m"].named()[k].tobytes()
    assert meta == {"step": 12, "big": 2**100}
    save_checkpoint(q, tmp_path / "b.ckpt")
    save_checkpoint(p, tmp_path / "c.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x")


def _small_problem(seed=0):
    scene = generate_scene(SceneConfig(num_identities=3, num_frames=12, appearance_dim=3, seed=seed,
                                       occlusion_rate=0.5, occlusion_length_range=(2, 3)))
    params = init_params(3, D=4, hidden=5, rng=np.random.default_rng(seed))
    return scene, params, LossConfig(G=4, min_span=3, S=1)


def test_gradient_linearity():
    scene, params, cfg = _small_problem()
    _, tape, _ = total_loss(scene.clip, params, cfg, np.random.default_rng(1))
    g1 = backward(params, tape)
    _, tape, _ = total_loss(scene.clip, params, cfg, np.random.default_rng(1))
    g2 = backward(params, tape.scaled(2.0))
    for k in g1.named():
        assert np.allclose(g2.named()[k], 2 * g1.named()[k], rtol=0, atol=1e-15)


def test_unused_parameter_gets_zero_gradient():
    from pcltrack import autodiff as ad
    from pcltrack.model import LossTape, params_as_leaves

    params = init_params(3, D=4, hidden=5, rng=np.random.default_rng(0))
    leaves = params_as_leaves(params)
    root = ad.tsum(ad.square(leaves["w0"]))
    g = backward(params, LossTape(root, leaves))
    assert np.allclose(g.layers[0][0], 2 * params.layers[0][0])
    assert not np.any(g.null_embedding) and not np.any(g.layers[1][0]) and not np.any(g.layers[0][1])
