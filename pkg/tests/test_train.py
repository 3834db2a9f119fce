import csv
from dataclasses import replace

import numpy as np
import pytest

from pcltrack import train as train_mod
from pcltrack.autodiff import NumericalError
from pcltrack.core import Clip
from pcltrack.model import load_checkpoint
from pcltrack.sim import SceneConfig, generate_scene
from pcltrack.train import STATS_COLUMNS, Adam, TrainConfig, TrainingAborted, extract_clips, train


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(SceneConfig(num_identities=5, num_frames=30, appearance_dim=4, seed=s)) for s in (1, 2)]


SMALL = TrainConfig(learning_rate=1e-3, steps=6, clip_length=12, min_span=4, D=8, hidden=8, seed=3)


def flat(p):
    return p.flat()


def test_same_seed_same_params(scenes):
    a, ra = train(scenes, SMALL)
    b, rb = train(scenes, SMALL)
    assert np.array_equal(flat(a), flat(b))
    assert [r["total"] for r in ra.rows] == [r["total"] for r in rb.rows]
    c, _ = train(scenes, replace(SMALL, seed=4))
    assert not np.array_equal(flat(a), flat(c))


def test_resume_equals_uninterrupted(scenes, tmp_path):
    full, full_rep = train(scenes, SMALL)
    half, _ = train(scenes, replace(SMALL, steps=3), out_dir=str(tmp_path))
    resumed, rep = train(scenes, SMALL, resume=str(tmp_path / "model.ckpt"))
    assert np.array_equal(flat(full), flat(resumed))
    assert [r["step"] for r in rep.rows] == [4, 5, 6]
    assert [r["total"] for r in rep.rows] == [r["total"] for r in full_rep.rows[3:]]


def test_checkpoint_and_report_files(scenes, tmp_path):
    params, rep = train(scenes, replace(SMALL, checkpoint_every=2), out_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.glob("step*.ckpt")) == ["step000002.ckpt", "step000004.ckpt", "step000006.ckpt"]
    assert np.array_equal(flat(load_checkpoint(rep.checkpoint)), flat(params))
    rep.write_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == STATS_COLUMNS and len(rows) == 6
    assert all(float(r["L_OM"]) >= 1.0 - 1e-12 and float(r["L_BC"]) >= 0 for r in rows)


def test_loss_decreases_on_average(scenes):
    _, rep = train(scenes, replace(SMALL, steps=60, learning_rate=3e-3))
    totals = [r["total"] for r in rep.rows]
    assert np.mean(totals[-15:]) < np.mean(totals[:15])


def test_degenerate_hops_abort_with_last_good(scenes, tmp_path):
    with pytest.raises(TrainingAborted, match="spatial mask"):
        train(scenes, replace(SMALL, max_degenerate_rate=-1.0), out_dir=str(tmp_path))
    assert (tmp_path / "last_good.ckpt").exists()


def test_numerical_error_aborts(scenes, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("log produced nan")

    monkeypatch.setattr(train_mod, "total_loss", boom)
    with pytest.raises(TrainingAborted, match="step 0: log produced nan"):
        train(scenes, SMALL, out_dir=str(tmp_path))
    assert (tmp_path / "last_good.ckpt").exists()


def test_rejects_unusable_data(scenes):
    with pytest.raises(ValueError, match="no clip"):
        train([], SMALL)
    with pytest.raises(ValueError, match="query"):
        train(scenes, replace(SMALL, min_span=100))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_extract_clips_cover_each_scene(scenes):
    clips = extract_clips(scenes[:1], 12)
    starts = [c.start for c in clips]
    assert starts == [1, 7, 13, 19]
    assert all(len(c) == 12 for c in clips)
    assert extract_clips([Clip(scenes[0].clip.frames[:5])], 12)[0].frames == scenes[0].clip.frames[:5]


def test_adam_first_step_is_lr_times_sign(scenes):
    from pcltrack.model import init_params

    p = init_params(4, D=4, hidden=4)
    g = p.map(lambda v: np.where(np.arange(v.size).reshape(v.shape) % 2, 2.0, -0.5))
    new = Adam(p, 0.01).step(p, g)
    step = new.flat() - p.flat()
    np.testing.assert_allclose(step, -0.01 * np.sign(g.flat()), rtol=1e-6)


def test_zero_steps_returns_initial_params(scenes):
    from pcltrack.model import init_params

    init = init_params(4, D=8, hidden=8, rng=np.random.default_rng(1))
    params, rep = train(scenes, replace(SMALL, steps=0), init=init)
    assert np.array_equal(params.flat(), init.flat()) and rep.rows == []


def test_training_lowers_loss_on_noiseless_scene():
    from pcltrack.pathloss import total_loss

    scene = generate_scene(SceneConfig(num_identities=5, num_frames=48, appearance_dim=4, appearance_noise=0.0, seed=8))
    cfg = replace(SMALL, steps=200, clip_length=24, learning_rate=3e-3)
    start, _ = train([scene], replace(cfg, steps=0))
    end, _ = train([scene], cfg)
    before = total_loss(scene.clip, start, cfg.loss_config(), np.random.default_rng(0))[0]
    after = total_loss(scene.clip, end, cfg.loss_config(), np.random.default_rng(0))[0]
    assert after < before


def test_two_view_keeps_the_clip_schedule(scenes):
    _, plain = train(scenes, SMALL)
    _, both = train(scenes, replace(SMALL, two_view=True))
    assert [r["clip_id"] for r in plain.rows] == [r["clip_id"] for r in both.rows]
    assert all(r["L_view"] > 0 for r in both.rows) and all(r["L_view"] == 0 for r in plain.rows)
