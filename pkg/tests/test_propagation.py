import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from dvp import losses
from dvp.data import DataError, PairedVideo, VideoSequence, one_hot, to_grayscale
from dvp.metrics import psnr
from dvp.network import NetSpec
from dvp.propagation import (
    MemoryQueue,
    PropagationConfig,
    PropagationError,
    Transform,
    apply_transform,
    augment,
    copy_paste,
    foreground,
    iou,
    propagate_pppl,
    propagate_reference_only,
    propagate_segmentation,
    sample_transform,
    train_reference_only,
)
from dvp.synthetic import drifting_video, moving_square_video, smooth_texture

TINY = NetSpec(depth=2, base_channels=4)
TINY_GRAY = NetSpec(in_channels=1, depth=2, base_channels=4)
TINY_SEG = NetSpec(depth=2, base_channels=4, out_channels_per_head=2, final_activation="softmax")


def _color_video(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    color = [rng.random((size, size, 3)).astype(np.float32) for _ in range(n)]
    return VideoSequence(tuple(to_grayscale(c) for c in color)), color


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(K=0), dict(augmentation=("copy_paste",)),
                                 dict(augmentation=("shear",)), dict(task="depth"),
                                 dict(crop_size=(0, 4)), dict(sampling="lifo"), dict(iterations=0)])
def test_config_invariants(bad):
    with pytest.raises(PropagationError):
        PropagationConfig(**bad)


def test_copy_paste_allowed_for_segmentation():
    cfg = PropagationConfig(task="segmentation", augmentation=("copy_paste", "flip"))
    assert cfg.augmentation == ("copy_paste", "flip")


def test_train_config_carries_fields():
    t = PropagationConfig(learning_rate=3e-4, seed=5).train_config()
    assert (t.learning_rate, t.seed) == (3e-4, 5)


# -- augmentation ---------------------------------------------------------------


def test_flip_twice_recovers():
    f = np.random.default_rng(0).random((8, 6, 3))
    cfg = PropagationConfig(augmentation=("flip",))
    tr = Transform(flip=True)
    assert np.array_equal(apply_transform(apply_transform(f, tr), tr), f)
    a = sample_transform(f.shape, cfg, np.random.default_rng(3))
    b = sample_transform(f.shape, cfg, np.random.default_rng(3))
    assert a == b
    assert np.array_equal(apply_transform(apply_transform(f, a), b), f)


def test_rotations_are_quarter_turns():
    f = np.random.default_rng(0).random((6, 6, 1))
    once = apply_transform(f, Transform(rot90=1))
    assert np.array_equal(once, np.rot90(f, 1, axes=(0, 1)))
    four = f
    for _ in range(4):
        four = apply_transform(four, Transform(rot90=1))
    assert np.array_equal(four, f)


def test_constant_crop():
    cfg = PropagationConfig(augmentation=("crop",), crop_size=(5, 7))
    x, y = augment(np.full((12, 12, 3), 0.3), np.full((12, 12, 3), 0.6), cfg, np.random.default_rng(0))
    assert x.shape == (5, 7, 3) and y.shape == (5, 7, 3)
    assert np.all(x == 0.3) and np.all(y == 0.6)


def test_crop_larger_than_frame():
    cfg = PropagationConfig(augmentation=("crop",), crop_size=(20, 20))
    with pytest.raises(PropagationError, match="larger"):
        augment(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)), cfg, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 8), w=st.integers(1, 8))
def test_copy_paste_area_bounds(seed, h, w):
    rng = np.random.default_rng(seed)
    ids = np.zeros((16, 16), dtype=np.int64)
    y, x = rng.integers(0, 16 - h + 1), rng.integers(0, 16 - w + 1)
    ids[y:y + h, x:x + w] = 1
    label = one_hot(ids, 2)
    frame = rng.random((16, 16, 3))
    _, out = copy_paste(frame, label, rng)
    area = foreground(out).sum()
    assert h * w <= area <= 2 * h * w


def test_copy_paste_empty_foreground_is_noop():
    label = one_hot(np.zeros((8, 8), dtype=np.int64), 2)
    frame = np.random.default_rng(0).random((8, 8, 3))
    img, lab = copy_paste(frame, label, np.random.default_rng(0))
    assert np.array_equal(img, frame) and np.array_equal(lab, label)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_augmentation_keeps_alignment(seed):
    """Foreground recovered from the augmented frame's colour equals the augmented mask."""
    rng = np.random.default_rng(seed)
    ids = np.zeros((16, 16), dtype=np.int64)
    y, x = rng.integers(0, 10, size=2)
    ids[y:y + 5, x:x + 4] = 1
    frame = np.where(ids[..., None] == 1, [1.0, 0.0, 0.0], [0.0, 0.5, 0.0])
    cfg = PropagationConfig(task="segmentation", augmentation=("crop", "flip", "rotate", "copy_paste"),
                            crop_size=(12, 10))
    img, lab = augment(frame, one_hot(ids, 2), cfg, rng)
    assert np.array_equal(img[..., 0] == 1.0, foreground(lab))


# -- queue -------------------------------------------------------------------------


def test_queue_starts_with_reference():
    q = MemoryQueue(np.zeros((4, 4, 1)), np.zeros((4, 4, 3)))
    assert len(q) == 1 and q.pseudo_flags == [False]
    q.push(np.ones((4, 4, 1)), np.ones((4, 4, 3)), 1)
    assert len(q) == 2 and q.pseudo_flags == [False, True]
    assert q[1].index == 1


def test_recency_sampling_prefers_new_entries():
    q = MemoryQueue(np.zeros(1), np.zeros(1))
    for i in range(1, 4):
        q.push(np.zeros(1), np.zeros(1), i)
    rng = np.random.default_rng(0)
    counts = np.bincount([q.sample(rng, "recency").index for _ in range(4000)], minlength=4)
    # weights 1:2:3:4
    np.testing.assert_allclose(counts / 4000, [0.1, 0.2, 0.3, 0.4], atol=0.03)


def test_pppl_loop_accounting():
    gray, color = _color_video(4)
    pv = PairedVideo.sparse(gray, {0: color[0]})
    res = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=3))
    assert len(res.queue) == 4
    assert res.queue.pseudo_flags == [False, True, True, True]
    assert [e.index for e in res.queue] == [0, 1, 2, 3]
    assert res.queue.steps == [3, 3, 3]
    assert res.state.iteration == 9 and len(res.state.loss_history) == 9
    assert len(res.outputs) == 4
    for t in (1, 2, 3):
        assert np.array_equal(res.outputs[t], res.queue[t].target)


def test_pppl_reinfer_uses_final_network():
    gray, color = _color_video(3)
    pv = PairedVideo.sparse(gray, {0: color[0]})
    stored = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=2))
    again = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=2, reinfer=True))
    assert np.array_equal(stored.outputs[0], again.outputs[0])
    assert np.array_equal(stored.outputs[2], again.outputs[2])
    assert not np.array_equal(stored.outputs[1], again.outputs[1])


def test_pppl_rejects_multiple_references():
    gray, color = _color_video(4)
    pv = PairedVideo.sparse(gray, {0: color[0], 2: color[2]})
    with pytest.raises(PropagationError, match="exactly one reference"):
        propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=1))


def test_pppl_rejects_late_reference():
    gray, color = _color_video(4)
    with pytest.raises(PropagationError):
        propagate_pppl(PairedVideo.sparse(gray, {1: color[1]}), TINY_GRAY, PropagationConfig(K=1))


def test_pppl_needs_two_frames():
    gray, color = _color_video(1)
    with pytest.raises(PropagationError, match="two frames"):
        propagate_pppl(PairedVideo.sparse(gray, {0: color[0]}), TINY_GRAY, PropagationConfig(K=1))


def test_channel_mismatch():
    gray, color = _color_video(2)
    with pytest.raises(PropagationError, match="channels"):
        propagate_pppl(PairedVideo.sparse(gray, {0: color[0]}), TINY, PropagationConfig(K=1))


# -- what training reads -------------------------------------------------------------


def _spy_targets(monkeypatch):
    seen = []
    real = losses.data_loss

    def spy(pred, target, cfg=losses.LossConfig(), weight=None):
        seen.append(target.detach().numpy()[0].transpose(1, 2, 0).copy())
        return real(pred, target, cfg, weight)

    monkeypatch.setattr(losses, "data_loss", spy)
    return seen


def test_reference_only_reads_only_references(monkeypatch):
    gray, color = _color_video(5)
    seen = _spy_targets(monkeypatch)
    pv = PairedVideo.sparse(gray, {0: color[0], 3: color[3]})
    train_reference_only(pv, TINY_GRAY, PropagationConfig(augmentation=()), iterations=20)
    assert len(seen) == 20
    for t in seen:
        assert np.array_equal(t, color[0]) or np.array_equal(t, color[3])


def test_pppl_reads_only_queue_targets(monkeypatch):
    gray, color = _color_video(4)
    seen = _spy_targets(monkeypatch)
    pv = PairedVideo.sparse(gray, {0: color[0]})
    res = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=4, augmentation=()))
    allowed = [e.target for e in res.queue]
    for t in seen:
        assert any(np.allclose(t, a, atol=1e-6) for a in allowed)
        assert not any(np.array_equal(t, color[k]) for k in (1, 2, 3))


def test_reference_only_needs_references():
    gray, _ = _color_video(3)
    with pytest.raises(DataError, match="no reference"):
        train_reference_only(PairedVideo.sparse(gray, {}), TINY_GRAY, PropagationConfig())


def test_single_reference_loss_decreases():
    gray, color = _color_video(3)
    pv = PairedVideo.sparse(gray, {0: color[0]})
    state = train_reference_only(pv, TINY_GRAY, PropagationConfig(learning_rate=1e-3), iterations=200)
    h = state.loss_history
    assert np.mean(h[-20:]) < np.mean(h[:20])


def test_seeded_runs_match():
    gray, color = _color_video(3)
    pv = PairedVideo.sparse(gray, {0: color[0]})
    a = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=3, seed=4))
    b = propagate_pppl(pv, TINY_GRAY, PropagationConfig(K=3, seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a.outputs, b.outputs))


# -- segmentation --------------------------------------------------------------------


def test_iou_examples():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    assert iou(a, b) == 1.0
    a[:2] = 1
    b[1:3] = 1
    assert iou(a, b) == pytest.approx(4 / 12)


def test_all_background_reference():
    inputs, _ = moving_square_video(3, 16, side=6)
    bg = one_hot(np.zeros((16, 16), dtype=np.int64), 2)
    pv = PairedVideo.sparse(inputs, {0: bg})
    cfg = PropagationConfig(K=20, task="segmentation", learning_rate=1e-3)
    _, masks = propagate_segmentation(pv, TINY_SEG, cfg)
    assert all(not m.any() for m in masks)


def test_segmentation_rejects_soft_targets():
    inputs, labels = moving_square_video(2, 16, side=6)
    bad = labels[0] * 0.9
    with pytest.raises(PropagationError, match="sum to 1"):
        propagate_segmentation(PairedVideo.sparse(inputs, {0: bad}), TINY_SEG,
                               PropagationConfig(K=1, task="segmentation"))


def test_segmentation_needs_task_and_softmax():
    inputs, labels = moving_square_video(2, 16, side=6)
    pv = PairedVideo.sparse(inputs, {0: labels[0]})
    with pytest.raises(PropagationError, match="task"):
        propagate_segmentation(pv, TINY_SEG, PropagationConfig(K=1))
    sigmoid = NetSpec(depth=2, base_channels=4, out_channels_per_head=2)
    with pytest.raises(PropagationError, match="softmax"):
        propagate_segmentation(pv, sigmoid, PropagationConfig(K=1, task="segmentation"))


def test_segmentation_without_pppl_runs_same_budget(monkeypatch):
    inputs, labels = moving_square_video(4, 16, side=6)
    pv = PairedVideo.sparse(inputs, {0: labels[0]})
    calls = _spy_targets(monkeypatch)
    propagate_segmentation(pv, TINY_SEG, PropagationConfig(K=5, task="segmentation"), pppl=False)
    assert len(calls) == 15


def test_hue_drift_changes_late_frames_only_gradually():
    inputs, labels = moving_square_video(20, 32, hue_drift=1.0)
    sq = [f[np.argmax(l, 2) == 1].mean(axis=0) for f, l in zip(inputs, labels)]
    steps = [np.abs(a - b).max() for a, b in zip(sq, sq[1:])]
    assert max(steps) < 0.1
    assert np.abs(sq[0] - sq[-1]).max() > 0.5


# -- end-to-end behaviour (slow) -----------------------------------------------------


@pytest.mark.slow
def test_identical_frames_copy_reference():
    color = smooth_texture(32, 32, 3, seed=3)
    gray = to_grayscale(color)
    pv = PairedVideo.sparse(VideoSequence((gray,) * 4), {0: color})
    res = propagate_pppl(pv, NetSpec(in_channels=1, depth=3), PropagationConfig(K=100, augmentation=()))
    for e in res.queue.entries[1:]:
        assert np.abs(e.target - color).mean() <= 0.02


@pytest.mark.slow
def test_static_scene_keeps_mask():
    inputs, labels = moving_square_video(1, 32)
    pv = PairedVideo.sparse(VideoSequence((inputs[0],) * 5), {0: labels[0]})
    spec = NetSpec(depth=3, out_channels_per_head=2, final_activation="softmax")
    _, masks = propagate_segmentation(pv, spec, PropagationConfig(K=100, task="segmentation"))
    assert iou(masks[-1], np.argmax(labels[0], 2)) >= 0.9


@pytest.fixture(scope="module")
def drifting_runs():
    gray, color = drifting_video(30, 32)
    spec = NetSpec(in_channels=1, depth=3)
    out = {}
    for refs in ((0,), (0, 15, 29)):
        pv = PairedVideo.sparse(gray, {r: color[r] for r in refs})
        frames = propagate_reference_only(pv, spec, PropagationConfig(iterations=1000))
        out[refs] = [psnr(c, o) for c, o in zip(color, frames)]
    return out


@pytest.mark.slow
def test_psnr_falls_with_distance_to_nearest_reference(drifting_runs):
    refs = (0, 15, 29)
    dist = [min(abs(t - r) for r in refs) for t in range(30)]
    assert spearmanr(dist, drifting_runs[refs])[0] < 0


@pytest.mark.slow
def test_more_references_help(drifting_runs):
    assert np.mean(drifting_runs[(0, 15, 29)]) >= np.mean(drifting_runs[(0,)])


def test_float_dtype_is_preserved():
    gray, color = _color_video(2)
    res = propagate_pppl(PairedVideo.sparse(gray, {0: color[0]}), TINY_GRAY, PropagationConfig(K=1))
    assert next(res.state.net.parameters()).dtype == torch.float32
    assert res.outputs[1].dtype == np.float32
