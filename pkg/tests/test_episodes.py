import copy

import numpy as np
import pytest

from svflab.episodes import (
    NUM_CLASSES, Episode, SplitPlan, _background, default_classes, dump_episodes, episode_rng, episode_stream,
    load_episodes, patch_dataset, render_scene, sample_episode,
)


def test_class_list_is_unique():
    classes = default_classes()
    assert len(classes) == NUM_CLASSES
    assert len({(c.shape, c.texture) for c in classes}) == NUM_CLASSES


@pytest.mark.parametrize("fold", range(4))
def test_folds_partition(fold):
    plan = SplitPlan.default(fold)
    folds = plan.folds()
    assert sorted(sum(folds, ())) == list(range(NUM_CLASSES))
    assert max(map(len, folds)) - min(map(len, folds)) <= 1
    assert not set(plan.train_classes) & set(plan.test_classes)
    assert len(plan.train_classes) == 15 and len(plan.test_classes) == 5


def test_uneven_folds():
    plan = SplitPlan.default(num_folds=3)
    sizes = [len(f) for f in plan.folds()]
    assert sum(sizes) == 20 and max(sizes) - min(sizes) <= 1


def test_plan_validation():
    with pytest.raises(ValueError):
        SplitPlan.default(fold=4)
    cls = default_classes()
    with pytest.raises(ValueError):
        SplitPlan((cls[0], cls[0]), num_folds=1)
    with pytest.raises(ValueError):
        SplitPlan.default().split_classes("val")


def test_render_determinism_and_range():
    spec = default_classes()[3]
    a = render_scene(spec, np.random.default_rng(5))
    b = render_scene(spec, np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].dtype == np.float32 and a[0].shape == (3, 64, 64)
    assert a[0].min() >= 0 and a[0].max() <= 1 and a[1].dtype == bool


@pytest.mark.parametrize("cid", range(NUM_CLASSES))
def test_area_bounds(cid):
    spec = default_classes()[cid]
    lo, hi = spec.area_bounds()
    for s in range(10):
        _, mask = render_scene(spec, np.random.default_rng([cid, s]), max_distractors=0)
        assert lo <= mask.sum() <= hi


def test_no_distractors_mask_is_object():
    spec = default_classes()[0]
    rng = np.random.default_rng(9)
    bg, _ = _background(copy.deepcopy(rng), (64, 64))
    img, mask = render_scene(spec, rng, max_distractors=0)
    changed = (np.abs(img - bg.astype(np.float32)) > 0).any(axis=0)
    np.testing.assert_array_equal(changed, mask)


def test_episode_contract():
    plan = SplitPlan.default()
    ep = sample_episode(plan, "test", 5, episode_rng(1, "test", 0))
    assert ep.class_id in plan.test_classes and ep.k == 5
    assert len({im.tobytes() for im in ep.support_images}) == 5
    assert all(m.any() for m in ep.support_masks) and ep.query_mask.any()
    with pytest.raises(ValueError):
        sample_episode(plan, "test", 3, episode_rng(1, "test", 0))
    with pytest.raises(ValueError):
        sample_episode(plan, "test", 1, episode_rng(1, "test", 0), class_id=plan.train_classes[0])


def test_empty_support_mask_rejected():
    z = np.zeros((1, 8, 8), bool)
    with pytest.raises(ValueError):
        Episode(np.zeros((1, 3, 8, 8), np.float32), z, np.zeros((3, 8, 8), np.float32), z[0], 0)


def test_stream_determinism_and_disjointness():
    plan = SplitPlan.default(2)
    a = episode_stream(plan, "test", 1, 7, 30)
    b = episode_stream(plan, "test", 1, 7, 30)
    c = episode_stream(plan, "test", 1, 8, 30)
    assert all(x.query_image.tobytes() == y.query_image.tobytes() for x, y in zip(a, b))
    assert any(x.query_image.tobytes() != y.query_image.tobytes() for x, y in zip(a, c))
    assert {e.class_id for e in a} <= set(plan.test_classes)
    assert {e.class_id for e in episode_stream(plan, "train", 1, 7, 30)} <= set(plan.train_classes)
    # a later slice continues the same stream
    tail = episode_stream(plan, "test", 1, 7, 5, start=25)
    assert all(x.query_mask.tobytes() == y.query_mask.tobytes() for x, y in zip(a[25:], tail))


def test_patch_dataset():
    plan = SplitPlan.default()
    x, y = patch_dataset(plan, 3, 0, 32)
    assert x.shape == (45, 3, 32, 32) and np.bincount(y).tolist() == [3] * 15


def test_dump_load_roundtrip(tmp_path):
    eps = episode_stream(SplitPlan.default(), "test", 5, 0, 3)
    back = load_episodes(dump_episodes(eps, tmp_path))
    for a, b in zip(eps, back):
        assert a.class_id == b.class_id
        assert a.support_images.tobytes() == b.support_images.tobytes()
        assert (a.query_mask == b.query_mask).all() and (a.support_masks == b.support_masks).all()
