import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svflab.metrics import ConfusionTally, accumulate, accumulate_fb, fb_iou, iou, miou, read_results, write_results


def brute_counts(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
    return tp, fp, fn


def test_all_ones():
    t = accumulate(ConfusionTally(), np.ones((2, 2), bool), np.ones((2, 2), bool), 3)
    assert t.get(3) == (4, 0, 0)
    assert miou(t, [3]) == 1.0


def test_negation_has_no_tp():
    gt = np.random.default_rng(0).random((5, 5)) > 0.5
    assert accumulate(ConfusionTally(), ~gt, gt, 0).get(0)[0] == 0


def test_hand_iou():
    t = ConfusionTally({7: [1, 1, 2]})
    assert iou(t, 7) == 0.25 == miou(t, [7])


def test_fb_hand_example():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    t = accumulate_fb(ConfusionTally(), np.ones((4, 4), bool), gt)
    assert iou(t, 1) == 0.5 and iou(t, 0) == 0.0 and fb_iou(t) == 0.25


def test_undefined_iou_and_empty_set():
    with pytest.raises(ZeroDivisionError):
        iou(ConfusionTally(), 1)
    with pytest.raises(ValueError):
        miou(ConfusionTally({1: [1, 0, 0]}), [])


def test_shape_and_binary_checks():
    with pytest.raises(ValueError):
        accumulate(ConfusionTally(), np.ones((2, 2), bool), np.ones((3, 2), bool), 0)
    with pytest.raises(ValueError):
        accumulate(ConfusionTally(), np.full((2, 2), 0.5), np.ones((2, 2), bool), 0)


def test_randomized_oracle_pooled():
    rng = np.random.default_rng(1)
    tally, fb = ConfusionTally(), ConfusionTally()
    ref = {}
    ref_fb = {0: [0, 0, 0], 1: [0, 0, 0]}
    for _ in range(100):
        shape = tuple(rng.integers(1, 12, size=2))
        pred, gt = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        c = int(rng.integers(0, 5))
        accumulate(tally, pred, gt, c)
        accumulate_fb(fb, pred, gt)
        r = ref.setdefault(c, [0, 0, 0])
        for i, v in enumerate(brute_counts(pred, gt)):
            r[i] += v
        for cls, (p, g) in ((1, (pred, gt)), (0, (~pred, ~gt))):
            for i, v in enumerate(brute_counts(p, g)):
                ref_fb[cls][i] += v
    assert {k: list(v) for k, v in tally.counts.items()} == ref
    ratios = [tp / (tp + fp + fn) for tp, fp, fn in ref.values()]
    assert abs(miou(tally, sorted(ref)) - sum(ratios) / len(ratios)) <= 1e-12
    fb_ref = 0.5 * sum(tp / (tp + fp + fn) for tp, fp, fn in ref_fb.values())
    assert abs(fb_iou(fb) - fb_ref) <= 1e-12


def test_order_invariance_and_merge():
    rng = np.random.default_rng(2)
    pairs = [(rng.random((4, 4)) > 0.5, rng.random((4, 4)) > 0.5, int(rng.integers(3))) for _ in range(6)]
    ref = ConfusionTally()
    for p, g, c in pairs:
        accumulate(ref, p, g, c)
    for perm in itertools.islice(itertools.permutations(pairs), 20):
        t = ConfusionTally()
        for p, g, c in perm:
            accumulate(t, p, g, c)
        assert t.counts == ref.counts
    a, b = ConfusionTally(), ConfusionTally()
    for i, (p, g, c) in enumerate(pairs):
        accumulate(a if i % 2 else b, p, g, c)
    assert a.merge(b).counts == ref.counts


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.5
    gt[0, 0] = pred[0, 0] = True
    gt[1, 1] = pred[1, 1] = False
    t = accumulate(ConfusionTally(), pred, gt, 0)
    fb = accumulate_fb(ConfusionTally(), pred, gt)
    assert 0 <= miou(t, [0]) <= 1 and 0 <= fb_iou(fb) <= 1


def test_results_csv_roundtrip(tmp_path):
    rows = [{"fold": 0, "strategy": "svf[S]@234", "k": 1, "miou": 0.123456, "fb_iou": 0.5}]
    write_results(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text() == "fold,strategy,k,miou,fb_iou\n0,svf[S]@234,1,0.1235,0.5000\n"
    assert read_results(tmp_path / "r.csv")[0]["strategy"] == "svf[S]@234"
