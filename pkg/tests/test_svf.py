import math

import numpy as np
import pytest

from svflab.autodiff import Graph
from svflab.strategy import StrategyConfig
from svflab.svf import (
    ConvShape, decompose_conv, read_svd_changes, recompose, resnet50_conv_shapes, singular_value_report,
    svf_forward, svf_ratio_report, trainable_param_ratio, write_svd_changes,
)
from svflab.tensor import ConvGeometry, conv2d, fold_weights


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_identity_1x1():
    d = decompose_conv(np.ones((1, 1, 1, 1)), ConvGeometry.square(1))
    assert d.conv_v.value.ravel().tolist() == [1.0]
    assert d.scale.value.tolist() == [1.0]
    assert d.conv_u.value.ravel().tolist() == [1.0]


def test_orthogonal_weight_has_unit_scale():
    q = np.linalg.qr(np.random.default_rng(0).standard_normal((9, 9)))[0]
    d = decompose_conv(q.reshape(9, 1, 3, 3), ConvGeometry.square(3))
    np.testing.assert_allclose(d.scale.value, 1.0, rtol=1e-12)


def test_shapes_and_rank():
    d = decompose_conv(np.random.default_rng(1).standard_normal((8, 4, 3, 3)), ConvGeometry.square(3, 2, 1))
    assert d.rank == min(8, 36) == 8
    assert d.conv_v.shape == (8, 4, 3, 3) and d.conv_u.shape == (8, 8, 1, 1)
    wide = decompose_conv(np.ones((64, 3, 1, 1)), ConvGeometry.square(1))
    assert wide.rank == 3 and wide.conv_v.shape == (3, 3, 1, 1) and wide.conv_u.shape == (64, 3, 1, 1)


@pytest.mark.parametrize("variant", ["A", "B"])
def test_seeded_8x4x3x3_stride2_pad1(variant):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((8, 4, 3, 3))
    g = ConvGeometry.square(3, 2, 1)
    x = rng.standard_normal((2, 4, 9, 9))
    d = decompose_conv(w, g, variant)
    assert rel(svf_forward(d, x), conv2d(x, w, g)) <= 1e-10


def test_scale_equals_singular_values():
    w = np.random.default_rng(3).standard_normal((6, 5, 3, 3))
    d = decompose_conv(w, ConvGeometry.square(3))
    np.testing.assert_allclose(d.scale.value, np.linalg.svd(fold_weights(w), compute_uv=False), rtol=1e-12)
    assert np.all(np.diff(d.scale.value) <= 0)


def test_variant_b_init():
    w = np.random.default_rng(4).standard_normal((5, 3, 3, 3))
    a = decompose_conv(w, ConvGeometry.square(3, 1, 1), "A")
    b = decompose_conv(w, ConvGeometry.square(3, 1, 1), "B")
    assert np.all(b.s_prime.value == 0)
    assert b.effective_scale().tobytes() == b.frozen_s.value.tobytes()
    x = np.random.default_rng(5).standard_normal((1, 3, 6, 6))
    assert svf_forward(a, x).tobytes() == svf_forward(b, x).tobytes()
    assert b.s_prime.trainable and not b.frozen_s.trainable


def test_zero_scale_gives_zero_output():
    d = decompose_conv(np.random.default_rng(6).standard_normal((4, 2, 3, 3)), ConvGeometry.square(3))
    d.scale.value[:] = 0
    assert not svf_forward(d, np.ones((1, 2, 5, 5))).any()


def test_recompose_roundtrip_and_linearity():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((6, 4, 3, 3))
    g = ConvGeometry.square(3)
    d = decompose_conv(w, g)
    assert rel(recompose(d), w) <= 1e-10
    x = rng.standard_normal((1, 4, 7, 7))
    d.scale.value = d.scale.value * rng.random(d.rank)
    assert rel(svf_forward(d, x), conv2d(x, recompose(d), g)) <= 1e-10
    d2 = decompose_conv(w, g)
    d2.scale.value = 2 * d2.scale.value
    np.testing.assert_allclose(np.linalg.svd(fold_weights(recompose(d2)), compute_uv=False),
                               2 * np.linalg.svd(fold_weights(w), compute_uv=False), rtol=1e-12)
    b = decompose_conv(w, g, "B")
    b.s_prime.value = np.full(b.rank, math.log(2.0))
    np.testing.assert_allclose(recompose(b), recompose(d2), rtol=1e-12, atol=1e-14)


def test_variant_b_positivity():
    b = decompose_conv(np.random.default_rng(8).standard_normal((4, 4, 1, 1)), ConvGeometry.square(1), "B")
    b.s_prime.value = np.array([-50.0, -5.0, 0.0, 5.0])
    assert np.all(b.effective_scale() > 0)


def test_channel_mismatch():
    d = decompose_conv(np.ones((2, 3, 1, 1)), ConvGeometry.square(1))
    with pytest.raises(ValueError, match="channel"):
        svf_forward(d, np.ones((1, 4, 2, 2)))


@pytest.mark.parametrize("variant", ["A", "B"])
def test_graph_gradients_reach_only_scale(variant):
    rng = np.random.default_rng(9)
    d = decompose_conv(rng.standard_normal((4, 3, 3, 3)), ConvGeometry.square(3, 1, 1), variant)
    d.set_trainable("S")
    g = Graph()
    out = d.build(g, g.input("x", (2, 3, 5, 5)))
    loss = g.sum(g.relu(out))
    g.forward({"x": rng.standard_normal((2, 3, 5, 5))})
    grads = g.backward(loss)
    assert set(grads) == {d.scale_param}
    assert np.abs(grads[d.scale_param]).max() > 0
    assert d.conv_u.grad is None and d.conv_v.grad is None


def test_set_trainable_subspaces():
    d = decompose_conv(np.ones((2, 2, 1, 1)), ConvGeometry.square(1), "B")
    d.set_trainable({"U", "V"})
    assert d.conv_u.trainable and d.conv_v.trainable and not d.s_prime.trainable and not d.frozen_s.trainable


def test_report_clamp_and_zero_delta():
    d = decompose_conv(np.random.default_rng(10).standard_normal((5, 5, 1, 1)), ConvGeometry.square(1))
    recs = singular_value_report(d.snapshot(), d, top_k=30)
    assert len(recs) == 5 and [r.position for r in recs] == [1, 2, 3, 4, 5]
    assert all(r.delta == 0 for r in recs)


def test_report_deltas_are_snapshot_differences(tmp_path):
    d = decompose_conv(np.random.default_rng(11).standard_normal((40, 8, 3, 3)), ConvGeometry.square(3), name="L")
    before = d.snapshot()
    rng = np.random.default_rng(12)
    for _ in range(10):
        d.scale.value = d.scale.value - 0.01 * rng.standard_normal(d.rank)
    recs = singular_value_report(before, d)
    assert len(recs) == 30
    order = np.argsort(-before.scale.value, kind="stable")[:30]
    np.testing.assert_array_equal([r.delta for r in recs], d.scale.value[order] - before.scale.value[order])
    path = tmp_path / "svd_changes.csv"
    write_svd_changes(path, recs)
    assert path.read_text().splitlines()[0] == "layer,position,initial,final,delta"
    from decimal import Decimal

    rows = read_svd_changes(path)
    assert len(rows) == 30
    for row in rows:
        assert Decimal(row["final"]) - Decimal(row["initial"]) == Decimal(row["delta"])
        assert len(row["initial"].replace("-", "").replace(".", "").lstrip("0").split("e")[0]) <= 9


def test_ratio_closed_forms():
    assert trainable_param_ratio([(4, 4, 1)], StrategyConfig.svf(stages={1, 2, 3, 4})) == 0.25
    shapes = [(8, 3, 3, 1), (16, 8, 1, 2), (16, 16, 3, 2)]
    assert trainable_param_ratio(shapes, StrategyConfig.full()) == 1.0
    with pytest.raises(ValueError):
        trainable_param_ratio([], StrategyConfig.svf())


def test_resnet50_shapes_and_ratio():
    shapes = resnet50_conv_shapes()
    assert len(shapes) == 53
    assert sum(s.weights for s in shapes) == 23454912
    rep = svf_ratio_report()
    # closed form: rank sum over stages 2-4, enumerated independently of the strategy code
    expected = 0
    in_ch = 256
    for width, blocks in ((128, 4), (256, 6), (512, 3)):
        for b in range(blocks):
            expected += min(width, in_ch) + min(width, width * 9) + min(width * 4, width)
            if b == 0:
                expected += min(width * 4, in_ch)
            in_ch = width * 4
    assert rep["trainable"] == expected == 12544
    assert rep["conv_weights"] == 12544 / 23454912
    assert rep["conv_weights"] < 0.01


def test_convshape_rank():
    assert ConvShape(64, 3, 7).rank == 64 and ConvShape(2048, 512, 1).rank == 512
