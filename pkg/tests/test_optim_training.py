import math

import numpy as np
import pytest

from svflab.autodiff import Param
from svflab.optim import cosine_lr, sgd_step
from svflab.strategy import StrategyConfig
from svflab.training import EpochRecord, History, TrainConfig, evaluate, train


def test_cosine_schedule():
    assert cosine_lr(0, 10, 0.3) == 0.3
    assert cosine_lr(10, 10, 0.3) == 0.0
    assert abs(cosine_lr(5, 10, 0.3) - 0.15) <= 1e-15
    vals = [cosine_lr(s, 20, 1.0) for s in range(21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


def _param(v):
    return Param(np.asarray(v, float), True, "p")


def test_sgd_examples():
    p = _param([2.0, -3.0])
    p.grad = p.value.copy()
    sgd_step([p], 1.0, 0.0, {})
    assert not p.value.any()
    q = _param([1.0, 2.0])
    q.grad = np.ones(2)
    sgd_step([q], 0.0, 0.9, {})
    assert q.value.tolist() == [1.0, 2.0]


def test_sgd_two_step_recurrence():
    lr, mu = 0.1, 0.9
    p, vel = _param([1.0]), {}
    p.grad = np.ones(1)
    sgd_step([p], lr, mu, vel)
    assert p.value[0] == 1 - lr
    p.grad = np.ones(1)
    sgd_step([p], lr, mu, vel)
    # v2 = mu * 1 + 1 = 1.9
    assert abs(p.value[0] - (1 - lr - lr * 1.9)) <= 1e-15


def test_sgd_skips_frozen_and_gradless():
    a, b = _param([1.0]), _param([1.0])
    a.trainable = False
    a.grad = np.ones(1)
    sgd_step([a, b], 1.0, 0.0, {})
    assert a.value[0] == 1.0 and b.value[0] == 1.0
    b.grad = np.ones(3)
    with pytest.raises(ValueError):
        sgd_step([b], 1.0, 0.0, {})


def test_train_config_validation():
    for kw in (dict(lr=0), dict(epochs=-1), dict(momentum=1.0), dict(precision="float16"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_history_csv(tmp_path):
    h = History()
    h.append(EpochRecord(0, 1.0, 0.25, 0.125))
    with pytest.raises(ValueError):
        h.append(EpochRecord(2, 1.0, 0.0, 0.0))
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,train_miou,val_miou\n0,1.000000,0.250000,0.125000\n"
    assert History.read_csv(tmp_path / "h.csv").records == h.records


def _values(model):
    return {k: p.value.copy() for k, p in model.named_params().items()}


def test_epochs_zero(plan, make_model, small_cfg):
    from dataclasses import replace

    m = make_model(StrategyConfig.svf())
    before = _values(m)
    m, h = train(m, plan, StrategyConfig.svf(), replace(small_cfg, epochs=0))
    assert len(h) == 0
    assert all(before[k].tobytes() == v.tobytes() for k, v in _values(m).items())


def test_freeze_leaves_backbone_bitwise(plan, make_model, small_cfg):
    s = StrategyConfig.freeze()
    m = make_model(s)
    assert m.backbone_trainable_count() == 0
    bb = {k: p.value.copy() for k, p in m.backbone.named_params().items()}
    stats = {k: v.copy() for k, v in m.backbone.named_stats().items()}
    head = {k: p.value.copy() for k, p in m.head.named_params().items()}
    lines = []
    m, h = train(m, plan, s, small_cfg, progress=lines.append)
    assert len(h) == 2 and lines[0].startswith("[epoch 0] loss=")
    for k, p in m.backbone.named_params().items():
        assert p.value.tobytes() == bb[k].tobytes()
    for k, v in m.backbone.named_stats().items():
        assert v.tobytes() == stats[k].tobytes()
    assert any(p.value.tobytes() != head[k].tobytes() for k, p in m.head.named_params().items())


def test_svf_s_changes_only_scale_and_head(plan, make_model, small_cfg):
    s = StrategyConfig.svf()
    m = make_model(s)
    before = _values(m)
    m, _ = train(m, plan, s, small_cfg)
    after = _values(m)
    changed = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    assert changed <= {k for k in before if k.endswith(".scale") or k.startswith("head.")}
    assert any(k.endswith(".scale") for k in changed)


def test_determinism(plan, make_model, small_cfg):
    runs = []
    for _ in range(2):
        m, h = train(make_model(StrategyConfig.svf()), plan, StrategyConfig.svf(), small_cfg)
        runs.append((h.records, _values(m)))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == v.tobytes() for k, v in runs[1][1].items())


def test_prefix_cache_matches_uncached(plan, make_model, small_cfg):
    from dataclasses import replace

    s = StrategyConfig.svf(stages={3, 4})
    a, ha = train(make_model(s), plan, s, small_cfg)
    b, hb = train(make_model(s), plan, s, replace(small_cfg, cache_prefix=False))
    for x, y in zip(ha.records, hb.records):
        assert math.isclose(x.train_loss, y.train_loss, rel_tol=1e-9)


def test_strategy_mismatch(plan, make_model, small_cfg):
    m = make_model(StrategyConfig.freeze())
    with pytest.raises(ValueError):
        train(m, plan, StrategyConfig.full(), small_cfg)


def test_evaluate_matches_pooled_oracle(make_model, small_episodes):
    from svflab.model import predict_masks

    m = make_model(StrategyConfig.freeze())
    scores = evaluate(m, small_episodes)
    preds = predict_masks(m, small_episodes)
    per_class, fb = {}, {1: [0, 0, 0], 0: [0, 0, 0]}
    for ep, p in zip(small_episodes, preds):
        g = ep.query_mask
        c = per_class.setdefault(ep.class_id, [0, 0, 0])
        for pp, gg in zip(p.ravel().tolist(), g.ravel().tolist()):
            c[0] += pp and gg
            c[1] += pp and not gg
            c[2] += gg and not pp
            fb[1][0] += pp and gg
            fb[1][1] += pp and not gg
            fb[1][2] += gg and not pp
            fb[0][0] += (not pp) and not gg
            fb[0][1] += (not pp) and gg
            fb[0][2] += pp and not gg
    ratio = lambda t: t[0] / sum(t)  # noqa: E731
    assert abs(scores["miou"] - np.mean([ratio(v) for v in per_class.values()])) <= 1e-12
    assert abs(scores["fb_iou"] - 0.5 * (ratio(fb[0]) + ratio(fb[1]))) <= 1e-12
