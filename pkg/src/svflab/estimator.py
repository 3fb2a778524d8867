"""scikit-learn style wrapper: fit on episodes, predict query masks, score by mIoU."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from svflab.episodes import Episode, SplitPlan
from svflab.model import Backbone, SegHead, build_fss_model, predict_masks, pretrain_backbone
from svflab.strategy import StrategyConfig
from svflab.training import TrainConfig, evaluate, train


def _check_episodes(X, name="X") -> list[Episode]:
    if isinstance(X, Episode):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError(f"{name} holds no episodes")
    bad = [type(e).__name__ for e in X if not isinstance(e, Episode)]
    if bad:
        raise TypeError(f"{name} must contain Episode objects, found {bad[0]}")
    return X


class FewShotSegmenter(BaseEstimator):
    """Fine-tunes a pretrained toy backbone plus prototype head under one strategy.

    ``X`` is a sequence of :class:`~svflab.episodes.Episode`; ``y`` is ignored because
    the query masks travel inside the episodes. With ``backbone=None`` a backbone is
    pretrained on the base classes of the fold first.
    """

    def __init__(self, strategy="svf", subspaces="S", stages=(2, 3, 4), variant="A",
                 bn_trainable=False, conv_kind="both", epochs=40, lr=0.015, momentum=0.9,
                 batch_size=4, precision="float32", seed=321, fold=0, image_size=64,
                 pretrain_epochs=30, backbone=None, val_episodes=None):
        self.strategy = strategy
        self.subspaces = subspaces
        self.stages = stages
        self.variant = variant
        self.bn_trainable = bn_trainable
        self.conv_kind = conv_kind
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.precision = precision
        self.seed = seed
        self.fold = fold
        self.image_size = image_size
        self.pretrain_epochs = pretrain_epochs
        self.backbone = backbone
        self.val_episodes = val_episodes

    def _strategy(self) -> StrategyConfig:
        spec = {"kind": self.strategy, "conv_kind": self.conv_kind, "subspaces": ",".join(self.subspaces),
                "variant": self.variant, "bn_trainable": str(bool(self.bn_trainable)).lower()}
        if self.strategy not in ("freeze", "full"):
            spec["stages"] = ",".join(str(s) for s in self.stages)
        return StrategyConfig.from_dict(spec)

    def fit(self, X, y=None):
        pool = _check_episodes(X)
        size = pool[0].image_size[0]
        plan = SplitPlan.default(self.fold, size)
        strategy = self._strategy()
        backbone = self.backbone
        if backbone is None:
            backbone = pretrain_backbone(plan, self.pretrain_epochs, self.seed).backbone
        elif not isinstance(backbone, Backbone):
            raise TypeError("backbone must be a Backbone or None")
        head = SegHead.init(self.seed, backbone.channels[2] + backbone.channels[3])
        cfg = TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs,
                          episodes_per_epoch=len(pool), batch_size=self.batch_size,
                          seed=self.seed, precision=self.precision, k=pool[0].k, image_size=size)
        val = None if self.val_episodes is None else _check_episodes(self.val_episodes, "val_episodes")
        model = build_fss_model(backbone, head, strategy, cfg.dtype)
        self.model_, self.history_ = train(model, plan, strategy, cfg, val_set=val or pool, pool=pool)
        self.strategy_ = strategy
        self.n_trainable_backbone_ = model.backbone_trainable_count()
        return self

    def predict(self, X) -> np.ndarray:
        """Boolean query masks, shape (n_episodes, H, W)."""
        check_is_fitted(self, "model_")
        return np.stack(predict_masks(self.model_, _check_episodes(X)))

    def decision_function(self, X) -> np.ndarray:
        """Foreground-minus-background logit per query pixel."""
        check_is_fitted(self, "model_")
        out = []
        for ep in _check_episodes(X):
            lg = self.model_.logits([ep])[0]
            out.append(lg[1] - lg[0])
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Pooled mIoU over the classes present in ``X``."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, _check_episodes(X))["miou"]
