"""Strategy application, the episodic fine-tuning loop and its per-epoch history."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from svflab.episodes import REFERENCE_SIZE, Episode, SplitPlan, episode_stream
from svflab.metrics import ConfusionTally, accumulate, accumulate_fb, fb_iou, miou
from svflab.model import FSSModel, predict_masks
from svflab.optim import cosine_lr, sgd_step
from svflab.strategy import StrategyConfig
from svflab.svf import decompose_conv

__all__ = [
    "StrategyConfig", "TrainConfig", "History", "EpochRecord", "apply_strategy", "train",
    "evaluate", "cosine_lr", "sgd_step", "validation_episodes",
]

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.015
    momentum: float = 0.9
    epochs: int = 40
    episodes_per_epoch: int = 32
    batch_size: int = 4
    seed: int = 321
    precision: str = "float32"
    k: int = 1
    val_episodes: int = 200
    image_size: int = REFERENCE_SIZE
    max_distractors: int = 2
    cache_prefix: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.episodes_per_epoch < 1 or self.batch_size < 1 or self.val_episodes < 1:
            raise ValueError("episodes_per_epoch, batch_size and val_episodes must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_miou: float
    val_miou: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def append(self, rec: EpochRecord) -> None:
        if rec.epoch != len(self.records):
            raise ValueError(f"expected epoch {len(self.records)}, got {rec.epoch}")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_miou", "val_miou"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_miou:.6f}", f"{r.val_miou:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "History":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        h = cls()
        for r in rows:
            h.append(EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_miou"]),
                                 float(r["val_miou"])))
        return h


def apply_strategy(model: FSSModel, cfg: StrategyConfig) -> FSSModel:
    """Decompose and flag parameters in place; also resets the optimizer velocity slots."""
    if cfg.is_svf and not cfg.subspaces:
        raise ValueError("SVF strategy needs at least one subspace")
    if model.strategy is not None and model.strategy != cfg:
        raise ValueError(f"model already carries strategy {model.strategy.label}, cannot apply {cfg.label}")
    for slot in model.backbone.slots:
        chosen = cfg.selects(slot.stage, slot.kernel)
        if cfg.is_svf and chosen:
            if slot.decomposed is None:
                slot.decomposed = decompose_conv(slot.weight.value, slot.geometry, cfg.variant, slot.name)
            slot.decomposed.set_trainable(cfg.subspaces)
            slot.weight.trainable = False
        else:
            if slot.decomposed is not None:
                raise ValueError(f"{slot.name} is decomposed but {cfg.label} does not select it")
            slot.weight.trainable = chosen
        slot.gamma.trainable = cfg.bn_trainable
        slot.beta.trainable = cfg.bn_trainable
    for p in model.head.named_params().values():
        p.trainable = True
    for p in model.params():
        p.value = p.value.astype(model.dtype)
    model.strategy = cfg
    model.velocity = {p.id: np.zeros_like(p.value) for p in model.trainable_params()}
    return model


def validation_episodes(plan: SplitPlan, cfg: TrainConfig, k: int | None = None,
                        count: int | None = None) -> list[Episode]:
    """The fixed, seed-determined test-split episodes used for every strategy."""
    count = cfg.val_episodes if count is None else count
    return episode_stream(plan, "test", cfg.k if k is None else k, cfg.seed, count,
                          image_size=cfg.image_size, max_distractors=cfg.max_distractors)


def evaluate(model: FSSModel, episodes: list[Episode], class_set=None, prefix=None) -> dict[str, float]:
    """Pooled mIoU over ``class_set`` (default: classes present) and FB-IoU."""
    preds = predict_masks(model, episodes, prefix=prefix)
    tally, fb = ConfusionTally(), ConfusionTally()
    for ep, pred in zip(episodes, preds):
        accumulate(tally, pred, ep.query_mask, ep.class_id)
        accumulate_fb(fb, pred, ep.query_mask)
    classes = sorted({ep.class_id for ep in episodes}) if class_set is None else class_set
    return {"miou": miou(tally, classes), "fb_iou": fb_iou(fb)}


def train(model: FSSModel, plan: SplitPlan, strategy: StrategyConfig | None, cfg: TrainConfig,
          progress=None, val_set: list[Episode] | None = None, pool: list[Episode] | None = None):
    """Episodic fine-tuning. Returns (model, History); ``progress`` receives one line per epoch.

    ``pool`` replaces the seeded training episodes and ``val_set`` the seeded validation set.
    """
    if strategy is not None and model.strategy != strategy:
        if model.strategy is None:
            apply_strategy(model, strategy)
        else:
            raise ValueError(f"model was built for {model.strategy.label}, not {strategy.label}")
    if model.strategy is None:
        raise ValueError("no strategy applied to the model")
    history = History()
    if cfg.epochs == 0:
        return model, history

    # a fixed pool of training episodes, reshuffled every epoch
    if pool is None:
        pool = episode_stream(plan, "train", cfg.k, cfg.seed, cfg.episodes_per_epoch,
                              image_size=cfg.image_size, max_distractors=cfg.max_distractors)
    elif not pool:
        raise ValueError("training pool is empty")
    elif len({ep.k for ep in pool}) > 1:
        raise ValueError("all training episodes must share k")
    val = val_set if val_set is not None else validation_episodes(plan, cfg)
    stop = model.backbone.frozen_prefix() if cfg.cache_prefix else 0
    pool_prefix = model.prefix_features(pool, stop)
    val_prefix = model.prefix_features(val, stop)

    rng = np.random.default_rng([int(cfg.seed), 17])
    steps_per_epoch = math.ceil(len(pool) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    velocity = getattr(model, "velocity", None) or {}
    params = model.params()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pool))
        losses, tally = [], ConfusionTally()
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [pool[i] for i in idx]
            g, feeds, logits, loss = model.build_graph(batch, prefix=[pool_prefix[i] for i in idx])
            g.forward(feeds)
            g.backward(loss)
            sgd_step(params, cosine_lr(step, total, cfg.lr), cfg.momentum, velocity)
            step += 1
            losses.append(float(g.value(loss)))
            lg = g.value(logits)
            for ep, l in zip(batch, lg):
                accumulate(tally, l[1] > l[0], ep.query_mask, ep.class_id)
        train_classes = sorted({ep.class_id for ep in pool})
        val_miou = evaluate(model, val, prefix=val_prefix)["miou"]
        rec = EpochRecord(epoch, float(np.mean(losses)), miou(tally, train_classes), val_miou)
        history.append(rec)
        line = (f"[epoch {epoch}] loss={rec.train_loss:.4f} train_miou={rec.train_miou:.4f} "
                f"val_miou={rec.val_miou:.4f}")
        log.info(line)
        if progress is not None:
            progress(line)
    model.velocity = velocity
    return model, history
