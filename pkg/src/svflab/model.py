"""Toy four-stage backbone, prototype segmentation head, pretraining and checkpoints."""

from __future__ import annotations

import copy
import datetime as _dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from svflab.autodiff import BN_EPS, Graph, Param
from svflab.episodes import Episode, SplitPlan, patch_dataset
from svflab.optim import cosine_lr, sgd_step
from svflab.strategy import StrategyConfig
from svflab.svf import DecomposedConv, decompose_conv
from svflab.tensor import ConvGeometry, avgpool2, conv2d, read_tensor, write_tensor

log = logging.getLogger(__name__)

CHANNELS = (8, 16, 32, 64)
HEAD_HIDDEN = 32
IN_CHANNELS = 3
NUM_CLASSES_OUT = 2


@dataclass
class ConvSlot:
    name: str
    stage: int
    geometry: ConvGeometry
    weight: Param
    gamma: Param
    beta: Param
    mean: np.ndarray
    var: np.ndarray
    pool_before: bool = False
    decomposed: DecomposedConv | None = None

    @property
    def kernel(self) -> int:
        return self.geometry.kernel[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weight.shape

    def conv_params(self) -> list[Param]:
        return self.decomposed.params() if self.decomposed is not None else [self.weight]

    def named_params(self) -> dict[str, Param]:
        out = {}
        if self.decomposed is not None:
            out.update(self.decomposed.named_params())
        else:
            out[f"{self.name}.weight"] = self.weight
        out[f"{self.name}.bn_gamma"] = self.gamma
        out[f"{self.name}.bn_beta"] = self.beta
        return out

    def build(self, g: Graph, x: int, batch_stats: bool = False) -> int:
        if self.pool_before:
            x = g.avgpool2(x)
        if self.decomposed is not None:
            h = self.decomposed.build(g, x)
        else:
            h = g.conv2d(x, g.param(self.weight), self.geometry)
        if batch_stats:
            h = g.batchnorm_batch(h, g.param(self.gamma), g.param(self.beta))
        else:
            h = g.batchnorm(h, g.param(self.gamma), g.param(self.beta), self.mean, self.var)
        return g.relu(h)

    def numpy_conv(self, x: np.ndarray) -> np.ndarray:
        if self.pool_before:
            x = avgpool2(x)
        if self.decomposed is not None:
            from svflab.svf import svf_forward

            return svf_forward(self.decomposed, x)
        return conv2d(x, self.weight.value, self.geometry)

    def numpy_bn_relu(self, h: np.ndarray) -> np.ndarray:
        dt = h.dtype
        inv = (1.0 / np.sqrt(self.var + BN_EPS)).astype(dt)[None, :, None, None]
        xhat = (h - self.mean.astype(dt)[None, :, None, None]) * inv
        y = self.gamma.value.astype(dt)[None, :, None, None] * xhat
        return np.maximum(y + self.beta.value.astype(dt)[None, :, None, None], 0)


@dataclass
class Backbone:
    slots: list[ConvSlot]
    channels: tuple[int, ...] = CHANNELS

    @classmethod
    def init(cls, seed: int, channels=CHANNELS, dtype=np.float64) -> "Backbone":
        rng = np.random.default_rng([int(seed), 7])
        slots = []
        cin = IN_CHANNELS
        for stage, c in enumerate(channels, start=1):
            plan = [("entry", 1, 0, cin, stage > 1), ("block1", 3, 1, c, False), ("block2", 3, 1, c, False)]
            for tag, k, pad, ci, pool in plan:
                std = np.sqrt(2.0 / (ci * k * k))
                w = rng.normal(0.0, std, (c, ci, k, k)).astype(dtype)
                name = f"stage{stage}.{tag}"
                slots.append(ConvSlot(
                    name, stage, ConvGeometry.square(k, 1, pad), Param(w, False, f"{name}.weight"),
                    Param(np.ones(c, dtype), False, f"{name}.bn_gamma"),
                    Param(np.zeros(c, dtype), False, f"{name}.bn_beta"),
                    np.zeros(c), np.ones(c), pool_before=pool,
                ))
            cin = c
        return cls(slots, tuple(channels))

    def copy(self) -> "Backbone":
        return copy.deepcopy(self)

    def stage_slots(self, stage: int) -> list[ConvSlot]:
        return [s for s in self.slots if s.stage == stage]

    def named_params(self) -> dict[str, Param]:
        out = {}
        for s in self.slots:
            out.update(s.named_params())
        return out

    def named_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for s in self.slots:
            out[f"{s.name}.bn_mean"] = s.mean
            out[f"{s.name}.bn_var"] = s.var
        return out

    def conv_shapes(self):
        from svflab.svf import ConvShape

        return [ConvShape(s.shape[0], s.shape[1], s.kernel, s.stage) for s in self.slots]

    def build(self, g: Graph, x: int, start: int = 1, batch_stats: bool = False) -> list[int]:
        """Stages ``start``..4 on top of ``x`` (the output of stage ``start - 1``)."""
        outs = []
        for stage in range(start, 5):
            for slot in self.stage_slots(stage):
                x = slot.build(g, x, batch_stats)
            outs.append(x)
        return outs

    def forward_numpy(self, x: np.ndarray, stop: int = 4) -> list[np.ndarray]:
        outs = []
        for stage in range(1, stop + 1):
            for slot in self.stage_slots(stage):
                x = slot.numpy_bn_relu(slot.numpy_conv(x))
            outs.append(x)
        return outs

    def frozen_prefix(self) -> int:
        """Number of leading stages without a trainable scalar."""
        n = 0
        for stage in range(1, 5):
            if any(p.trainable for s in self.stage_slots(stage) for p in s.named_params().values()):
                break
            n = stage
        return n

    def capture_bn_stats(self, images: np.ndarray) -> None:
        """Replace every BN's running statistics by the batch statistics of ``images``.

        Layers are visited in order, so each layer sees inputs normalised with the
        statistics just captured for the layers before it.
        """
        x = images
        for slot in self.slots:
            h = slot.numpy_conv(x)
            slot.mean = h.mean(axis=(0, 2, 3)).astype(np.float64)
            slot.var = h.var(axis=(0, 2, 3)).astype(np.float64)
            x = slot.numpy_bn_relu(h)


@dataclass
class SegHead:
    params: dict[str, Param]

    @classmethod
    def init(cls, seed: int, feat_channels: int, hidden: int = HEAD_HIDDEN, dtype=np.float64) -> "SegHead":
        rng = np.random.default_rng([int(seed), 11])

        def he(shape):
            fan_in = shape[1] * shape[2] * shape[3]
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)

        p = {
            "head.dec1.weight": he((hidden, feat_channels + 1, 3, 3)),
            "head.dec1.bias": np.zeros(hidden, dtype),
            "head.dec2.weight": he((hidden, hidden, 3, 3)),
            "head.dec2.bias": np.zeros(hidden, dtype),
            "head.cls.weight": he((NUM_CLASSES_OUT, hidden, 1, 1)) * 0.5,
            "head.cls.bias": np.zeros(NUM_CLASSES_OUT, dtype),
        }
        return cls({k: Param(v, True, k) for k, v in p.items()})

    def named_params(self) -> dict[str, Param]:
        return dict(self.params)

    def build(self, g: Graph, query_feat: int, sim: int, upsample: int) -> int:
        p = {k: g.param(v) for k, v in self.params.items()}
        three = ConvGeometry.square(3, 1, 1)
        h = g.concat(query_feat, sim)
        h = g.relu(g.add(g.conv2d(h, p["head.dec1.weight"], three), p["head.dec1.bias"]))
        h = g.relu(g.add(g.conv2d(h, p["head.dec2.weight"], three), p["head.dec2.bias"]))
        h = g.add(g.conv2d(h, p["head.cls.weight"], ConvGeometry.square(1)), p["head.cls.bias"])
        return g.upsample(h, upsample) if upsample > 1 else h


def downsample_masks(masks: np.ndarray, factor: int) -> np.ndarray:
    """(B, H, W) binary -> (B, 1, H/f, W/f) foreground fraction per cell."""
    b, h, w = masks.shape
    m = masks.astype(np.float64).reshape(b, h // factor, factor, w // factor, factor)
    return m.mean(axis=(2, 4))[:, None]


def check_input_size(h: int, w: int) -> None:
    if h != w or h % 16 or h < 32:
        raise ValueError(f"input size must be square, a multiple of 16 and at least 32, got {h}x{w}")


@dataclass
class FSSModel:
    backbone: Backbone
    head: SegHead
    strategy: StrategyConfig | None = None
    dtype: type = np.float64
    velocity: dict = field(default_factory=dict)

    @property
    def feat_stride(self) -> int:
        return 4

    def named_params(self) -> dict[str, Param]:
        out = self.backbone.named_params()
        out.update(self.head.named_params())
        return out

    def params(self) -> list[Param]:
        return list(self.named_params().values())

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def backbone_trainable_count(self) -> int:
        return sum(p.size for p in self.backbone.named_params().values() if p.trainable)

    def decomposed(self) -> list[DecomposedConv]:
        return [s.decomposed for s in self.backbone.slots if s.decomposed is not None]

    def prefix_features(self, episodes: list[Episode], stop: int | None = None) -> list[dict]:
        """Stage outputs of the frozen backbone prefix, one dict {stage: (k+1, C, h, w)} per episode.

        Supports come first, the query last. Reusing these across steps is exact because
        nothing in the prefix can change while the strategy stays applied.
        """
        stop = self.backbone.frozen_prefix() if stop is None else stop
        if stop == 0:
            return [{} for _ in episodes]
        out = []
        for ep in episodes:
            imgs = np.concatenate([ep.support_images, ep.query_image[None]]).astype(self.dtype)
            feats = self.backbone.forward_numpy(imgs, stop)
            keep = {stop} | ({3} if stop >= 3 else set())
            out.append({s: feats[s - 1] for s in keep})
        return out

    def build_graph(self, episodes: list[Episode], with_loss: bool = True, prefix: list[dict] | None = None):
        """One graph over a batch of same-k episodes. Returns (graph, feeds, logits, loss).

        ``prefix`` holds cached frozen-prefix features from :meth:`prefix_features`.
        """
        if not episodes:
            raise ValueError("empty episode batch")
        k = episodes[0].k
        if any(ep.k != k for ep in episodes):
            raise ValueError("all episodes in a batch must share k")
        h, w = episodes[0].image_size
        check_input_size(h, w)
        n = len(episodes)
        sup_masks = np.concatenate([ep.support_masks for ep in episodes])
        if np.any(sup_masks.reshape(n * k, -1).sum(axis=1) == 0):
            raise ValueError("a support mask has no foreground pixels")
        f = self.feat_stride
        feeds = {"support_masks": downsample_masks(sup_masks, f).astype(self.dtype)}

        def stacked(get):
            # supports of every episode first, then all queries
            return np.concatenate([np.concatenate([get(i)[:k] for i in range(n)]),
                                   np.stack([get(i)[k] for i in range(n)])])

        g = Graph()
        stop = max(prefix[0]) if prefix and prefix[0] else 0
        if stop == 0:
            feeds["images"] = stacked(lambda i: np.concatenate(
                [episodes[i].support_images, episodes[i].query_image[None]])).astype(self.dtype)
            outs = self.backbone.build(g, g.input("images", feeds["images"].shape))
            f3, f4 = outs[2], outs[3]
        else:
            for s in sorted(prefix[0]):
                feeds[f"stage{s}"] = stacked(lambda i, s=s: prefix[i][s])
            top = g.input(f"stage{stop}", feeds[f"stage{stop}"].shape)
            outs = self.backbone.build(g, top, start=stop + 1)
            if stop == 4:
                f3, f4 = g.input("stage3", feeds["stage3"].shape), top
            elif stop == 3:
                f3, f4 = top, outs[0]
            else:
                f3, f4 = outs[2 - stop], outs[3 - stop]
        m = g.input("support_masks", feeds["support_masks"].shape)
        feat = g.concat(f3, g.upsample(f4, 2))
        sup = g.take(feat, 0, n * k)
        qry = g.take(feat, n * k, n * k + n)
        proto = g.masked_avg_pool(sup, m, shots=k)
        sim = g.cosine_similarity(qry, proto)
        logits = g.mark_output(self.head.build(g, qry, sim, f))
        loss = None
        if with_loss:
            labels = np.stack([ep.query_mask for ep in episodes]).astype(np.int64)
            feeds["labels"] = labels
            loss = g.mark_output(g.xent(logits, g.input("labels", labels.shape)))
        return g, feeds, logits, loss

    def logits(self, episodes: list[Episode], prefix: list[dict] | None = None) -> np.ndarray:
        g, feeds, logits, _ = self.build_graph(episodes, with_loss=False, prefix=prefix)
        g.forward(feeds, keep=False)
        return g.value(logits)


def segment(model: FSSModel, episode: Episode) -> np.ndarray:
    """Per-pixel 2-class logits (2, H, W) for the query of one episode."""
    if any(not m.any() for m in episode.support_masks):
        raise ValueError("a support mask has no foreground pixels")
    return model.logits([episode])[0]


def predict_masks(model: FSSModel, episodes: list[Episode], batch_size: int = 16,
                  prefix: list[dict] | None = None) -> list[np.ndarray]:
    """Boolean foreground masks for each query; batches group episodes of equal k."""
    by_k: dict[int, list[int]] = {}
    for i, ep in enumerate(episodes):
        by_k.setdefault(ep.k, []).append(i)
    preds: dict[int, np.ndarray] = {}
    for idx in by_k.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            pre = None if prefix is None else [prefix[i] for i in chunk]
            lg = model.logits([episodes[i] for i in chunk], pre)
            for i, l in zip(chunk, lg):
                preds[i] = l[1] > l[0]
    return [preds[i] for i in range(len(episodes))]


def build_fss_model(backbone: Backbone, head: SegHead, strategy: StrategyConfig,
                    dtype=np.float64) -> FSSModel:
    from svflab.training import apply_strategy

    model = FSSModel(backbone.copy(), copy.deepcopy(head), None, dtype)
    return apply_strategy(model, strategy)


# -- pretraining ------------------------------------------------------------

@dataclass
class PretrainResult:
    backbone: Backbone
    accuracy: float
    num_classes: int
    losses: list[float]


def _classifier_graph(backbone: Backbone, clf_w: Param, clf_b: Param, images: np.ndarray, labels,
                      batch_stats: bool = False):
    g = Graph()
    x = g.input("images", images.shape)
    feats = backbone.build(g, x, batch_stats=batch_stats)[-1]
    n, c, h, w = g.shape(feats)
    ones = g.input("ones", (n, 1, h, w))
    pooled = g.masked_avg_pool(feats, ones)
    logits = g.add(g.conv2d(pooled, g.param(clf_w), ConvGeometry.square(1)), g.param(clf_b))
    feeds = {"images": images, "ones": np.ones((n, 1, h, w), dtype=images.dtype)}
    loss = None
    if labels is not None:
        lab = g.input("labels", (n, 1, 1))
        feeds["labels"] = labels.reshape(n, 1, 1)
        loss = g.xent(logits, lab)
    return g, feeds, logits, loss


def pretrain_backbone(plan: SplitPlan, epochs: int, seed: int, *, channels=CHANNELS,
                      patch_size: int = 32, per_class: int = 40, eval_per_class: int = 10,
                      batch_size: int = 32, lr: float = 0.05, momentum: float = 0.9,
                      dtype=np.float32) -> PretrainResult:
    """Patch classification over base classes.

    BN runs on batch statistics while training; a final pass over the whole patch set
    captures the statistics that stay frozen from then on.
    """
    num_classes = len(plan.train_classes)
    if num_classes < 2:
        raise ValueError("pretraining needs at least two base classes")
    backbone = Backbone.init(seed, channels)
    if epochs == 0:
        return PretrainResult(backbone, float("nan"), num_classes, [])
    images, labels = patch_dataset(plan, per_class, seed, patch_size)
    eval_images, eval_labels = patch_dataset(plan, eval_per_class, seed, patch_size, split="pretrain-eval")
    for s in backbone.slots:
        s.weight.trainable = True
        s.gamma.trainable = True
        s.beta.trainable = True
    for p in backbone.named_params().values():
        p.value = p.value.astype(dtype)
    rng = np.random.default_rng([int(seed), 13])
    clf_w = Param(rng.normal(0, np.sqrt(1.0 / channels[-1]), (num_classes, channels[-1], 1, 1)).astype(dtype),
                  True, "clf.weight")
    clf_b = Param(np.zeros(num_classes, dtype), True, "clf.bias")
    steps_per_epoch = -(-len(labels) // batch_size)
    total = epochs * steps_per_epoch
    velocity: dict = {}
    losses = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        epoch_loss = []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            g, feeds, _, loss = _classifier_graph(backbone, clf_w, clf_b, images[idx].astype(dtype), labels[idx],
                                                  batch_stats=True)
            g.forward(feeds)
            g.backward(loss)
            sgd_step(g.params, cosine_lr(step, total, lr), momentum, velocity)
            epoch_loss.append(float(g.value(loss)))
            step += 1
        losses.append(float(np.mean(epoch_loss)))
        log.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    for p in backbone.named_params().values():
        p.value = p.value.astype(np.float64)
        p.trainable = False
    backbone.capture_bn_stats(images.astype(np.float64))
    acc = classifier_accuracy(backbone, clf_w, clf_b, eval_images, eval_labels)
    return PretrainResult(backbone, acc, num_classes, losses)


def classifier_accuracy(backbone, clf_w, clf_b, images, labels, batch_size: int = 64) -> float:
    w = Param(clf_w.value.astype(np.float64), False)
    b = Param(clf_b.value.astype(np.float64), False)
    correct = 0
    for start in range(0, len(labels), batch_size):
        g, feeds, logits, _ = _classifier_graph(backbone, w, b, images[start : start + batch_size].astype(np.float64), None)
        g.forward(feeds, keep=False)
        pred = g.value(logits)[:, :, 0, 0].argmax(axis=1)
        correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / len(labels)


# -- checkpoints ------------------------------------------------------------

MANIFEST = "manifest.txt"
VOLATILE_MARKER = "# volatile (excluded from reproducibility checks)"


def _fmt_shape(shape) -> str:
    return "x".join(str(int(s)) for s in shape) if shape else "scalar"


def save_checkpoint(directory, backbone: Backbone, head: SegHead | None = None, *,
                    strategy: StrategyConfig | None = None, seed: int = 0, epoch: int = 0,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {n: p.value for n, p in backbone.named_params().items()}
    tensors.update(backbone.named_stats())
    for s in backbone.slots:
        if s.decomposed is not None:
            tensors[f"{s.name}.initial_scale"] = s.decomposed.initial_scale
    if head is not None:
        tensors.update({n: p.value for n, p in head.named_params().items()})
    lines = [
        f"architecture = {','.join(str(c) for c in backbone.channels)}",
        f"head_hidden = {head.params['head.dec1.weight'].shape[0] if head else 0}",
        f"seed = {seed}",
        f"epoch = {epoch}",
        f"strategy = {strategy.label if strategy else 'none'}",
    ]
    if strategy is not None:
        lines += [f"strategy.{k} = {v}" for k, v in strategy.to_dict().items()]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = f"{name}.svft"
        write_tensor(directory / fname, arr)
        lines.append(f"tensor.{name} = {_fmt_shape(arr.shape)}")
    lines += ["", VOLATILE_MARKER, f"created = {_dt.datetime.now().isoformat(timespec='seconds')}"]
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(directory):
    """Returns (backbone, head or None, strategy or None, manifest)."""
    directory = Path(directory)
    man = read_manifest(directory)
    channels = tuple(int(c) for c in man["architecture"].split(","))
    shapes = {k[len("tensor."):]: v for k, v in man.items() if k.startswith("tensor.")}

    def load(name):
        arr = read_tensor(directory / f"{name}.svft")
        shape = () if shapes[name] == "scalar" else tuple(int(s) for s in shapes[name].split("x"))
        return arr.reshape(shape)

    backbone = Backbone.init(0, channels)
    strategy = None
    if "strategy.kind" in man:
        strategy = StrategyConfig.from_dict({k[len("strategy."):]: v for k, v in man.items()
                                             if k.startswith("strategy.")})
    for s in backbone.slots:
        s.mean, s.var = load(f"{s.name}.bn_mean"), load(f"{s.name}.bn_var")
        s.gamma.value, s.beta.value = load(f"{s.name}.bn_gamma"), load(f"{s.name}.bn_beta")
        if f"{s.name}.weight" in shapes:
            s.weight.value = load(f"{s.name}.weight")
        else:
            variant = "B" if f"{s.name}.s_prime" in shapes else "A"
            conv_v = Param(load(f"{s.name}.conv_v"), False, f"{s.name}.conv_v")
            conv_u = Param(load(f"{s.name}.conv_u"), False, f"{s.name}.conv_u")
            init = load(f"{s.name}.initial_scale")
            if variant == "A":
                d = DecomposedConv(conv_v, conv_u, s.geometry, "A",
                                   scale=Param(load(f"{s.name}.scale"), False, f"{s.name}.scale"),
                                   initial_scale=init, name=s.name)
            else:
                d = DecomposedConv(conv_v, conv_u, s.geometry, "B",
                                   frozen_s=Param(load(f"{s.name}.frozen_s"), False, f"{s.name}.frozen_s"),
                                   s_prime=Param(load(f"{s.name}.s_prime"), False, f"{s.name}.s_prime"),
                                   initial_scale=init, name=s.name)
            s.decomposed = d
            from svflab.svf import recompose

            s.weight.value = recompose(d)
    head = None
    if "head.dec1.weight" in shapes:
        head = SegHead({n: Param(load(n), True, n) for n in shapes if n.startswith("head.")})
    return backbone, head, strategy, man
