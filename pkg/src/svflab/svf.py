"""Singular value fine-tuning: conv -> (conv-V, scale, conv-U) rewrite and its bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from decimal import Decimal
from typing import NamedTuple

import numpy as np

from svflab.autodiff import Graph, Param
from svflab.linalg import svd
from svflab.strategy import StrategyConfig
from svflab.tensor import ConvGeometry, conv2d, fold_weights, unfold_weights
from svflab.validation import check_tensor4

TOP_K = 30
POINTWISE = ConvGeometry.square(1)


@dataclass
class DecomposedConv:
    """Three successive layers replacing one convolution.

    ``conv_v`` carries the rows of Vᵀ as R filters (with the original stride and
    padding), the scale layer multiplies channel r by the r-th singular value, and
    ``conv_u`` is a 1x1 projection back to C_o channels. Variant "B" keeps the
    singular values frozen and learns ``s_prime`` with scale = frozen_s * exp(s_prime).
    """

    conv_v: Param
    conv_u: Param
    geometry: ConvGeometry
    variant: str = "A"
    scale: Param | None = None
    frozen_s: Param | None = None
    s_prime: Param | None = None
    initial_scale: np.ndarray | None = None
    name: str = "conv"

    @property
    def rank(self) -> int:
        return self.conv_v.shape[0]

    @property
    def out_channels(self) -> int:
        return self.conv_u.shape[0]

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        r, ci, kh, kw = self.conv_v.shape
        return (self.out_channels, ci, kh, kw)

    @property
    def scale_param(self) -> Param:
        return self.scale if self.variant == "A" else self.s_prime

    def effective_scale(self) -> np.ndarray:
        if self.variant == "A":
            return self.scale.value
        return self.frozen_s.value * np.exp(self.s_prime.value)

    def params(self) -> list[Param]:
        if self.variant == "A":
            return [self.conv_v, self.scale, self.conv_u]
        return [self.conv_v, self.frozen_s, self.s_prime, self.conv_u]

    def named_params(self) -> dict[str, Param]:
        names = ("conv_v", "scale", "conv_u") if self.variant == "A" else (
            "conv_v", "frozen_s", "s_prime", "conv_u")
        return {f"{self.name}.{n}": p for n, p in zip(names, self.params())}

    def set_trainable(self, subspaces) -> None:
        self.conv_v.trainable = "V" in subspaces
        self.conv_u.trainable = "U" in subspaces
        self.scale_param.trainable = "S" in subspaces
        if self.frozen_s is not None:
            self.frozen_s.trainable = False

    def astype(self, dtype) -> None:
        for p in self.params():
            p.value = p.value.astype(dtype)

    def snapshot(self) -> "DecomposedConv":
        def cp(p):
            return None if p is None else Param(p.value.copy(), p.trainable, p.name)

        return DecomposedConv(cp(self.conv_v), cp(self.conv_u), self.geometry, self.variant,
                              cp(self.scale), cp(self.frozen_s), cp(self.s_prime),
                              None if self.initial_scale is None else self.initial_scale.copy(),
                              self.name)

    def build(self, graph: Graph, x: int) -> int:
        h = graph.conv2d(x, graph.param(self.conv_v), self.geometry)
        if self.variant == "A":
            s = graph.param(self.scale)
        else:
            s = graph.vector_mul(graph.param(self.frozen_s), graph.exp(graph.param(self.s_prime)))
        h = graph.diag_scale(h, s)
        return graph.conv2d(h, graph.param(self.conv_u), POINTWISE)


def decompose_conv(w, g: ConvGeometry, variant: str = "A", name: str = "conv",
                   dtype=np.float64) -> DecomposedConv:
    w = check_tensor4(w, "w").astype(np.float64)
    if variant not in ("A", "B"):
        raise ValueError(f"unknown SVF variant {variant!r}")
    co, ci, kh, kw = w.shape
    if (kh, kw) != g.kernel:
        raise ValueError(f"weight kernel {(kh, kw)} does not match geometry {g.kernel}")
    f = svd(fold_weights(w))
    r = f.rank
    conv_v = Param(unfold_weights(f.vt, (r, ci, kh, kw)).astype(dtype), False, f"{name}.conv_v")
    conv_u = Param(f.u.reshape(co, r, 1, 1).astype(dtype), False, f"{name}.conv_u")
    s = f.s.astype(dtype)
    if variant == "A":
        return DecomposedConv(conv_v, conv_u, g, "A", scale=Param(s.copy(), True, f"{name}.scale"),
                              initial_scale=s.copy(), name=name)
    return DecomposedConv(conv_v, conv_u, g, "B",
                          frozen_s=Param(s.copy(), False, f"{name}.frozen_s"),
                          s_prime=Param(np.zeros(r, dtype=dtype), True, f"{name}.s_prime"),
                          initial_scale=s.copy(), name=name)


def svf_forward(d: DecomposedConv, x) -> np.ndarray:
    x = check_tensor4(x, "x")
    if x.shape[1] != d.conv_v.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {d.conv_v.shape[1]}")
    h = conv2d(x, d.conv_v.value, d.geometry)
    h = h * d.effective_scale()[None, :, None, None]
    return conv2d(h, d.conv_u.value, POINTWISE)


def recompose(d: DecomposedConv) -> np.ndarray:
    co, ci, kh, kw = d.weight_shape
    u = d.conv_u.value.reshape(co, d.rank).astype(np.float64)
    vt = fold_weights(d.conv_v.value).astype(np.float64)
    return unfold_weights((u * d.effective_scale()) @ vt, (co, ci, kh, kw))


@dataclass(frozen=True)
class SvdChangeRecord:
    layer: str
    position: int
    initial: float
    final: float
    delta: float


def singular_value_report(before: DecomposedConv, after: DecomposedConv,
                          top_k: int = TOP_K) -> list[SvdChangeRecord]:
    """Changes of the ``top_k`` largest initial singular values (positions are 1-based)."""
    if before.rank != after.rank:
        raise ValueError(f"rank mismatch: {before.rank} vs {after.rank}")
    init = np.asarray(before.effective_scale(), dtype=np.float64)
    final = np.asarray(after.effective_scale(), dtype=np.float64)
    k = min(int(top_k), before.rank)
    order = np.argsort(-init, kind="stable")[:k]
    return [
        SvdChangeRecord(after.name, pos + 1, float(init[i]), float(final[i]), float(final[i] - init[i]))
        for pos, i in enumerate(order)
    ]


def _sig9(x: float) -> str:
    return f"{x:.9g}"


def write_svd_changes(path, records) -> None:
    """CSV with initial/final at 9 significant digits.

    delta is written as the exact decimal difference of the two printed values,
    so ``final - initial == delta`` holds on the file contents.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "position", "initial", "final", "delta"])
        for r in records:
            ini, fin = _sig9(r.initial), _sig9(r.final)
            delta = Decimal(fin) - Decimal(ini)
            w.writerow([r.layer, r.position, ini, fin, _decimal_str(delta)])


def _decimal_str(d: Decimal) -> str:
    if d == 0:
        return "0"
    return format(d.normalize(), "f") if abs(d.adjusted()) < 6 else format(d.normalize(), "E")


def read_svd_changes(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class ConvShape(NamedTuple):
    c_out: int
    c_in: int
    k: int
    stage: int | None = None

    @property
    def weights(self) -> int:
        return self.c_out * self.c_in * self.k * self.k

    @property
    def rank(self) -> int:
        return min(self.c_out, self.c_in * self.k * self.k)


def trainable_count(shape: ConvShape, strategy: StrategyConfig) -> int:
    if not strategy.selects(shape.stage, shape.k):
        return 0
    if not strategy.is_svf:
        return shape.weights
    r = shape.rank
    n = 0
    if "S" in strategy.subspaces:
        n += r
    if "U" in strategy.subspaces:
        n += shape.c_out * r
    if "V" in strategy.subspaces:
        n += r * shape.c_in * shape.k * shape.k
    return n


def trainable_param_ratio(layer_shapes, strategy: StrategyConfig) -> float:
    """Trainable scalars under ``strategy`` over all conv-weight scalars of the backbone."""
    shapes = [ConvShape(*s) for s in layer_shapes]
    if not shapes:
        raise ValueError("layer_shapes is empty")
    total = sum(s.weights for s in shapes)
    return sum(trainable_count(s, strategy) for s in shapes) / total


def resnet50_conv_shapes() -> list[ConvShape]:
    """Conv layers of the standard 50-layer bottleneck residual network (stem = stage 0)."""
    shapes = [ConvShape(64, 3, 7, 0)]
    in_ch = 64
    for stage, (width, blocks) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)], start=1):
        out_ch = width * 4
        for b in range(blocks):
            shapes.append(ConvShape(width, in_ch, 1, stage))
            shapes.append(ConvShape(width, width, 3, stage))
            shapes.append(ConvShape(out_ch, width, 1, stage))
            if b == 0:
                shapes.append(ConvShape(out_ch, in_ch, 1, stage))
            in_ch = out_ch
    return shapes


def resnet50_bn_scalars() -> int:
    # gamma and beta for every conv's BatchNorm
    return sum(2 * s.c_out for s in resnet50_conv_shapes())


RESNET50_FC_SCALARS = 2048 * 1000 + 1000


def svf_ratio_report(shapes=None, strategy: StrategyConfig | None = None) -> dict[str, float]:
    """Trainable fraction under several candidate denominators."""
    shapes = [ConvShape(*s) for s in (shapes or resnet50_conv_shapes())]
    strategy = strategy or StrategyConfig.svf()
    num = sum(trainable_count(s, strategy) for s in shapes)
    conv = sum(s.weights for s in shapes)
    bn = sum(2 * s.c_out for s in shapes)
    tuned = sum(s.weights for s in shapes if strategy.selects(s.stage, s.k))
    return {
        "trainable": float(num),
        "conv_weights": num / conv,
        "conv_and_bn": num / (conv + bn),
        "conv_bn_and_classifier": num / (conv + bn + RESNET50_FC_SCALARS),
        "tuned_stages_only": num / tuned if tuned else math.nan,
    }
