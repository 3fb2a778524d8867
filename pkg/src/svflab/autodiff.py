"""Minimal reverse-mode autodiff over the fixed op set used by the segmentation model.

A :class:`Graph` is built node by node; shapes are inferred as nodes are added, so
shape errors surface at construction time. ``forward`` evaluates the nodes in
insertion order and keeps the activations; ``backward`` writes gradients into
trainable :class:`Param` objects and clears them on frozen ones.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from svflab.tensor import ConvGeometry, avgpool2, col2im, conv2d_cols, im2col

COSINE_EPS = 1e-8
BN_EPS = 1e-5

_param_ids = itertools.count()


class Param:
    def __init__(self, value, trainable: bool = True, name: str | None = None):
        self.id = next(_param_ids)
        self.name = name or f"param{self.id}"
        self.value = np.asarray(value)
        self.trainable = bool(trainable)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __deepcopy__(self, memo):
        # a copy is a distinct parameter, so it gets its own id
        new = Param(self.value.copy(), self.trainable, self.name)
        memo[id(self)] = new
        return new

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Param({self.name!r}, shape={self.shape}, {flag})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


def _upsample_matrix(n: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False semantics)
    out = np.zeros((n * factor, n), dtype=dtype)
    for o in range(n * factor):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        out[o, i0] += 1.0 - lam
        out[o, i1] += lam
    return out


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self._inputs: dict[str, int] = {}
        self._params: dict[int, Param] = {}
        self._param_node: dict[int, int] = {}
        self._values: list | None = None
        self._cache: dict[int, object] = {}
        self._kept = False

    # -- construction -------------------------------------------------
    def _add(self, kind, inputs, shape, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind}: input node {i} does not exist yet")
        self.nodes.append(Node(kind, tuple(inputs), tuple(int(s) for s in shape), attrs))
        self._values = None
        return len(self.nodes) - 1

    def shape(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].shape

    def input(self, name: str, shape) -> int:
        if name in self._inputs:
            raise ValueError(f"duplicate input {name!r}")
        node = self._add("input", (), shape, name=name)
        self._inputs[name] = node
        return node

    def param(self, p: Param) -> int:
        if p.id in self._param_node:
            return self._param_node[p.id]
        node = self._add("param", (), p.shape, param_id=p.id)
        self._params[node] = p
        self._param_node[p.id] = node
        return node

    @property
    def params(self) -> list[Param]:
        return list(self._params.values())

    def mark_output(self, node: int) -> int:
        self.outputs.append(node)
        return node

    def conv2d(self, x, w, g: ConvGeometry) -> int:
        xs, ws = self.shape(x), self.shape(w)
        if len(xs) != 4 or len(ws) != 4:
            raise ValueError(f"conv2d needs 4-D input and weight, got {xs} and {ws}")
        if xs[1] != ws[1]:
            raise ValueError(f"conv2d channel mismatch: input {xs[1]}, weight {ws[1]}")
        if tuple(ws[2:]) != g.kernel:
            raise ValueError(f"conv2d weight kernel {ws[2:]} vs geometry {g.kernel}")
        ho, wo = g.output_hw(xs[2], xs[3])
        return self._add("conv2d", (x, w), (xs[0], ws[0], ho, wo), geometry=g)

    def diag_scale(self, x, s) -> int:
        xs, ss = self.shape(x), self.shape(s)
        if len(xs) != 4 or ss != (xs[1],):
            raise ValueError(f"diag_scale: scale {ss} does not match channels of {xs}")
        return self._add("diag_scale", (x, s), xs)

    def exp(self, s) -> int:
        return self._add("exp", (s,), self.shape(s))

    def vector_mul(self, a, b) -> int:
        if self.shape(a) != self.shape(b):
            raise ValueError(f"vector_mul shape mismatch {self.shape(a)} vs {self.shape(b)}")
        return self._add("vector_mul", (a, b), self.shape(a))

    def relu(self, x) -> int:
        return self._add("relu", (x,), self.shape(x))

    def avgpool2(self, x) -> int:
        n, c, h, w = self.shape(x)
        if h % 2 or w % 2:
            raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
        return self._add("avgpool2", (x,), (n, c, h // 2, w // 2))

    def upsample(self, x, factor: int) -> int:
        n, c, h, w = self.shape(x)
        if factor < 1:
            raise ValueError("upsample factor must be >= 1")
        return self._add("upsample", (x,), (n, c, h * factor, w * factor), factor=int(factor))

    def batchnorm(self, x, gamma, beta, mean, var, eps: float = BN_EPS) -> int:
        c = self.shape(x)[1]
        if self.shape(gamma) != (c,) or self.shape(beta) != (c,):
            raise ValueError(f"batchnorm affine params must have shape ({c},)")
        mean, var = np.asarray(mean), np.asarray(var)
        if mean.shape != (c,) or var.shape != (c,):
            raise ValueError(f"batchnorm statistics must have shape ({c},)")
        return self._add("batchnorm", (x, gamma, beta), self.shape(x), mean=mean, var=var, eps=eps)

    def batchnorm_batch(self, x, gamma, beta, eps: float = BN_EPS) -> int:
        """Normalise with the statistics of the current batch (training-mode BN)."""
        c = self.shape(x)[1]
        if self.shape(gamma) != (c,) or self.shape(beta) != (c,):
            raise ValueError(f"batchnorm affine params must have shape ({c},)")
        return self._add("batchnorm_batch", (x, gamma, beta), self.shape(x), eps=eps)

    def add(self, x, y) -> int:
        xs, ys = self.shape(x), self.shape(y)
        if xs != ys and not (len(xs) == 4 and ys == (xs[1],)):
            raise ValueError(f"add: cannot combine {xs} with {ys}")
        return self._add("add", (x, y), xs)

    def masked_avg_pool(self, feat, mask, shots: int = 1) -> int:
        fs, ms = self.shape(feat), self.shape(mask)
        if len(fs) != 4 or ms != (fs[0], 1, fs[2], fs[3]):
            raise ValueError(f"masked_avg_pool: mask {ms} does not cover features {fs}")
        if shots < 1 or fs[0] % shots:
            raise ValueError(f"masked_avg_pool: batch {fs[0]} is not a multiple of shots={shots}")
        return self._add("masked_avg_pool", (feat, mask), (fs[0] // shots, fs[1], 1, 1), shots=shots)

    def cosine_similarity(self, feat, proto) -> int:
        fs, ps = self.shape(feat), self.shape(proto)
        if len(fs) != 4 or ps != (fs[0], fs[1], 1, 1):
            raise ValueError(f"cosine_similarity: prototype {ps} does not match features {fs}")
        return self._add("cosine_similarity", (feat, proto), (fs[0], 1, fs[2], fs[3]))

    def concat(self, x, y) -> int:
        xs, ys = self.shape(x), self.shape(y)
        if len(xs) != 4 or len(ys) != 4 or (xs[0], xs[2], xs[3]) != (ys[0], ys[2], ys[3]):
            raise ValueError(f"concat: incompatible shapes {xs} and {ys}")
        return self._add("concat", (x, y), (xs[0], xs[1] + ys[1], xs[2], xs[3]))

    def take(self, x, start: int, stop: int) -> int:
        xs = self.shape(x)
        if not 0 <= start < stop <= xs[0]:
            raise ValueError(f"take: batch slice [{start}:{stop}] outside {xs[0]}")
        return self._add("take", (x,), (stop - start,) + xs[1:], start=start, stop=stop)

    def sum(self, x) -> int:
        return self._add("sum", (x,), ())

    def xent(self, logits, labels) -> int:
        ls, ys = self.shape(logits), self.shape(labels)
        if len(ls) != 4 or ys != (ls[0], ls[2], ls[3]):
            raise ValueError(f"xent: labels {ys} do not match logits {ls}")
        return self._add("xent", (logits, labels), ())

    # -- evaluation ---------------------------------------------------
    def batch_stats(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        """(mean, var) seen by a ``batchnorm_batch`` node in the last forward pass."""
        if self.nodes[node].kind != "batchnorm_batch":
            raise ValueError(f"node {node} is a {self.nodes[node].kind}, not batchnorm_batch")
        if self._values is None:
            raise RuntimeError("graph has not been run; call forward() first")
        return self._cache[node][2], self._cache[node][3]

    def value(self, node: int) -> np.ndarray:
        if self._values is None:
            raise RuntimeError("graph has not been run; call forward() first")
        return self._values[node]

    def forward(self, feeds: dict | None = None, keep: bool = True) -> list[np.ndarray]:
        """Evaluate every node; return the values of the marked outputs."""
        feeds = feeds or {}
        unknown = set(feeds) - set(self._inputs)
        if unknown:
            raise KeyError(f"feeds for unknown inputs: {sorted(unknown)}")
        vals: list = [None] * len(self.nodes)
        self._cache = {}
        for i, node in enumerate(self.nodes):
            vals[i] = self._eval(i, node, vals, feeds, keep)
        self._values = vals
        self._kept = keep
        return [vals[i] for i in self.outputs]

    def _eval(self, i, node, vals, feeds, keep):
        k = node.kind
        args = [vals[j] for j in node.inputs]
        if k == "input":
            name = node.attrs["name"]
            if name not in feeds:
                raise KeyError(f"input {name!r} is not bound")
            v = np.asarray(feeds[name])
            if v.shape != node.shape:
                raise ValueError(f"input {name!r}: expected shape {node.shape}, got {v.shape}")
            return v
        if k == "param":
            p = self._params[i]
            if p.value.shape != node.shape:
                raise ValueError(f"{p.name} changed shape since graph construction")
            return p.value
        if k == "conv2d":
            x, w = args
            g = node.attrs["geometry"]
            cols = im2col(x, g)
            if keep:
                self._cache[i] = cols
            _, _, ho, wo = node.shape
            return conv2d_cols(cols, w, x.shape[0], ho, wo)
        if k == "diag_scale":
            x, s = args
            return x * s[None, :, None, None]
        if k == "exp":
            return np.exp(args[0])
        if k == "vector_mul":
            return args[0] * args[1]
        if k == "relu":
            return np.maximum(args[0], 0)
        if k == "avgpool2":
            return avgpool2(args[0])
        if k == "upsample":
            x = args[0]
            f = node.attrs["factor"]
            ah = _upsample_matrix(x.shape[2], f, x.dtype)
            aw = _upsample_matrix(x.shape[3], f, x.dtype)
            self._cache[i] = (ah, aw)
            return np.einsum("ph,nchw,qw->ncpq", ah, x, aw, optimize=True)
        if k == "batchnorm":
            x, gamma, beta = args
            a = node.attrs
            inv = (1.0 / np.sqrt(a["var"] + a["eps"])).astype(x.dtype)
            xhat = (x - a["mean"].astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
            if keep:
                self._cache[i] = (xhat, inv)
            return gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        if k == "batchnorm_batch":
            x, gamma, beta = args
            mu = x.mean(axis=(0, 2, 3))
            xc = x - mu[None, :, None, None]
            var = np.mean(xc * xc, axis=(0, 2, 3))
            inv = (1.0 / np.sqrt(var + node.attrs["eps"])).astype(x.dtype)
            xhat = xc * inv[None, :, None, None]
            self._cache[i] = (xhat, inv, mu, var)
            return gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        if k == "add":
            x, y = args
            return x + (y[None, :, None, None] if y.ndim == 1 else y)
        if k == "masked_avg_pool":
            feat, mask = args
            shots = node.attrs["shots"]
            area = mask.sum(axis=(1, 2, 3))
            if np.any(area <= 0):
                raise ValueError("masked_avg_pool: a mask has no foreground pixels")
            pooled = np.einsum("bchw,bhw->bc", feat, mask[:, 0]) / area[:, None]
            self._cache[i] = area
            n = feat.shape[0] // shots
            return pooled.reshape(n, shots, -1).mean(axis=1)[:, :, None, None]
        if k == "cosine_similarity":
            feat, proto = args
            p = proto[:, :, 0, 0]
            dot = np.einsum("nchw,nc->nhw", feat, p)
            nf = np.sqrt(np.einsum("nchw,nchw->nhw", feat, feat))
            npr = np.sqrt(np.einsum("nc,nc->n", p, p))
            denom = nf * npr[:, None, None] + COSINE_EPS
            if keep:
                self._cache[i] = (dot, nf, npr, denom)
            return (dot / denom)[:, None]
        if k == "concat":
            return np.concatenate(args, axis=1)
        if k == "take":
            return args[0][node.attrs["start"] : node.attrs["stop"]]
        if k == "sum":
            return np.asarray(args[0].sum())
        if k == "xent":
            logits, labels = args
            shifted = logits - logits.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            picked = np.take_along_axis(shifted, labels[:, None].astype(np.intp), axis=1)[:, 0]
            if keep:
                self._cache[i] = shifted
            return np.asarray((logz - picked).mean())
        raise NotImplementedError(k)

    # -- reverse pass -------------------------------------------------
    def _requires_grad(self) -> list[bool]:
        req = [False] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.kind == "param":
                req[i] = self._params[i].trainable
            elif node.kind != "input":
                req[i] = any(req[j] for j in node.inputs)
        return req

    def backward(self, loss: int) -> dict[Param, np.ndarray]:
        """Reverse pass from a scalar node. Gradients overwrite ``Param.grad``."""
        if self._values is None:
            raise RuntimeError("backward() called before forward()")
        if not self._kept:
            raise RuntimeError("forward() ran with keep=False; activations needed for backward are gone")
        if self.nodes[loss].shape != ():
            raise ValueError(f"loss node must be scalar, has shape {self.nodes[loss].shape}")
        req = self._requires_grad()
        for p in self._params.values():
            p.grad = None
        grads: dict[int, np.ndarray] = {}
        if req[loss]:
            grads[loss] = np.ones((), dtype=self._values[loss].dtype)
        for i in range(loss, -1, -1):
            if i not in grads or not req[i]:
                continue
            node = self.nodes[i]
            if node.kind in ("param", "input"):
                continue
            for j, g in self._vjp(i, node, grads[i], req):
                grads[j] = grads[j] + g if j in grads else g
        out = {}
        for node_id, p in self._params.items():
            if p.trainable and node_id in grads:
                p.grad = np.asarray(grads[node_id], dtype=p.value.dtype).reshape(p.shape)
                out[p] = p.grad
        return out

    def _vjp(self, i, node, gy, req):
        k = node.kind
        ins = node.inputs
        args = [self._values[j] for j in ins]
        if k == "conv2d":
            x, w = args
            g = node.attrs["geometry"]
            wmat = w.reshape(w.shape[0], -1)
            gmat = gy.reshape(gy.shape[0], gy.shape[1], -1)
            if req[ins[1]]:
                cols = self._cache.get(i)
                if cols is None:
                    cols = im2col(x, g)
                yield ins[1], np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if req[ins[0]]:
                yield ins[0], col2im(np.matmul(wmat.T, gmat), x.shape, g)
        elif k == "diag_scale":
            x, s = args
            if req[ins[0]]:
                yield ins[0], gy * s[None, :, None, None]
            if req[ins[1]]:
                yield ins[1], np.einsum("nchw,nchw->c", gy, x)
        elif k == "exp":
            yield ins[0], gy * self._values[i]
        elif k == "vector_mul":
            a, b = args
            if req[ins[0]]:
                yield ins[0], gy * b
            if req[ins[1]]:
                yield ins[1], gy * a
        elif k == "relu":
            yield ins[0], gy * (args[0] > 0)
        elif k == "avgpool2":
            yield ins[0], np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) * 0.25
        elif k == "upsample":
            ah, aw = self._cache[i]
            yield ins[0], np.einsum("ph,ncpq,qw->nchw", ah, gy, aw, optimize=True)
        elif k == "batchnorm":
            x, gamma, _ = args
            xhat, inv = self._cache[i]
            if req[ins[0]]:
                yield ins[0], gy * (gamma * inv)[None, :, None, None]
            if req[ins[1]]:
                yield ins[1], np.einsum("nchw,nchw->c", gy, xhat)
            if req[ins[2]]:
                yield ins[2], gy.sum(axis=(0, 2, 3))
        elif k == "batchnorm_batch":
            x, gamma, _ = args
            xhat, inv = self._cache[i][:2]
            if req[ins[0]]:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                dxhat = gy * gamma[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
                yield ins[0], (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            if req[ins[1]]:
                yield ins[1], np.einsum("nchw,nchw->c", gy, xhat)
            if req[ins[2]]:
                yield ins[2], gy.sum(axis=(0, 2, 3))
        elif k == "add":
            if req[ins[0]]:
                yield ins[0], gy
            if req[ins[1]]:
                yield ins[1], gy.sum(axis=(0, 2, 3)) if args[1].ndim == 1 else gy
        elif k == "masked_avg_pool":
            if req[ins[0]]:
                feat, mask = args
                shots = node.attrs["shots"]
                area = self._cache[i]
                gp = np.repeat(gy[:, :, 0, 0], shots, axis=0) / shots
                weight = mask[:, 0] / area[:, None, None]
                yield ins[0], gp[:, :, None, None] * weight[:, None]
        elif k == "cosine_similarity":
            feat, proto = args
            p = proto[:, :, 0, 0]
            dot, nf, npr, denom = self._cache[i]
            g = gy[:, 0]
            coef = g / denom
            back = g * dot / denom**2
            if req[ins[0]]:
                with np.errstate(divide="ignore", invalid="ignore"):
                    unit = np.where(nf > 0, npr[:, None, None] / nf, 0.0)
                gf = coef[:, None] * p[:, :, None, None] - (back * unit)[:, None] * feat
                yield ins[0], gf
            if req[ins[1]]:
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv_p = np.where(npr > 0, 1.0 / npr, 0.0)
                gp = np.einsum("nhw,nchw->nc", coef, feat)
                gp -= np.einsum("nhw,nhw->n", back, nf)[:, None] * p * inv_p[:, None]
                yield ins[1], gp[:, :, None, None]
        elif k == "concat":
            c = args[0].shape[1]
            if req[ins[0]]:
                yield ins[0], gy[:, :c]
            if req[ins[1]]:
                yield ins[1], gy[:, c:]
        elif k == "take":
            full = np.zeros(args[0].shape, dtype=gy.dtype)
            full[node.attrs["start"] : node.attrs["stop"]] = gy
            yield ins[0], full
        elif k == "sum":
            yield ins[0], np.broadcast_to(gy, args[0].shape).copy()
        elif k == "xent":
            logits, labels = args
            if req[ins[0]]:
                shifted = self._cache[i]
                prob = np.exp(shifted)
                prob /= prob.sum(axis=1, keepdims=True)
                onehot = np.zeros_like(prob)
                np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
                count = labels.size
                yield ins[0], (prob - onehot) * (gy / count)
        else:
            raise NotImplementedError(k)


def forward(graph: Graph, inputs: dict | None = None) -> list[np.ndarray]:
    return graph.forward(inputs)


def backward(graph: Graph, loss_node: int) -> dict[Param, np.ndarray]:
    return graph.backward(loss_node)
