"""Synthetic few-shot segmentation tasks with disjoint base / novel class splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svflab.tensor import write_tensor

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar")
TEXTURES = ("solid", "stripes", "checker", "noise")
NUM_CLASSES = 20
NUM_FOLDS = 4
REFERENCE_SIZE = 64

# area of each family as a fraction of size**2, where size is the diameter of the circumscribing disk
_AREA_FRACTION = {
    "disk": np.pi / 4,
    "square": 0.5,
    "triangle": 3 * np.sqrt(3) / 16,
    "ring": np.pi * (1 / 4 - 1 / 16),
    "cross": 0.5,
    "bar": 0.25,
}

_SPLIT_CODES = {"train": 0, "test": 1, "pretrain": 2, "pretrain-eval": 3}


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    texture: str
    size_range: tuple[int, int]

    def area_bounds(self) -> tuple[int, int]:
        lo, hi = self.size_range
        frac = _AREA_FRACTION[self.shape]
        # rasterisation at small sizes can lose or gain roughly a perimeter's worth of pixels
        return max(1, int(np.floor(0.6 * frac * lo * lo))), int(np.ceil(1.3 * frac * hi * hi + 2 * hi))


def default_classes(image_size: int = REFERENCE_SIZE) -> list[ClassSpec]:
    pairs = [(s, t) for t in range(len(TEXTURES)) for s in range(len(SHAPES))]
    lo = max(6, round(16 * image_size / REFERENCE_SIZE))
    hi = max(lo + 2, round(30 * image_size / REFERENCE_SIZE))
    out = []
    for c in range(NUM_CLASSES):
        # stride 7 is coprime with 24, so the (shape, texture) pairs are distinct
        s, t = pairs[(c * 7) % len(pairs)]
        out.append(ClassSpec(c, SHAPES[s], TEXTURES[t], (lo, hi)))
    return out


@dataclass(frozen=True)
class SplitPlan:
    classes: tuple[ClassSpec, ...]
    num_folds: int = NUM_FOLDS
    fold: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        pairs = [(c.shape, c.texture) for c in self.classes]
        if len(set(pairs)) != len(pairs):
            raise ValueError("class (shape, texture) pairs must be unique")
        if len({c.class_id for c in self.classes}) != len(self.classes):
            raise ValueError("class ids must be unique")
        if not 1 <= self.num_folds <= len(self.classes):
            raise ValueError(f"cannot split {len(self.classes)} classes into {self.num_folds} folds")
        if not 0 <= self.fold < self.num_folds:
            raise ValueError(f"fold {self.fold} outside 0..{self.num_folds - 1}")

    @classmethod
    def default(cls, fold: int = 0, image_size: int = REFERENCE_SIZE, num_folds: int = NUM_FOLDS):
        return cls(tuple(default_classes(image_size)), num_folds, fold)

    def folds(self) -> list[tuple[int, ...]]:
        ids = [c.class_id for c in self.classes]
        return [tuple(int(i) for i in part) for part in np.array_split(ids, self.num_folds)]

    @property
    def test_classes(self) -> tuple[int, ...]:
        return self.folds()[self.fold]

    @property
    def train_classes(self) -> tuple[int, ...]:
        novel = set(self.test_classes)
        return tuple(c.class_id for c in self.classes if c.class_id not in novel)

    def split_classes(self, split: str) -> tuple[int, ...]:
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ValueError(f"unknown split {split!r}")

    def spec(self, class_id: int) -> ClassSpec:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)


@dataclass
class Episode:
    support_images: np.ndarray  # (k, 3, H, W)
    support_masks: np.ndarray  # (k, H, W) bool
    query_image: np.ndarray  # (3, H, W)
    query_mask: np.ndarray  # (H, W) bool
    class_id: int

    def __post_init__(self):
        k = self.support_images.shape[0]
        if self.support_masks.shape != (k,) + self.query_mask.shape:
            raise ValueError("support masks do not match support images")
        if self.support_images.shape[2:] != self.query_image.shape[1:]:
            raise ValueError("support and query images differ in size")
        if any(not m.any() for m in self.support_masks):
            raise ValueError("every support mask needs at least one foreground pixel")

    @property
    def k(self) -> int:
        return self.support_images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.query_image.shape[1:]

    @property
    def supports(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.support_images, self.support_masks))


def episode_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SPLIT_CODES[split], int(index)])


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    r = size / 2
    if shape == "disk":
        return u * u + v * v <= r * r
    if shape == "square":
        h = r / np.sqrt(2)
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if shape == "triangle":
        # equilateral, circumradius r, apex along -v
        inner = r / 2
        n = [(0.0, 1.0), (np.sqrt(3) / 2, -0.5), (-np.sqrt(3) / 2, -0.5)]
        return np.all([a * u + b * v <= inner for a, b in n], axis=0)
    if shape == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    if shape == "cross":
        arm, half = r / np.sqrt(1 + 1 / 9), r / np.sqrt(1 + 1 / 9) / 3
        return ((np.abs(u) <= arm) & (np.abs(v) <= half)) | ((np.abs(v) <= arm) & (np.abs(u) <= half))
    if shape == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= r / 4)
    raise ValueError(f"unknown shape {shape!r}")


def _distinct_color(rng, avoid, min_dist=0.35):
    for _ in range(64):
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c
    return c


def _texture(texture: str, u, v, rng, c1, c2):
    if texture == "solid":
        return np.broadcast_to(c1[:, None, None], (3,) + u.shape)
    period = rng.uniform(3.0, 5.0)
    if texture == "stripes":
        band = np.floor(u / period) % 2
    elif texture == "checker":
        band = (np.floor(u / period) + np.floor(v / period)) % 2
    elif texture == "noise":
        noise = rng.normal(0.0, 0.18, (3,) + u.shape)
        return np.clip(c1[:, None, None] + noise, 0.0, 1.0)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return np.where(band[None] > 0, c1[:, None, None], c2[:, None, None])


def _place(rng, spec: ClassSpec, hw):
    h, w = hw
    size = rng.uniform(*spec.size_range)
    r = size / 2
    cy = rng.uniform(min(r, h / 2), max(h - r, h / 2))
    cx = rng.uniform(min(r, w / 2), max(w - r, w / 2))
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return u, v, size


def _draw(img, spec: ClassSpec, rng, bg_color):
    u, v, size = _place(rng, spec, img.shape[1:])
    mask = _shape_mask(spec.shape, u, v, size)
    c1 = _distinct_color(rng, [bg_color])
    c2 = _distinct_color(rng, [c1])
    fill = _texture(spec.texture, u, v, rng, c1, c2)
    img[:, mask] = fill[:, mask]
    return mask


def _background(rng, hw):
    h, w = hw
    base = rng.uniform(0.1, 0.9, 3)
    gy, gx = rng.normal(0, 0.15, 2)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    ramp = gy * (yy - 0.5) + gx * (xx - 0.5)
    img = base[:, None, None] + ramp[None] + rng.normal(0.0, 0.04, (3, h, w))
    return np.clip(img, 0.0, 1.0), base


def render_scene(spec: ClassSpec, rng: np.random.Generator, image_size: int = REFERENCE_SIZE,
                 distractors=(), max_distractors: int = 2):
    """One object of ``spec`` over a textured background plus 0..max_distractors distractors.

    ``distractors`` lists the ClassSpecs distractor objects may be drawn from; they are
    painted first, so the returned mask is exactly the visible target object.
    """
    hw = (image_size, image_size)
    img, bg = _background(rng, hw)
    pool = list(distractors)
    n = int(rng.integers(0, max_distractors + 1)) if pool and max_distractors > 0 else 0
    for _ in range(n):
        _draw(img, pool[int(rng.integers(len(pool)))], rng, bg)
    mask = _draw(img, spec, rng, bg)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def sample_episode(plan: SplitPlan, split: str, k: int, rng: np.random.Generator,
                   image_size: int = REFERENCE_SIZE, max_distractors: int = 2,
                   class_id: int | None = None) -> Episode:
    if k not in (1, 5):
        raise ValueError(f"k must be 1 or 5, got {k}")
    classes = plan.split_classes(split)
    if not classes:
        raise ValueError(f"split {split!r} has no classes")
    if class_id is None:
        class_id = int(classes[int(rng.integers(len(classes)))])
    elif class_id not in classes:
        raise ValueError(f"class {class_id} is not in the {split} split")
    spec = plan.spec(class_id)
    # distractors always come from base classes, never the target
    pool = [plan.spec(c) for c in plan.train_classes if c != class_id]
    renders = [render_scene(spec, rng, image_size, pool, max_distractors) for _ in range(k + 1)]
    sup_img = np.stack([r[0] for r in renders[:k]])
    sup_mask = np.stack([r[1] for r in renders[:k]])
    return Episode(sup_img, sup_mask, renders[k][0], renders[k][1], class_id)


def episode_stream(plan: SplitPlan, split: str, k: int, seed: int, count: int, start: int = 0,
                   image_size: int = REFERENCE_SIZE, max_distractors: int = 2) -> list[Episode]:
    return [
        sample_episode(plan, split, k, episode_rng(seed, split, i), image_size, max_distractors)
        for i in range(start, start + count)
    ]


def patch_dataset(plan: SplitPlan, per_class: int, seed: int, image_size: int, split: str = "pretrain"):
    """Base-class classification patches: (images (N,3,S,S), labels (N,) indices into train_classes)."""
    base = plan.train_classes
    if len(base) < 2:
        raise ValueError("pretraining needs at least two base classes")
    rng = episode_rng(seed, split, 0)
    images, labels = [], []
    for label, cid in enumerate(base):
        spec = plan.spec(cid)
        for _ in range(per_class):
            img, _ = render_scene(spec, rng, image_size, max_distractors=0)
            images.append(img)
            labels.append(label)
    order = rng.permutation(len(labels))
    return np.stack(images)[order], np.asarray(labels, dtype=np.int64)[order]


def dump_episodes(episodes, directory) -> Path:
    """Write episodes as SVFT tensors plus an ``index.jsonl`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, ep in enumerate(episodes):
        files = {
            "support_images": f"ep{i:05d}_support_images.svft",
            "support_masks": f"ep{i:05d}_support_masks.svft",
            "query_image": f"ep{i:05d}_query_image.svft",
            "query_mask": f"ep{i:05d}_query_mask.svft",
        }
        write_tensor(directory / files["support_images"], ep.support_images)
        write_tensor(directory / files["support_masks"], ep.support_masks[:, None].astype(np.float64))
        write_tensor(directory / files["query_image"], ep.query_image[None])
        write_tensor(directory / files["query_mask"], ep.query_mask[None, None].astype(np.float64))
        lines.append(json.dumps({"episode": i, "class_id": ep.class_id, "k": ep.k, "files": files}))
    (directory / "index.jsonl").write_text("\n".join(lines) + "\n")
    return directory


def load_episodes(directory) -> list[Episode]:
    from svflab.tensor import read_tensor

    directory = Path(directory)
    out = []
    for line in (directory / "index.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        f = rec["files"]
        out.append(Episode(
            read_tensor(directory / f["support_images"]).astype(np.float32),
            read_tensor(directory / f["support_masks"])[:, 0] > 0.5,
            read_tensor(directory / f["query_image"])[0].astype(np.float32),
            read_tensor(directory / f["query_mask"])[0, 0] > 0.5,
            int(rec["class_id"]),
        ))
    return out
