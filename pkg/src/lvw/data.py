"""Datasets: the planted-parts synthetic generator, folder ingestion and augmentation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


@dataclass
class ImageSet:
    """A batch of images in ``[0, 1]``, shape ``(N, 3, H, W)``, with labels and ids."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: list[str]
    class_names: list[str]
    # planted-part masks (N, H, W), only for synthetic data
    part_masks: torch.Tensor | None = None
    parts: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.images) or len(self.labels) != len(self.images):
            raise DataError("images, labels and ids differ in length")

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, index) -> "ImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageSet(
            self.images[index], self.labels[index], [self.ids[i] for i in index.tolist()],
            list(self.class_names),
            None if self.part_masks is None else self.part_masks[index],
            [self.parts[i] for i in index.tolist()] if self.parts else [],
        )

    def index_of(self, image_id: str) -> int:
        return self.ids.index(image_id)


# --------------------------------------------------------------------------
# synthetic planted parts

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "bar")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "blue": (0.10, 0.25, 0.95),
    "green": (0.10, 0.80, 0.20),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.90, 0.10, 0.85),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}


def part_vocabulary(n: int) -> list[tuple[str, str]]:
    """``n`` distinct (shape, color) parts, cycling shapes and colors out of step."""
    colors = list(COLORS)
    out: list[tuple[str, str]] = []
    i = 0
    while len(out) < n:
        part = (SHAPES[i % len(SHAPES)], colors[(i * 3) % len(colors)])
        if part not in out:
            out.append(part)
        i += 1
        if i > 10_000:
            raise ValueError(f"cannot build {n} distinct parts")
    return out


def class_recipes(n_classes: int) -> list[tuple[int, int]]:
    """Two part indices per class; classes 0 and 1 share part 0, all others are disjoint."""
    if not 2 <= n_classes <= 10:
        raise ValueError("synthetic generator supports 2 to 10 classes")
    recipes = [(0, 1), (0, 2)]
    nxt = 3
    for _ in range(2, n_classes):
        recipes.append((nxt, nxt + 1))
        nxt += 2
    return recipes


def shape_mask(shape: str, size: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float) -> np.ndarray:
    r = size / 2
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    if shape == "bar":
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    base = rng.uniform(0.25, 0.55, size=3)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    # oriented stripes + a few muted blobs shared by every class
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.25, 0.6)
    stripes = 0.08 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
    img += stripes[None]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(3, 7)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
        tint = rng.uniform(-0.15, 0.15, size=3)
        img += tint[:, None, None] * blob[None]
    img += rng.normal(0, 0.03, size=img.shape)
    return img


def render(parts: list[tuple[str, str]], rng: np.random.Generator, size: int = 64,
           part_size: int | None = None):
    """Render one image containing ``parts`` at random non-overlapping spots.

    Returns ``(image (3, size, size), mask (size, size))`` as float32 / bool arrays.
    """
    part_size = part_size or max(6, round(size * 0.25))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = _background(rng, size, yy, xx)
    mask = np.zeros((size, size), dtype=bool)
    centers: list[np.ndarray] = []
    lo, hi = part_size / 2 + 1, size - part_size / 2 - 1
    for shape, color in parts:
        for _ in range(1000):
            c = rng.uniform(lo, hi, 2)
            if all(np.abs(c - o).max() > part_size + 1 for o in centers):
                break
        else:
            raise ValueError("no room to place all parts")
        centers.append(c)
        m = shape_mask(shape, part_size, yy, xx, c[0], c[1])
        rgb = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.04, 3), 0, 1)
        img[:, m] = rgb[:, None]
        mask |= m
    return np.clip(img, 0, 1).astype(np.float32), mask


def make_synthetic(n_classes: int = 4, n_per_class: int = 50, size: int = 64, seed: int = 0,
                   prefix: str = "syn") -> ImageSet:
    """Balanced planted-parts dataset, deterministic in ``seed``.

    Each class is defined by two coloured shapes; classes 0 and 1 share one
    of theirs. Ids are ``{prefix}_{class}_{index}``.
    """
    rng = np.random.default_rng(seed)
    recipes = class_recipes(n_classes)
    vocab = part_vocabulary(max(max(r) for r in recipes) + 1)
    images, masks, labels, ids, parts = [], [], [], [], []
    for i in range(n_per_class):
        for c, recipe in enumerate(recipes):
            img, m = render([vocab[p] for p in recipe], rng, size)
            images.append(img)
            masks.append(m)
            labels.append(c)
            ids.append(f"{prefix}_{c}_{i:04d}")
            parts.append(tuple(recipe))
    names = [f"class{c}_" + "+".join("-".join(vocab[p]) for p in r) for c, r in enumerate(recipes)]
    return ImageSet(torch.from_numpy(np.stack(images)), torch.tensor(labels), ids, names,
                    torch.from_numpy(np.stack(masks)), parts)


def make_synthetic_splits(n_classes=4, n_train=200, n_test=100, size=64, seed=0):
    """Train/test planted-parts sets with disjoint RNG streams."""
    if n_train % n_classes or n_test % n_classes:
        raise ValueError("split sizes must be multiples of the class count")
    train = make_synthetic(n_classes, n_train // n_classes, size, seed, prefix="train")
    test = make_synthetic(n_classes, n_test // n_classes, size, seed + 10_007, prefix="test")
    return train, test


def make_composite(part_ids, size: int = 64, seed: int = 0, n_classes: int = 4) -> torch.Tensor:
    """An image assembled from arbitrary vocabulary parts (e.g. from two different classes)."""
    recipes = class_recipes(n_classes)
    vocab = part_vocabulary(max(max(max(r) for r in recipes), *part_ids) + 1)
    img, _ = render([vocab[p] for p in part_ids], np.random.default_rng(seed), size)
    return torch.from_numpy(img)


# --------------------------------------------------------------------------
# folder-per-class datasets

@dataclass
class DatasetManifest:
    rows: list[tuple[str, int, str]]       # (relative path, label, split)
    class_names: list[str]

    def split(self, name: str) -> list[tuple[str, int]]:
        return [(p, y) for p, y, s in self.rows if s == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(self.rows)
        return buf.getvalue()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.csv").write_text(self.to_csv(), encoding="utf-8")
        (directory / "classes.json").write_text(json.dumps(self.class_names, indent=1) + "\n",
                                                encoding="utf-8")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def ingest(root) -> DatasetManifest:
    """Scan ``root/{train,test}/<class>/<image>`` into a sorted manifest.

    Raises DataError if the layout is missing or an image shows up in both
    splits (same class/filename or identical bytes).
    """
    root = Path(root)
    splits = {s: root / s for s in ("train", "test")}
    for s, d in splits.items():
        if not d.is_dir():
            raise DataError(f"missing {s}/ directory under {root}")
    names = sorted({p.name for d in splits.values() for p in d.iterdir() if p.is_dir()})
    if not names:
        raise DataError(f"no class folders under {root}")
    label = {n: i for i, n in enumerate(names)}
    rows = []
    seen: dict[str, dict] = {"key": {}, "hash": {}}
    for s, d in splits.items():
        for name in names:
            folder = d / name
            files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) \
                if folder.is_dir() else []
            if not files:
                log.warning("empty class folder: %s", folder)
            for f in files:
                key, h = f"{name}/{f.name}", _digest(f)
                for kind, v in (("key", key), ("hash", h)):
                    other = seen[kind].get(v)
                    if other is not None and other != s:
                        raise DataError(f"{f} appears in both splits")
                    seen[kind][v] = s
                rows.append((f.relative_to(root).as_posix(), label[name], s))
    rows.sort(key=lambda r: (r[2] != "train", r[1], r[0]))
    return DatasetManifest(rows, names)


def load_split(manifest: DatasetManifest, root, split: str, resolution: int) -> ImageSet:
    from PIL import Image

    root = Path(root)
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    arrays = []
    for rel, _ in entries:
        with Image.open(root / rel) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arrays.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return ImageSet(torch.from_numpy(np.stack(arrays)), torch.tensor([y for _, y in entries]),
                    [rel for rel, _ in entries], list(manifest.class_names))


def load_image(path, resolution: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return torch.from_numpy(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)


def write_image_folder(data: ImageSet, root, split: str) -> None:
    """Dump an ImageSet as PNGs into ``root/split/<class>/<id>.png``."""
    from PIL import Image

    root = Path(root)
    for img, y, iid in zip(data.images, data.labels.tolist(), data.ids):
        folder = root / split / data.class_names[y]
        folder.mkdir(parents=True, exist_ok=True)
        arr = (img.clamp(0, 1).numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(folder / f"{iid}.png")


# --------------------------------------------------------------------------
# augmentation

def augment(image: torch.Tensor, train_mode: bool, generator: torch.Generator | None = None,
            force: bool | None = None) -> torch.Tensor:
    """Random horizontal flip (p = 0.5) in training mode; identity otherwise.

    ``force`` overrides the coin toss, which is drawn from ``generator``.
    """
    if not train_mode:
        return image
    flip = force if force is not None else bool(torch.rand((), generator=generator) < 0.5)
    return image.flip(-1) if flip else image


def random_flip(images: torch.Tensor, maps: torch.Tensor | None, generator: torch.Generator):
    """Flip a batch sample-wise, applying the same flips to the paired maps."""
    flips = torch.rand(images.shape[0], generator=generator) < 0.5
    images = torch.where(flips[:, None, None, None], images.flip(-1), images)
    if maps is not None:
        maps = torch.where(flips[:, None, None], maps.flip(-1), maps)
    return images, maps
