"""Base classifier and its Grad-CAM attention maps, with an on-disk cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Backbone, extract_features, upsample_heatmap
from .data import ImageSet, random_flip
from .errors import NumericError, StaleCacheError

log = logging.getLogger(__name__)

CACHE_VERSION = 1
TARGET_LAYER = "backbone.blocks[-1]"


class BaseClassifier(nn.Module):
    """Plain CNN classifier: backbone -> global average pool -> linear.

    Grad-CAM reads the backbone output (the last conv block).
    """

    def __init__(self, backbone: Backbone, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.fc = nn.Linear(backbone.out_channels, n_classes)
        self.n_classes = n_classes

    def features(self, x):
        return extract_features(x, self.backbone)

    def classify(self, act):
        return self.fc(act.mean(dim=(2, 3)))

    def forward(self, x):
        return self.classify(self.features(x))


def model_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def finetune_base(train: ImageSet, epochs: int = 15, lr: float = 1e-3, batch_size: int = 32,
                  seed: int = 0, channels=(32, 64, 128)) -> BaseClassifier:
    """Train the base classifier from scratch on ``train`` and return it frozen (eval mode)."""
    torch.manual_seed(seed)
    base = BaseClassifier(Backbone(channels, input_size=train.resolution), train.n_classes)
    opt = torch.optim.Adam(base.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    base.train()
    for epoch in range(epochs):
        order = torch.randperm(len(train), generator=gen)
        total = 0.0
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            x, _ = random_flip(train.images[idx], None, gen)
            loss = F.cross_entropy(base(x), train.labels[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"base fine-tuning diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("base epoch %d loss %.4f", epoch, total / len(train))
    base.eval()
    for p in base.parameters():
        p.requires_grad_(False)
    return base


class GradCAM:
    """Grad-CAM on a model exposing ``features(x)`` and ``classify(act)``.

    ``calls`` counts gradient evaluations (one per batch).
    """

    def __init__(self, base: nn.Module):
        self.base = base
        self.calls = 0

    def channel_weights(self, images: torch.Tensor, class_ids: torch.Tensor):
        """Target-layer activations and the spatially averaged class-score gradients."""
        with torch.no_grad():
            act = self.base.features(images)
        act = act.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = self.base.classify(act)
            score = logits.gather(1, class_ids.view(-1, 1)).sum()
            grads, = torch.autograd.grad(score, act)
        self.calls += 1
        return act.detach(), grads.mean(dim=(2, 3))

    def __call__(self, images: torch.Tensor, class_ids: torch.Tensor, size=None):
        """Normalized maps ``(N, H, W)`` and a degenerate flag per image.

        Degenerate maps (nothing left after the ReLU) are returned as zeros.
        """
        single = images.dim() == 3
        if single:
            images = images[None]
        class_ids = torch.as_tensor(class_ids).view(-1).expand(images.shape[0])
        if class_ids.min() < 0 or class_ids.max() >= self.base.n_classes:
            raise ValueError("class id out of range")
        act, w = self.channel_weights(images, class_ids)
        cam = F.relu((w[:, :, None, None] * act).sum(dim=1))
        cam = upsample_heatmap(cam, size or images.shape[-2:])
        flat = cam.flatten(1)
        lo, hi = flat.amin(1, keepdim=True), flat.amax(1, keepdim=True)
        degenerate = (hi <= 1e-12).view(-1)
        maps = torch.where(degenerate[:, None], torch.zeros_like(flat),
                           (flat - lo) / (hi - lo).clamp_min(1e-12)).view_as(cam)
        if single:
            return maps[0], degenerate[0]
        return maps, degenerate


def gradcam(base: nn.Module, image: torch.Tensor, class_id: int):
    """Grad-CAM map of a single image for ``class_id``; returns ``(map, degenerate)``."""
    return GradCAM(base)(image, torch.tensor([class_id]))


@dataclass
class AttentionSet:
    ids: list[str]
    maps: torch.Tensor           # (N, H, W), each in [0, 1]
    degenerate: torch.Tensor     # (N,) bool
    class_ids: torch.Tensor
    class_source: str
    computed: int = 0            # maps freshly computed this call

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(zip(self.ids, self.maps))


def _key_file(image_id: str) -> str:
    return hashlib.sha1(image_id.encode()).hexdigest() + ".npy"


class AttentionCache:
    """Directory of per-image maps plus a manifest identifying the base model.

    A cache written for a different base model, target layer or class source
    is rejected with :class:`StaleCacheError`.
    """

    def __init__(self, root, base_hash: str, class_source: str):
        self.root = Path(root)
        self.meta = {"version": CACHE_VERSION, "base_hash": base_hash,
                     "target_layer": TARGET_LAYER, "class_source": class_source}
        manifest = self.root / "manifest.json"
        if manifest.exists():
            found = json.loads(manifest.read_text())
            if found != self.meta:
                raise StaleCacheError(f"attention cache at {self.root} does not match the base model")
        else:
            (self.root / "maps").mkdir(parents=True, exist_ok=True)
            self._atomic_write(manifest, json.dumps(self.meta, indent=1, sort_keys=True).encode())

    @staticmethod
    def _atomic_write(path: Path, payload: bytes):
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)

    def get(self, image_id: str):
        path = self.root / "maps" / _key_file(image_id)
        return torch.from_numpy(np.load(path)) if path.exists() else None

    def put(self, image_id: str, amap: torch.Tensor):
        path = self.root / "maps" / _key_file(image_id)
        tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp.npy")
        np.save(tmp, amap.numpy().astype(np.float32))
        os.replace(tmp, path)


def attention_batch(base: nn.Module, data: ImageSet, class_source: str = "ground_truth",
                    cache_dir=None, cam: GradCAM | None = None, batch_size: int = 64) -> AttentionSet:
    """Grad-CAM maps for every image of ``data``, reusing cached maps when possible.

    ``class_source`` is ``"ground_truth"`` (labels) or ``"predicted"`` (base argmax).
    """
    if class_source not in ("ground_truth", "predicted"):
        raise ValueError(f"unknown class_source {class_source!r}")
    if class_source == "ground_truth" and (data.labels is None or len(data.labels) != len(data)):
        raise ValueError("ground-truth attention needs labels")
    base.eval()
    cam = cam or GradCAM(base)
    with torch.no_grad():
        if class_source == "predicted":
            class_ids = torch.cat([base(data.images[i:i + batch_size]).argmax(1)
                                   for i in range(0, len(data), batch_size)])
        else:
            class_ids = data.labels.clone()
    cache = AttentionCache(cache_dir, model_hash(base), class_source) if cache_dir else None
    maps: list[torch.Tensor | None] = [cache.get(i) if cache else None for i in data.ids]
    todo = [n for n, m in enumerate(maps) if m is None]
    for start in range(0, len(todo), batch_size):
        idx = torch.tensor(todo[start:start + batch_size])
        out, _ = cam(data.images[idx], class_ids[idx])
        for n, m in zip(idx.tolist(), out):
            maps[n] = m
            if cache:
                cache.put(data.ids[n], m)
    stacked = torch.stack([m.float() for m in maps]) if maps else torch.empty(0)
    degenerate = stacked.flatten(1).amax(1) <= 0 if len(maps) else torch.empty(0, dtype=torch.bool)
    return AttentionSet(list(data.ids), stacked, degenerate, class_ids, class_source, len(todo))

