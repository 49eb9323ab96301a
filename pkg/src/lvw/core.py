"""Visual-word model: backbone contract, word layer and prediction head.

Tensors follow the torch channel-first layout throughout: a batch of feature
maps is ``(N, D, H, W)``, a word bank is ``(M, D)`` (1x1 words), activation
grids are ``(N, M, H, W)``.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

EPS = 1e-4
FEATURE_DIM = 128


def log_activation(d2: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Map squared distances to similarities, ``log((d2 + 1) / (d2 + eps))``.

    Strictly decreasing in ``d2``; equals ``log(1/eps)`` at zero distance and
    tends to 0 as ``d2`` grows.
    """
    return torch.log((d2 + 1) / (d2 + eps))


def squared_distances(z: torch.Tensor, words: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance from every 1x1 patch of ``z`` to every word.

    ``z`` is ``(N, D, H, W)`` and ``words`` is ``(M, D)``; returns
    ``(N, M, H, W)``. Computed from explicit differences, so a word copied
    from a patch gives exactly 0.
    """
    diff = z.unsqueeze(1) - words[None, :, :, None, None]
    return (diff * diff).sum(dim=2)


def _check_finite(z: torch.Tensor, what: str = "feature map"):
    if not torch.isfinite(z).all():
        raise NumericError(f"non-finite values in {what}")


def activation_grid(z: torch.Tensor, word: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Activation of a single word over the spatial grid of ``z``.

    Accepts ``z`` as ``(D, H, W)`` or ``(N, D, H, W)`` and ``word`` as
    ``(D,)``. Returns ``(H, W)`` or ``(N, H, W)`` respectively.
    """
    _check_finite(z)
    single = z.dim() == 3
    if single:
        z = z.unsqueeze(0)
    if word.dim() != 1 or word.shape[0] != z.shape[1]:
        raise ValueError(f"word of shape {tuple(word.shape)} does not fit features {tuple(z.shape)}")
    grid = log_activation(squared_distances(z, word[None]), eps)[:, 0]
    return grid[0] if single else grid


def upsample_heatmap(grid: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Bilinearly resize ``(..., h, w)`` grids to ``size = (height, width)``.

    Uses half-pixel centers (``align_corners=False``), the usual convention
    for CAM heatmaps; values stay within the range of the input grid.
    """
    height, width = int(size[0]), int(size[1])
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {tuple(size)}")
    if height < grid.shape[-2] or width < grid.shape[-1]:
        raise ValueError(f"target {tuple(size)} smaller than grid {tuple(grid.shape[-2:])}")
    lead = grid.shape[:-2]
    flat = grid.reshape(-1, 1, *grid.shape[-2:])
    out = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=False)
    return out.reshape(*lead, height, width)


def similarity_scores(z: torch.Tensor, words: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-word max activation: ``(N, D, H, W), (M, D) -> (N, M)``."""
    if words.shape[0] == 0:
        raise ValueError("word bank is empty")
    _check_finite(z)
    grids = log_activation(squared_distances(z, words), eps)
    return grids.flatten(2).amax(dim=2)


def predict(scores: torch.Tensor, weights: torch.Tensor, uses_sigmoid: bool = True) -> torch.Tensor:
    """Class scores from similarity vectors.

    ``scores`` is ``(N, M)`` (or ``(M,)``), ``weights`` is ``(M, C)``. With
    ``uses_sigmoid`` the logits are squashed elementwise; the classification
    loss then applies its softmax cross-entropy on top of the squashed values.
    """
    if scores.shape[-1] != weights.shape[0]:
        raise ValueError(f"similarity length {scores.shape[-1]} != head rows {weights.shape[0]}")
    logits = scores @ weights
    return torch.sigmoid(logits) if uses_sigmoid else logits


def init_head(n_words: int, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Initial ``(M, C)`` head: 1.0 from each class's own block of words, -0.5 elsewhere.

    Class ``c`` owns the contiguous words ``[c*M/C, (c+1)*M/C)``.
    """
    if n_classes <= 0 or n_words <= 0 or n_words % n_classes:
        raise ValueError(f"M={n_words} is not a positive multiple of C={n_classes}")
    per_class = n_words // n_classes
    weights = torch.full((n_words, n_classes), -0.5, dtype=dtype)
    for c in range(n_classes):
        weights[c * per_class:(c + 1) * per_class, c] = 1.0
    return weights


def word_classes(n_words: int, n_classes: int) -> list[int]:
    """Class each word is assigned to by :func:`init_head`."""
    per_class = n_words // n_classes
    return [j // per_class for j in range(n_words)]


class Backbone(nn.Module):
    """Small VGG-style feature extractor: ``conv3x3 -> ReLU -> maxpool`` blocks."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128), in_channels: int = 3,
                 input_size: int = 64):
        super().__init__()
        if not 3 <= len(channels) <= 5:
            raise ConfigError("backbone needs 3 to 5 conv blocks")
        layers: list[nn.Module] = []
        prev = in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(inplace=False), nn.MaxPool2d(2)]
            prev = ch
        self.blocks = nn.Sequential(*layers)
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.input_size = input_size
        self.out_channels = prev

    @property
    def grid_size(self) -> int:
        return self.input_size >> len(self.channels)

    def forward(self, x):
        return self.blocks(x)


def extract_features(images: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    """Run ``backbone`` on a batch (or single image) and return its last conv output."""
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    expected = getattr(backbone, "input_size", None)
    in_ch = getattr(backbone, "in_channels", None)
    if in_ch is not None and images.shape[1] != in_ch:
        raise ConfigError(f"image has {images.shape[1]} channels, backbone expects {in_ch}")
    if expected is not None and tuple(images.shape[-2:]) != (expected, expected):
        raise ConfigError(f"image size {tuple(images.shape[-2:])} != configured {expected}x{expected}")
    z = backbone(images)
    return z[0] if single else z


def minmax_normalize(maps: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Rescale each ``(..., h, w)`` map to [0, 1]; constant maps become all zeros."""
    flat = maps.flatten(-2)
    lo = flat.amin(dim=-1, keepdim=True)
    hi = flat.amax(dim=-1, keepdim=True)
    out = (flat - lo) / (hi - lo).clamp_min(eps)
    return out.reshape(maps.shape)


def topk_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest scores per row; ties go to the lower index."""
    m = scores.shape[-1]
    if k <= 0 or k > m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    order = torch.sort(-scores, dim=-1, stable=True).indices
    return order[..., :k]


def combine_topk(grids: torch.Tensor, scores: torch.Tensor, k: int):
    """Pool the activation maps of the top-k words of each sample.

    ``grids`` is ``(N, M, h, w)``, ``scores`` ``(N, M)``. Returns the
    min-max-normalized elementwise max ``(N, h, w)`` and the chosen word
    indices ``(N, k)``.
    """
    idx = topk_indices(scores.detach(), k)
    picked = torch.gather(grids, 1, idx[:, :, None, None].expand(-1, -1, *grids.shape[-2:]))
    return minmax_normalize(picked.amax(dim=1)), idx


class LVWModel(nn.Module):
    """Backbone ``f`` + adapter, visual-word layer ``g`` and linear head ``h``."""

    def __init__(self, backbone: Backbone, n_classes: int, words_per_class: int = 5,
                 feature_dim: int = FEATURE_DIM, uses_sigmoid: bool = True, eps: float = EPS):
        super().__init__()
        self.backbone = backbone
        self.adapter = nn.Sequential(
            nn.Conv2d(backbone.out_channels, feature_dim, 1), nn.ReLU(),
            nn.Conv2d(feature_dim, feature_dim, 1), nn.ReLU(),
        )
        self.n_classes = n_classes
        self.n_words = words_per_class * n_classes
        self.feature_dim = feature_dim
        self.uses_sigmoid = uses_sigmoid
        self.eps = eps
        self.words = nn.Parameter(torch.rand(self.n_words, feature_dim))
        self.head = nn.Linear(self.n_words, n_classes, bias=False)
        with torch.no_grad():
            self.head.weight.copy_(init_head(self.n_words, n_classes).T)
        # (image_id, row, col) per word, filled by projection
        self.provenance: list[tuple[str, int, int] | None] = [None] * self.n_words

    @property
    def input_size(self) -> int:
        return self.backbone.input_size

    @property
    def head_weights(self) -> torch.Tensor:
        """Head as an ``(M, C)`` matrix."""
        return self.head.weight.T

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.adapter(extract_features(x, self.backbone))

    def forward(self, x: torch.Tensor):
        """Returns ``(class_scores, similarity, grids, z)`` for a batch."""
        z = self.features(x)
        if not torch.isfinite(z).all():
            raise NumericError("non-finite feature map")
        d2 = squared_distances(z, self.words)
        grids = log_activation(d2, self.eps)
        sim = grids.flatten(2).amax(dim=2)
        return predict(sim, self.head_weights, self.uses_sigmoid), sim, grids, z

    @torch.no_grad()
    def combined_heatmaps(self, x: torch.Tensor, k: int):
        """Image-resolution top-k heatmaps for evaluation.

        Each word grid is upsampled first, then max-pooled over the top-k
        words and min-max normalized. Returns ``(class_scores, heatmaps, word_idx)``.
        """
        out, sim, grids, _ = self(x)
        idx = topk_indices(sim, k)
        picked = torch.gather(grids, 1, idx[:, :, None, None].expand(-1, -1, *grids.shape[-2:]))
        maps = upsample_heatmap(picked, x.shape[-2:]).amax(dim=1)
        return out, minmax_normalize(maps), idx
