"""Loss terms and the two stage objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import combine_topk, minmax_normalize, predict, squared_distances, upsample_heatmap


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8     # clustering
    beta: float = 10.0     # attention alignment
    gamma: float = 1e-4    # L1 on the head

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def cluster_loss(z: torch.Tensor, words: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the smallest patch-to-word squared distance."""
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if words.shape[0] == 0:
        raise ValueError("empty word bank")
    d2 = squared_distances(z, words)
    return d2.flatten(1).amin(dim=1).mean()


def topk_combined_heatmap(grids: torch.Tensor, scores: torch.Tensor, k: int):
    """Normalized max-pool of the top-k word maps; see :func:`lvw.core.combine_topk`."""
    return combine_topk(grids, scores, k)


def alignment_loss(attn: torch.Tensor, combined: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between maps, summed over pixels and averaged over the batch."""
    if attn.shape != combined.shape:
        raise ValueError(f"map shapes differ: {tuple(attn.shape)} vs {tuple(combined.shape)}")
    if attn.dim() == 2:
        attn, combined = attn[None], combined[None]
    diff = attn - combined
    return (diff * diff).flatten(1).sum(dim=1).mean()


def classification_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of class scores against integer labels."""
    n_classes = scores.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(scores, labels)


def l1_penalty(weights: torch.Tensor) -> torch.Tensor:
    return weights.abs().sum()


def attention_to_grid(attn: torch.Tensor, size) -> torch.Tensor:
    """Bring ``(N, H, W)`` attention maps to the word-grid resolution, renormalized to [0, 1]."""
    if tuple(attn.shape[-2:]) == tuple(size):
        return attn
    small = F.interpolate(attn[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]
    return minmax_normalize(small)


def stage1_objective(model, images, labels, attn, weights: LossWeights, k: int,
                     align_resolution: str = "grid"):
    """Classification + alpha * clustering + beta * alignment.

    ``attn`` holds the base model's maps for ``images`` at image (or grid)
    resolution, or None when ``weights.beta == 0``. Returns the total loss and
    a dict of its terms (tensors).
    """
    out, sim, grids, z = model(images)
    l_cls = classification_loss(out, labels)
    l_clu = cluster_loss(z, model.words)
    if attn is None:
        if weights.beta:
            raise ValueError("alignment weight is non-zero but no attention maps were given")
        l_al = torch.zeros((), dtype=l_cls.dtype)
    elif align_resolution == "grid":
        combined, _ = combine_topk(grids, sim, k)
        l_al = alignment_loss(attention_to_grid(attn, grids.shape[-2:]), combined)
    elif align_resolution == "image":
        combined, _ = combine_topk(upsample_heatmap(grids, images.shape[-2:]), sim, k)
        l_al = alignment_loss(attn, combined)
    else:
        raise ValueError(f"unknown align_resolution {align_resolution!r}")
    total = l_cls + weights.alpha * l_clu + weights.beta * l_al
    return total, {"cls": l_cls, "cluster": l_clu, "align": l_al, "class_scores": out}


def stage3_objective(model, images, labels, gamma: float, sim=None):
    """Classification + gamma * L1(head).

    Pass precomputed similarity vectors ``sim`` to skip the frozen feature path.
    """
    if sim is None:
        with torch.no_grad():
            _, sim, _, _ = model(images)
    out = predict(sim, model.head_weights, model.uses_sigmoid)
    l_cls = classification_loss(out, labels)
    total = l_cls + gamma * l1_penalty(model.head.weight)
    return total, {"cls": l_cls, "class_scores": out}
