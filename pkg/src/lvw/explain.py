"""Explanation artifacts: word visualizations, local explanations, category similarity."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import topk_indices, upsample_heatmap
from .data import ImageSet

log = logging.getLogger(__name__)

BOX_FRACTION = 0.95
UNSEEN_NOTE = ("The true category of this image was not seen during training; the predicted "
               "class is the closest known category, not a label for the image.")


def bounding_box(heatmap, fraction: float = BOX_FRACTION) -> tuple[int, int, int, int]:
    """Tightest box around pixels >= ``fraction * max``.

    Returned as ``(row0, col0, row1, col1)`` with exclusive ends, so the area is
    ``(row1 - row0) * (col1 - col0)`` and always positive.
    """
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max()
    rows, cols = np.nonzero(h >= fraction * peak if peak > 0 else h >= peak)
    return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


@dataclass
class WordVisualization:
    word_id: int
    image_id: str
    image_index: int
    score: float
    heatmap: np.ndarray          # image resolution, raw activations
    box: tuple[int, int, int, int]


@dataclass
class LocalWord:
    word_id: int
    score: float
    heatmap: np.ndarray
    box: tuple[int, int, int, int]
    source: WordVisualization


@torch.no_grad()
def similarity_matrix(model, data: ImageSet, batch_size: int = 64) -> torch.Tensor:
    """Similarity vectors ``(N, M)`` for every image of ``data``."""
    model.eval()
    return torch.cat([model(data.images[s:s + batch_size])[1] for s in range(0, len(data), batch_size)])


@torch.no_grad()
def _word_heatmap(model, image: torch.Tensor, word_id: int) -> np.ndarray:
    _, _, grids, _ = model(image[None])
    return upsample_heatmap(grids[0, word_id], image.shape[-2:]).numpy()


def global_visualization(word_id: int, train: ImageSet, model, scores: torch.Tensor | None = None,
                         fraction: float = BOX_FRACTION) -> WordVisualization:
    """The training image on which ``word_id`` fires hardest, with its heatmap and box."""
    if model.provenance[word_id] is None:
        log.warning("word %d has not been projected; visualization may not match a training patch", word_id)
    scores = similarity_matrix(model, train) if scores is None else scores
    i = int(torch.argmax(scores[:, word_id]))          # first index on ties
    hm = _word_heatmap(model, train.images[i], word_id)
    return WordVisualization(word_id, train.ids[i], i, float(scores[i, word_id]), hm,
                             bounding_box(hm, fraction))


def global_visualizations(train: ImageSet, model, fraction: float = BOX_FRACTION) -> list[WordVisualization]:
    scores = similarity_matrix(model, train)
    return [global_visualization(j, train, model, scores, fraction) for j in range(model.n_words)]


@torch.no_grad()
def local_explanation(image: torch.Tensor, model, k: int, train: ImageSet,
                      sources: list[WordVisualization] | None = None,
                      fraction: float = BOX_FRACTION) -> list[LocalWord]:
    """Top-k words on ``image`` (same selection rule as the alignment heatmap),
    each linked to its global visualization on the training set."""
    model.eval()
    _, sim, grids, _ = model(image[None])
    idx = topk_indices(sim, k)[0].tolist()
    scores = None if sources is not None else similarity_matrix(model, train)
    out = []
    for j in idx:
        hm = upsample_heatmap(grids[0, j], image.shape[-2:]).numpy()
        src = sources[j] if sources is not None else global_visualization(j, train, model, scores, fraction)
        out.append(LocalWord(j, float(sim[0, j]), hm, bounding_box(hm, fraction), src))
    return out


@dataclass
class CategorySimilarity:
    matrix: np.ndarray                 # (C, C) Pearson, NaN where undefined
    class_vectors: np.ndarray          # (C, M) mean similarity vectors
    undefined: list[int] = field(default_factory=list)


def category_similarity_matrix(train: ImageSet, model, scores: torch.Tensor | None = None) -> CategorySimilarity:
    """Pearson correlation between per-class mean similarity vectors."""
    scores = similarity_matrix(model, train) if scores is None else scores
    s = scores.double().numpy()
    labels = train.labels.numpy()
    vecs = np.stack([s[labels == c].mean(axis=0) if (labels == c).any() else np.full(s.shape[1], np.nan)
                     for c in range(train.n_classes)])
    centered = vecs - vecs.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    undefined = [c for c in range(len(vecs)) if not np.isfinite(norms[c]) or norms[c] == 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = centered / norms[:, None]
        corr = unit @ unit.T
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    for c in undefined:
        corr[c, :] = np.nan
        corr[:, c] = np.nan
    if undefined:
        log.warning("classes %s have constant activation vectors; correlations undefined", undefined)
    return CategorySimilarity(corr, vecs, undefined)


@dataclass
class UnseenExplanation:
    words: list[LocalWord]
    predicted_class: int
    provenance: list[dict]
    note: str = UNSEEN_NOTE

    @property
    def provenance_classes(self) -> set[int]:
        return {p["class_id"] for p in self.provenance if p["class_id"] is not None}


def explain_unseen(image: torch.Tensor, model, k: int, train: ImageSet,
                   sources: list[WordVisualization] | None = None) -> UnseenExplanation:
    """Local explanation for an out-of-vocabulary image, with each word's training-class origin."""
    words = local_explanation(image, model, k, train, sources)
    with torch.no_grad():
        pred = int(model(image[None])[0].argmax(1))
    prov = []
    for w in words:
        p = model.provenance[w.word_id]
        image_id = p[0] if p is not None else w.source.image_id
        cls = int(train.labels[train.index_of(image_id)]) if image_id in train.ids else None
        prov.append({"word_id": w.word_id, "image_id": image_id,
                     "patch": [int(p[1]), int(p[2])] if p is not None else None,
                     "class_id": cls, "class_name": train.class_names[cls] if cls is not None else None})
    return UnseenExplanation(words, pred, prov)


# --------------------------------------------------------------------------
# rendering

def overlay(image: torch.Tensor, heatmap: np.ndarray, box=None, alpha: float = 0.5) -> np.ndarray:
    """Blend a viridis-coloured heatmap over ``image`` (3, H, W); returns uint8 (H, W, 3)."""
    from matplotlib import colormaps

    base = image.clamp(0, 1).numpy().transpose(1, 2, 0)
    h = np.asarray(heatmap, dtype=np.float64)
    span = h.max() - h.min()
    norm = (h - h.min()) / span if span > 0 else np.zeros_like(h)
    rgb = (1 - alpha) * base + alpha * colormaps["viridis"](norm)[..., :3]
    out = (rgb * 255).round().astype(np.uint8)
    if box is not None:
        r0, c0, r1, c1 = box
        color = np.array([255, 255, 0], dtype=np.uint8)
        out[r0, c0:c1] = out[r1 - 1, c0:c1] = color
        out[r0:r1, c0] = out[r0:r1, c1 - 1] = color
    return out


def _save_png(arr: np.ndarray, path: Path):
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s)


def _viz_record(v: WordVisualization, rel: str) -> dict:
    return {"word_id": v.word_id, "image_id": v.image_id, "score": v.score, "box": list(v.box), "png": rel}


def write_word_gallery(out_dir, train: ImageSet, model, visuals=None) -> list[dict]:
    """One PNG per word under ``words/`` plus index records."""
    out = Path(out_dir)
    visuals = visuals or global_visualizations(train, model)
    records = []
    for v in visuals:
        rel = f"words/word_{v.word_id:03d}.png"
        _save_png(overlay(train.images[v.image_index], v.heatmap, v.box), out / rel)
        rec = _viz_record(v, rel)
        rec["provenance"] = list(model.provenance[v.word_id]) if model.provenance[v.word_id] else None
        records.append(rec)
    return records


def write_local(out_dir, image_id: str, image: torch.Tensor, words: list[LocalWord]) -> list[dict]:
    out = Path(out_dir)
    folder = f"images/{_slug(image_id)}"
    records = []
    for rank, w in enumerate(words):
        rel = f"{folder}/rank{rank:02d}_word{w.word_id:03d}.png"
        _save_png(overlay(image, w.heatmap, w.box), out / rel)
        records.append({"rank": rank, "word_id": w.word_id, "score": w.score, "box": list(w.box),
                        "png": rel, "source": _viz_record(w.source, f"words/word_{w.word_id:03d}.png")})
    return records


def write_index(out_dir, index: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True, default=float) + "\n")
