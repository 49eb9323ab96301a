"""Accuracy and IoU coverage between base-model attention and top-k word heatmaps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data import ImageSet

log = logging.getLogger(__name__)


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def quantile_mask(amap, q: float) -> np.ndarray:
    """Keep entries at or above the q-th percentile (linear interpolation)."""
    if not 0 <= q < 100:
        raise ValueError(f"q must lie in [0, 100), got {q}")
    a = _as_numpy(amap).astype(np.float64)
    if not np.isfinite(a).all():
        raise ValueError("map contains non-finite values")
    return a >= np.percentile(a, q)


def iou_coverage(attn, combined, q: float = 50) -> float:
    """IoU of the two quantile masks; 1.0 if both masks are empty."""
    a, b = _as_numpy(attn), _as_numpy(combined)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    ma, mb = quantile_mask(a, q), quantile_mask(b, q)
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


@dataclass
class IoUReport:
    ids: list[str]
    ious: list[float]
    k: int
    q: float
    dataset: str = ""
    model: str = ""
    n_missing: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else float("nan")


@dataclass
class Heatmaps:
    """Cached per-image predictions and top-k combined heatmaps for one k."""

    ids: list[str]
    predictions: torch.Tensor
    maps: torch.Tensor
    words: torch.Tensor
    k: int


@torch.no_grad()
def compute_heatmaps(model, data: ImageSet, k: int, batch_size: int = 64) -> Heatmaps:
    if len(data) == 0:
        raise ValueError("empty test set")
    model.eval()
    preds, maps, words = [], [], []
    for start in range(0, len(data), batch_size):
        out, m, idx = model.combined_heatmaps(data.images[start:start + batch_size], k)
        preds.append(out.argmax(1))
        maps.append(m)
        words.append(idx)
    return Heatmaps(list(data.ids), torch.cat(preds), torch.cat(maps), torch.cat(words), k)


def accuracy(predictions: torch.Tensor, labels: torch.Tensor) -> float:
    return float((predictions == labels).double().mean())


def evaluate(model, data: ImageSet, attention: Mapping[str, torch.Tensor], k: int = 10, q: float = 50,
             heatmaps: Heatmaps | None = None, dataset: str = "", model_id: str = ""):
    """Top-1 accuracy and per-image IoU coverage at ``(k, q)``.

    Images without an attention map are skipped for IoU (counted in
    ``n_missing``). Returns ``(IoUReport, accuracy)``.
    """
    if len(data) == 0:
        raise ValueError("empty test set")
    hm = heatmaps if heatmaps is not None else compute_heatmaps(model, data, k)
    ids, ious, missing = [], [], 0
    for n, image_id in enumerate(data.ids):
        a = attention.get(image_id)
        if a is None:
            missing += 1
            continue
        ids.append(image_id)
        ious.append(iou_coverage(a, hm.maps[n], q))
    if missing:
        log.warning("%d test images have no attention map and were excluded", missing)
    report = IoUReport(ids, ious, hm.k, q, dataset, model_id, missing)
    return report, accuracy(hm.predictions, data.labels)


def quantile_sweep(model, data: ImageSet, attention, k: int = 10, qs=(10, 30, 50, 70, 90),
                   heatmaps: Heatmaps | None = None) -> list[tuple[float, float]]:
    """Mean IoU for each quantile threshold, sharing one heatmap pass."""
    qs = list(qs)
    if not qs:
        raise ValueError("need at least one quantile")
    hm = heatmaps if heatmaps is not None else compute_heatmaps(model, data, k)
    return [(q, evaluate(model, data, attention, k, q, heatmaps=hm)[0].mean_iou) for q in qs]


def topk_sweep(model, data: ImageSet, attention, ks=(1, 3, 5, 10), q: float = 50,
               n_subsets: int = 0, subset_frac: float = 0.5, seed: int = 0):
    """Mean IoU and accuracy per k.

    With ``n_subsets`` > 0, also the standard deviation of the mean IoU over
    random test subsets of size ``subset_frac``. Rows are
    ``(k, mean_iou, accuracy, subset_std)``.
    """
    rng = np.random.default_rng(seed)
    subsets = [rng.choice(len(data), max(1, int(len(data) * subset_frac)), replace=False)
               for _ in range(n_subsets)]
    rows = []
    for k in ks:
        if not 1 <= k <= model.n_words:
            raise ValueError(f"k={k} outside [1, {model.n_words}]")
        report, acc = evaluate(model, data, attention, k, q)
        std = float("nan")
        if subsets:
            per = dict(zip(report.ids, report.ious))
            means = [np.mean([per[data.ids[i]] for i in s if data.ids[i] in per]) for s in subsets]
            std = float(np.std(means))
        rows.append((k, report.mean_iou, acc, std))
    return rows


def write_report(out_dir, report: IoUReport, acc: float, checkpoint_checksum: str = "", name: str = "report"):
    """``{name}.csv`` with per-image IoU and ``{name}.json`` with the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"{name}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "iou"])
        for i, v in zip(report.ids, report.ious):
            w.writerow([i, f"{v:.10g}"])
    summary = {"mean_iou": report.mean_iou, "accuracy": acc, "k": report.k, "q": report.q,
               "dataset": report.dataset, "model": report.model, "n_images": len(report.ious),
               "n_missing": report.n_missing, "checkpoint_checksum": checkpoint_checksum}
    (out / f"{name}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def write_table(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
