"""Three-stage training: stage-1 (head frozen) -> word projection -> stage-3 (head only)."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .core import Backbone, LVWModel, init_head, squared_distances
from .data import ImageSet, random_flip
from .errors import NumericError
from .objectives import LossWeights, stage1_objective, stage3_objective

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "stage", "loss_total", "loss_cls", "loss_cluster", "loss_align", "accuracy")


@dataclass
class TrainingConfig:
    epochs: int = 200
    project_every: int = 10
    lr_backbone: float = 1e-4
    lr_other: float = 3e-3
    batch_size: int = 32
    k: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    words_per_class: int = 5
    stage3_epochs: int = 20
    warmup_epochs: int = 0           # stage-1 epochs with the backbone frozen
    align_resolution: str = "grid"   # or "image"
    uses_sigmoid: bool = True
    reset_head_each_cycle: bool = False
    init_from_base: bool = True
    word_init: str = "patches"       # or "uniform"
    channels: tuple = (32, 64, 128)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.channels = tuple(self.channels)
        if self.lr_backbone < 0 or self.lr_other < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.project_every < 1 or self.batch_size < 1:
            raise ValueError("epochs, project_every and batch_size must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @property
    def n_cycles(self) -> int:
        return math.ceil(self.epochs / self.project_every)


@dataclass
class TrainState:
    model: LVWModel
    generator: torch.Generator
    epoch: int = 0
    stage: str = "init"
    trace: list[dict] = field(default_factory=list)


def build_model(n_classes: int, input_size: int, config: TrainingConfig, base=None) -> LVWModel:
    torch.manual_seed(config.seed)
    backbone = Backbone(config.channels, input_size=input_size)
    if base is not None and config.init_from_base:
        backbone.load_state_dict(base.backbone.state_dict())
    return LVWModel(backbone, n_classes, config.words_per_class, uses_sigmoid=config.uses_sigmoid)


@torch.no_grad()
def init_words_from_patches(model: LVWModel, train: ImageSet, generator: torch.Generator):
    """Start each word at a random patch of a random training image of its assigned class."""
    per_class = model.n_words // model.n_classes
    for j in range(model.n_words):
        members = torch.nonzero(train.labels == j // per_class).flatten()
        if len(members) == 0:
            continue
        i = members[torch.randint(len(members), (), generator=generator)]
        z = model.features(train.images[i][None])[0]
        r = torch.randint(z.shape[1], (), generator=generator)
        c = torch.randint(z.shape[2], (), generator=generator)
        model.words[j] = z[:, r, c]


def new_state(train: ImageSet, config: TrainingConfig, base=None) -> TrainState:
    model = build_model(train.n_classes, train.resolution, config, base)
    gen = torch.Generator().manual_seed(config.seed)
    if config.word_init == "patches":
        init_words_from_patches(model, train, gen)
    elif config.word_init != "uniform":
        raise ValueError(f"unknown word_init {config.word_init!r}")
    return TrainState(model, gen)


def _set_trainable(model: LVWModel, backbone: bool, other: bool, head: bool):
    for p in model.backbone.parameters():
        p.requires_grad_(backbone)
    for p in model.adapter.parameters():
        p.requires_grad_(other)
    model.words.requires_grad_(other)
    model.head.weight.requires_grad_(head)


def _snapshot_and_raise(state: TrainState, config, snapshot_dir, what: str):
    path = None
    if snapshot_dir is not None:
        path = Path(snapshot_dir) / "nan_snapshot"
        ckpt_io.save(ckpt_io.from_lvw(state.model, config.to_dict(), state.epoch, state.stage,
                                      state.generator), path)
    raise NumericError(f"non-finite {what} at epoch {state.epoch} ({state.stage})", snapshot=path)


def run_stage1(state: TrainState, train: ImageSet, attn: torch.Tensor | None,
               config: TrainingConfig, epochs: int, snapshot_dir=None) -> list[dict]:
    """Optimize backbone, adapter and words on the stage-1 objective; head stays fixed.

    ``attn`` is ``(N, H, W)`` aligned with ``train`` (ignored when beta is 0).
    Returns the per-epoch trace rows appended to ``state.trace``.
    """
    model = state.model
    weights = config.loss_weights
    if weights.beta == 0:
        attn = None
    elif attn is None:
        raise ValueError("stage 1 with beta > 0 needs attention maps")
    rows = []
    opt, opt_warm = None, None
    for _ in range(epochs):
        warm = state.epoch < config.warmup_epochs
        if opt is None or warm != opt_warm:
            _set_trainable(model, backbone=not warm, other=True, head=False)
            groups = [{"params": list(model.adapter.parameters()) + [model.words], "lr": config.lr_other}]
            if not warm:
                groups.append({"params": list(model.backbone.parameters()), "lr": config.lr_backbone})
            opt, opt_warm = torch.optim.Adam(groups), warm
        model.train()
        state.stage = "stage1"
        sums = dict.fromkeys(("total", "cls", "cluster", "align"), 0.0)
        correct = 0
        order = torch.randperm(len(train), generator=state.generator)
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, a = random_flip(train.images[idx], None if attn is None else attn[idx], state.generator)
            try:
                loss, parts = stage1_objective(model, x, train.labels[idx], a, weights, config.k,
                                               config.align_resolution)
            except NumericError:
                loss = torch.tensor(math.nan)
            if not torch.isfinite(loss):
                _snapshot_and_raise(state, config, snapshot_dir, "stage-1 loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(idx)
            sums["total"] += loss.item() * n
            for key in ("cls", "cluster", "align"):
                sums[key] += parts[key].item() * n
            correct += (parts["class_scores"].argmax(1) == train.labels[idx]).sum().item()
        state.epoch += 1
        rows.append(_row(state.epoch, "stage1", sums, correct, len(train)))
    model.eval()
    state.trace.extend(rows)
    return rows


def _row(epoch, stage, sums, correct, n):
    return {"epoch": epoch, "stage": stage, "loss_total": sums["total"] / n,
            "loss_cls": sums["cls"] / n, "loss_cluster": sums.get("cluster", 0.0) / n,
            "loss_align": sums.get("align", 0.0) / n, "accuracy": correct / n}


@torch.no_grad()
def project_words(words: torch.Tensor, batches):
    """Replace each word by its nearest patch over all training feature maps.

    ``batches`` yields ``(ids, z)`` with ``z`` of shape ``(B, D, H, W)``.
    Returns ``(new_words, provenance, distances)``; provenance entries are
    ``(image_id, row, col)`` and ties keep the first patch seen (image order,
    then row-major).
    """
    m = words.shape[0]
    best = torch.full((m,), math.inf, dtype=words.dtype)
    new = words.clone()
    prov: list = [None] * m
    seen = False
    for ids, z in batches:
        if len(ids) == 0:
            continue
        seen = True
        d2 = squared_distances(z.to(words.dtype), words)              # (B, M, H, W)
        b, _, h, w = d2.shape
        flat = d2.permute(1, 0, 2, 3).reshape(m, -1)                  # patch order: image, row, col
        dmin, arg = flat.min(dim=1)
        for j in torch.nonzero(dmin < best).flatten().tolist():
            i, rem = divmod(int(arg[j]), h * w)
            r, c = divmod(rem, w)
            best[j] = dmin[j]
            new[j] = z[i, :, r, c]
            prov[j] = (ids[i], r, c)
    if not seen:
        raise ValueError("cannot project onto an empty training set")
    return new, prov, best


def feature_batches(model: LVWModel, data: ImageSet, batch_size: int = 64):
    model.eval()
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            yield data.ids[start:start + batch_size], model.features(data.images[start:start + batch_size])


def project_model(state_or_model, train: ImageSet, batch_size: int = 64):
    """Project the model's words onto training patches in place; returns pre-projection distances."""
    model = getattr(state_or_model, "model", state_or_model)
    new, prov, dist = project_words(model.words.detach(), feature_batches(model, train, batch_size))
    with torch.no_grad():
        model.words.copy_(new)
    model.provenance = prov
    if hasattr(state_or_model, "stage"):
        state_or_model.stage = "projected"
    return dist


def verify_provenance(model: LVWModel, data: ImageSet, atol: float = 1e-5) -> bool:
    """Check that every word equals the patch its provenance points at."""
    with torch.no_grad():
        for j, p in enumerate(model.provenance):
            if p is None:
                return False
            image_id, r, c = p
            z = model.features(data.images[data.index_of(image_id)][None])[0]
            if (z[:, r, c] - model.words[j]).pow(2).sum() > atol:
                return False
    return True


@torch.no_grad()
def stage3_inputs(model: LVWModel, train: ImageSet, batch_size: int = 128):
    """Similarity vectors of the plain and the horizontally flipped training images."""
    model.eval()
    out = []
    for flip in (False, True):
        parts = []
        for start in range(0, len(train), batch_size):
            x = train.images[start:start + batch_size]
            parts.append(model(x.flip(-1) if flip else x)[1])
        out.append(torch.cat(parts))
    return tuple(out)


def run_stage3(state: TrainState, train: ImageSet, config: TrainingConfig, epochs: int | None = None,
               snapshot_dir=None, sims=None) -> list[dict]:
    """Optimize only the head on classification + gamma * L1.

    The feature path is frozen, so similarity vectors are computed once for
    the plain and flipped images (or taken from ``sims``); each minibatch
    draws its flips from the state RNG.
    """
    model = state.model
    epochs = config.stage3_epochs if epochs is None else epochs
    _set_trainable(model, backbone=False, other=False, head=True)
    model.eval()
    state.stage = "stage3"
    plain, flipped = stage3_inputs(model, train) if sims is None else sims
    opt = torch.optim.Adam([model.head.weight], lr=config.lr_other)
    rows = []
    for _ in range(epochs):
        sums = {"total": 0.0, "cls": 0.0}
        correct = 0
        order = torch.randperm(len(train), generator=state.generator)
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            flips = torch.rand(len(idx), generator=state.generator) < 0.5
            sim = torch.where(flips[:, None], flipped[idx], plain[idx])
            loss, parts = stage3_objective(model, None, train.labels[idx], config.loss_weights.gamma, sim=sim)
            if not torch.isfinite(loss):
                _snapshot_and_raise(state, config, snapshot_dir, "stage-3 loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["total"] += loss.item() * len(idx)
            sums["cls"] += parts["cls"].item() * len(idx)
            correct += (parts["class_scores"].argmax(1) == train.labels[idx]).sum().item()
        rows.append(_row(state.epoch, "stage3", sums, correct, len(train)))
    _set_trainable(model, backbone=True, other=True, head=False)
    state.trace.extend(rows)
    return rows


def append_trace(path, rows):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def save_state(state: TrainState, config: TrainingConfig, path):
    return ckpt_io.save(ckpt_io.from_lvw(state.model, config.to_dict(), state.epoch, state.stage,
                                         state.generator), path)


def full_protocol(train: ImageSet, attn: torch.Tensor | None, config: TrainingConfig, base=None,
                  out_dir=None, state: TrainState | None = None):
    """Cycle [stage-1 for ``project_every`` epochs -> projection -> stage-3] over the epoch budget.

    With ``out_dir`` a checkpoint is written after every cycle
    (``checkpoints/epoch_XXXX``) and the trace appended to ``trace.csv``.
    Returns the final :class:`TrainState`.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    state = state or new_state(train, config, base)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    while state.epoch < config.epochs:
        if config.reset_head_each_cycle:
            with torch.no_grad():
                state.model.head.weight.copy_(init_head(state.model.n_words, state.model.n_classes).T)
        n = min(config.project_every, config.epochs - state.epoch)
        rows = run_stage1(state, train, attn, config, n, snapshot_dir=out)
        project_model(state, train)
        rows += run_stage3(state, train, config, snapshot_dir=out)
        log.info("epoch %d: stage1 loss %.4f, stage3 acc %.3f", state.epoch,
                 rows[n - 1]["loss_total"], rows[-1]["accuracy"])
        if out is not None:
            append_trace(out / "trace.csv", rows)
            save_state(state, config, out / "checkpoints" / f"epoch_{state.epoch:04d}")
    if out is not None:
        save_state(state, config, out / "final")
    return state


def resume(path) -> tuple[TrainState, TrainingConfig]:
    """Rebuild a training state (model, RNG, epoch) from a checkpoint directory."""
    c = ckpt_io.load(path)
    config = TrainingConfig(**c.config)
    model = ckpt_io.to_lvw(c)
    gen = ckpt_io.generator_from(c) or torch.Generator().manual_seed(config.seed)
    return TrainState(model, gen, c.epoch, c.stage), config
