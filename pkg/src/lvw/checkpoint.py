"""Checkpoint directories: ``manifest.json`` plus one ``.npy`` blob per tensor.

Nothing time- or host-dependent is written, so saving the same state twice
gives byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

FORMAT = "lvw-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str                                   # "lvw" or "base"
    tensors: dict[str, torch.Tensor]
    model: dict                                 # constructor arguments
    config: dict = field(default_factory=dict)
    epoch: int = 0
    stage: str = ""
    provenance: list | None = None
    extra: dict = field(default_factory=dict)


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save(ckpt: Checkpoint, path) -> Path:
    """Write ``ckpt`` to directory ``path`` (replacing it); returns the path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)
    entries = {}
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name].detach().cpu().contiguous().numpy()
        blob = _npy_bytes(arr)
        fname = f"tensors/{name}.npy"
        (tmp / fname).write_bytes(blob)
        entries[name] = {"file": fname, "dtype": str(arr.dtype), "shape": list(arr.shape),
                         "sha256": _sha(blob)}
    manifest = {
        "format": FORMAT, "version": VERSION, "kind": ckpt.kind,
        "epoch": ckpt.epoch, "stage": ckpt.stage,
        "model": ckpt.model, "config": ckpt.config,
        "provenance": ckpt.provenance, "extra": ckpt.extra,
        "tensors": entries,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise DataError(f"no checkpoint manifest at {path}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint format at {path}")
    tensors = {}
    for name, e in manifest["tensors"].items():
        blob = (path / e["file"]).read_bytes()
        if _sha(blob) != e["sha256"]:
            raise DataError(f"checksum mismatch for tensor {name!r} in {path}")
        tensors[name] = torch.from_numpy(np.load(io.BytesIO(blob), allow_pickle=False))
    prov = manifest.get("provenance")
    if prov is not None:
        prov = [tuple(p) if p is not None else None for p in prov]
    return Checkpoint(manifest["kind"], tensors, manifest["model"], manifest["config"],
                      manifest["epoch"], manifest["stage"], prov, manifest.get("extra", {}))


def checksum(path) -> str:
    """Content hash of a checkpoint directory (manifest bytes + blob hashes)."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# model <-> checkpoint

def from_lvw(model, config: dict | None = None, epoch: int = 0, stage: str = "",
             generator: torch.Generator | None = None) -> Checkpoint:
    tensors = {k: v for k, v in model.state_dict().items()}
    if generator is not None:
        tensors["rng.generator"] = generator.get_state()
    spec = {"n_classes": model.n_classes, "words_per_class": model.n_words // model.n_classes,
            "channels": list(model.backbone.channels), "input_size": model.input_size,
            "feature_dim": model.feature_dim, "uses_sigmoid": model.uses_sigmoid, "eps": model.eps}
    prov = [list(p) if p is not None else None for p in model.provenance]
    return Checkpoint("lvw", tensors, spec, config or {}, epoch, stage, prov)


def to_lvw(ckpt: Checkpoint):
    from .core import Backbone, LVWModel

    if ckpt.kind != "lvw":
        raise DataError(f"expected an lvw checkpoint, got {ckpt.kind!r}")
    m = ckpt.model
    model = LVWModel(Backbone(m["channels"], input_size=m["input_size"]), m["n_classes"],
                     m["words_per_class"], m["feature_dim"], m["uses_sigmoid"], m["eps"])
    state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("rng.")}
    model.load_state_dict(state)
    if ckpt.provenance is not None:
        model.provenance = list(ckpt.provenance)
    model.eval()
    return model


def generator_from(ckpt: Checkpoint) -> torch.Generator | None:
    state = ckpt.tensors.get("rng.generator")
    if state is None:
        return None
    g = torch.Generator()
    g.set_state(state)
    return g


def from_base(base, config: dict | None = None) -> Checkpoint:
    spec = {"n_classes": base.n_classes, "channels": list(base.backbone.channels),
            "input_size": base.backbone.input_size}
    return Checkpoint("base", dict(base.state_dict()), spec, config or {})


def to_base(ckpt: Checkpoint):
    from .attention import BaseClassifier
    from .core import Backbone

    if ckpt.kind != "base":
        raise DataError(f"expected a base checkpoint, got {ckpt.kind!r}")
    m = ckpt.model
    base = BaseClassifier(Backbone(m["channels"], input_size=m["input_size"]), m["n_classes"])
    base.load_state_dict(ckpt.tensors)
    base.eval()
    for p in base.parameters():
        p.requires_grad_(False)
    return base


def load_lvw(path):
    return to_lvw(load(path))


def load_base_model(path):
    return to_base(load(path))
