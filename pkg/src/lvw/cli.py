"""Command-line harness: ``lvw <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from . import checkpoint as ckpt_io
from .attention import attention_batch, finetune_base
from .data import ImageSet, ingest, load_image, load_split, make_composite, make_synthetic_splits
from .errors import ConfigError, DataError, LVWError, NumericError
from .evaluation import evaluate, quantile_sweep, topk_sweep, write_report, write_table
from .explain import (
    category_similarity_matrix,
    explain_unseen,
    global_visualizations,
    local_explanation,
    similarity_matrix,
    write_index,
    write_local,
    write_word_gallery,
)
from .objectives import LossWeights
from .train import TrainingConfig, full_protocol, project_model, verify_provenance

log = logging.getLogger("lvw")

EXIT_CODES = {ConfigError: 1, DataError: 2, NumericError: 3}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _opt_str(s: str):
    return s or None


# key -> (parser, default). Values in a config file are always strings.
SCHEMA: dict[str, tuple] = {
    "dataset.source": (str, "synthetic"),
    "dataset.path": (_opt_str, None),
    "dataset.resolution": (int, 64),
    "dataset.n_classes": (int, 4),
    "dataset.n_train": (int, 200),
    "dataset.n_test": (int, 100),
    "dataset.seed": (int, 0),
    "base.checkpoint": (_opt_str, None),
    "base.epochs": (int, 30),
    "base.lr": (float, 1e-3),
    "base.batch_size": (int, 32),
    "attention.cache": (_opt_str, None),
    "eval.k": (int, 10),
    "eval.q": (float, 50.0),
    "eval.qs": (_floats, (10.0, 30.0, 50.0, 70.0, 90.0)),
    "eval.ks": (_ints, (1, 3, 5, 10)),
    "eval.subsets": (int, 0),
    "explain.n_images": (int, 4),
    "explain.image_ids": (lambda s: tuple(v.strip() for v in s.split(",") if v.strip()), ()),
    "explain.parts": (_ints, (1, 3)),
    "explain.image": (_opt_str, None),
    "checkpoint": (_opt_str, None),
    "output.dir": (_opt_str, None),
}
_TRAIN_TYPES = {"epochs": int, "project_every": int, "lr_backbone": float, "lr_other": float,
                "batch_size": int, "k": int, "seed": int, "words_per_class": int, "stage3_epochs": int,
                "warmup_epochs": int, "align_resolution": str, "uses_sigmoid": _bool,
                "reset_head_each_cycle": _bool, "init_from_base": _bool, "word_init": str,
                "channels": _ints}
_defaults = TrainingConfig()
for _name, _parse in _TRAIN_TYPES.items():
    SCHEMA[f"train.{_name}"] = (_parse, getattr(_defaults, _name))
for _f in dataclasses.fields(LossWeights):
    SCHEMA[f"train.loss.{_f.name}"] = (float, getattr(_defaults.loss_weights, _f.name))


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later lines win."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Typed config from defaults, then file values, then overrides."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                cfg[key] = SCHEMA[key][0](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    if cfg["dataset.source"] not in ("synthetic", "folder"):
        raise ConfigError("dataset.source must be 'synthetic' or 'folder'")
    if cfg["dataset.resolution"] < 32:
        raise ConfigError("dataset.resolution must be at least 32")
    if cfg["dataset.source"] == "folder" and not cfg["dataset.path"]:
        raise ConfigError("dataset.path is required for a folder dataset")
    for key in ("dataset.path", "base.checkpoint", "checkpoint", "explain.image"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} does not exist: {cfg[key]}")
    if not 0 <= cfg["eval.q"] < 100 or any(not 0 <= q < 100 for q in cfg["eval.qs"]):
        raise ConfigError("quantiles must lie in [0, 100)")
    try:
        training_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def training_config(cfg: dict) -> TrainingConfig:
    kw = {name: cfg[f"train.{name}"] for name in _TRAIN_TYPES}
    kw["loss_weights"] = LossWeights(**{f.name: cfg[f"train.loss.{f.name}"]
                                        for f in dataclasses.fields(LossWeights)})
    if kw["align_resolution"] not in ("grid", "image"):
        raise ValueError("train.align_resolution must be 'grid' or 'image'")
    if kw["word_init"] not in ("patches", "uniform"):
        raise ValueError("train.word_init must be 'patches' or 'uniform'")
    return TrainingConfig(**kw)


def config_text(cfg: dict) -> str:
    """Canonical flat text form; feeding it back with ``--config`` reproduces ``cfg``."""
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


# --------------------------------------------------------------------------
# run directory bookkeeping

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunDir:
    """Output directory guarded by a lock file for the lifetime of a command."""

    LOCK = ".lvw.lock"

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / self.LOCK

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.path} is in use by another run "
                              f"(remove {self.lock} if that run is dead)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False

    def write_manifest(self, command: str, argv: list[str], cfg: dict, inputs: dict):
        text = config_text(cfg)
        (self.path / "config.txt").write_text(text, encoding="utf-8")
        outputs = {}
        for f in sorted(p for p in self.path.rglob("*") if p.is_file()):
            rel = f.relative_to(self.path).as_posix()
            if rel in (self.LOCK, "run.json") or rel.startswith("attention_cache/"):
                continue
            outputs[rel] = git_blob_hash(f.read_bytes())
        manifest = {"command": command, "argv": argv, "version": __version__,
                    "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())},
                    "config_hash": hashlib.sha256(text.encode()).hexdigest(),
                    "seeds": {"dataset": cfg["dataset.seed"], "train": cfg["train.seed"]},
                    "inputs": inputs, "outputs": outputs,
                    "rerun": f"lvw {command} --config config.txt --out <dir>"}
        (self.path / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest


# --------------------------------------------------------------------------
# inputs

def load_dataset(cfg: dict) -> tuple[ImageSet, ImageSet, str]:
    """(train, test, content hash)."""
    res = cfg["dataset.resolution"]
    if cfg["dataset.source"] == "synthetic":
        try:
            train, test = make_synthetic_splits(cfg["dataset.n_classes"], cfg["dataset.n_train"],
                                                cfg["dataset.n_test"], res, cfg["dataset.seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        digest = hashlib.sha256()
        for t in (train.images, train.labels, test.images, test.labels):
            digest.update(t.contiguous().numpy().tobytes())
        return train, test, digest.hexdigest()
    root = Path(cfg["dataset.path"])
    manifest = ingest(root)
    if len(manifest.class_names) != cfg["dataset.n_classes"]:
        log.info("dataset has %d classes (config said %d)", len(manifest.class_names), cfg["dataset.n_classes"])
    train, test = load_split(manifest, root, "train", res), load_split(manifest, root, "test", res)
    digest = hashlib.sha256(manifest.to_csv().encode())
    for t in (train.images, test.images):
        digest.update(t.numpy().tobytes())
    return train, test, digest.hexdigest()


def _load_checkpoint(path, what: str):
    if not path:
        raise ConfigError(f"{what} checkpoint path is required")
    try:
        return ckpt_io.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read {what} checkpoint {path}: {e}") from None


def _load_base(cfg):
    c = _load_checkpoint(cfg["base.checkpoint"], "base")
    return ckpt_io.to_base(c), ckpt_io.checksum(cfg["base.checkpoint"])


def _load_lvw(cfg):
    c = _load_checkpoint(cfg["checkpoint"], "model")
    return ckpt_io.to_lvw(c), ckpt_io.checksum(cfg["checkpoint"])


def _check_compatible(model, data: ImageSet):
    if model.input_size != data.resolution:
        raise ConfigError(f"checkpoint expects {model.input_size}px images, dataset is {data.resolution}px")
    if model.n_classes != data.n_classes:
        raise DataError(f"checkpoint has {model.n_classes} classes, dataset has {data.n_classes}")


def _check_k(cfg, model):
    ks = (cfg["eval.k"],) + tuple(cfg["eval.ks"])
    if max(ks) > model.n_words or min(ks) < 1:
        raise ConfigError(f"top-k values {ks} must lie in [1, {model.n_words}]")


def _test_attention(cfg, test: ImageSet):
    base, base_sum = _load_base(cfg)
    cache = Path(cfg["attention.cache"]) / "test" if cfg["attention.cache"] else None
    return attention_batch(base, test, "predicted", cache_dir=cache), base_sum


# --------------------------------------------------------------------------
# commands

def cmd_finetune_base(cfg, run: RunDir):
    train, test, data_hash = load_dataset(cfg)
    base = finetune_base(train, cfg["base.epochs"], cfg["base.lr"], cfg["base.batch_size"],
                         cfg["train.seed"], cfg["train.channels"])
    with torch.no_grad():
        acc = float((base(test.images).argmax(1) == test.labels).float().mean())
    path = run.path / "base"
    ckpt_io.save(ckpt_io.from_base(base, {"epochs": cfg["base.epochs"], "lr": cfg["base.lr"]}), path)
    (run.path / "base_report.json").write_text(json.dumps({"test_accuracy": acc}, indent=1) + "\n")
    print(f"base model: test accuracy {acc:.4f}, saved to {path}")
    return {"dataset": data_hash}


def cmd_train(cfg, run: RunDir):
    train, _, data_hash = load_dataset(cfg)
    base, base_sum = _load_base(cfg)
    if base.backbone.input_size != train.resolution:
        raise ConfigError("base checkpoint resolution does not match the dataset")
    config = training_config(cfg)
    n_words = config.words_per_class * train.n_classes
    if config.k > n_words:
        raise ConfigError(f"train.k = {config.k} exceeds the {n_words} visual words")
    if config.loss_weights.beta > 0:
        cache = Path(cfg["attention.cache"]) / "train" if cfg["attention.cache"] else None
        attn = attention_batch(base, train, "ground_truth", cache_dir=cache).maps
    else:
        attn = None
    state = full_protocol(train, attn, config, base=base, out_dir=run.path)
    print(f"trained {state.epoch} epochs; final checkpoint {run.path / 'final'}")
    return {"dataset": data_hash, "base_checkpoint": base_sum}


def cmd_project(cfg, run: RunDir):
    train, _, data_hash = load_dataset(cfg)
    model, model_sum = _load_lvw(cfg)
    _check_compatible(model, train)
    src = ckpt_io.load(cfg["checkpoint"])
    project_model(model, train)
    if not verify_provenance(model, train):
        raise NumericError("projected words do not match their recorded patches")
    ckpt_io.save(ckpt_io.from_lvw(model, src.config, src.epoch, "projection"), run.path / "projected")
    print(f"projected {model.n_words} words, saved to {run.path / 'projected'}")
    return {"dataset": data_hash, "checkpoint": model_sum}


def cmd_evaluate(cfg, run: RunDir):
    _, test, data_hash = load_dataset(cfg)
    model, model_sum = _load_lvw(cfg)
    _check_compatible(model, test)
    _check_k(cfg, model)
    attn, base_sum = _test_attention(cfg, test)
    report, acc = evaluate(model, test, attn.as_dict(), cfg["eval.k"], cfg["eval.q"],
                           dataset=cfg["dataset.source"], model_id=model_sum[:12])
    summary = write_report(run.path, report, acc, model_sum)
    print(f"mean IoU {summary['mean_iou']:.4f}  accuracy {acc:.4f}")
    return {"dataset": data_hash, "checkpoint": model_sum, "base_checkpoint": base_sum}


def cmd_sweep(cfg, run: RunDir):
    _, test, data_hash = load_dataset(cfg)
    model, model_sum = _load_lvw(cfg)
    _check_compatible(model, test)
    _check_k(cfg, model)
    attn, base_sum = _test_attention(cfg, test)
    amap = attn.as_dict()
    qrows = quantile_sweep(model, test, amap, cfg["eval.k"], cfg["eval.qs"])
    krows = topk_sweep(model, test, amap, cfg["eval.ks"], cfg["eval.q"], n_subsets=cfg["eval.subsets"],
                       seed=cfg["train.seed"])
    write_table(run.path / "quantile_sweep.csv", ["q", "mean_iou"], qrows)
    write_table(run.path / "topk_sweep.csv", ["k", "mean_iou", "accuracy", "iou_std"], krows)
    summary = {"checkpoint_checksum": model_sum, "k": cfg["eval.k"], "q": cfg["eval.q"],
               "quantile_sweep": [{"q": q, "mean_iou": v} for q, v in qrows],
               "topk_sweep": [{"k": k, "mean_iou": m, "accuracy": a, "iou_std": s} for k, m, a, s in krows]}
    (run.path / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for q, v in qrows:
        print(f"q={q:g}: mean IoU {v:.4f}")
    return {"dataset": data_hash, "checkpoint": model_sum, "base_checkpoint": base_sum}


def _pick_images(cfg, data: ImageSet) -> list[int]:
    if cfg["explain.image_ids"]:
        try:
            return [data.index_of(i) for i in cfg["explain.image_ids"]]
        except KeyError as e:
            raise DataError(f"unknown image id {e}") from None
    return list(range(min(cfg["explain.n_images"], len(data))))


def cmd_explain(cfg, run: RunDir):
    train, test, data_hash = load_dataset(cfg)
    model, model_sum = _load_lvw(cfg)
    _check_compatible(model, train)
    _check_k(cfg, model)
    scores = similarity_matrix(model, train)
    visuals = global_visualizations(train, model)
    words = write_word_gallery(run.path, train, model, visuals)
    images = {}
    for i in _pick_images(cfg, test):
        local = local_explanation(test.images[i], model, cfg["eval.k"], train, visuals)
        images[test.ids[i]] = write_local(run.path, test.ids[i], test.images[i], local)
    cat = category_similarity_matrix(train, model, scores)
    index = {"checkpoint_checksum": model_sum, "k": cfg["eval.k"], "words": words, "images": images,
             "class_names": train.class_names,
             "category_similarity": [[None if v != v else float(v) for v in row] for row in cat.matrix],
             "class_mean_activation": cat.class_vectors.tolist(), "undefined_classes": cat.undefined}
    write_index(run.path, index)
    print(f"wrote {len(words)} word visualizations and {len(images)} local explanations")
    return {"dataset": data_hash, "checkpoint": model_sum}


def cmd_explain_unseen(cfg, run: RunDir):
    train, _, data_hash = load_dataset(cfg)
    model, model_sum = _load_lvw(cfg)
    _check_compatible(model, train)
    _check_k(cfg, model)
    if cfg["explain.image"]:
        image = load_image(cfg["explain.image"], train.resolution)
        image_id, source = Path(cfg["explain.image"]).stem, {"image": cfg["explain.image"]}
    else:
        image = make_composite(cfg["explain.parts"], train.resolution, cfg["dataset.seed"], train.n_classes)
        image_id = "composite_" + "_".join(map(str, cfg["explain.parts"]))
        source = {"parts": list(cfg["explain.parts"])}
    result = explain_unseen(image, model, cfg["eval.k"], train)
    records = write_local(run.path, image_id, image, result.words)
    index = {"checkpoint_checksum": model_sum, "image_id": image_id, "source": source,
             "predicted_class": result.predicted_class,
             "predicted_class_name": train.class_names[result.predicted_class],
             "note": result.note, "words": records, "provenance": result.provenance,
             "provenance_classes": sorted(result.provenance_classes)}
    write_index(run.path, index)
    print(f"closest known class: {index['predicted_class_name']}; "
          f"words drawn from classes {index['provenance_classes']}")
    return {"dataset": data_hash, "checkpoint": model_sum}


COMMANDS = {
    "finetune-base": (cmd_finetune_base, "train and freeze the base classifier"),
    "train": (cmd_train, "run the full training protocol"),
    "project": (cmd_project, "project words of a checkpoint onto training patches"),
    "evaluate": (cmd_evaluate, "IoU coverage and accuracy on the test split"),
    "sweep": (cmd_sweep, "quantile and top-k sweeps"),
    "explain": (cmd_explain, "word gallery, local explanations, category similarity"),
    "explain-unseen": (cmd_explain_unseen, "explain an image of an unseen category"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvw", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        s.add_argument("--out", help="output directory (output.dir)")
        s.add_argument("--checkpoint", help="model checkpoint directory")
        s.add_argument("--base", help="base-model checkpoint directory (base.checkpoint)")
        s.add_argument("--seed", help="training seed (train.seed)")
        s.add_argument("--epochs", help="epoch budget (train.epochs)")
        s.add_argument("--k", help="top-k words (eval.k)")
        s.add_argument("--qs", help="comma-separated quantiles (eval.qs)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    flags = {"out": "output.dir", "checkpoint": "checkpoint", "base": "base.checkpoint",
             "seed": "train.seed", "epochs": "train.epochs", "k": "eval.k", "qs": "eval.qs"}
    for attr, key in flags.items():
        v = getattr(args, attr)
        if v is not None:
            out[key] = v
    return out


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
    cfg = resolve_config(file_values, _overrides(args))
    if not cfg["output.dir"]:
        raise ConfigError("an output directory is required (--out or output.dir)")
    fn = COMMANDS[args.command][0]
    with RunDir(cfg["output.dir"]) as rd:
        inputs = fn(cfg, rd)
        rd.write_manifest(args.command, list(argv), cfg, inputs)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except LVWError as e:
        code = next((c for t, c in EXIT_CODES.items() if isinstance(e, t)), 2)
        print(f"lvw: error: {e}", file=sys.stderr)
        if isinstance(e, NumericError) and getattr(e, "snapshot", None):
            print(f"lvw: state snapshot written to {e.snapshot}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
