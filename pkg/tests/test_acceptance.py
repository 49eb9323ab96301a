"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The planted-parts fixture (criteria 7, 8, 9, 10) trains a base model and two
60-epoch variants on CPU, about five minutes in total. The checkpoints are
cached in the pytest cache directory under a key derived from the package
source, so later runs only re-evaluate.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import lvw
from conftest import directional_fd_check, tiny_model
from lvw.ablation import FixtureConfig, run_ablation
from lvw.core import init_head
from lvw.data import class_recipes, make_composite, make_synthetic
from lvw.evaluation import iou_coverage, topk_sweep
from lvw.explain import category_similarity_matrix, explain_unseen
from lvw.objectives import (
    LossWeights,
    alignment_loss,
    classification_loss,
    cluster_loss,
    l1_penalty,
    stage1_objective,
    stage3_objective,
)
from lvw.train import TrainingConfig, full_protocol, project_words
from test_evaluation import brute_iou
from test_objectives import brute_alignment, brute_ce, brute_cluster

RESULTS: list[str] = []


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def source_key() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(lvw.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def fixture_result(request):
    cache = request.config.cache.mkdir("lvw-fixture") / source_key()
    return run_ablation(FixtureConfig(), cache_dir=cache)


def test_criterion_01_iou_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        h, w = rng.integers(1, 9, size=2)
        a, b = rng.random((h, w)), rng.random((h, w))
        # coarse values create ties at the thresholds
        if rng.random() < 0.3:
            a, b = np.round(a * 3) / 3, np.round(b * 3) / 3
        for q in (0, 25, 50, 75, 90):
            mismatches += iou_coverage(a, b, q) != brute_iou(a, b, q)
    elapsed = time.perf_counter() - start
    ok = record(1, mismatches == 0 and elapsed < 10, f"{mismatches} mismatches over 5000 evaluations in {elapsed:.2f} s")
    assert ok


def test_criterion_02_identity():
    rng = np.random.default_rng(102)
    values = [iou_coverage(a, a.copy(), 50) for a in (rng.random(tuple(rng.integers(1, 65, size=2))) for _ in range(100))]
    ok = record(2, all(v == 1.0 for v in values), f"min IoU(A, A, 50) over 100 maps = {min(values)}")
    assert ok


def test_criterion_03_projection():
    g = torch.Generator().manual_seed(103)
    # 20 images of 5x5 patches = 500 patches
    z = torch.randn(20, 8, 5, 5, generator=g, dtype=torch.float64)
    ids = [f"img{i}" for i in range(20)]
    words = torch.randn(20, 8, generator=g, dtype=torch.float64)
    start = time.perf_counter()
    new, prov, _ = project_words(words, [(ids[:10], z[:10]), (ids[10:], z[10:])])
    elapsed = time.perf_counter() - start
    patches = z.permute(0, 2, 3, 1).reshape(-1, 8)
    nearest = torch.cdist(new, patches).pow(2).min(dim=1).values
    reverified = all(torch.allclose(new[j], z[ids.index(i), :, r, c], atol=1e-5) for j, (i, r, c) in enumerate(prov))
    # every chosen patch is the one nearest to the word before projection
    chosen = torch.stack([torch.cdist(words[j:j + 1], patches).pow(2)[0, ids.index(i) * 25 + r * 5 + c]
                          for j, (i, r, c) in enumerate(prov)])
    optimal = torch.allclose(chosen, torch.cdist(words, patches).pow(2).min(dim=1).values)
    ok = record(3, float(nearest.max()) <= 1e-5 and reverified and optimal and elapsed < 5,
                f"max nearest-patch distance {float(nearest.max()):.2e}, provenance verified {reverified}, "
                f"{elapsed:.3f} s")
    assert ok


def test_criterion_04_loss_oracles():
    g = torch.Generator().manual_seed(104)
    worst = {"cluster": 0.0, "alignment": 0.0, "classification": 0.0, "l1": 0.0}
    start = time.perf_counter()
    for _ in range(100):
        n, d, h, w, m, c = (int(torch.randint(1, 6, (), generator=g)) for _ in range(6))
        c += 1
        z = torch.randn(n, d, h, w, generator=g, dtype=torch.float64)
        words = torch.randn(m, d, generator=g, dtype=torch.float64)
        a = torch.rand(n, h, w, generator=g, dtype=torch.float64)
        b = torch.rand(n, h, w, generator=g, dtype=torch.float64)
        s = torch.randn(n, c, generator=g, dtype=torch.float64) * 5
        y = torch.randint(0, c, (n,), generator=g)
        wt = torch.randn(m, c, generator=g, dtype=torch.float64)
        worst["cluster"] = max(worst["cluster"], abs(cluster_loss(z, words).item() - brute_cluster(z, words)))
        worst["alignment"] = max(worst["alignment"], abs(alignment_loss(a, b).item() - brute_alignment(a, b)))
        worst["classification"] = max(worst["classification"], abs(classification_loss(s, y).item() - brute_ce(s, y)))
        l1 = sum(abs(float(v)) for v in wt.flatten())
        worst["l1"] = max(worst["l1"], abs(l1_penalty(wt).item() - l1))
    elapsed = time.perf_counter() - start
    ok = record(4, max(worst.values()) <= 1e-6 and elapsed < 30,
                "max abs error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" in {elapsed:.1f} s")
    assert ok


def test_criterion_05_gradients():
    start = time.perf_counter()
    model = tiny_model(seed=105, words_per_class=3)
    g = torch.Generator().manual_seed(105)
    x = torch.rand(3, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    attn = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
    trainable = [p for name, p in model.named_parameters() if not name.startswith("head")]
    rng = np.random.default_rng(105)
    stage1_errors = []
    for i in range(10):
        param = trainable[int(rng.integers(len(trainable)))]
        stage1_errors += directional_fd_check(lambda: stage1_objective(model, x, y, attn, LossWeights(), k=3)[0],
                                              param, n_slices=1, slice_size=8, seed=i)
    head = model.head.weight
    stage3_errors = directional_fd_check(lambda: stage3_objective(model, x, y, 1e-2)[0], head, n_slices=10,
                                         slice_size=4, seed=205)
    elapsed = time.perf_counter() - start
    worst = max(stage1_errors + stage3_errors)
    ok = record(5, worst <= 1e-3 and elapsed < 120,
                f"max relative error stage 1 {max(stage1_errors):.1e}, stage 3 {max(stage3_errors):.1e}, "
                f"{elapsed:.1f} s")
    assert ok


def test_criterion_06_head_init():
    w = init_head(50, 10)
    ok = w.shape == (50, 10)
    for col in range(10):
        for row in range(50):
            ok &= float(w[row, col]) == (1.0 if row // 5 == col else -0.5)
        ok &= int((w[:, col] == 1).sum()) == 5
    record(6, ok, "exhaustive check of all 500 entries: 5 ones per column, -0.5 elsewhere")
    assert ok


@pytest.mark.slow
def test_criterion_07_ablation_direction(fixture_result):
    full, ablation = fixture_result.full, fixture_result.ablation
    gap = full.mean_iou - ablation.mean_iou
    acc_gap = abs(full.accuracy - ablation.accuracy)
    ok = record(7, gap >= 0.10 and acc_gap <= 0.03,
                f"IoU full {full.mean_iou:.4f} vs ablation {ablation.mean_iou:.4f} (gap {gap:+.4f}); "
                f"accuracy {full.accuracy:.3f} vs {ablation.accuracy:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_quantile_sweep(fixture_result):
    full, ablation = fixture_result.full.sweep, fixture_result.ablation.sweep
    assert [q for q, _ in full] == [10, 30, 50, 70, 90]
    ok = all(f >= a for (_, f), (_, a) in zip(full, ablation))
    record(8, ok, "per-q IoU full/ablation " + ", ".join(f"q{q:g} {f:.3f}/{a:.3f}"
                                                          for (q, f), (_, a) in zip(full, ablation)))
    assert ok


@pytest.mark.slow
def test_criterion_09_topk_accuracy(fixture_result):
    res = fixture_result
    rows = topk_sweep(res.full.model, res.test, res.test_attention.as_dict(), ks=(1, 3, 5, 10))
    accs = [acc for _, _, acc, _ in rows]
    ok = len(set(accs)) == 1
    record(9, ok, "accuracy per k " + ", ".join(f"k{k} {acc!r}" for k, _, acc, _ in rows))
    assert ok


@pytest.mark.slow
def test_criterion_10_category_similarity(fixture_result):
    res = fixture_result
    cat = category_similarity_matrix(res.train, res.full.model)
    recipes = class_recipes(res.train.n_classes)
    pairs = [(a, b) for a in range(len(recipes)) for b in range(a + 1, len(recipes))]
    sharing = [p for p in pairs if set(recipes[p[0]]) & set(recipes[p[1]])]
    assert sharing == [(0, 1)]
    others = {p: cat.matrix[p] for p in pairs if p not in sharing}
    ok = all(cat.matrix[0, 1] > v for v in others.values())
    record(10, ok, f"r(0,1) = {cat.matrix[0, 1]:.3f}; other pairs "
                   + ", ".join(f"r{p} = {v:.3f}" for p, v in others.items()))
    assert ok


def test_criterion_11_determinism(tmp_path):
    data = make_synthetic(4, 6, 32, seed=111)
    attn = torch.rand(len(data), 32, 32, generator=torch.Generator().manual_seed(111))
    cfg = TrainingConfig(epochs=4, project_every=2, stage3_epochs=3, channels=(8, 16, 16), words_per_class=2,
                         k=3, batch_size=8, seed=7)
    for name in ("a", "b"):
        full_protocol(data, attn, cfg, out_dir=tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    others = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    identical = files == others and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                                        for f in files)
    record(11, identical, f"{len(files)} files compared byte for byte across two seeded runs")
    assert identical


# further checks on the fixture beyond the numbered criteria

@pytest.mark.slow
def test_fixture_base_is_accurate(fixture_result):
    assert fixture_result.base_accuracy >= 0.9


@pytest.mark.slow
def test_fixture_k1_not_better_than_k10(fixture_result):
    res = fixture_result
    (_, iou1, _, _), (_, iou10, _, _) = topk_sweep(res.full.model, res.test, res.test_attention.as_dict(), ks=(1, 10))
    assert iou1 <= iou10


@pytest.mark.slow
def test_fixture_unseen_composite_draws_on_both_classes(fixture_result):
    res = fixture_result
    recipes = class_recipes(res.train.n_classes)
    # part 1 appears only in class 0, part 3 only in class 2
    assert recipes[0][1] == 1 and recipes[2][0] == 3
    composite = make_composite([1, 3], size=res.config.size, seed=5)
    unseen = explain_unseen(composite, res.full.model, res.config.k, res.train)
    assert {0, 2} <= unseen.provenance_classes


def test_determinism_check_is_sensitive(tmp_path):
    """A different seed must change the checkpoint bytes, so identical bytes mean something."""
    data = make_synthetic(2, 4, 32, seed=112)
    attn = torch.rand(len(data), 32, 32, generator=torch.Generator().manual_seed(112))
    blobs = []
    for seed in (1, 2):
        cfg = TrainingConfig(epochs=1, stage3_epochs=1, channels=(4, 8, 8), words_per_class=2, k=2,
                             batch_size=8, seed=seed)
        full_protocol(data, attn, cfg, out_dir=tmp_path / str(seed))
        blobs.append(sorted(p.read_bytes() for p in (tmp_path / str(seed) / "final" / "tensors").iterdir()))
    assert blobs[0] != blobs[1]

