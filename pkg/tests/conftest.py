import sys

import numpy as np
import pytest
import torch

from lvw.core import Backbone, LVWModel

torch.set_num_threads(1)


def tiny_model(seed=0, n_classes=2, words_per_class=2, feature_dim=5, input_size=16,
               uses_sigmoid=True, dtype=torch.float64):
    torch.manual_seed(seed)
    model = LVWModel(Backbone((2, 3, 4), input_size=input_size), n_classes, words_per_class,
                     feature_dim=feature_dim, uses_sigmoid=uses_sigmoid)
    return model.to(dtype)


def directional_fd_check(loss_fn, param, n_slices=10, slice_size=10, h=1e-4, seed=0):
    """Compare autograd and central differences along random directions.

    Each slice perturbs ``slice_size`` random coordinates of ``param`` along a
    random unit vector. Returns the list of relative errors.
    """
    rng = np.random.default_rng(seed)
    param.grad = None
    loss = loss_fn()
    grad, = torch.autograd.grad(loss, param)
    errors = []
    flat = param.data.view(-1)
    for _ in range(n_slices):
        idx = torch.from_numpy(rng.choice(flat.numel(), min(slice_size, flat.numel()), replace=False))
        u = torch.from_numpy(rng.normal(size=len(idx))).to(flat.dtype)
        u /= u.norm()
        analytic = float((grad.view(-1)[idx] * u).sum())
        orig = flat[idx].clone()
        with torch.no_grad():
            flat[idx] = orig + h * u
            plus = float(loss_fn())
            flat[idx] = orig - h * u
            minus = float(loss_fn())
            flat[idx] = orig
        numeric = (plus - minus) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        errors.append(abs(analytic - numeric) / denom)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS):
            terminalreporter.write_line(line)
