import numpy as np
import pytest
import torch

from apl_seg.data import SplitConfig, SyntheticConfig, generate_synthetic, make_split


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture(scope="session")
def tiny_synthetic():
    return generate_synthetic(SyntheticConfig(image_size=32, num_images=24, seed=3))


@pytest.fixture(scope="session")
def tiny_split(tiny_synthetic):
    return make_split(tiny_synthetic, SplitConfig(labeled_count=8, seed=0))


def finite_difference_check(loss_fn, params, n_samples=200, eps=1e-5, seed=0, floor=1e-6):
    """Compare autograd against central differences on randomly sampled
    scalar parameter entries. Returns the array of relative errors."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs = []
    with torch.no_grad():
        for j in flat_idx:
            k = np.searchsorted(offsets, j, side="right") - 1
            p, g = params[k], grads[k]
            i = j - offsets[k]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = loss_fn().item()
            view[i] = orig - eps
            down = loss_fn().item()
            view[i] = orig
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[i].item()
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return np.asarray(errs)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(num: int, name: str, ok: bool, detail: str = "") -> bool:
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
