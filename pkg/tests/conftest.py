import numpy as np
import pytest
import torch

from saggan.data import apply_manifest, generate_phantom, split_dataset
from saggan.training import TrainConfig


def central_difference(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f())
        flat[i] = old - eps
        lo = float(f())
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / max(float(a.abs().max()), float(b.abs().max()), 1e-12))


@pytest.fixture
def tiny_config():
    """A network small enough for sub-second training steps."""
    return TrainConfig(
        epochs=1, batch_size=2, image_size=32, ngf=4, ndf=4, n_blocks=1, reduction=2,
        attention_widths=(4, 4, 4), sn_power_iterations=5, verbose=False, checkpoint_every=1,
    )


@pytest.fixture(scope="session")
def small_phantoms():
    recs = generate_phantom(3, 40, image_size=32)
    return apply_manifest(recs, split_dataset(recs, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
