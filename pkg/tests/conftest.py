import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


def finite_difference(loss_fn, tensors, h=1e-4):
    """Central differences of ``loss_fn()`` w.r.t. every element of ``tensors``."""
    grads = []
    with torch.no_grad():
        for p in tensors:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / max(float(n.norm()), 1e-12))


@pytest.fixture
def synth_dir(tmp_path_factory):
    from spikevpr.events import SynthConfig, synth_dataset

    out = tmp_path_factory.mktemp("synth")
    synth_dataset(SynthConfig(n_places=8, seed=3), out)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        terminalreporter.write_line(results[name])
