import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fmrnet.config import NetworkConfig, TrainingSchedule, tiny_preset  # noqa: E402
from fmrnet.networks import FMRNet  # noqa: E402
from fmrnet.smoke import striped_corpus  # noqa: E402


def small_config(**net):
    """A very small network on 32x32 patches; fast enough for unit tests."""
    cfg = tiny_preset()
    kw = dict(patch=32, blocks=3, base_channels=4, max_channels=16, memory_size=8,
              classifier_widths=(8, 1), addressing_hidden=8, perceptual_layers=(2, 3))
    kw.update(net)
    cfg.network = NetworkConfig(**kw)
    cfg.train = TrainingSchedule(t1=30, t2=20, batch_size=4, memory_stride=16, kmeans_iters=20)
    return cfg


@pytest.fixture(scope="session")
def trained():
    """(model, cfg, images): a small model taken through both phases once per session."""
    import torch
    from fmrnet.training import train

    cfg = small_config()
    images = striped_corpus(8, 64, seed=0)
    torch.manual_seed(0)
    model = train(FMRNet(cfg.network), images, cfg, phase="all")
    return model, cfg, images


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Full desk-scale run (200 striped 64x64 images, tiny preset, 2000 + 1000 iterations)."""
    from fmrnet.smoke import run_smoke, smoke_config

    out = tmp_path_factory.mktemp("smoke")
    model, report = run_smoke(smoke_config(), out_dir=out)
    return model, report, smoke_config(), out


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} ({detail})")
