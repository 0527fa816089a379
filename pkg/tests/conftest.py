import numpy as np
import pytest

from spreg.config import toy_config

_ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    _ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def acceptance():
    return report_criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def tiny_config(**overrides):
    """Very small model for fast unit tests."""
    base = dict(
        voxel_size=0.5, num_levels=4, level_widths=(4, 8, 8, 8), tau_a=0.6, d_t=8, d_dense=4, n_skeleton=4,
        n_interleave=1, n_coarse=12, n_replace=4, n_topk_skeletal=2, sinkhorn_iters=10, n_patch=8, pm_num_pairs=4, backbone_k=6,
    )
    base.update(overrides)
    return toy_config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
