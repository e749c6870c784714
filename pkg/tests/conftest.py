import pytest
import torch

from bradcn.core import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture
def small_cfg():
    # narrow model for tests that only need structure, not capacity
    return ModelConfig(embed_dim=32, num_transformer_blocks=1, num_heads=2, fusion_channels=16,
                       adcn_base_channels=8, backbone_channels=(8, 8, 16, 16), depth_base_channels=8)


ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("acceptance")
    if m is None or call.when != "call":
        return
    ok = call.excinfo is None
    n = m.args[0]
    ACCEPTANCE[n] = ACCEPTANCE.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=str):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ACCEPTANCE[n] else 'FAIL'}")
