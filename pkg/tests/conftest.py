import numpy as np
import pytest

from polypssl.config import from_dict
from polypssl.datasets import SyntheticSpec, generate_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticSpec(count=12, image_size=32, radius_range=(3, 8), seed=5))


def tiny_settings(**sections):
    """A fast configuration: 32 px inputs, depth-2 U-Net, short schedules."""
    raw = {
        "augment": {"scales": [32], "max_patch_side": 12},
        "network": {"depth": 2, "base_channels": 4},
        "schedule_pretrain": {"total_epochs": 2, "switch_epoch": 1, "high_lr": 1e-3, "low_lr": 1e-4},
        "schedule_finetune": {"total_epochs": 2, "switch_epoch": 1, "high_lr": 1e-3, "low_lr": 1e-4},
        "evaluation": {"eval_scale": 32, "output_dir": None},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(name, {}).update(values)
        else:
            raw[name] = values
    return from_dict(raw)


@pytest.fixture
def settings():
    return tiny_settings()


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# --------------------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, [title, "PASS", 0.0])
    if report.failed:
        entry[1] = "FAIL"
    if report.when == "call":
        entry[2] = report.duration


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} ({seconds:.1f} s)")
