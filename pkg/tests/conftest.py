import numpy as np
import pytest

from dpit.data.skeleton import load_skeleton
from dpit.data.synth import SceneSpec, generate_dataset


@pytest.fixture(scope="session")
def coco_skel():
    return load_skeleton("coco17")


@pytest.fixture(scope="session")
def mpii_skel():
    return load_skeleton("mpii16")


@pytest.fixture(scope="session")
def small_set(coco_skel):
    """Four 128x128 scenes; (images, CocoDataset)."""
    return generate_dataset(SceneSpec(image_hw=(128, 128), persons=(1, 2), seed=3), coco_skel, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
