import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_SPEC = dict(width=64, height=64, inner_radius=[10.0, 12.0], thickness=[4.0, 5.0],
                  center_jitter=2.0, distractor_radius=[2.0, 3.0], seed=21)
TINY_CONFIG = {
    "forest": {"n_trees": 2, "max_depth": 6, "candidates": 10, "sample_fraction": 0.2},
    "features": {"appearance_radius": 6, "box_max": 5, "sm_pool_size": 10},
    "fitting": {"max_evals": 300},
    "eval": {"depths": [2, 4, 6]},
}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Path of a 4-item 64x64 synthetic dataset written through the CLI."""
    import json
    from smrf.cli import main
    root = tmp_path_factory.mktemp("small")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    assert main(["synth", "--count", "4", "--spec", str(spec), "--out", str(root / "ds")]) == 0
    return root / "ds"


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    import json
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` stores one acceptance verdict for the summary."""
    def _record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
