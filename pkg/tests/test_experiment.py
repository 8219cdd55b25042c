import numpy as np
import pytest

from conftest import TINY_CONFIG
from smrf import experiment
from smrf.config import RunConfig
from smrf.experiment import ExperimentError, Item, LoocvResult, fold_seed, loocv, makespan
from smrf.io import read_dataset


@pytest.fixture(scope="module")
def items(small_dataset):
    return [Item(*t) for t in read_dataset(small_dataset)[1]]


@pytest.fixture
def config():
    return RunConfig.from_dict(TINY_CONFIG)


def test_no_leakage_two_items(items, config, monkeypatch):
    seen = []
    real = experiment._fold_model

    def spy(shapes, target):
        shapes = [np.asarray(s) for s in shapes]
        seen.append(shapes)
        return real(shapes, target)

    monkeypatch.setattr(experiment, "_fold_model", spy)
    two = items[:2]
    result = loocv(two, config)
    assert len(seen) == 2
    for fold, shapes in enumerate(seen):
        assert len(shapes) == 1
        assert np.array_equal(shapes[0], two[1 - fold].landmarks)
    assert [r.model_items for r in result.folds] == [[1], [0]]
    assert len(result.rows) == 6 and all(np.isfinite(r[3]) for r in result.rows)


def test_model_uses_all_other_annotations(items, config):
    result = loocv(items, config)
    n = len(items)
    for rec in result.folds:
        assert len(rec.model_items) == n - 1 and rec.fold not in rec.model_items
    assert len(result.rows) == 3 * n
    assert result.methods() == ["classic", "position", "smrf"]


def test_loocv_is_deterministic(items, config):
    a = loocv(items, config, depths=(2, 4))
    b = loocv(items, config, depths=(2, 4))
    assert a.to_csv() == b.to_csv()
    assert a.depth_table() == b.depth_table()


def test_fold_failure_names_fold(items, config, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("disk full")
    monkeypatch.setattr(experiment, "train_forest", boom)
    with pytest.raises(ExperimentError, match="fold 0 failed: disk full"):
        loocv(items, config)
    with pytest.raises(ExperimentError):
        loocv(items[:1], config)


def test_result_formatting():
    res = LoocvResult(pixel_spacing_mm=0.5)
    res.rows = [("classic", 0, 0.9, 0.8, 0.8 / 1.2, 2.0, 6.0),
                ("classic", 1, 0.7, 0.6, 0.6 / 1.4, 4.0, float("nan"))]
    lines = res.to_csv().splitlines()
    assert lines[0] == "method,fold,accuracy,dice,jaccard,mad_px,hd_px,mad_mm,hd_mm"
    assert lines[1].startswith("classic,0,0.900000,0.800000,")
    assert lines[2].endswith(",nan,2.000000,nan")
    summary = lines[3].split(",")
    assert summary[:2] == ["classic", "mean±sd"]
    assert summary[3] == f"{0.7:.6f}±{np.std([0.8, 0.6], ddof=1):.6f}"
    # NaN boundary scores are left out of the mean
    assert summary[6].startswith("6.000000±")
    res.depth_rows = [(0, "smrf", 8, 0.5), (1, "smrf", 8, 0.7), (0, "classic", 8, 0.4)]
    res.rows.append(("smrf", 0, 1, 1, 1, 0, 0))
    assert res.depth_table().splitlines() == ["# depth method jaccard", "8 classic 0.400000",
                                              "8 smrf 0.600000"]


def test_fold_seeds_are_distinct():
    seeds = {fold_seed(0, f, s) for f in range(15) for s in range(6)}
    assert len(seeds) == 90
    assert fold_seed(1, 0, 0) != fold_seed(0, 0, 0)


def test_worker_processes_do_not_change_results(items, config):
    serial = loocv(items, config, depths=(2,))
    config.workers = 2
    parallel = loocv(items, config, depths=(2,))
    assert parallel.to_csv() == serial.to_csv()
    assert parallel.depth_table() == serial.depth_table()
    assert all(r.seconds > 0 for r in parallel.folds)


def test_makespan():
    assert makespan([5, 1, 1, 1], 2) == 5
    assert makespan([2, 2, 2, 2, 2], 4) == 4
    assert makespan([3, 4], 1) == 7
