import csv
import json

import numpy as np
import pytest

from funcdiff.pipeline import bench_config, run_bench, validate_bench_override

TINY = {
    "n_train": 32, "n_test": 2, "n_samples": 4, "sample_schedule": {"n_steps": 10},
    "uncond": {"arch": {"width": 4, "layers": 1, "modes": 4}, "train": {"steps": 3, "batch": 4}},
    "conditional": {"arch": {"width": 4, "layers": 1, "modes": 4}, "train": {"steps": 3, "batch": 4}},
    "sgt": {"arch": {"width": 4, "layers": 1, "modes": 4}, "train": {"steps": 3, "batch": 4}, "k": [0, 1]},
    # the huge scale diverges and must be disqualified rather than abort the search
    "fundps": {"gamma": "search", "grid": [0.1, 1e300], "search_signals": 1, "search_samples": 4},
}


def test_bench_override_validation():
    validate_bench_override("heat", TINY)
    with pytest.raises(ValueError):
        validate_bench_override("heat", {"n_trian": 3})
    with pytest.raises(ValueError):
        bench_config("mnist")


def test_tiny_bench_and_reuse(tmp_path):
    cfg = bench_config("heat", TINY)
    res = run_bench(cfg, tmp_path, progress=lambda msg: None)
    labels = [r["method"] for r in res.rows]
    assert labels == ["fundps", "conditional", "sgt_k0", "sgt_k1"]
    assert res.meta["gamma"] == 0.1 and res.meta["gamma_search"]["1e+300"] == float("inf")
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == labels
    assert all(np.isfinite(float(r["rmse_mean"])) for r in rows)
    first = json.loads((tmp_path / "bench_meta.json").read_text())["timings"]

    again = run_bench(bench_config("heat", {**TINY, "reuse": True}), tmp_path, progress=lambda msg: None)
    # reused checkpoints give identical samples and keep the original training times
    for a, b in zip(res.rows, again.rows):
        assert a["rmse_mean"] == b["rmse_mean"]
    for name in ("train unconditional", "train conditional", "train sgt k=0"):
        assert again.meta["timings"][name] == first[name]
