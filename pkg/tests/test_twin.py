"""Tests for the twin experiment harness and the command line."""

import csv
import json

import numpy as np
import pytest

import main
from core.constants import (CASE1_EXPLORATION_PAIR, CASE2_EXPLORATION_PAIR,
                            OUTPUT_FILES)
from core.exceptions import ConfigError, StageError
from experiments.twin import (build_model, load_config, run_forward,
                              run_mesh_dump, run_twin, sweep)

SMALL = {
    "mesh.h": 0.1,
    "time.T": 1.0,
    "filter.particles": 10,
    "filter.burn_in": 2,
}


def _small(tmp_path, preset="case1", **extra):
    overrides = dict(SMALL)
    overrides["run.out"] = str(tmp_path)
    overrides.update(extra)
    return load_config(preset=preset, overrides=overrides)


def _small_args(tmp_path):
    args = ["--preset", "case1", "--out", str(tmp_path)]
    for key, value in SMALL.items():
        args += ["--set", f"{key}={value}"]
    return args


def test_small_run_writes_outputs(tmp_path):
    report = run_twin(_small(tmp_path))
    for key in ("echo", "truth", "observations", "trace", "summary", "report"):
        assert (tmp_path / OUTPUT_FILES[key]).exists()

    summary = json.loads((tmp_path / OUTPUT_FILES["summary"]).read_text())
    for key in ("case", "seed", "true_widths", "width_average", "relative_error",
                "final_relative_error", "band_entry", "mass_balance_residual", "passed"):
        assert key in summary
    assert summary["acceptance_estimate"] == "width_average"
    assert summary["relative_error"] == pytest.approx(
        [abs(summary["width_average"][0] - 1e-3) / 1e-3])
    assert summary["final_relative_error"] == pytest.approx(
        [abs(summary["final_width"][0] - 1e-3) / 1e-3])
    assert summary["passed"] is None
    assert summary["mass_balance_residual"] <= 1e-10

    with open(tmp_path / OUTPUT_FILES["trace"]) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert rows[0]["theta_avg_0"] == "nan"
    assert float(rows[-1]["d_avg_0"]) == pytest.approx(report.width_average[0])
    assert "case1" in (tmp_path / OUTPUT_FILES["report"]).read_text()


def test_band_entry_marks_where_trace_stays_in_band(tmp_path):
    report = run_twin(_small(tmp_path, **{"acceptance.band": 0.5}), write_outputs=False)
    widths = report.trace.width_estimate[:, 0]
    steps = list(report.trace.steps)
    inside = np.abs(widths - 1e-3) <= 0.5 * 1e-3
    entry = report.band_entry[0]
    if entry is None:
        assert not inside[-1]
    else:
        k = steps.index(entry)
        assert inside[k:].all()
        assert k == 0 or not inside[k - 1]


def test_runs_are_reproducible(tmp_path):
    first = run_twin(_small(tmp_path / "a"))
    second = run_twin(_small(tmp_path / "b"))
    np.testing.assert_array_equal(first.trace.posterior_mean, second.trace.posterior_mean)
    for key in ("trace", "observations"):
        assert (tmp_path / "a" / OUTPUT_FILES[key]).read_bytes() == \
            (tmp_path / "b" / OUTPUT_FILES[key]).read_bytes()
    third = run_twin(_small(tmp_path / "c", **{"run.seed": 2}))
    assert not np.array_equal(first.trace.posterior_mean, third.trace.posterior_mean)


def test_refactor_mode_matches_low_rank(tmp_path):
    fast = run_twin(_small(tmp_path / "a"), write_outputs=False)
    slow = run_twin(_small(tmp_path / "b", **{"solver.particle_solve": "refactor"}), write_outputs=False)
    np.testing.assert_allclose(fast.trace.posterior_mean, slow.trace.posterior_mean, rtol=1e-6)


def test_crossing_case_runs(tmp_path):
    cfg = _small(tmp_path, preset="case3a", **{"filter.state_mode": "fracture_only"})
    _, mats = build_model(cfg)
    assert mats.layout.n_mult == 1
    report = run_twin(cfg, write_outputs=False)
    assert report.true_widths.size == 2
    assert report.crossing_residual <= 1e-10
    assert np.all(np.isfinite(report.width_average))


def test_acceptance_tolerance_sets_passed(tmp_path):
    loose = run_twin(_small(tmp_path / "a", **{"acceptance.tolerance": 10.0}), write_outputs=False)
    tight = run_twin(_small(tmp_path / "b", **{"acceptance.tolerance": 1e-12}), write_outputs=False)
    assert loose.passed is True
    assert tight.passed is False


def test_stage_errors_are_labelled(tmp_path):
    cfg = _small(tmp_path, **{"mesh.h": 0.3})
    with pytest.raises(StageError) as info:
        run_twin(cfg, write_outputs=False)
    assert info.value.stage == "mesh"
    assert str(info.value).startswith("[mesh] MeshError")


def test_seed_sweep(tmp_path):
    result = sweep(_small(tmp_path), "seed", [1, 2])
    assert [r["status"] for r in result.rows] == ["ok", "ok"]
    assert result.path.exists()
    assert (tmp_path / "seed_000" / OUTPUT_FILES["summary"]).exists()
    assert (tmp_path / "seed_001" / OUTPUT_FILES["summary"]).exists()


def test_sweep_continues_after_failed_run(tmp_path):
    result = sweep(_small(tmp_path), "particles", [1, 10], workers=2)
    assert result.failures == 1
    assert result.rows[0]["status"].startswith("failed")
    assert result.rows[1]["status"] == "ok"
    with open(result.path) as f:
        assert len(list(csv.DictReader(f))) == 2


def test_sweep_rejects_bad_axis(tmp_path):
    with pytest.raises(ConfigError):
        sweep(_small(tmp_path), "mesh", [0.1])
    with pytest.raises(ConfigError):
        sweep(_small(tmp_path), "seed", [])


def test_mesh_dump_and_forward_only(tmp_path):
    cfg = _small(tmp_path)
    assert run_mesh_dump(cfg).read_text().startswith("VERTICES")
    files = run_forward(cfg)
    assert files["truth"].exists()
    assert files["field"].read_text().startswith("# step 10")


# ========== Command line ==========

def test_main_exit_codes(tmp_path):
    base = _small_args(tmp_path / "ok")
    assert main.main(["run"] + base) == 0
    assert (tmp_path / "ok" / OUTPUT_FILES["log"]).exists()

    missed = _small_args(tmp_path / "missed") + ["--set", "acceptance.tolerance=1e-12"]
    assert main.main(["run"] + missed) == 1

    bad = _small_args(tmp_path / "bad") + ["--set", "filter.bogus=1"]
    assert main.main(["run"] + bad) == 2
    assert main.main(["mesh-dump"] + _small_args(tmp_path / "mesh")) == 0


def test_parse_values():
    assert main.parse_values("400,800") == [400, 800]
    assert main.parse_values("[[400], [800]]") == [[400], [800]]


# ========== Full-scale runs ==========

@pytest.mark.slow
def test_case1_recovers_width(tmp_path):
    cfg = load_config(preset="case1", overrides={"run.out": str(tmp_path), "acceptance.tolerance": 0.1})
    assert run_twin(cfg).passed


@pytest.mark.slow
def test_case1_larger_exploration_converges_sooner(tmp_path):
    earlier = 0
    seeds = range(1, 21)
    for seed in seeds:
        entries = []
        for eps in CASE1_EXPLORATION_PAIR:
            cfg = load_config(preset="case1", overrides={
                "run.out": str(tmp_path / f"{seed}_{eps[0]:g}"), "run.seed": seed, "filter.exploration": eps,
            })
            entry = run_twin(cfg, write_outputs=False).band_entry[0]
            entries.append(np.inf if entry is None else entry)
        earlier += entries[1] < entries[0]
    assert earlier >= 0.7 * len(seeds)


@pytest.mark.slow
@pytest.mark.parametrize("exploration", CASE2_EXPLORATION_PAIR)
def test_case2_recovers_both_widths(tmp_path, exploration):
    passed = 0
    for seed in range(1, 11):
        cfg = load_config(preset="case2", overrides={
            "run.out": str(tmp_path / str(seed)), "run.seed": seed,
            "filter.exploration": exploration, "acceptance.tolerance": 0.15,
        })
        passed += bool(run_twin(cfg, write_outputs=False).passed)
    assert passed > 5


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["case3a", "case3b"])
def test_case3_recovers_crossing_widths(tmp_path, preset):
    passed = 0
    entries = []
    for seed in range(1, 11):
        cfg = load_config(preset=preset, overrides={
            "run.out": str(tmp_path / str(seed)), "run.seed": seed, "acceptance.tolerance": 0.2,
        })
        report = run_twin(cfg, write_outputs=False)
        passed += bool(report.passed)
        entries.append([np.inf if e is None else e for e in report.band_entry])
    entries = np.array(entries, dtype=float)
    assert passed > 5
    assert np.median(entries[:, 1]) > np.median(entries[:, 0])
