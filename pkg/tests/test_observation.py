"""Tests for the observation operator, synthetic data and the companion model."""

import numpy as np
import pytest

from core.assembly import initial_state
from core.exceptions import ObservationError
from core.forward import (DiscreteState, SystemAssembler, build_system,
                          make_initial_state, simulate)
from core.geometry import DofLayout
from core.observation import (CompanionModel, effective_noise_variance, lift,
                              make_synthetic, observe, read_series,
                              write_series)

LAYOUT = DofLayout(n_edge=2, n_node=3, n_tri=2, n_fedge=2)


def _flat_trajectory(n_states, value=0.0):
    return [DiscreteState(np.full(LAYOUT.size, value), n, LAYOUT) for n in range(n_states)]


@pytest.fixture
def truth(single_system):
    X0 = make_initial_state(single_system, initial_state(single_system.mesh, 0.0))
    return simulate(build_system(single_system, 0.1, [1e-3]), X0, 4)


def test_observe_picks_fracture_unknowns():
    values = np.arange(LAYOUT.size, dtype=float)
    Y = observe(DiscreteState(values, 0, LAYOUT))
    np.testing.assert_array_equal(Y, [2, 3, 4, 7, 8])


def test_lift_replaces_observed_part_only():
    companion = DiscreteState(np.arange(LAYOUT.size, dtype=float), 3, LAYOUT)
    Y = np.full(5, -1.0)
    lifted = lift(Y, companion)
    np.testing.assert_array_equal(observe(lifted), Y)
    np.testing.assert_array_equal(lifted.values[[0, 1, 5, 6]], [0, 1, 5, 6])
    assert lifted.step == 3
    np.testing.assert_array_equal(lift(observe(companion), companion).values, companion.values)
    with pytest.raises(ObservationError):
        lift(np.zeros(4), companion)


def test_noiseless_observations(truth):
    series = make_synthetic(truth, 0.0, seed=None)
    assert series.n_steps == 4
    assert series.size == 21
    for n, X in enumerate(truth):
        np.testing.assert_array_equal(series.record(n), observe(X))


def test_noise_is_reproducible_per_seed(truth):
    first = make_synthetic(truth, 5e-4, seed=7)
    second = make_synthetic(truth, 5e-4, seed=7)
    other = make_synthetic(truth, 5e-4, seed=8)
    np.testing.assert_array_equal(first.values, second.values)
    assert not np.array_equal(first.values, other.values)


def test_noise_variance_matches_request():
    R = 0.01
    series = make_synthetic(_flat_trajectory(2000), R, seed=1)
    sample = series.values.ravel()
    assert sample.size == 10000
    assert abs(sample.mean()) < 4 * np.sqrt(R / sample.size)
    assert abs(sample.var() / R - 1.0) <= 0.05


def test_noise_variance_shape_checked():
    with pytest.raises(ObservationError):
        make_synthetic(_flat_trajectory(3), [0.1, 0.2], seed=1)
    with pytest.raises(ObservationError):
        make_synthetic(_flat_trajectory(3), 0.1, seed=None)
    with pytest.raises(ObservationError):
        make_synthetic([], 0.1, seed=1)


def test_effective_noise_variance():
    assert effective_noise_variance(500, "variance", 1e-6) == pytest.approx(5e-4)
    assert effective_noise_variance(0.1, "std") == pytest.approx(0.01)
    assert effective_noise_variance(0.0) == 0.0
    with pytest.raises(ObservationError):
        effective_noise_variance(1.0, "sigma")
    with pytest.raises(ObservationError):
        effective_noise_variance(-1.0)


def test_series_file_round_trip(tmp_path, truth):
    series = make_synthetic(truth, 5e-4, seed=3)
    loaded = read_series(write_series(series, tmp_path / "obs.csv"))
    np.testing.assert_array_equal(loaded.values, series.values)
    np.testing.assert_array_equal(loaded.steps, series.steps)
    np.testing.assert_array_equal(loaded.dof_ids, series.dof_ids)
    np.testing.assert_allclose(loaded.noise_variance, series.noise_variance)
    assert loaded.seed == 3


def test_empty_series_file_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("# seed = 1\nn,dof,value\n")
    with pytest.raises(ObservationError):
        read_series(path)


# ========== Companion model ==========

def test_true_width_reproduces_next_observation(single_system, truth):
    model = CompanionModel(SystemAssembler(single_system, 0.1), truth[0])
    predicted = model.predict(np.array([1e3]), 0, observe(truth[0]))
    np.testing.assert_allclose(predicted, observe(truth[1]), rtol=1e-9, atol=1e-12)


def test_low_rank_predictions_match_refactorization(single_system, truth):
    assembler = SystemAssembler(single_system, 0.1)
    direct = CompanionModel(assembler, truth[0])
    fast = CompanionModel(assembler, truth[0], reference_widths=[1.5e-3])
    y0 = observe(truth[0])
    for theta in (500.0, 1000.0, 2500.0):
        np.testing.assert_allclose(
            fast.predict(np.array([theta]), 0, y0),
            direct.predict(np.array([theta]), 0, y0),
            rtol=1e-8, atol=1e-12,
        )


def test_companion_advances_one_step_at_a_time(single_system, truth):
    model = CompanionModel(SystemAssembler(single_system, 0.1), truth[0])
    y0 = observe(truth[0])
    model.advance(np.array([1e3]), 0, y0)
    assert model.companion.step == 1
    with pytest.raises(ObservationError):
        model.predict(np.array([1e3]), 0, y0)
    model.predict(np.array([1e3]), 1, observe(truth[1]))


def test_mode_must_match_assembler(single_system, truth):
    with pytest.raises(ObservationError):
        CompanionModel(SystemAssembler(single_system, 0.1), truth[0], mode="fracture_only")
    with pytest.raises(ObservationError):
        CompanionModel(SystemAssembler(single_system, 0.1), truth[0], mode="matrix")


def test_fracture_only_prediction_is_finite(single_system, truth):
    assembler = SystemAssembler(single_system, 0.1, subsystem="fracture")
    model = CompanionModel(assembler, truth[0], mode="fracture_only")
    predicted = model.predict(np.array([1e3]), 0, observe(truth[0]))
    assert predicted.shape == (21,)
    assert np.all(np.isfinite(predicted))
