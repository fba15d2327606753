"""Tests for the backward Euler block system and crossing constraints."""

import numpy as np
import pytest

from core.assembly import (BoundaryConditions, BoundaryPiece, ModelCoefficients,
                           TipCondition, assemble_system, initial_state)
from core.constants import PRESETS
from core.exceptions import ConstraintError, SolverError
from core.forward import (LowRankUpdate, SystemAssembler,
                          apply_intersection_constraints, build_system,
                          dump_field, export_trajectory,
                          intersection_flux_residual, make_initial_state,
                          manufactured_problem, mass_balance_residual,
                          pressure_energy, pressure_error, simulate, step)
from core.geometry import (Intersection, build_geometry, generate_mesh,
                           node_dof, segment_endpoint_nodes)
from experiments.twin import build_model, load_config, simulate_truth

from .helpers import single_spec


def _uniform_boundary(value):
    return BoundaryConditions(
        dirichlet=(BoundaryPiece("right", 0.0, 0.2, value), BoundaryPiece("left", 0.0, 0.2, value)),
        tips=(TipCondition(0, "start", value), TipCondition(0, "end", value)),
    )


def _start(mats, p0):
    return make_initial_state(mats, initial_state(mats.mesh, p0))


def test_zero_data_stays_zero(single_mesh):
    mats = assemble_system(single_mesh, ModelCoefficients.uniform(2), _uniform_boundary(0.0))
    trajectory = simulate(build_system(mats, 0.1, [1e-3]), _start(mats, 0.0), 3)
    assert len(trajectory) == 4
    for X in trajectory:
        np.testing.assert_array_equal(X.values, 0.0)


def test_constant_pressure_is_fixed_point(single_mesh):
    mats = assemble_system(single_mesh, ModelCoefficients.uniform(2), _uniform_boundary(1.0))
    X0 = _start(mats, 1.0)
    X1 = step(build_system(mats, 0.1, [1e-3]), X0)
    np.testing.assert_allclose(X1.pressure, 1.0, rtol=1e-9)
    np.testing.assert_allclose(X1.fracture_pressure, 1.0, rtol=1e-9)
    np.testing.assert_allclose(X1.flux, 0.0, atol=1e-9)
    np.testing.assert_allclose(X1.fracture_flux, 0.0, atol=1e-9)
    assert X1.step == 1


def test_single_step_matches_simulate(single_system):
    system = build_system(single_system, 0.1, [1e-3])
    X0 = _start(single_system, 0.0)
    np.testing.assert_array_equal(step(system, X0).values, simulate(system, X0, 1)[1].values)
    first = simulate(system, X0, 3)
    second = simulate(system, X0, 3)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.values, b.values)


def test_mass_balance_every_step(single_system):
    system = build_system(single_system, 0.1, [1e-3])
    trajectory = simulate(system, _start(single_system, 0.0), 5)
    for a, b in zip(trajectory[:-1], trajectory[1:]):
        assert mass_balance_residual(single_system, a, b, 0.1) <= 1e-10


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_mass_balance_on_presets(preset):
    cfg = load_config(preset=preset, overrides={"mesh.h": 0.05})
    _, mats = build_model(cfg)
    assembler = SystemAssembler(mats, cfg.dt, ordering=cfg.ordering, tolerance=cfg.tolerance)
    trajectory, balance, crossing = simulate_truth(cfg, mats, assembler)
    assert len(trajectory) == cfg.n_steps + 1
    assert balance <= 1e-10
    assert crossing <= 1e-10


def test_fracture_flows_bottom_to_top(single_system):
    trajectory = simulate(build_system(single_system, 0.1, [1e-3]), _start(single_system, 0.0), 10)
    flux = trajectory[-1].fracture_flux
    assert flux.mean() > 0
    assert np.all(flux[1:-1] > 0)


def test_energy_decays_without_forcing(single_mesh):
    bc = BoundaryConditions(default="dirichlet", default_value=0.0,
                            tips=(TipCondition(0, "start", 0.0), TipCondition(0, "end", 0.0)))
    mats = assemble_system(single_mesh, ModelCoefficients.uniform(2), bc)
    trajectory = simulate(build_system(mats, 0.1, [1e-3]), _start(mats, 1.0), 8)
    energy = [pressure_energy(mats, X) for X in trajectory]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(energy[:-1], energy[1:]))
    assert energy[-1] < energy[0]


def test_width_enters_only_fracture_block(single_system):
    assembler = SystemAssembler(single_system, 0.1)
    diff = (assembler.matrix([1e-3]) - assembler.matrix([4e-3])).tocoo()
    diff.eliminate_zeros()
    layout = single_system.layout
    nodes = np.arange(layout.node_slice.start, layout.node_slice.stop)
    allowed = set(np.flatnonzero(np.isin(assembler.active, nodes)))
    assert diff.nnz > 0
    assert set(diff.row) <= allowed and set(diff.col) <= allowed


def test_condition_number_grows_as_width_shrinks():
    mesh = generate_mesh(build_geometry(single_spec()), 0.1)
    mats = assemble_system(mesh, ModelCoefficients.uniform(2), BoundaryConditions.from_dict({
        "dirichlet": [{"side": "right", "range": [0, 0.2], "value": 1.0},
                      {"side": "left", "range": [0, 0.2], "value": 0.0}],
        "tips": [{"fracture": 0, "end": "start", "value": 1.0},
                 {"fracture": 0, "end": "end", "value": 0.0}],
    }))
    assembler = SystemAssembler(mats, 0.1)
    cond = [np.linalg.cond(assembler.matrix([d]).toarray()) for d in (1e-2, 1e-4)]
    assert cond[1] > cond[0]


def test_invalid_inputs_rejected(single_system):
    with pytest.raises(SolverError):
        SystemAssembler(single_system, 0.0)
    assembler = SystemAssembler(single_system, 0.1)
    with pytest.raises(SolverError):
        assembler.matrix([-1e-3])
    with pytest.raises(SolverError):
        build_system(single_system, 0.2, [1e-3], assembler=assembler)
    with pytest.raises(SolverError):
        simulate(assembler.build([1e-3]), _start(single_system, 0.0), 0)


def test_low_rank_update_matches_refactorization(single_system):
    assembler = SystemAssembler(single_system, 0.1)
    update = LowRankUpdate(assembler, [2e-3])
    X0 = _start(single_system, 0.0)
    x0 = update.base_solution(X0)
    for width in (2e-3, 1e-3, 4e-4):
        direct = step(assembler.build([width]), X0)
        fast = update.step(X0, [width], x0)
        np.testing.assert_allclose(fast.values, direct.values, rtol=1e-8, atol=1e-12)


def test_manufactured_solution_converges():
    problem = manufactured_problem()
    errors = []
    for n in (10, 20, 40):
        h = 1.0 / n
        mesh = generate_mesh(build_geometry(problem.case_spec), h)
        coeffs = ModelCoefficients.uniform(
            2, K_gamma=problem.K_gamma, phi_gamma=problem.phi_gamma,
            source=problem.source, fracture_source=problem.fracture_source,
        )
        mats = assemble_system(mesh, coeffs, problem.boundary)
        X0 = make_initial_state(mats, initial_state(mesh, problem.initial_pressure))
        trajectory = simulate(build_system(mats, h, [problem.width]), X0, n)
        errors.append(pressure_error(mesh, trajectory[-1], problem.pressure, 1.0))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 0.9), f"errors {errors}, orders {orders}"


# ========== Crossings ==========

def _cross_system(mesh, bc):
    mats = assemble_system(mesh, ModelCoefficients.uniform(4), bc)
    return apply_intersection_constraints(mats, mesh.geometry.intersections[0])


def test_crossing_flux_balance(cross_mesh, case3_boundary):
    mats = _cross_system(cross_mesh, case3_boundary)
    assert mats.layout.n_mult == 1
    trajectory = simulate(build_system(mats, 0.1, [1e-3, 6e-4]), _start(mats, 0.0), 5)
    for a, b in zip(trajectory[:-1], trajectory[1:]):
        assert np.max(np.abs(intersection_flux_residual(mats, b))) <= 1e-10
        assert np.all(np.isfinite(b.multipliers))
        assert mass_balance_residual(mats, a, b, 0.1) <= 1e-10


def test_symmetric_cross_gives_opposite_colinear_fluxes(cross_mesh):
    bc = BoundaryConditions(tips=(
        TipCondition(0, "start", 1.0), TipCondition(0, "end", 1.0),
        TipCondition(1, "start", 0.0), TipCondition(1, "end", 0.0),
    ))
    mats = _cross_system(cross_mesh, bc)
    X = simulate(build_system(mats, 0.1, [1e-3, 1e-3]), _start(mats, 0.0), 3)[-1]
    ends = {(seg, local): X.values[node_dof(cross_mesh, seg, local)]
            for seg, local, _ in segment_endpoint_nodes(cross_mesh, (0.5, 0.5))}
    segs = cross_mesh.geometry.segments
    left, right, bottom, top = (segs[i] for i in range(4))
    u_left = ends[(left.segment_id, cross_mesh.segments[0].nodes.size - 1)]
    u_right = ends[(right.segment_id, 0)]
    u_bottom = ends[(bottom.segment_id, cross_mesh.segments[2].nodes.size - 1)]
    u_top = ends[(top.segment_id, 0)]
    scale = abs(u_left)
    assert u_left > 0
    assert u_right == pytest.approx(-u_left, rel=1e-8, abs=1e-12 * scale)
    assert u_top == pytest.approx(-u_bottom, rel=1e-8, abs=1e-12 * scale)
    assert u_bottom == pytest.approx(-u_left, rel=1e-8)


def test_constraint_changes_solution(cross_mesh, case3_boundary):
    free = assemble_system(cross_mesh, ModelCoefficients.uniform(4), case3_boundary)
    constrained = apply_intersection_constraints(free, cross_mesh.geometry.intersections[0])
    X_free = step(build_system(free, 0.1, [1e-3, 6e-4]), _start(free, 0.0))
    X_con = step(build_system(constrained, 0.1, [1e-3, 6e-4]), _start(constrained, 0.0))
    n = free.layout.size
    assert not np.allclose(X_free.values, X_con.values[:n])


def test_constraint_rejected_away_from_crossing(cross_mesh, case3_boundary):
    mats = assemble_system(cross_mesh, ModelCoefficients.uniform(4), case3_boundary)
    with pytest.raises(ConstraintError):
        apply_intersection_constraints(mats, Intersection((0.25, 0.25), ()))
    constrained = apply_intersection_constraints(mats, cross_mesh.geometry.intersections[0])
    with pytest.raises(ConstraintError):
        apply_intersection_constraints(constrained, cross_mesh.geometry.intersections[0])


# ========== Export ==========

def test_export_trajectory_and_field(tmp_path, single_system):
    trajectory = simulate(build_system(single_system, 0.1, [1e-3]), _start(single_system, 0.0), 2)
    path = export_trajectory(trajectory, tmp_path / "truth.csv", 0.1)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,time,dof,kind,value"
    assert len(lines) == 1 + 3 * (11 + 10)
    field = dump_field(trajectory[-1], tmp_path / "field.txt").read_text().splitlines()
    assert field[0] == "# step 2"
    assert "FRACTURE_PRESSURE 10" in field
    start = field.index("FRACTURE_PRESSURE 10") + 1
    values = [float(line.split()[1]) for line in field[start:start + 10]]
    np.testing.assert_array_equal(values, trajectory[-1].fracture_pressure)
