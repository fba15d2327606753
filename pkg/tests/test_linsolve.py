"""Tests for the analyze / factor / solve interface."""

import numpy as np
import pytest
from scipy import sparse

from core.exceptions import SingularMatrixError, SolverError
from core.forward import SystemAssembler
from core.linsolve import SparsityPattern, analyze, factor, solve
from experiments.twin import build_model, load_config


def _random_system(n=40, seed=3):
    rng = np.random.default_rng(seed)
    M = sparse.random(n, n, density=0.1, random_state=rng, format="csc")
    M = M + sparse.diags(np.abs(M).sum(axis=1).A1 + 1.0)
    return sparse.csc_matrix(M), rng.standard_normal(n)


@pytest.mark.parametrize("ordering", ["colamd", "rcm", "natural"])
def test_solution_matches_dense_oracle(ordering):
    M, b = _random_system()
    symbolic = analyze(M, ordering)
    x = solve(factor(symbolic, M), b)
    np.testing.assert_allclose(x, np.linalg.solve(M.toarray(), b), rtol=1e-10, atol=1e-12)
    assert np.linalg.norm(M @ x - b) / np.linalg.norm(b) <= 1e-10


def test_small_spd_against_dense_elimination():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((5, 5))
    A = Q @ Q.T + 5.0 * np.eye(5)
    b = rng.standard_normal(5)
    M = sparse.csc_matrix(A)
    x = solve(factor(analyze(M), M), b)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-12)


def test_diagonal_matrix_divides():
    d = np.array([2.0, 4.0, 0.5, 8.0])
    M = sparse.diags(d).tocsc()
    symbolic = analyze(M)
    assert symbolic.ordering == "natural"
    np.testing.assert_array_equal(symbolic.col_perm, np.arange(4))
    np.testing.assert_allclose(solve(factor(symbolic, M), np.ones(4)), 1.0 / d, rtol=1e-15)


def test_one_analysis_serves_matrices_with_same_pattern():
    M, b = _random_system()
    symbolic = analyze(M)
    for scale in (0.5, 2.0, 10.0):
        scaled = M.copy()
        scaled.data = scaled.data * scale
        x = solve(factor(symbolic, scaled), b)
        np.testing.assert_allclose(scaled @ x, b, atol=1e-10)


def test_analysis_is_deterministic():
    M, _ = _random_system()
    first = factor(analyze(M), M)
    second = factor(analyze(M), M)
    np.testing.assert_array_equal(first.symbolic.col_perm, second.symbolic.col_perm)
    assert first.fill == second.fill


@pytest.mark.parametrize("preset", ["case1", "case2", "case3a"])
def test_colamd_fill_not_above_natural_on_case_meshes(preset):
    cfg = load_config(preset=preset, overrides={"mesh.h": 0.1})
    _, mats = build_model(cfg)
    M = SystemAssembler(mats, cfg.dt).matrix(cfg.true_widths)
    colamd = factor(analyze(M, "colamd"), M)
    natural = factor(analyze(M, "natural"), M)
    assert colamd.fill <= natural.fill


def test_pattern_mismatch_rejected():
    M, _ = _random_system()
    symbolic = analyze(M)
    other, _ = _random_system(seed=11)
    with pytest.raises(SolverError):
        factor(symbolic, other)


def test_singular_matrix_rejected():
    M = sparse.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        factor(analyze(M, "natural"), M)


def test_zero_rhs_gives_zero():
    M, _ = _random_system()
    np.testing.assert_array_equal(solve(factor(analyze(M), M), np.zeros(M.shape[0])), 0.0)


def test_pattern_properties():
    pattern = SparsityPattern.from_matrix(sparse.eye(3))
    assert pattern.is_diagonal
    assert pattern.symmetric
    assert pattern.nnz == 3
    assert analyze(pattern, "colamd").ordering == "natural"
    with pytest.raises(SolverError):
        analyze(sparse.eye(3), "amd")
    with pytest.raises(SolverError):
        SparsityPattern.from_matrix(sparse.csc_matrix((2, 3)))
