import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import enet_projection_oracle, l2_projection_oracle, lasso_exhaustive
from wavedict.sparse import (Constraint, Dictionary, LearnParams, dict_update, learn_dictionary,
                             lasso_solve, lasso_solve_block, load_coefficients, load_dictionary,
                             objective, project_elastic_net_ball, project_l2_ball, relative_error,
                             save_coefficients, save_dictionary, tune_lambda)
from wavedict.wavefield import CubeFormatError

vectors = arrays(np.float64, st.integers(1, 12),
                 elements=st.floats(-5, 5, allow_nan=False, allow_subnormal=False))


# -- projections -------------------------------------------------------------------

def test_l2_projection_examples():
    v = np.array([0.3, 0.4])
    assert np.array_equal(project_l2_ball(v), v)
    w = project_l2_ball(np.array([0.0, 4.0]))
    assert np.allclose(w, [0.0, 1.0])


def test_l2_projection_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.standard_normal(5) * 2
        assert np.linalg.norm(project_l2_ball(v) - l2_projection_oracle(v)) <= 1e-6


def test_enet_gamma_zero_is_l2():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = rng.standard_normal(6) * 3
        assert np.allclose(project_elastic_net_ball(v, 0.0), project_l2_ball(v), atol=1e-15)


@pytest.mark.parametrize("gamma", [0.5, 2.0, 10.0])
def test_enet_matches_oracle(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(10):
        v = rng.standard_normal(6) * 2
        d = project_elastic_net_ball(v, gamma)
        assert np.linalg.norm(d - enet_projection_oracle(v, gamma)) <= 1e-6
        assert d @ d + gamma * np.abs(d).sum() <= 1 + 1e-9


@settings(max_examples=200, deadline=None)
@given(v=vectors, gamma=st.floats(0, 20))
def test_enet_feasible_idempotent_and_fixes_feasible_points(v, gamma):
    d = project_elastic_net_ball(v, gamma)
    assert d @ d + gamma * np.abs(d).sum() <= 1 + 1e-9
    assert np.allclose(project_elastic_net_ball(d, gamma), d, atol=1e-12)
    if v @ v + gamma * np.abs(v).sum() <= 1:
        assert np.array_equal(d, v)
    # the projection never flips a sign
    assert np.all(d * v >= 0)


def test_enet_rejects_negative_gamma():
    with pytest.raises(ValueError):
        project_elastic_net_ball(np.ones(3), -1.0)


# -- lasso -------------------------------------------------------------------------

def test_lasso_orthonormal_is_soft_threshold():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((10, 4)))
    x = rng.standard_normal(10)
    lam = 0.4
    c = q.T @ x
    expected = np.sign(c) * np.maximum(np.abs(c) - lam / 2, 0)
    assert np.allclose(lasso_solve(q, x, lam), expected, atol=1e-10)


def test_lasso_zero_input():
    d = np.random.default_rng(0).standard_normal((6, 3))
    assert not lasso_solve(d, np.zeros(6), 0.1).any()


def test_lasso_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        d = rng.standard_normal((8, 4))
        x = rng.standard_normal(8)
        a = lasso_solve(d, x, 0.1, tol=1e-14, max_sweeps=10000)
        _, f_star = lasso_exhaustive(d, x, 0.1)
        assert objective(x[:, None], d, a[:, None], 0.1) <= f_star + 1e-8


def test_lasso_kkt_conditions():
    rng = np.random.default_rng(5)
    d = rng.standard_normal((20, 8))
    x = rng.standard_normal(20)
    lam = 0.7
    a = lasso_solve(d, x, lam, tol=1e-14, max_sweeps=10000)
    grad = -2 * d.T @ (x - d @ a)
    on = a != 0
    assert np.allclose(grad[on], -lam * np.sign(a[on]), atol=1e-6)
    assert np.all(np.abs(grad[~on]) <= lam + 1e-6)
    assert objective(x[:, None], d, a[:, None], lam) <= x @ x


def test_lasso_errors_and_thread_independence():
    d = np.random.default_rng(6).standard_normal((6, 3))
    with pytest.raises(ValueError):
        lasso_solve(d, np.ones(5), 0.1)
    with pytest.raises(ValueError):
        lasso_solve(d, np.ones(6), 0.0)
    x = np.random.default_rng(7).standard_normal((6, 30))
    assert np.array_equal(lasso_solve_block(d, x, 0.1, threads=1), lasso_solve_block(d, x, 0.1))


# -- dictionary update -------------------------------------------------------------

def test_dict_update_identity_coefficients_projects_columns():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 3)) * 2
    d = Dictionary(rng.standard_normal((5, 3)) * 0.1)
    out = dict_update(d, x, np.eye(3))
    expected = np.column_stack([project_l2_ball(x[:, j]) for j in range(3)])
    assert np.allclose(out.atoms, expected, atol=1e-12)


def test_dict_update_fixed_point():
    rng = np.random.default_rng(9)
    atoms = rng.standard_normal((7, 3))
    atoms *= 0.9 / np.linalg.norm(atoms, axis=0)
    a = rng.standard_normal((3, 12))
    out = dict_update(Dictionary(atoms), atoms @ a, a)
    assert np.max(np.abs(out.atoms - atoms)) <= 1e-10


@pytest.mark.parametrize("gamma", [0.0, 0.5, 3.0])
def test_dict_update_monotone_and_feasible(gamma):
    rng = np.random.default_rng(10)
    c = Constraint.elastic_net(gamma) if gamma else Constraint()
    for _ in range(50):
        x = rng.standard_normal((9, 15))
        d = Dictionary(rng.standard_normal((9, 4)), c).with_constraint(c)
        a = rng.standard_normal((4, 15))
        out = dict_update(d, x, a)
        assert objective(x, out.atoms, a, 0.1) <= objective(x, d.atoms, a, 0.1) + 1e-10
        assert out.feasibility_residual() <= 1e-9


def test_dict_update_retires_unused_atom():
    rng = np.random.default_rng(11)
    d = Dictionary(project_l2_ball(np.ones(4))[:, None] * np.ones((1, 2)))
    a = rng.standard_normal((2, 6))
    a[1] = 0
    out = dict_update(d, rng.standard_normal((4, 6)), a)
    assert out.retired.tolist() == [False, True]
    assert np.array_equal(out.atoms[:, 1], d.atoms[:, 1])


def test_dict_update_shape_mismatch():
    d = Dictionary(np.eye(3))
    with pytest.raises(ValueError):
        dict_update(d, np.ones((3, 4)), np.ones((2, 4)))


# -- alternating learner -----------------------------------------------------------

def test_rank_one_data_gives_collinear_atom():
    rng = np.random.default_rng(12)
    u, v = rng.standard_normal(30), rng.standard_normal(40)
    x = np.outer(u, v)
    d, a, trace = learn_dictionary(x, 1, Constraint(), LearnParams(lam=1e-3))
    cos = abs(d.atoms[:, 0] @ u) / (np.linalg.norm(d.atoms[:, 0]) * np.linalg.norm(u))
    assert cos >= 0.99
    assert trace.monotone()


def test_zero_data_gives_retired_dictionary():
    d, a, _ = learn_dictionary(np.zeros((5, 8)), 3, Constraint(), LearnParams(lam=0.1))
    assert not d.atoms.any() and not a.any()
    assert d.retired.all()


@pytest.mark.parametrize("gamma", [0.0, 1.0])
def test_learn_dictionary_monotone_feasible_and_deterministic(gamma):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((20, 30))
    c = Constraint.elastic_net(gamma) if gamma else Constraint()
    p = LearnParams(lam=0.2, seed=3)
    d, a, trace = learn_dictionary(x, 5, c, p)
    assert trace.monotone(1e-10)
    assert trace.objectives[-1] <= trace.objectives[0]
    assert d.feasibility_residual() <= 1e-9
    d2, a2, _ = learn_dictionary(x, 5, c, p)
    assert np.array_equal(d.atoms, d2.atoms) and np.array_equal(a, a2)


def test_learn_dictionary_rejects_bad_input():
    x = np.ones((3, 4))
    x[0, 0] = np.nan
    with pytest.raises(ValueError):
        learn_dictionary(x, 2, Constraint(), LearnParams(lam=0.1))
    with pytest.raises(ValueError):
        LearnParams(lam=-1.0)


def test_tune_lambda_hits_target():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((15, 4)) @ rng.standard_normal((4, 40))
    lam, err = tune_lambda(x, 4, Constraint(), LearnParams(lam=1.0), target=0.1, rtol=0.05)
    assert abs(err - 0.1) <= 0.005
    p = LearnParams(lam=lam)
    d, a, _ = learn_dictionary(x, 4, Constraint(), p)
    assert relative_error(x, d.atoms @ a) == pytest.approx(err)


# -- files -------------------------------------------------------------------------

def test_dictionary_and_coefficient_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    d = Dictionary(rng.standard_normal((6, 3)), Constraint.elastic_net(0.25),
                   retired=[False, True, False], reseeded=[True, True, False])
    save_dictionary(d, tmp_path / "d.dic")
    back = load_dictionary(tmp_path / "d.dic")
    assert np.array_equal(back.atoms, d.atoms)
    assert back.constraint == d.constraint
    assert back.retired.tolist() == [False, True, False]
    assert back.reseeded.tolist() == [True, True, False]
    a = rng.standard_normal((3, 9))
    save_coefficients(a, tmp_path / "a.cof")
    assert np.array_equal(load_coefficients(tmp_path / "a.cof"), a)
    with pytest.raises(CubeFormatError):
        load_dictionary(tmp_path / "a.cof")
