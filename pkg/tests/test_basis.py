import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffvdfr.basis import (
    BSplineBasis,
    TensorBasis,
    basis_with_dimension,
    difference_matrix,
    eval_basis,
    eval_tensor,
    eval_tensor_grid,
    make_basis,
)
from oracles import count_basis_functions, cox_de_boor


def test_dimension_25_on_0_100():
    assert make_basis((0, 100), 21, 3).dimension == 25


def test_zero_interior_knots_gives_bernstein_dimension():
    assert make_basis((0, 1), 0, 3).dimension == 4


@pytest.mark.parametrize("boundary", ["extended", "clamped"])
def test_quadratic_dimension_matches_recursion_count(boundary):
    b = make_basis((0, 10), 5, 2, boundary)
    assert b.dimension == 8
    assert count_basis_functions(b.knots, 2) == 8


def test_clamped_knot_sequence():
    b = make_basis((2, 7), 4, 3, boundary="clamped")
    assert np.all(np.diff(b.knots) >= 0)
    assert np.all(b.knots[:4] == 2) and np.all(b.knots[-4:] == 7)
    assert b.knots.size == b.dimension + b.degree + 1


def test_extended_knots_are_equally_spaced():
    b = make_basis((2, 7), 4, 3)
    np.testing.assert_allclose(np.diff(b.knots), 1.0)
    assert b.knots[3] == 2 and b.knots[-4] == 7
    assert b.knots.size == b.dimension + b.degree + 1


def test_extended_basis_index_linear_coefficients_give_lines():
    # equally spaced Greville abscissae: a + b*k coefficients trace a straight line
    b = make_basis((0, 3), 5, 3)
    x = np.linspace(0, 3, 101)
    y = eval_basis(b, x) @ (1.5 - 0.25 * np.arange(b.dimension))
    np.testing.assert_allclose(np.diff(y, 2), 0, atol=1e-12)


def test_unknown_boundary_rejected():
    with pytest.raises(ValueError, match="boundary"):
        make_basis((0, 1), 2, 3, boundary="periodic")


@pytest.mark.parametrize("domain,k,deg", [((1, 1), 3, 3), ((0, 1), -1, 3), ((0, 1), 2, 0)])
def test_make_basis_rejects_bad_input(domain, k, deg):
    with pytest.raises(ValueError):
        make_basis(domain, k, deg)


def test_partition_of_unity_and_nonnegativity():
    rng = np.random.default_rng(1)
    b = make_basis((0, 37.5), 9, 3)
    x = rng.uniform(0, 37.5, 1000)
    m = eval_basis(b, x)
    assert np.max(np.abs(m.sum(axis=1) - 1)) < 1e-12
    assert m.min() >= 0


def test_local_support():
    b = make_basis((0, 1), 12, 3)
    m = eval_basis(b, np.linspace(0, 1, 777))
    assert np.max((m > 0).sum(axis=1)) <= b.degree + 1


def test_clamped_end_rows():
    b = make_basis((0, 5), 3, 3, boundary="clamped")
    left, right = eval_basis(b, [0.0, 5.0])
    assert left[0] == 1 and np.all(left[1:] == 0)
    assert right[-1] == 1 and np.all(right[:-1] == 0)


def test_bernstein_midpoint():
    m = eval_basis(make_basis((0, 1), 0, 3, boundary="clamped"), [0.5])[0]
    np.testing.assert_allclose(m, [0.125, 0.375, 0.375, 0.125], atol=1e-15)


@pytest.mark.parametrize("boundary", ["extended", "clamped"])
@pytest.mark.parametrize("deg,k", [(1, 3), (2, 5), (3, 7)])
def test_matches_cox_de_boor_recursion(deg, k, boundary):
    b = make_basis((-1.0, 4.0), k, deg, boundary)
    for x in np.linspace(-1, 4, 41):
        np.testing.assert_allclose(eval_basis(b, [x])[0], cox_de_boor(b.knots, deg, x),
                                   atol=1e-13)


def test_out_of_domain_points_raise():
    b = make_basis((0, 1), 2)
    with pytest.raises(ValueError, match="outside"):
        eval_basis(b, [1.1])
    with pytest.raises(ValueError):
        eval_basis(b, [-0.5])


def test_basis_with_dimension():
    assert basis_with_dimension((0, 3), 10).interior_knots == 6
    with pytest.raises(ValueError):
        basis_with_dimension((0, 3), 3)


def test_basis_serialization_round_trip():
    b = make_basis((0.5, 9.25), 4, 2)
    assert BSplineBasis.from_dict(b.to_dict()) == b
    t = TensorBasis(b, make_basis((1, 2), 1))
    assert TensorBasis.from_dict(t.to_dict()) == t


@pytest.fixture
def tensor():
    return TensorBasis(make_basis((0, 10), 3), make_basis((2, 10), 2))


@pytest.fixture
def clamped_tensor():
    return TensorBasis(make_basis((0, 10), 3, boundary="clamped"),
                       make_basis((2, 10), 2, boundary="clamped"))


def test_tensor_row_sums_to_one(tensor):
    assert abs(eval_tensor(tensor, 3.3, 7.1).sum() - 1) < 1e-12


def test_tensor_corner_is_unit_vector(clamped_tensor):
    row = eval_tensor(clamped_tensor, 0.0, 2.0)
    assert row[0] == 1 and np.count_nonzero(row) == 1


def test_tensor_equals_marginal_products(tensor):
    rng = np.random.default_rng(3)
    for t, T in rng.uniform([0, 2], [10, 10], size=(50, 2)):
        phi = eval_basis(tensor.marginal_t, [t])[0]
        psi = eval_basis(tensor.marginal_T, [T])[0]
        row = eval_tensor(tensor, t, T)
        for k in range(tensor.r):
            for l in range(tensor.q):
                assert abs(row[k * tensor.q + l] - phi[l] * psi[k]) < 1e-13


def test_tensor_grid_matches_pointwise(tensor):
    t = np.array([0.0, 1.5, 9.9])
    T = np.array([2.0, 5.0, 10.0])
    grid = eval_tensor_grid(tensor, t, T)
    for i in range(3):
        np.testing.assert_allclose(grid[i], eval_tensor(tensor, t[i], T[i]), atol=1e-15)


def test_tensor_out_of_domain_raises(tensor):
    with pytest.raises(ValueError):
        eval_tensor(tensor, 5.0, 1.0)


def test_tensor_without_T_marginal():
    t = TensorBasis(make_basis((0, 1), 2), None)
    assert t.r == 1 and t.dimension == t.q
    np.testing.assert_allclose(eval_tensor(t, 0.3, 123.0), eval_basis(t.marginal_t, [0.3])[0])


def test_second_difference_stencil():
    np.testing.assert_array_equal(difference_matrix(2, 4), [[1, -2, 1, 0], [0, 1, -2, 1]])
    d = difference_matrix(2, 4)
    assert not np.any(d @ np.ones(4))
    assert not np.any(d @ np.arange(4))


def test_difference_matrix_rejects_small_c():
    with pytest.raises(ValueError):
        difference_matrix(2, 2)


@settings(max_examples=48, deadline=None)
@given(st.integers(min_value=3, max_value=50))
def test_second_difference_null_space_is_linear(c):
    d = difference_matrix(2, c)
    assert d.shape == (c - 2, c)
    assert np.linalg.matrix_rank(d) == c - 2
    # null space = span{1, k}
    _, s, vt = np.linalg.svd(d)
    null = vt[c - 2:].T
    lin = np.column_stack([np.ones(c), np.arange(c)])
    proj = null @ null.T @ lin
    np.testing.assert_allclose(proj, lin, atol=1e-8 * c)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 15), st.integers(1, 4),
       st.sampled_from(["extended", "clamped"]))
def test_partition_of_unity_property(u, k, deg, boundary):
    b = make_basis((-3.0, 11.0), k, deg, boundary)
    row = eval_basis(b, [-3.0 + 14.0 * u])[0]
    assert abs(row.sum() - 1) < 1e-12
    assert row.min() >= -1e-15
