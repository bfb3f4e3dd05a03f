import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iesis.dct import (analyze, build_basis, dct_matrix, frequency_order, reduce_dimension,
                       synthesize)
from iesis.errors import ValidationError


@pytest.mark.parametrize("nx,ny", [(1, 1), (4, 4), (5, 3), (16, 16), (32, 32)])
def test_full_basis_orthonormal(nx, ny):
    Phi = build_basis(nx, ny, nx * ny).columns
    assert np.max(np.abs(Phi.T @ Phi - np.eye(nx * ny))) < 1e-10


def test_dc_column_constant():
    b = build_basis(6, 5, 3)
    assert np.allclose(b.columns[:, 0], 1 / np.sqrt(30), rtol=0, atol=1e-15)


def test_zigzag_small():
    b = build_basis(4, 4, 4)
    assert set(map(tuple, b.frequencies())) == {(0, 0), (0, 1), (1, 0), (0, 2)}


def test_paper_linear_order():
    assert np.array_equal(frequency_order(3, 4, "paper_linear"), np.arange(12))


def test_unknown_ordering():
    with pytest.raises(ValidationError):
        frequency_order(3, 3, "spiral")


@pytest.mark.parametrize("n_c", [0, 17])
def test_n_c_out_of_range(n_c):
    with pytest.raises(ValidationError):
        build_basis(4, 4, n_c)


@pytest.mark.parametrize("ordering", ["zigzag", "paper_linear"])
def test_truncation_nesting(ordering):
    a = build_basis(7, 6, 11, ordering)
    b = build_basis(7, 6, 12, ordering)
    assert np.array_equal(a.retained, b.retained[:11])
    assert np.array_equal(a.columns, b.columns[:, :11])


def test_synthesize_linear_and_zero():
    b = build_basis(5, 5, 8)
    assert np.all(synthesize(np.zeros(8), b) == 0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(8), rng.standard_normal(8)
    assert np.allclose(synthesize(2 * x - y, b), 2 * synthesize(x, b) - synthesize(y, b))


def test_synthesize_first_unit_vector():
    b = build_basis(4, 6, 24)
    e = np.zeros(24)
    e[0] = 1
    assert np.allclose(synthesize(e, b), 1 / np.sqrt(24))


def test_synthesize_columns_are_members():
    b = build_basis(4, 4, 5)
    T = np.random.default_rng(1).standard_normal((5, 3))
    assert np.allclose(synthesize(T, b)[:, 1], synthesize(T[:, 1], b))


def test_dimension_mismatch():
    b = build_basis(4, 4, 5)
    with pytest.raises(ValidationError):
        synthesize(np.zeros(4), b)
    with pytest.raises(ValidationError):
        analyze(np.zeros(15), 4, 4)


def test_analyze_constant():
    c = analyze(np.full(20, 3.0), 4, 5)
    assert c[0] == pytest.approx(3.0 * np.sqrt(20))
    assert np.max(np.abs(c[1:])) < 1e-12


def test_analyze_basis_column():
    b = build_basis(5, 4, 20, "paper_linear")
    e = analyze(b.columns[:, 7], 5, 4)
    target = np.zeros(20)
    target[7] = 1
    assert np.max(np.abs(e - target)) < 1e-12


def test_roundtrip_8x8():
    A = np.random.default_rng(2).standard_normal(64)
    b = build_basis(8, 8, 64, "paper_linear")
    assert np.max(np.abs(synthesize(analyze(A, 8, 8), b) - A)) < 1e-10


def test_analyze_matches_transpose():
    A = np.random.default_rng(3).standard_normal(30)
    b = build_basis(5, 6, 30, "paper_linear")
    assert np.allclose(analyze(A, 5, 6), b.columns.T @ A)


def test_dct_matrix_orthogonal():
    C = dct_matrix(9)
    assert np.allclose(C.T @ C, np.eye(9))


class TestReduce:
    def test_example(self):
        assert list(reduce_dimension([4, 3, 2, 1], 0.9)) == [0, 1, 2]

    def test_full_mass(self):
        assert list(reduce_dimension([1.0, 0.0, -2.0, 0.5], 1.0)) == [0, 2, 3]

    def test_dominant(self):
        assert list(reduce_dimension([1e6, 1e-9, 1e-9, 1e-9], 0.95)) == [0]

    def test_zero_mean_keeps_all(self):
        assert list(reduce_dimension(np.zeros(5), 0.5)) == list(range(5))

    def test_ties_ascending(self):
        assert list(reduce_dimension([1.0, 1.0, 1.0, 1.0], 0.5)) == [0, 1]

    def test_bad_alpha(self):
        with pytest.raises(ValidationError):
            reduce_dimension([1.0], 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20),
           st.floats(0.05, 1.0), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, v, alpha, c):
        v = np.array(v)
        assert np.array_equal(reduce_dimension(v, alpha), reduce_dimension(c * v, alpha))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=1, max_size=20), st.floats(0.05, 0.999))
    def test_kept_mass_reaches_alpha(self, v, alpha):
        v = np.array(v)
        keep = reduce_dimension(v, alpha)
        assert v[keep].sum() >= alpha * v.sum() * (1 - 1e-9)
        # dropping the smallest retained entry falls short
        if len(keep) > 1:
            assert v[keep].sum() - v[keep].min() < alpha * v.sum() * (1 + 1e-9)


def test_energy_ordering_on_channel_field():
    from iesis.experiments import channel_truth

    A = channel_truth(16, (-0.5, 0.5)).ravel()
    errs = []
    for n_c in (1, 5, 20, 60, 120, 256):
        b = build_basis(16, 16, n_c)
        rec = synthesize(b.columns.T @ A, b)
        errs.append(np.linalg.norm(rec - A))
    assert np.all(np.diff(errs) <= 1e-12)
