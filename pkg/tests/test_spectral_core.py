import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracyamabe.spectral_core import (
    Field,
    FlowParams,
    Grid,
    GridError,
    conformal_operator,
    dft_forward,
    dft_inverse,
    fractional_laplacian,
    inner,
    integral,
    lp_norm,
    read_field_binary,
    read_field_csv,
    sup,
    inf,
    write_field_binary,
    write_field_csv,
)

G1 = Grid(1, 64)
seeds = st.integers(0, 2**32 - 1)
gammas = st.floats(0.05, 0.95)


def random_field(grid, seed, smooth=True):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(grid.shape)
    if smooth:
        v = np.fft.ifftn(np.fft.fftn(v) * np.exp(-0.1 * grid.wavevector_norm**2)).real
    return Field(grid, v)


class TestGrid:
    @pytest.mark.parametrize("n", [0, 1, 3, 48, 100])
    def test_rejects_non_power_of_two(self, n):
        with pytest.raises(GridError):
            Grid(1, n)

    @pytest.mark.parametrize("dim", [0, 4])
    def test_rejects_dimension(self, dim):
        with pytest.raises(GridError):
            Grid(dim, 8)

    def test_geometry(self):
        g = Grid(2, 16, side_length=3.0)
        assert g.shape == (16, 16)
        assert g.size == 256
        assert g.spacing == pytest.approx(3.0 / 16)
        assert g.volume == pytest.approx(9.0)
        assert g.cell_volume * g.size == pytest.approx(g.volume)

    def test_physical_frequencies(self):
        g = Grid(1, 8, side_length=4.0)
        k = g.integer_frequencies()
        assert sorted(k.tolist()) == [-4, -3, -2, -1, 0, 1, 2, 3]
        assert g.wavevector_norm[1] == pytest.approx(2 * math.pi / 4.0)


class TestFlowParams:
    def test_exponents(self):
        p = FlowParams(0.5, 3)
        assert p.N_gamma == pytest.approx(2.0)
        assert p.m_gamma == pytest.approx(0.5)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 1.2, -0.1])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError, match="gamma must lie in"):
            FlowParams(gamma, 3)

    @pytest.mark.parametrize("kw", [dict(n=1, gamma=0.6), dict(q_c=-1.0), dict(h=0.0)])
    def test_invalid(self, kw):
        base = dict(gamma=0.5, n=3)
        base.update(kw)
        with pytest.raises(ValueError):
            FlowParams(**base)


class TestTransforms:
    def test_constant_concentrates_in_zero_mode(self):
        F = dft_forward(Field.constant(G1, 2.5)).coefficients
        assert F[0] == pytest.approx(2.5 * G1.size)
        assert np.max(np.abs(F[1:])) < 1e-12

    def test_cosine_two_modes(self):
        F = dft_forward(Field.from_function(G1, lambda x: np.cos(3 * x))).coefficients
        big = np.flatnonzero(np.abs(F) > 1e-9)
        assert sorted(G1.integer_frequencies()[big].tolist()) == [-3, 3]

    @pytest.mark.parametrize("dim,n", [(1, 64), (2, 16), (3, 8)])
    def test_round_trip(self, dim, n):
        f = random_field(Grid(dim, n), 7, smooth=False)
        back = dft_inverse(dft_forward(f))
        assert np.max(np.abs(back.values - f.values)) < 1e-12


class TestOperators:
    def test_constant_annihilated(self):
        out = fractional_laplacian(Field.constant(G1, 3.0), 0.4)
        assert np.max(np.abs(out.values)) < 1e-13

    def test_cos2x_half(self):
        f = Field.from_function(G1, lambda x: np.cos(2 * x))
        out = fractional_laplacian(f, 0.5)
        np.testing.assert_allclose(out.values, 2 * f.values, atol=1e-13)

    def test_cos3x_three_quarters(self):
        f = Field.from_function(G1, lambda x: np.cos(3 * x))
        out = fractional_laplacian(f, 0.75)
        np.testing.assert_allclose(out.values, 3**1.5 * f.values, atol=1e-12)
        assert 3**1.5 == pytest.approx(5.19615, abs=1e-5)

    def test_conformal_constants(self):
        one = Field.constant(G1, 1.0)
        assert np.max(np.abs(conformal_operator(one, FlowParams(0.5, 3)).values)) < 1e-13
        np.testing.assert_allclose(conformal_operator(one, FlowParams(0.5, 3, q_c=0.7)).values, 0.7)

    def test_conformal_cos(self):
        f = Field.from_function(G1, np.cos)
        out = conformal_operator(f, FlowParams(0.5, 3, q_c=1.0))
        np.testing.assert_allclose(out.values, 2 * f.values, atol=1e-13)

    def test_multidim_symbol(self):
        g = Grid(2, 16)
        f = Field.from_function(g, lambda x, y: np.cos(x) * np.sin(2 * y))
        out = fractional_laplacian(f, 0.3)
        np.testing.assert_allclose(out.values, 5**0.3 * f.values, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seeds, gammas, st.floats(0, 3))
    def test_self_adjoint(self, seed, gamma, q_c):
        g = Grid(2, 16)
        f, h = random_field(g, seed), random_field(g, seed + 1)
        p = FlowParams(gamma, 3, q_c=q_c)
        a, b = inner(f, conformal_operator(h, p)), inner(h, conformal_operator(f, p))
        assert abs(a - b) <= 1e-10 * max(abs(a), abs(b), 1e-300) + 1e-14

    @settings(max_examples=40, deadline=None)
    @given(seeds, gammas, st.floats(0, 3))
    def test_positive_form(self, seed, gamma, q_c):
        f = random_field(G1, seed, smooth=False)
        assert inner(f, conformal_operator(f, FlowParams(gamma, 3, q_c=q_c))) >= 0

    def test_form_vanishes_only_on_constants(self):
        p = FlowParams(0.4, 3)
        assert abs(inner(Field.constant(G1, 2.0), conformal_operator(Field.constant(G1, 2.0), p))) < 1e-12
        assert inner(Field.constant(G1, 2.0), conformal_operator(Field.constant(G1, 2.0), p.replace(q_c=1.0))) > 0
        f = Field.from_function(G1, np.sin)
        assert inner(f, conformal_operator(f, p)) > 0

    @settings(max_examples=40, deadline=None)
    @given(seeds, gammas)
    def test_symbol_composition(self, seed, gamma):
        f = random_field(G1, seed)
        twice = fractional_laplacian(fractional_laplacian(f, gamma / 2), gamma / 2)
        once = fractional_laplacian(f, gamma)
        assert np.linalg.norm(twice.values - once.values) <= 1e-10 * np.linalg.norm(once.values) + 1e-14

    @settings(max_examples=40, deadline=None)
    @given(seeds, gammas)
    def test_zero_mean_image(self, seed, gamma):
        f = random_field(Grid(2, 16), seed, smooth=False)
        assert abs(integral(fractional_laplacian(f, gamma))) <= 1e-10 * lp_norm(f, 2)


class TestReductions:
    def test_integral_of_one(self):
        assert integral(Field.constant(G1, 1.0)) == pytest.approx(2 * math.pi)

    def test_integral_of_cos(self):
        assert abs(integral(Field.from_function(G1, np.cos))) < 1e-13

    def test_l2_norm(self):
        f = Field.from_function(G1, lambda x: 1 + 0.5 * np.cos(x))
        assert lp_norm(f, 2) == pytest.approx(math.sqrt(2 * math.pi * 1.125), rel=1e-13)

    def test_sup_inf_linf(self):
        f = Field.from_function(Grid(1, 8), lambda x: 2 + np.cos(x))
        assert sup(f) == pytest.approx(3.0)
        assert inf(f) == pytest.approx(1.0)
        assert lp_norm(f, math.inf) == pytest.approx(3.0)

    def test_rejects_small_p(self):
        with pytest.raises(ValueError):
            lp_norm(Field.constant(G1, 1.0), 0.5)

    def test_reduction_order_independent_of_memory_layout(self):
        g = Grid(2, 32)
        v = np.random.default_rng(3).standard_normal(g.shape)
        assert integral(Field(g, v)) == integral(Field(g, np.asfortranarray(v)))


class TestIO:
    @pytest.mark.parametrize("dim,n", [(1, 16), (2, 8), (3, 4)])
    def test_binary_round_trip(self, tmp_path, dim, n):
        f = random_field(Grid(dim, n, side_length=1.5), 1, smooth=False)
        write_field_binary(f, tmp_path / "f.bin")
        g = read_field_binary(tmp_path / "f.bin")
        assert g.grid == f.grid
        assert np.array_equal(g.values, f.values)

    def test_binary_truncated(self, tmp_path):
        f = random_field(G1, 2)
        write_field_binary(f, tmp_path / "f.bin")
        data = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "f.bin").write_bytes(data[:-8])
        with pytest.raises(GridError):
            read_field_binary(tmp_path / "f.bin")

    def test_csv_round_trip(self, tmp_path):
        g = Grid(2, 8)
        f = random_field(g, 4, smooth=False)
        write_field_csv(f, tmp_path / "f.csv")
        header = (tmp_path / "f.csv").read_text().splitlines()[0]
        assert header == "i,j,value"
        assert np.array_equal(read_field_csv(tmp_path / "f.csv", g).values, f.values)

    def test_field_is_read_only(self):
        f = Field.constant(G1, 1.0)
        with pytest.raises(ValueError):
            f.values[0] = 2.0
