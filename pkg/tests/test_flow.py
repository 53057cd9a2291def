import math

import numpy as np
import pytest
import sympy as sp

from fracyamabe.flow import (
    TRACE_COLUMNS,
    FlowState,
    FlowTrace,
    extinction_remark_check,
    extinction_time_constant,
    measure,
    nontrivial_branch,
    nontrivial_branch_residual,
    ode_mode,
    rayleigh_q,
    rescale_via_time_change,
    run_rescaled,
    run_unrescaled,
    step_rescaled_direct,
    step_unrescaled,
)
from fracyamabe.spectral_core import Field, FlowParams, Grid, integrate

G1 = Grid(1, 64)
HALF = FlowParams(0.5, 3)  # N = 2


def state(values, params=HALF, grid=G1):
    return FlowState(0.0, Field(grid, values), params)


def cosine(level, amp, grid=G1):
    return level + amp * np.cos(grid.coordinates()[0])


def random_positive(grid, rng):
    v = rng.standard_normal(grid.shape)
    v = np.fft.ifftn(np.fft.fftn(v) * np.exp(-0.3 * grid.wavevector_norm**2)).real
    return np.exp(v / np.max(np.abs(v)))


class TestState:
    def test_rejects_negative_density(self):
        with pytest.raises(ValueError):
            state(-np.ones(64))

    def test_conformal_factor_round_trip(self):
        w = Field(G1, cosine(1.0, 0.5))
        st = FlowState.from_conformal_factor(w, HALF)
        np.testing.assert_allclose(st.conformal_factor.values, w.values, rtol=1e-14)

    def test_measure(self):
        rec = measure(state(cosine(2.0, 1.0) ** 2))
        assert rec.sup == pytest.approx(9.0) and rec.inf == pytest.approx(1.0)
        assert rec.harnack_quotient == pytest.approx(3.0)
        assert rec.mass == pytest.approx(2 * math.pi * 4.5)


class TestUnrescaled:
    def test_zero_stays_zero(self):
        st = step_unrescaled(state(np.zeros(64)), 0.1)
        assert np.all(st.density.values == 0)

    def test_constant_fixed_point(self):
        st = step_unrescaled(state(np.full(64, 1.7)), 0.1)
        np.testing.assert_allclose(st.density.values, 1.7, rtol=1e-14)

    def test_constant_closed_form(self):
        p = HALF.replace(q_c=1.0)
        c0 = 2.0
        st = state(np.full(64, c0), p)
        for h in (0.02, 0.01):
            s, errs = st, []
            for _ in range(int(round(1.0 / h))):
                s = step_unrescaled(s, h)
                errs.append(abs(s.density.values[0] - (math.sqrt(c0) - s.t / 2) ** 2))
            assert max(errs) <= 2.0 * h
        assert s.t == pytest.approx(1.0)

    def test_mass_conservation(self):
        rng = np.random.default_rng(0)
        tr = run_unrescaled(state(random_positive(G1, rng)), 0.05, 5.0)
        mass = tr.column("mass")
        assert np.max(np.abs(mass - mass[0])) <= 1e-8 * mass[0]

    def test_energy_nonincreasing(self):
        rng = np.random.default_rng(1)
        g = Grid(2, 16)
        tr = run_unrescaled(state(random_positive(g, rng), FlowParams(0.7, 3, q_c=0.2), g), 0.05, 2.0)
        e = tr.column("dirichlet_energy")
        assert np.all(np.diff(e) <= 1e-12 * e[0])

    def test_constant_extinction(self):
        p = HALF.replace(q_c=1.0)
        tr = run_unrescaled(state(np.ones(64), p), 1e-3, 3.0)
        assert tr.extinct
        assert tr.extinction_time == pytest.approx(extinction_time_constant(1.0, p), rel=0.02)
        assert extinction_time_constant(1.0, p) == pytest.approx(2.0)

    def test_flat_harnack_tends_to_one(self):
        tr = run_unrescaled(state(cosine(1.0, 0.5)), 0.5, 50.0)
        assert tr.column("harnack_quotient")[-1] <= 1.01

    def test_order_and_l1_contraction(self):
        rng = np.random.default_rng(2)
        p = FlowParams(0.6, 3, q_c=0.3)
        for _ in range(20):
            lo = random_positive(G1, rng)
            hi = lo + rng.random(64) * 0.5
            a = run_unrescaled(state(lo, p), 0.1, 1.0, snapshot_stride=1)
            b = run_unrescaled(state(hi, p), 0.1, 1.0, snapshot_stride=1)
            gaps = []
            for (_, fa), (_, fb) in zip(a.snapshots, b.snapshots):
                assert np.min(fb.values - fa.values) >= -1e-9
                gaps.append(integrate(np.maximum(fb.values - fa.values, 0), G1))
            assert np.all(np.diff(gaps) <= 1e-9)

    def test_trace_csv(self, tmp_path):
        tr = run_unrescaled(state(cosine(1.0, 0.5)), 0.1, 0.3)
        tr.write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == ",".join(TRACE_COLUMNS)
        assert len(lines) == 1 + 4

    def test_trace_times_increase(self):
        tr = FlowTrace()
        tr.append(measure(state(np.ones(64))))
        with pytest.raises(ValueError):
            tr.append(measure(state(np.ones(64))))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            step_unrescaled(state(np.ones(64)), 0.0)


class TestExtinction:
    def test_constant(self):
        rep = extinction_remark_check(state(np.ones(64), HALF.replace(q_c=1.0)), 1e-3)
        assert rep["finite"]
        assert rep["extinction_time"] == pytest.approx(2.0, rel=0.02)

    def test_sandwich(self):
        rep = extinction_remark_check(state(cosine(1.0, 0.3), HALF.replace(q_c=1.0)), 1e-3)
        assert rep["finite"] and rep["bracketed"]
        lo, hi = rep["envelope"]
        assert lo == pytest.approx(2 * math.sqrt(0.7)) and hi == pytest.approx(2 * math.sqrt(1.3))
        assert lo < rep["extinction_time"] < hi

    def test_zero(self):
        rep = extinction_remark_check(state(np.zeros(64), HALF.replace(q_c=1.0)), 1e-2)
        assert rep["extinction_time"] == 0.0

    def test_requires_positive_curvature(self):
        with pytest.raises(ValueError):
            extinction_remark_check(state(np.ones(64)), 1e-2)


class TestTimeChange:
    def test_constant(self):
        tr = run_unrescaled(state(np.full(64, 1.5)), 0.1, 2.0, snapshot_stride=1)
        fields, tm = rescale_via_time_change(tr, HALF)
        for f in fields:
            np.testing.assert_allclose(f.values, 1.5, rtol=1e-13)
        np.testing.assert_allclose(np.diff(tm.t), np.diff(tm.tau), rtol=1e-12)

    @pytest.mark.parametrize("convention", ["consistent", "reversed"])
    @pytest.mark.parametrize("q_c", [0.0, 0.5])
    def test_mass_and_monotone(self, convention, q_c):
        p = HALF.replace(q_c=q_c)
        tr = run_unrescaled(state(cosine(1.0, 0.3), p), 0.05, 1.0, snapshot_stride=2)
        fields, tm = rescale_via_time_change(tr, p, convention=convention)
        masses = np.array([integrate(f.values, G1) for f in fields])
        assert np.max(np.abs(masses - masses[0])) <= 1e-6 * masses[0]
        assert np.all(np.diff(tm.t) > 0)

    def test_conventions_differ_when_mass_changes(self):
        p = HALF.replace(q_c=0.5)
        tr = run_unrescaled(state(cosine(1.0, 0.3), p), 0.05, 1.0, snapshot_stride=1)
        t_c = rescale_via_time_change(tr, p)[1].t[-1]
        t_p = rescale_via_time_change(tr, p, convention="reversed")[1].t[-1]
        # mass decays, so F grows and the consistent map stretches time
        assert t_c > tr.times[-1] > t_p

    def test_needs_snapshots(self):
        tr = run_unrescaled(state(np.ones(64)), 0.1, 0.2)
        with pytest.raises(ValueError):
            rescale_via_time_change(tr, HALF)

    def test_rejects_vanishing_mass(self):
        tr = run_unrescaled(state(np.zeros(64)), 0.05, 1.0, snapshot_stride=1)
        with pytest.raises(ValueError, match="mass"):
            rescale_via_time_change(tr, HALF)


class TestRescaled:
    def test_rayleigh_quotient_derivation(self):
        # stationarity of the volume: d/dt int w^(N+1) = (N+1)/N int w (-P w + q w^N) = 0
        w, Pw, q, N = sp.symbols("w Pw q N", positive=True)
        dvol = (N + 1) / N * (-w * Pw + q * w ** (N + 1))
        qsol = sp.solve(sp.Eq(dvol, 0), q)[0]
        assert sp.simplify(qsol - w * Pw / w ** (N + 1)) == 0
        # and the exponent identity 2n/(n-2g) = N + 1
        n, g = sp.symbols("n g", positive=True)
        assert sp.simplify(2 * n / (n - 2 * g) - ((n + 2 * g) / (n - 2 * g) + 1)) == 0

    def test_constant_fixed_point(self):
        p = FlowParams(0.5, 3, q_c=0.8)
        c = 1.3
        assert rayleigh_q(np.full(64, c), p, G1) == pytest.approx(0.8 * c ** (1 - p.N_gamma))
        st = FlowState.from_conformal_factor(Field.constant(G1, c), p)
        new = step_rescaled_direct(st, 0.1)
        np.testing.assert_allclose(new.density.values, st.density.values, rtol=1e-12)

    def test_q_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            assert rayleigh_q(random_positive(G1, rng), HALF, G1) >= 0

    def test_volume_ledger(self):
        p = FlowParams(0.5, 3, q_c=0.3)
        tr = run_rescaled(state(cosine(1.0, 0.5), p), 0.01, 10.0)
        vol = tr.column("volume")
        assert len(vol) == 1001
        assert np.max(np.abs(vol - vol[0])) <= 1e-6 * vol[0]
        assert len(tr.q_values) == 1000 and len(tr.renorm_factors) == 1000

    def test_harnack_bounded_and_relaxes(self):
        w0 = Field(G1, cosine(1.0, 0.5))
        tr = run_rescaled(FlowState.from_conformal_factor(w0, HALF), 0.05, 50.0)
        H = tr.column("harnack_quotient")
        assert H[0] == pytest.approx(3.0)
        assert H.max() <= 1.5 * H[0]
        assert H[-1] <= 1.01

    def test_target_volume(self):
        st = state(cosine(1.0, 0.5))
        new = step_rescaled_direct(st, 0.1, target_volume=3.0)
        assert measure(new).volume == pytest.approx(3.0, rel=1e-13)


class TestODE:
    def test_extinction(self):
        traj = ode_mode(2.0, 1, 1.0, 1e-3, 4.0)
        assert traj.extinction_time == pytest.approx(2.0, rel=0.02)

    @pytest.mark.parametrize("N,U0,q", [(3.0, 1.0, 1.0), (1.5, 2.0, 0.5)])
    def test_extinction_general(self, N, U0, q):
        exact = N * U0 ** (N - 1) / (q * (N - 1))
        traj = ode_mode(N, 1, U0, 1e-3 * exact, 2 * exact, q=q)
        assert traj.extinction_time == pytest.approx(exact, rel=0.02)

    def test_matches_pde_on_constants(self):
        p = HALF.replace(q_c=1.0)
        traj = ode_mode(p.N_gamma, 1, 1.0, 0.01, 3.0)
        tr = run_unrescaled(state(np.ones(64), p), 0.01, 3.0)
        assert traj.extinction_time == tr.extinction_time
        np.testing.assert_allclose(traj.U ** 2, tr.column("mass") / (2 * math.pi), rtol=1e-12)

    def test_branch_substitution_symbolic(self):
        t, s = sp.symbols("t s", positive=True)
        N = 1 + s
        U = (s / N) ** (1 / s) * t ** (1 / s)
        # U > 0, so d/dt U^N = U is equivalent to log(d/dt U^N / U) = 0
        ratio = sp.diff(U**N, t) / U
        assert sp.simplify(sp.expand_log(sp.log(ratio), force=True)) == 0
        assert sp.simplify(U.subs(s, 1) - t / 2) == 0

    @pytest.mark.parametrize("N", [2.0, 3.0, 5.0 / 3.0])
    def test_branch_substitution_numeric(self, N):
        ts = np.linspace(0.01, 5, 200)
        assert np.max(np.abs(nontrivial_branch_residual(N, ts)) / nontrivial_branch(N, ts)) <= 1e-10

    def test_negative_sign_from_zero(self):
        traj = ode_mode(2.0, -1, 0.0, 1e-3, 2.0)
        assert traj.branch == "nontrivial"
        assert traj.U[-1] == pytest.approx(1.0, rel=0.01)
        assert np.all(np.diff(traj.U) > 0)

    def test_negative_sign_growth(self):
        traj = ode_mode(2.0, -1, 1.0, 1e-3, 2.0)
        # d/dt U^2 = U from U0 = 1 gives U = 1 + t/2
        assert traj.U[-1] == pytest.approx(2.0, rel=0.01)
        assert traj.branch is None

    @pytest.mark.parametrize("kw", [dict(U0=-1.0), dict(q_sign=0), dict(N=1.0)])
    def test_invalid(self, kw):
        args = dict(N=2.0, q_sign=1, U0=1.0, h=0.1, t_end=1.0)
        args.update(kw)
        with pytest.raises(ValueError):
            ode_mode(**args)
