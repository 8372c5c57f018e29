import numpy as np
import pytest

import weakiv
from weakiv.exceptions import ConfigError, Degenerate, DimensionError
from weakiv.reduced_form import (
    CellPartition,
    StackedSystem,
    cell_cross_moments,
    cell_sums,
    estimate_cell_covariance,
    fgls_reduced_form,
    join_psi,
    noise_covariance,
    ols_reduced_form,
    reduced_residual_moments,
    split_psi,
    structural_residual_moments,
)

from conftest import make_cell_dataset


class TestPsiLayout:
    def test_round_trip(self):
        gamma = np.array([1.0, 2.0, 3.0])
        pi = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        psi = join_psi(gamma, pi)
        g2, p2 = split_psi(psi, 3, 2)
        assert np.array_equal(g2, gamma)
        assert np.array_equal(p2, pi)

    def test_column_major_order(self):
        pi = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        psi = join_psi(np.zeros(3), pi)
        assert np.array_equal(psi[3:], [1.0, 3.0, 5.0, 2.0, 4.0, 6.0])


class TestCellPartition:
    def test_counts_and_index(self, weak_data):
        part = CellPartition.from_dataset(weak_data)
        assert part.counts.sum() == weak_data.dims.n
        assert np.array_equal(part.cells[part.index], weak_data.z)

    def test_design_cells_keep_empty(self):
        data = make_cell_dataset(0, n=40)
        design = weakiv.benchmark_design()
        part = CellPartition.from_dataset(data, design)
        assert part.cells.shape == (8, 3)
        assert part.counts.sum() == 40

    def test_alien_row_rejected(self):
        data = make_cell_dataset(0, n=40)
        z = data.z.copy()
        z[0] = [3.0, 1.0, 1.0]
        alien = weakiv.Dataset(y=data.y, x=data.x, z=z)
        with pytest.raises(ConfigError):
            CellPartition.from_dataset(alien, weakiv.benchmark_design())


class TestCellMoments:
    def test_cross_moments_match_loops(self):
        data = make_cell_dataset(1, n=120)
        part = CellPartition.from_dataset(data)
        moments = cell_cross_moments(part, data)
        w = np.column_stack([np.ones(data.dims.n), data.y, data.x])
        for c in range(part.cells.shape[0]):
            rows = w[part.index == c]
            assert np.allclose(moments[c], rows.T @ rows, atol=1e-10)

    def test_sums_match_loops(self):
        data = make_cell_dataset(2, n=90)
        part = CellPartition.from_dataset(data)
        sums = cell_sums(part, data)
        w = np.column_stack([data.y, data.x])
        for c in range(part.cells.shape[0]):
            assert np.allclose(sums[c], w[part.index == c].sum(axis=0), atol=1e-12)

    def test_residual_moments_match_explicit_residuals(self):
        data = make_cell_dataset(3, n=150)
        part = CellPartition.from_dataset(data)
        moments = cell_cross_moments(part, data)
        rng = np.random.default_rng(0)
        gamma = rng.normal(size=3)
        pi = rng.normal(size=(3, 1))
        beta = rng.normal(size=1)
        got_r = reduced_residual_moments(moments, part.counts, part.cells, gamma, pi)
        got_s = structural_residual_moments(moments, part.counts, part.cells, beta, pi)
        u = data.y - data.z @ gamma
        eps = data.y - data.x @ beta
        v = data.x - data.z @ pi
        for c in range(part.cells.shape[0]):
            m = part.index == c
            r = np.column_stack([u[m], v[m]])
            s = np.column_stack([eps[m], v[m]])
            assert np.allclose(got_r[c], r.T @ r / m.sum(), atol=1e-10)
            assert np.allclose(got_s[c], s.T @ s / m.sum(), atol=1e-10)


class TestStackedSystem:
    def test_structure(self):
        data = make_cell_dataset(4, n=30)
        sys = StackedSystem.from_dataset(data)
        n, d = data.dims.n, data.dims.d
        assert np.array_equal(sys.design, np.kron(np.eye(1 + d), data.z))
        assert np.array_equal(sys.response[:n], data.y)
        assert np.array_equal(sys.response[n:], data.x.ravel(order="F"))


class TestOls:
    def test_noiseless_exact(self):
        rng = np.random.default_rng(5)
        z = rng.choice([-1.0, 1.0], size=(60, 3))
        gamma = np.array([0.5, -1.0, 2.0])
        pi = rng.normal(size=(3, 2))
        data = weakiv.Dataset(y=z @ gamma, x=z @ pi, z=z)
        fit = ols_reduced_form(data)
        assert np.abs(fit.gamma - gamma).max() < 1e-12
        assert np.abs(fit.pi - pi).max() < 1e-12

    def test_two_point_hand_oracle(self):
        z = np.array([[1.0], [-1.0]])
        x = np.array([[2.0], [-2.0]])
        y = np.array([0.0, 0.0])
        fit = ols_reduced_form(weakiv.Dataset(y=y, x=x, z=z))
        assert np.allclose(fit.pi, [[2.0]])

    def test_outcome_scaling(self):
        data = make_cell_dataset(6, n=100)
        f1 = ols_reduced_form(data)
        f2 = ols_reduced_form(weakiv.Dataset(y=3.0 * data.y, x=data.x, z=data.z))
        assert np.allclose(f2.gamma, 3.0 * f1.gamma, atol=1e-12)
        assert np.array_equal(f2.pi, f1.pi)

    def test_shift_equivariance(self):
        data = make_cell_dataset(7, n=100)
        c = np.array([0.4, -0.8, 1.5])
        f1 = ols_reduced_form(data)
        f2 = ols_reduced_form(weakiv.Dataset(y=data.y + data.z @ c, x=data.x, z=data.z))
        assert np.abs(f2.gamma - (f1.gamma + c)).max() < 1e-10
        assert np.abs(f2.pi - f1.pi).max() < 1e-12

    def test_sandwich_matches_dense_oracle(self):
        data = make_cell_dataset(8, n=160)
        part = CellPartition.from_dataset(data)
        fit = ols_reduced_form(data)
        omega = estimate_cell_covariance(data, fit.psi, part)
        n, d, k = data.dims.n, data.dims.d, data.dims.k
        p = (1 + d) * k
        design = np.kron(np.eye(1 + d), data.z)
        meat = np.zeros((p, p))
        for i in range(n):
            gi = design[[a * n + i for a in range(1 + d)], :]
            meat += gi.T @ omega[part.index[i]] @ gi
        bread = np.kron(np.eye(1 + d), np.linalg.inv(data.z.T @ data.z))
        assert np.abs(fit.cond_cov - bread @ meat @ bread).max() < 1e-12


class TestCellCovariance:
    def test_constant_residuals(self):
        # psi = 0 makes the residuals equal the raw (y, x) values
        z = np.repeat(weakiv.benchmark_design().cells, 4, axis=0)
        n = z.shape[0]
        data = weakiv.Dataset(y=np.ones(n), x=np.full((n, 1), 2.0), z=z)
        part = CellPartition.from_dataset(data)
        omega = estimate_cell_covariance(data, np.zeros(6), part)
        assert np.allclose(omega, np.broadcast_to([[1.0, 2.0], [2.0, 4.0]], omega.shape))

    def test_sparse_cell_degenerate(self):
        z = np.repeat(weakiv.benchmark_design().cells, 2, axis=0)  # 2 < d + 2
        n = z.shape[0]
        data = weakiv.Dataset(y=np.zeros(n), x=np.zeros((n, 1)), z=z)
        with pytest.raises(Degenerate):
            estimate_cell_covariance(data, np.zeros(6), CellPartition.from_dataset(data))

    def test_large_sample_accuracy(self):
        dgp = weakiv.benchmark_dgp("weak", n=100_000, seed=9)
        data = weakiv.draw_dataset(dgp)
        # align cell order with the bundled design (np.unique sorts rows in
        # its own lexicographic order, which differs from the design listing)
        part = CellPartition.from_dataset(data, weakiv.benchmark_design())
        fit = ols_reduced_form(data, part)
        omega = estimate_cell_covariance(data, fit.psi, part)
        truth = weakiv.benchmark_spec().covariances
        # reduced-form residual covariance, not structural: lift by beta
        lift = np.array([[1.0, 1.0], [0.0, 1.0]])  # (u, v) = [[1, b],[0,1]] (eps, v), b=1
        truth_rf = np.einsum("ij,cjk,lk->cil", lift, truth, lift)
        rel = np.abs(omega - truth_rf) / np.maximum(1.0, np.abs(truth_rf))
        assert rel.max() < 0.05


class TestFgls:
    def test_matches_dense_wls_oracle(self):
        data = make_cell_dataset(10, n=240)
        part = CellPartition.from_dataset(data)
        gls = fgls_reduced_form(data)
        inv = np.linalg.inv(gls.cell_cov)
        n, d, k = data.dims.n, data.dims.d, data.dims.k
        p = (1 + d) * k
        sys = StackedSystem.from_dataset(data, part)
        a = np.zeros((p, p))
        b = np.zeros(p)
        for i in range(n):
            rows = [eq * n + i for eq in range(1 + d)]
            gi = sys.design[rows, :]
            wi = inv[part.index[i]]
            a += gi.T @ wi @ gi
            b += gi.T @ wi @ sys.response[rows]
        assert np.abs(gls.psi - np.linalg.solve(a, b)).max() < 1e-10
        assert np.abs(gls.cond_cov - np.linalg.inv(a)).max() < 1e-10

    def test_identical_cell_covariances_collapse_to_ols(self):
        data = make_cell_dataset(11, n=200)
        part = CellPartition.from_dataset(data)
        c = part.cells.shape[0]
        sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
        supplied = np.broadcast_to(sigma, (c, 2, 2)).copy()
        ols = ols_reduced_form(data, part)
        gls = fgls_reduced_form(data, partition=part, cell_cov=supplied)
        assert np.abs(gls.psi - ols.psi).max() < 1e-8

    def test_noiseless_exact(self):
        rng = np.random.default_rng(12)
        z = np.repeat(weakiv.benchmark_design().cells, 10, axis=0)
        gamma = rng.normal(size=3)
        pi = rng.normal(size=(3, 1))
        data = weakiv.Dataset(y=z @ gamma, x=z @ pi, z=z)
        # noiseless residuals make the cell covariances singular; supply weights
        part = CellPartition.from_dataset(data)
        supplied = np.broadcast_to(np.eye(2), (part.cells.shape[0], 2, 2)).copy()
        gls = fgls_reduced_form(data, partition=part, cell_cov=supplied)
        assert np.abs(gls.gamma - gamma).max() < 1e-10
        assert np.abs(gls.pi - pi).max() < 1e-10

    def test_efficiency_trace(self, weak_fits):
        ols, gls = weak_fits
        assert np.trace(gls.cond_cov) <= np.trace(ols.cond_cov)

    def test_method_tags(self, weak_fits):
        ols, gls = weak_fits
        assert ols.method == "ols"
        assert gls.method == "fgls"


class TestNoiseCovariance:
    def test_same_fit_gives_zero(self, weak_fits):
        ols, _ = weak_fits
        nm = noise_covariance(ols, ols)
        assert np.array_equal(nm.cov, np.zeros_like(nm.cov))
        stream = weakiv.root_stream(0)
        assert np.array_equal(nm.draw(stream, 5), np.zeros((5, nm.dim)))

    def test_difference_psd_and_factor(self, weak_fits):
        ols, gls = weak_fits
        nm = noise_covariance(ols, gls)
        assert np.linalg.eigvalsh(nm.cov).min() >= -1e-12
        assert np.abs(nm.factor @ nm.factor.T - nm.cov).max() < 1e-10

    def test_clipped_mass_small(self):
        for seed in range(5):
            data = make_cell_dataset(20 + seed, n=1000)
            ols = ols_reduced_form(data)
            gls = fgls_reduced_form(data)
            nm = noise_covariance(ols, gls)
            assert nm.clipped <= 0.01 * np.trace(nm.cov) + 1e-15

    def test_diagonal_arithmetic(self, weak_fits):
        import dataclasses

        ols, gls = weak_fits
        p = ols.psi.shape[0]
        a = dataclasses.replace(ols, cond_cov=2.0 * np.eye(p))
        b = dataclasses.replace(gls, cond_cov=1.0 * np.eye(p))
        nm = noise_covariance(a, b)
        assert np.allclose(nm.cov, np.eye(p))

    def test_draw_shape_and_determinism(self, weak_fits):
        ols, gls = weak_fits
        nm = noise_covariance(ols, gls)
        s = weakiv.root_stream(77)
        d1 = nm.draw(s, 9)
        d2 = nm.draw(s, 9)
        assert d1.shape == (9, nm.dim)
        assert np.array_equal(d1, d2)


class TestRankChecks:
    def test_collinear_instruments_rejected(self):
        rng = np.random.default_rng(13)
        z1 = rng.normal(size=(50, 1))
        z = np.column_stack([z1, z1])
        x = rng.normal(size=(50, 1))
        y = rng.normal(size=50)
        with pytest.raises(weakiv.RankDeficient):
            ols_reduced_form(weakiv.Dataset(y=y, x=x, z=z))
