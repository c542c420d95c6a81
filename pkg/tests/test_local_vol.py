import json
import math

import numpy as np
import pytest

from volsurf.black_scholes import put_price
from volsurf.local_vol import (
    DegenerateVarianceError,
    LocalVolGrid,
    calendar_butterfly_terms,
    cap_and_report,
    dupire_fd,
    dupire_iv,
    grid_from_json,
    grid_to_json,
    read_grid_json,
    write_grid_csv,
    write_grid_json,
)

S0 = 100.0


def bs_reduced_price(sigma):
    """Reduced put price surface p(T, k) for a flat Black-Scholes world.

    In reduced coordinates p(T,k) = k N(-d2) - S0 N(-d1) with
    d1 = (-log(k/S0) + w/2)/sqrt(w), w = sigma^2 T.
    """

    def surface(t, k):
        w = sigma**2 * np.asarray(t, dtype=float)
        kappa = np.log(np.asarray(k, dtype=float) / S0)
        d1 = (-kappa + 0.5 * w) / np.sqrt(w)
        d2 = d1 - np.sqrt(w)
        from scipy.special import ndtr

        return k * ndtr(-d2) - S0 * ndtr(-d1)

    return surface


def flat_theta_surface(sigma):
    def surface(t, kappa):
        t = np.asarray(t, dtype=float)
        theta = sigma**2 * t
        zero = np.zeros_like(theta)
        return theta, np.full_like(theta, sigma**2), zero, zero

    return surface


class TestDupireFd:
    def test_recovers_flat_bs_vol(self):
        surface = bs_reduced_price(0.2)
        t_axis = np.linspace(0.3, 2.5, 30)
        k_axis = np.linspace(70.0, 140.0, 30)
        grid = dupire_fd(surface, t_axis, k_axis)
        # interior cells only
        vals = grid.values[2:-2, 2:-2]
        mask = grid.mask[2:-2, 2:-2]
        assert mask.mean() > 0.95
        assert np.max(np.abs(vals[mask] - 0.2)) < 0.005

    def test_affine_in_k_fully_masked(self):
        grid = dupire_fd(
            lambda t, k: 1.0 + 0.3 * t + 0.01 * k,
            np.linspace(0.5, 2.0, 6),
            np.linspace(80.0, 120.0, 8),
        )
        assert not grid.mask.any()

    def test_constant_in_t_gives_zero_vol(self):
        grid = dupire_fd(
            lambda t, k: (k - 100.0) ** 2 + 0.0 * t,
            np.linspace(0.5, 2.0, 6),
            np.linspace(80.0, 120.0, 9),
        )
        assert grid.mask[:, 1:-1].all()
        assert np.max(grid.values[grid.mask]) == 0.0

    def test_exact_for_quadratic_k_linear_t(self):
        # p = a t + b (k - k0)^2 has dT p = a, dkk p = 2b exactly under FD
        a, b = 3.0, 0.004
        surface = lambda t, k: a * t + b * (k - 50.0) ** 2
        t_axis = np.linspace(0.5, 2.0, 7)
        k_axis = np.linspace(80.0, 120.0, 11)
        grid = dupire_fd(surface, t_axis, k_axis)
        kk = k_axis[1:-1]
        expected = np.sqrt(2.0 * a / (kk**2 * 2.0 * b))
        got = grid.values[:, 1:-1]
        assert np.allclose(got, expected[None, :], rtol=1e-10)

    def test_mesh_refinement_improves_accuracy(self):
        surface = bs_reduced_price(0.25)

        def max_err(n):
            t_axis = np.linspace(0.5, 2.0, n)
            k_axis = np.linspace(80.0, 125.0, n)
            grid = dupire_fd(surface, t_axis, k_axis)
            sel = grid.mask.copy()
            sel[: n // 4] = False
            sel[-(n // 4):] = False
            return np.max(np.abs(grid.values[sel] - 0.25))

        assert max_err(40) < max_err(20)

    def test_negative_numerator_masked(self):
        # strictly decreasing in T everywhere: arbitrageable surface
        grid = dupire_fd(
            lambda t, k: ((k - 100.0) ** 2 + 10.0) * (2.0 - t) * 0.001,
            np.linspace(0.5, 1.5, 5),
            np.linspace(90.0, 110.0, 7),
        )
        assert not grid.mask.any()
        assert grid.diagnostics["negative_numerator_cells"] > 0

    def test_too_small_grid_rejected(self):
        with pytest.raises(ValueError):
            dupire_fd(lambda t, k: t + k, [0.5, 1.0], [90.0, 100.0, 110.0])


class TestDupireIv:
    def test_flat_sigma_gives_flat_local_vol(self):
        grid = dupire_iv(
            flat_theta_surface(0.2),
            np.linspace(0.25, 2.0, 12),
            np.linspace(70.0, 140.0, 15),
            spot=S0,
        )
        assert grid.mask.all()
        assert np.allclose(grid.values, 0.2, atol=1e-12)

    def test_negative_calendar_masked_and_counted(self):
        def surface(t, kappa):
            t = np.asarray(t, dtype=float)
            theta = 0.04 * (2.5 - t)  # decreasing in maturity
            zero = np.zeros_like(theta)
            return theta, np.full_like(theta, -0.04), zero, zero

        grid = dupire_iv(
            surface, np.linspace(0.5, 2.0, 5), np.linspace(80.0, 120.0, 6), spot=S0
        )
        assert not grid.mask.any()
        assert grid.diagnostics["negative_calendar_cells"] == 30

    def test_degenerate_theta_raises(self):
        def surface(t, kappa):
            theta = np.zeros_like(np.asarray(t, dtype=float))
            return theta, theta, theta, theta

        with pytest.raises(DegenerateVarianceError):
            dupire_iv(surface, [0.5, 1.0, 1.5], [90.0, 100.0, 110.0], spot=S0)

    def test_butterfly_terms_flat_surface(self):
        cal, butt = calendar_butterfly_terms(
            theta=0.04, d_t=0.04, d_k=0.0, d_kk=0.0, kappa=0.3
        )
        assert cal == pytest.approx(0.04)
        assert butt == pytest.approx(1.0)


class TestGridOps:
    def make_grid(self):
        t = np.linspace(0.5, 2.0, 4)
        k = np.linspace(80.0, 120.0, 5)
        vals = np.full((4, 5), 0.2)
        mask = np.ones((4, 5), bool)
        return LocalVolGrid(t, k, vals, mask)

    def test_cap_noop(self):
        grid = self.make_grid()
        capped, summary = cap_and_report(grid, 2.0)
        assert summary["capped_fraction"] == 0.0
        assert np.array_equal(capped.values, grid.values)

    def test_cap_applies(self):
        grid = self.make_grid()
        grid.values[1, 1] = 3.5
        capped, summary = cap_and_report(grid, 2.0)
        assert capped.values[1, 1] == 2.0
        assert summary["capped_fraction"] == pytest.approx(1.0 / 20.0)
        assert summary["max"] == 3.5

    def test_fully_masked_summary(self):
        grid = self.make_grid()
        grid.mask[:] = False
        _, summary = cap_and_report(grid, 2.0)
        assert summary["masked_fraction"] == 1.0
        assert summary["min"] is None

    def test_fill_nearest_neighbor(self):
        grid = self.make_grid()
        grid.values[2, 3] = 0.9
        grid.mask[2, 2] = False
        grid.values[2, 2] = 0.0
        filled = grid.filled_values()
        # nearest valid neighbor is one of the adjacent cells
        assert filled[2, 2] in (0.2, 0.9)
        assert grid.values[2, 2] == 0.0  # original untouched

    def test_lookup_bilinear_and_clamped(self):
        grid = self.make_grid()
        grid.values[:, :] = np.linspace(0.1, 0.5, 5)[None, :]
        mid = grid.lookup(1.0, 90.0)
        assert mid == pytest.approx(0.2)
        # outside the box clamps to the edge value
        assert grid.lookup(0.1, 70.0) == pytest.approx(0.1)
        assert grid.lookup(5.0, 500.0) == pytest.approx(0.5)

    def test_json_round_trip(self, tmp_path):
        grid = self.make_grid()
        grid.mask[0, 0] = False
        path = tmp_path / "lv.json"
        write_grid_json(grid, path)
        back = read_grid_json(path)
        assert np.array_equal(back.values, grid.values)
        assert np.array_equal(back.mask, grid.mask)
        assert grid_to_json(back) == grid_to_json(grid)

    def test_json_version_check(self):
        with pytest.raises(ValueError, match="version"):
            grid_from_json({"version": "other/9"})

    def test_csv_export(self, tmp_path):
        grid = self.make_grid()
        path = tmp_path / "lv.csv"
        write_grid_csv(grid, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "T,k,local_vol,valid"
        assert len(lines) == 1 + 20


class TestCrossConsistency:
    def test_fd_matches_iv_on_flat_surface(self):
        t_axis = np.linspace(0.4, 2.0, 25)
        k_axis = np.linspace(75.0, 135.0, 25)
        fd = dupire_fd(bs_reduced_price(0.2), t_axis, k_axis)
        iv = dupire_iv(flat_theta_surface(0.2), t_axis, k_axis, spot=S0)
        # skip the first/last T rows where dT is one-sided (first order)
        both = fd.mask & iv.mask
        both[0] = False
        both[-1] = False
        assert both.mean() > 0.8
        rel = np.abs(fd.values[both] - iv.values[both]) / iv.values[both]
        assert np.max(rel) < 0.01
