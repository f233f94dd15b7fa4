"""Terrain generation, spline fitting/evaluation, excavation."""

import numpy as np
import pytest

from liftdig.terrain import (HeightField, TerrainGenParams, eval_soil,
                             excavate, fit_spline, load_terrain,
                             random_terrain, save_terrain)


class TestRandomTerrain:
    def test_flat_when_degenerate(self):
        params = TerrainGenParams(base_height=0.7, gradient_range=0.0,
                                  n_gaussians=0, seed=3)
        field = random_terrain(params)
        np.testing.assert_allclose(field.h, 0.7, atol=1e-15)

    def test_deterministic_per_seed(self):
        p = TerrainGenParams(seed=42)
        f1 = random_terrain(p)
        f2 = random_terrain(p)
        np.testing.assert_array_equal(f1.h, f2.h)
        f3 = random_terrain(TerrainGenParams(seed=43))
        assert not np.array_equal(f1.h, f3.h)

    def test_single_gaussian_closed_form(self):
        # One bump of known amplitude/center/width on a flat base.
        params = TerrainGenParams(base_height=1.0, gradient_range=0.0,
                                  n_gaussians=1, amplitude_range=(0.5, 0.5),
                                  sigma_range=(1.0, 1.0), extent=8.0, seed=0)
        field = random_terrain(params)
        rng = np.random.default_rng(0)
        amp = rng.uniform(0.5, 0.5)      # replicate the draw order
        center = rng.uniform(0.0, 8.0)
        assert amp == 0.5
        x = field.x
        expected = 1.0 + 0.5 * np.exp(-((x - center) ** 2) / 2.0)
        np.testing.assert_allclose(field.h, expected, atol=1e-12)
        i_c = int(round(center / params.dx))
        assert abs(field.h[i_c] - 1.5) < 1e-3
        for xs in (center - 3.0, center + 3.0):
            j = int(round(xs / params.dx))
            if 0 <= j < field.h.size:
                assert abs(field.h[j] - 1.0) < 0.01 * 1.0 + 0.01


class TestSplineFitEval:
    def test_flat(self):
        field = HeightField(0.0, 0.1, np.full(41, 2.5))
        spline = fit_spline(field)
        for x in np.linspace(0.0, 4.0, 17):
            soil = eval_soil(spline, x)
            assert abs(soil.height - 2.5) < 1e-12
            assert abs(soil.slope) < 1e-12
            assert abs(soil.curvature) < 1e-12

    def test_linear_ramp(self):
        x = 0.1 * np.arange(41)
        field = HeightField(0.0, 0.1, 2.0 * x)
        spline = fit_spline(field)
        for xq in np.linspace(0.05, 3.95, 21):
            soil = eval_soil(spline, xq)
            assert abs(soil.height - 2.0 * xq) < 1e-9
            assert abs(soil.slope - 2.0) < 1e-9
            assert abs(soil.curvature) < 1e-8

    def test_quadratic_second_derivative(self):
        x = np.linspace(0.0, 4.0, 41)
        field = HeightField(0.0, 0.1, x ** 2)
        spline = fit_spline(field)
        for xq in np.linspace(1.5, 2.5, 11):
            soil = eval_soil(spline, xq)
            assert abs(soil.curvature - 2.0) < 1e-3

    def test_interpolates_knots(self):
        rng = np.random.default_rng(1)
        field = HeightField(-2.0, 0.25, rng.standard_normal(30))
        spline = fit_spline(field)
        for xk, hk in zip(field.x, field.h):
            assert abs(eval_soil(spline, xk).height - hk) < 1e-9

    def test_c2_continuity_at_interior_knots(self):
        rng = np.random.default_rng(2)
        field = HeightField(0.0, 0.5, rng.standard_normal(12))
        spline = fit_spline(field)
        # A C2 break would show as an O(1) jump; the finite eps itself
        # contributes O(|s'| * eps) to the differences.
        eps = 1e-7
        for xk in field.x[1:-1]:
            left = eval_soil(spline, xk - eps)
            right = eval_soil(spline, xk + eps)
            assert abs(left.height - right.height) < 1e-5
            assert abs(left.slope - right.slope) < 1e-4
            assert abs(left.curvature - right.curvature) < 1e-3

    def test_out_of_domain_clamped(self):
        field = HeightField(0.0, 0.1, np.full(11, 1.0))
        spline = fit_spline(field)
        soil = eval_soil(spline, -5.0)
        assert soil.clamped
        assert abs(soil.height - 1.0) < 1e-12
        assert not eval_soil(spline, 0.5).clamped

    def test_degenerate_grid_rejected(self):
        with pytest.raises(ValueError):
            HeightField(0.0, 0.0, np.zeros(10))
        with pytest.raises(ValueError):
            HeightField(0.0, 0.1, np.zeros(3))


class TestExcavate:
    def test_path_above_surface_unchanged(self):
        field = HeightField(0.0, 0.1, np.full(41, 1.0))
        out = excavate(field, [(0.0, 2.0), (4.0, 2.0)])
        np.testing.assert_array_equal(out.h, field.h)

    def test_flat_pass_envelope(self):
        field = HeightField(0.0, 0.1, np.full(41, 1.0))
        out = excavate(field, [(-1.0, 0.8), (5.0, 0.8)])
        np.testing.assert_allclose(out.h, 0.8, atol=1e-12)

    def test_v_pass_against_per_node_oracle(self):
        rng = np.random.default_rng(3)
        field = HeightField(0.0, 0.1, 1.0 + 0.1 * rng.standard_normal(41))
        path = [(0.5, 1.2), (2.0, 0.5), (3.5, 1.2)]
        out = excavate(field, path)
        # Brute-force oracle: per node, scan all segments for coverage.
        for j, xj in enumerate(field.x):
            expect = field.h[j]
            for (x1, z1), (x2, z2) in zip(path[:-1], path[1:]):
                lo, hi = min(x1, x2), max(x1, x2)
                if lo <= xj <= hi and x2 != x1:
                    zj = z1 + (xj - x1) * (z2 - z1) / (x2 - x1)
                    expect = min(expect, zj)
            assert abs(out.h[j] - expect) < 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        field = HeightField(0.0, 0.1, 1.0 + 0.2 * rng.standard_normal(41))
        path = [(0.2, 0.9), (1.7, 0.6), (3.9, 1.1)]
        once = excavate(field, path)
        twice = excavate(once, path)
        np.testing.assert_array_equal(once.h, twice.h)

    def test_never_raises_nodes(self):
        rng = np.random.default_rng(5)
        field = HeightField(0.0, 0.1, rng.standard_normal(41))
        path = [(rng.uniform(0, 4), rng.uniform(-2, 2)) for _ in range(10)]
        out = excavate(field, path)
        assert np.all(out.h <= field.h + 1e-15)

    def test_empty_path_unchanged(self):
        field = HeightField(0.0, 0.1, np.full(41, 1.0))
        out = excavate(field, [])
        np.testing.assert_array_equal(out.h, field.h)


class TestTerrainIo:
    def test_roundtrip(self, tmp_path):
        params = TerrainGenParams(seed=7)
        field = random_terrain(params)
        path = tmp_path / "terrain.csv"
        save_terrain(field, path, gen_params=params)
        loaded = load_terrain(path)
        np.testing.assert_array_equal(loaded.h, field.h)
        assert loaded.x0 == field.x0
        assert loaded.dx == field.dx
        assert (tmp_path / "terrain.csv.json").exists()

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            load_terrain(p)
