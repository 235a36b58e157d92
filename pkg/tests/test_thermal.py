"""Thermal solver tests against closed-form conduction solutions.

Oracles used here:
  * the double-ellipsoid source has a closed-form peak and a known total
    deposited power (efficiency * laser power over the heated half-space),
  * a cosine mode on an insulated bar decays as exp(-kappa pi^2 t / L^2),
  * an isolated Gaussian bump spreads with variance sigma0^2 + 2 kappa t,
  * an insulated box with no source conserves sensible heat exactly.
"""

import math

import numpy as np
import pytest

from dedrom.errors import ConfigError
from dedrom.grid import StructuredGrid
from dedrom.thermal import (ThermalConfig, boundary_flux, goldak_flux,
                            simulate_thermal, total_energy)

from conftest import make_constant_material

STEFAN_BOLTZMANN = 5.670374419e-8


def insulated_config(**kw):
    kw.setdefault("power", 0.0)
    kw.setdefault("h_conv", 0.0)
    return ThermalConfig(**kw)


class TestGoldakSource:
    def test_peak_value_closed_form(self):
        cfg = ThermalConfig()
        peak = goldak_flux(cfg.x_start, cfg.y_center, 0.0, 0.0, cfg, 1.0)
        expect = (6.0 * math.sqrt(3.0) * cfg.efficiency * cfg.power * cfg.f_f
                  / (cfg.a_f * cfg.b * cfg.c * math.pi ** 1.5))
        assert peak == pytest.approx(expect, rel=1e-12)
        assert peak == pytest.approx(1.8525e10, rel=1e-3)

    def test_halfspace_integral_equals_absorbed_power(self):
        # Trapezoid quadrature over a box that captures the exp(-3 r^2)
        # tails on both ellipsoid halves; z covers only the metal side.
        cfg = ThermalConfig()
        x = np.linspace(-4 * cfg.a_r, 4 * cfg.a_f, 241)
        y = np.linspace(-4 * cfg.b, 4 * cfg.b, 161)
        z = np.linspace(0.0, 4 * cfg.c, 161)
        q = goldak_flux(x[:, None, None], y[None, :, None], z[None, None, :],
                        0.0, cfg, 1.0)
        total = np.trapezoid(np.trapezoid(np.trapezoid(q, z), y), x)
        assert total == pytest.approx(cfg.efficiency * cfg.power, rel=1e-2)

    def test_source_switches_off_past_track_end(self):
        cfg = ThermalConfig()  # speed 0.015 m/s
        track = 0.05
        t_past = track / cfg.speed + 0.1
        q = goldak_flux(0.04, 0.0, 0.0, t_past, cfg, track)
        assert np.all(q == 0.0)
        assert np.all(goldak_flux(0.0, 0.0, 0.0, -1.0, cfg, track) == 0.0)

    def test_center_moves_with_speed(self):
        cfg = ThermalConfig()
        t = 1.5
        xc = cfg.x_start + cfg.speed * t
        on_center = goldak_flux(xc, 0.0, 0.0, t, cfg, 1.0)
        off_center = goldak_flux(xc + cfg.a_f, 0.0, 0.0, t, cfg, 1.0)
        assert on_center > off_center
        assert off_center == pytest.approx(on_center * math.exp(-3.0),
                                           rel=1e-12)

    def test_front_rear_asymmetry(self):
        cfg = ThermalConfig()
        ahead = goldak_flux(cfg.a_f, 0.0, 0.0, 0.0, cfg, 1.0)
        behind = goldak_flux(-cfg.a_r, 0.0, 0.0, 0.0, cfg, 1.0)
        ratio = (cfg.f_f / cfg.a_f) / (cfg.f_r / cfg.a_r)
        assert ahead / behind == pytest.approx(ratio, rel=1e-12)


class TestBoundaryFlux:
    def test_zero_at_ambient(self, inconel):
        assert boundary_flux(293.15, inconel, 10.0, 293.15) == 0.0

    def test_value_at_table_breakpoint(self, inconel):
        # emissivity(1609 K) is a stored table row, so the hand formula
        # needs no interpolation.
        T = 1609.0
        got = boundary_flux(T, inconel, 10.0, 293.15)
        expect = (10.0 * (T - 293.15)
                  + 0.329 * STEFAN_BOLTZMANN * (T ** 4 - 293.15 ** 4))
        assert got == pytest.approx(expect, rel=1e-12)

    def test_pure_convection_linear(self):
        mat = make_constant_material(emissivity=0.0)
        assert boundary_flux(393.15, mat, 7.0, 293.15) == pytest.approx(700.0)


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [
        dict(power=-1.0),
        dict(efficiency=1.5),
        dict(speed=-2.0),
        dict(t_end=-1.0),
        dict(dt_readout=0.05, dt_solver=0.02),
        dict(f_f=1.0, f_r=0.5),
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            ThermalConfig(**kw)

    def test_with_power_returns_modified_copy(self):
        cfg = ThermalConfig()
        quiet = cfg.with_power(0.0)
        assert quiet.power == 0.0 and cfg.power == 1000.0
        assert quiet.speed == cfg.speed

    def test_readout_counts(self):
        cfg = ThermalConfig()
        assert cfg.n_readout == 201
        assert cfg.steps_per_readout == 5


def cosine_decay_error(axis, n, t_end, dt_solver):
    """Max abs error vs the analytic decaying cosine along one axis."""
    mat = make_constant_material()  # kappa = 20 / (8000*500) = 5e-6
    kappa = 20.0 / (8000.0 * 500.0)
    L = 0.05
    dims = [2, 2, 2]
    lens = [0.01, 0.01, 0.01]
    dims[axis] = n
    lens[axis] = L
    grid = StructuredGrid(dims[0], dims[1], dims[2],
                          lens[0], lens[1], lens[2])
    cfg = insulated_config(t_end=t_end, dt_readout=t_end, dt_solver=dt_solver)
    centers = grid.cell_centers()[axis]
    T0, A = 500.0, 100.0
    T_init = T0 + A * np.cos(np.pi * centers / L)
    traj = simulate_thermal(cfg, mat, grid, T_init=T_init.ravel())
    decay = math.exp(-kappa * math.pi ** 2 * t_end / L ** 2)
    exact = T0 + A * decay * np.cos(np.pi * centers / L)
    return float(np.max(np.abs(traj.data[-1, :, 0] - exact.ravel()))), A


class TestConduction:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_cosine_mode_decay_within_1_percent(self, axis):
        err, A = cosine_decay_error(axis, 48, t_end=5.0, dt_solver=0.025)
        assert err <= 0.01 * A

    def test_spatial_order_near_second(self):
        errs = [cosine_decay_error(0, n, t_end=5.0, dt_solver=0.0125)[0]
                for n in (8, 16, 32)]
        orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert min(orders) >= 1.8

    def test_time_stepping_first_order(self):
        # Same spatial grid throughout, so step-halving differences
        # isolate the time integrator; backward Euler gives order one.
        mat = make_constant_material(k=20.0, rho=1000.0, cp=50.0)
        grid = StructuredGrid(32, 2, 2, 0.05, 0.01, 0.01)
        x = grid.cell_centers()[0]
        T_init = (500.0 + 100.0 * np.cos(np.pi * x / 0.05)).ravel()
        probes = []
        for dt in (0.05, 0.025, 0.0125):
            cfg = insulated_config(t_end=0.4, dt_readout=0.4, dt_solver=dt)
            traj = simulate_thermal(cfg, mat, grid, T_init=T_init)
            probes.append(traj.data[-1, 0, 0])
        d1 = abs(probes[0] - probes[1])
        d2 = abs(probes[1] - probes[2])
        order = math.log2(d1 / d2)
        assert 0.85 <= order <= 1.25

    def test_gaussian_bump_spreads_analytically(self):
        # Point-release solution: variance grows by 2 kappa t per axis.
        # Walls are insulated and ~3 sigma away, so the free-space formula
        # holds in the interior to well under the tolerance.
        mat = make_constant_material()
        kappa = 5e-6
        n, L = 28, 0.02
        grid = StructuredGrid(n, n, n, L, L, L)
        xg, yg, zg = grid.cell_centers()
        r2 = (xg - L / 2) ** 2 + (yg - L / 2) ** 2 + (zg - L / 2) ** 2
        T0, A, s0 = 293.15, 200.0, 2.2e-3
        T_init = T0 + A * np.exp(-r2 / (2 * s0 ** 2))
        t_end = 0.4
        cfg = insulated_config(t_end=t_end, dt_readout=t_end, dt_solver=0.01)
        traj = simulate_thermal(cfg, mat, grid, T_init=T_init.ravel())
        s2 = s0 ** 2 + 2 * kappa * t_end
        exact = T0 + A * (s0 ** 2 / s2) ** 1.5 * np.exp(-r2 / (2 * s2))
        err = np.max(np.abs(traj.data[-1, :, 0] - exact.ravel()))
        assert err <= 0.025 * A

    def test_energy_conserved_over_200_steps(self):
        mat = make_constant_material()
        grid = StructuredGrid(16, 8, 8, 0.02, 0.01, 0.01)
        rng = np.random.default_rng(11)
        T_init = rng.uniform(400.0, 800.0, size=grid.n_cells)
        cfg = insulated_config(t_end=4.0, dt_readout=1.0, dt_solver=0.02)
        traj = simulate_thermal(cfg, mat, grid, T_init=T_init)
        e0 = total_energy(traj.data[0, :, 0], mat, grid, cfg.t_ambient)
        e1 = total_energy(traj.data[-1, :, 0], mat, grid, cfg.t_ambient)
        assert abs(e1 - e0) <= 1e-3 * abs(e0)

    def test_max_principle_no_source(self):
        mat = make_constant_material()
        grid = StructuredGrid(12, 6, 6, 0.02, 0.01, 0.01)
        rng = np.random.default_rng(12)
        T_init = rng.uniform(300.0, 800.0, size=grid.n_cells)
        cfg = insulated_config(t_end=2.0, dt_readout=0.5, dt_solver=0.02)
        traj = simulate_thermal(cfg, mat, grid, T_init=T_init)
        assert traj.data.min() >= T_init.min() - 1e-9
        assert traj.data.max() <= T_init.max() + 1e-9

    def test_ambient_equilibrium_is_exact(self, inconel):
        grid = StructuredGrid(10, 5, 5, 0.02, 0.01, 0.01)
        cfg = ThermalConfig(t_end=1.0, dt_readout=0.5)
        quiet = simulate_thermal(cfg.with_power(0.0), inconel, grid)
        assert np.all(quiet.data == cfg.t_ambient)


class TestSymmetry:
    def test_half_model_matches_full_model(self):
        # Half model: track on the adiabatic y = 0 plane.  Full model:
        # doubled width, track at mid-width, symmetry plane disabled.
        mat = make_constant_material(emissivity=0.0)
        half_grid = StructuredGrid(20, 6, 4, 0.02, 0.006, 0.008)
        full_grid = StructuredGrid(20, 12, 4, 0.02, 0.012, 0.008)
        common = dict(t_end=1.0, dt_readout=0.5, dt_solver=0.02, h_conv=10.0)
        half_cfg = ThermalConfig(**common)
        full_cfg = ThermalConfig(y_center=0.006, symmetry_plane=False,
                                 **common)
        half = simulate_thermal(half_cfg, mat, half_grid)
        full = simulate_thermal(full_cfg, mat, full_grid)
        T_half = half.data[-1, :, 0].reshape(half_grid.shape)
        T_full = full.data[-1, :, 0].reshape(full_grid.shape)
        upper = T_full[:, 6:, :]
        mirror = T_full[:, 5::-1, :]
        span = T_half.max() - half_cfg.t_ambient
        assert np.max(np.abs(upper - T_half)) <= 1e-6 * span
        assert np.max(np.abs(upper - mirror)) <= 1e-6 * span


class TestDeskScenario:
    def test_peak_and_floor_regression(self, desk_dataset):
        T = desk_dataset["T_full"]
        assert 850.0 <= T.max() <= 880.0
        assert T.min() == pytest.approx(293.15, abs=1e-9)

    def test_quiet_run_stays_ambient(self, desk_dataset):
        assert np.all(desk_dataset["T_quiet"] == 293.15)
        assert np.all(desk_dataset["S_quiet"] == 0.0)

    def test_heating_then_cooling_at_track_midpoint(self, desk_dataset):
        # The probe column under the track mid-point heats while the source
        # approaches and cools after it leaves the domain.
        times = desk_dataset["times"]
        coords = desk_dataset["coords"]
        mid = np.argmin(np.abs(coords[:, 0] - 0.025)
                        + coords[:, 1] + coords[:, 2])
        trace = desk_dataset["T_laser"][:, mid]
        t_peak = times[np.argmax(trace)]
        assert 1.0 < t_peak < 5.0
        assert trace[-1] < trace.max()
        assert trace[0] == pytest.approx(293.15)
