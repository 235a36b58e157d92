"""Transient nonlinear heat conduction with a moving double-ellipsoid source.

Solves

    rho(T) cp*(T) dT/dt = div(k(T) grad T) + Q(x, t)

on a structured grid with cell-centered finite volumes, harmonic-mean face
conductivities, and backward-Euler time stepping.  cp* is the effective
specific heat including the latent-heat bump; k carries the pool-stirring
enhancement.  Nonlinear coefficients are resolved by Picard iteration on
lagged values; each pass solves one symmetric positive-definite system by
preconditioned conjugate gradients.

Boundary conditions: the symmetry plane y = 0 is adiabatic, every other face
loses heat by convection and radiation,

    q'' = -h (T_s - T_amb) - eps(T_s) sigma (T_s^4 - T_amb^4).

Convection is taken implicitly (it only adds to the matrix diagonal);
radiation uses the lagged surface temperature inside the Picard loop, which
keeps the system linear and symmetric.

The source is the double-ellipsoid flux with front and rear branches

    Q = 6 sqrt(3) eta P F / (a b c pi^1.5)
        * exp(-3 ((x - x_c)^2/a^2 + (y - y_c)^2/b^2 + z^2/c^2)),

(a, F) = (a_f, F_f) ahead of the center and (a_r, F_r) behind, F_f + F_r = 2
so the half-space below the surface receives eta*P.  The center rides along
y = y_c on the top surface, x_c = x_start + speed * t, and switches off once
it passes the track end.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .errors import ConfigError, StepFailureError
from .grid import StructuredGrid
from .material import STEFAN_BOLTZMANN
from .trajectory import FieldTrajectory


@dataclass
class ThermalConfig:
    """Scenario parameters for one single-track thermal run.

    Lengths in m, times in s, power in W, temperatures in K.
    """

    power: float = 1000.0
    efficiency: float = 0.4
    speed: float = 0.015
    a_f: float = 0.003
    a_r: float = 0.008
    b: float = 0.003
    c: float = 0.003
    f_f: float = 0.67
    f_r: float = 1.33
    h_conv: float = 10.0
    t_ambient: float = 293.15
    t_end: float = 20.0
    dt_readout: float = 0.1
    dt_solver: float = 0.02
    picard_tol: float = 1.0e-3
    picard_max_iters: int = 50
    cg_rtol: float = 1.0e-9
    x_start: float = 0.0
    y_center: float = 0.0
    track_length: float | None = None
    symmetry_plane: bool = True

    def __post_init__(self):
        for name in ("a_f", "a_r", "b", "c"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"source length {name} must be positive")
        if self.power < 0:
            raise ConfigError("power must be non-negative")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("efficiency must lie in [0, 1]")
        if self.speed <= 0:
            raise ConfigError("speed must be positive")
        if abs(self.f_f + self.f_r - 2.0) > 1.0e-12:
            raise ConfigError(
                f"f_f + f_r must equal 2 (got {self.f_f + self.f_r!r})")
        if min(self.f_f, self.f_r) <= 0:
            raise ConfigError("f_f and f_r must be positive")
        if self.h_conv < 0:
            raise ConfigError("h_conv must be non-negative")
        if self.t_ambient <= 0:
            raise ConfigError("t_ambient must be positive")
        for name in ("t_end", "dt_readout", "dt_solver"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.picard_max_iters < 1:
            raise ConfigError("picard_max_iters must be >= 1")
        if not 0 < self.cg_rtol < 1e-2:
            raise ConfigError("cg_rtol must lie in (0, 1e-2)")
        for outer, inner in (("t_end", "dt_readout"), ("dt_readout", "dt_solver")):
            ratio = getattr(self, outer) / getattr(self, inner)
            if abs(ratio - round(ratio)) > 1.0e-9 * max(1.0, ratio):
                raise ConfigError(f"{outer} must be an integer multiple of {inner}")

    @property
    def n_readout(self):
        """Number of stored snapshots, including t = 0."""
        return int(round(self.t_end / self.dt_readout)) + 1

    @property
    def steps_per_readout(self):
        return int(round(self.dt_readout / self.dt_solver))

    def with_power(self, power):
        return replace(self, power=power)


def goldak_flux(x, y, z, t, config, track_length):
    """Volumetric source [W/m^3] at position(s) (x, y, z) and time t.

    z is depth below the heated surface.  Returns zeros once the center has
    passed ``track_length``.  Broadcasts over array positions.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    xc = config.x_start + config.speed * t
    if t < 0 or xc > track_length:
        return np.zeros(np.broadcast(x, y, z).shape)
    ahead = (x - xc) >= 0.0
    a = np.where(ahead, config.a_f, config.a_r)
    f = np.where(ahead, config.f_f, config.f_r)
    pref = (6.0 * math.sqrt(3.0) * config.efficiency * config.power * f
            / (a * config.b * config.c * math.pi ** 1.5))
    arg = (((x - xc) / a) ** 2
           + ((y - config.y_center) / config.b) ** 2
           + (z / config.c) ** 2)
    return pref * np.exp(-3.0 * arg)


def boundary_flux(T_surf, material, h_conv, t_ambient):
    """Outward-positive surface loss q'' [W/m^2] at surface temperature(s).

    Combines convection h*(T_s - T_amb) and gray-body radiation
    eps(T_s)*sigma*(T_s^4 - T_amb^4).  Negative of the flux entering the
    body; zero at T_s = T_amb.
    """
    T_surf = np.asarray(T_surf, dtype=float)
    eps = material.emissivity(T_surf)
    q = (h_conv * (T_surf - t_ambient)
         + eps * STEFAN_BOLTZMANN * (T_surf ** 4 - t_ambient ** 4))
    return q if q.ndim else float(q)


def total_energy(T, material, grid, t_ref):
    """Sensible heat content sum(rho(T) cp(T) (T - t_ref) V) in joules."""
    T = np.asarray(T, dtype=float).reshape(grid.shape)
    rho = material.rho(T)
    cp = material.cp(T)
    return float(np.sum(rho * cp * (T - t_ref) * grid.cell_volumes()))


class ThermalSolver:
    """Backward-Euler finite-volume stepper bound to one grid and material.

    Face geometry and the sparse matrix sparsity pattern are precomputed
    once; ``advance_step`` only refreshes coefficient values.
    """

    def __init__(self, grid: StructuredGrid, material, config: ThermalConfig):
        self.grid = grid
        self.material = material
        self.config = config
        self.track_length = (config.track_length if config.track_length is not None
                             else grid.lx)
        self.last_step_info = {}
        self._build_geometry()

    def _build_geometry(self):
        g = self.grid
        nx, ny, nz = g.shape
        self.cell_volume = g.cell_volumes()
        idx = np.arange(g.n_cells).reshape(g.shape)

        # Internal faces per axis: (left cell, right cell, area, half widths).
        def axis_faces(axis):
            if axis == 0:
                lo, hi = idx[:-1, :, :], idx[1:, :, :]
                area = (g.dy[None, :, None] * g.dz[None, None, :]
                        * np.ones((nx - 1, 1, 1)))
                wl = np.broadcast_to(0.5 * g.dx[:-1, None, None], lo.shape)
                wr = np.broadcast_to(0.5 * g.dx[1:, None, None], lo.shape)
            elif axis == 1:
                lo, hi = idx[:, :-1, :], idx[:, 1:, :]
                area = (g.dx[:, None, None] * g.dz[None, None, :]
                        * np.ones((1, ny - 1, 1)))
                wl = np.broadcast_to(0.5 * g.dy[None, :-1, None], lo.shape)
                wr = np.broadcast_to(0.5 * g.dy[None, 1:, None], lo.shape)
            else:
                lo, hi = idx[:, :, :-1], idx[:, :, 1:]
                area = (g.dx[:, None, None] * g.dy[None, :, None]
                        * np.ones((1, 1, nz - 1)))
                wl = np.broadcast_to(0.5 * g.dz[None, None, :-1], lo.shape)
                wr = np.broadcast_to(0.5 * g.dz[None, None, 1:], lo.shape)
            return (lo.ravel(), hi.ravel(), area.ravel(),
                    wl.ravel(), wr.ravel())

        lo_list, hi_list, area_list, wl_list, wr_list = [], [], [], [], []
        for axis in range(3):
            if g.shape[axis] > 1:
                lo, hi, area, wl, wr = axis_faces(axis)
                lo_list.append(lo)
                hi_list.append(hi)
                area_list.append(area)
                wl_list.append(wl)
                wr_list.append(wr)
        self.face_lo = np.concatenate(lo_list) if lo_list else np.zeros(0, int)
        self.face_hi = np.concatenate(hi_list) if hi_list else np.zeros(0, int)
        self.face_area = np.concatenate(area_list) if area_list else np.zeros(0)
        self.face_wl = np.concatenate(wl_list) if wl_list else np.zeros(0)
        self.face_wr = np.concatenate(wr_list) if wr_list else np.zeros(0)

        # Exchange faces: cell index and face area for every external face
        # that loses heat.  The symmetry plane y=0 is adiabatic when enabled.
        bnd_cells, bnd_areas = [], []

        def add_face(cells, areas):
            bnd_cells.append(cells.ravel())
            bnd_areas.append(areas.ravel())

        area_x = g.dy[:, None] * g.dz[None, :] * np.ones((ny, nz))
        add_face(idx[0, :, :], area_x)
        add_face(idx[-1, :, :], area_x)
        area_y = g.dx[:, None] * g.dz[None, :] * np.ones((nx, nz))
        if not self.config.symmetry_plane:
            add_face(idx[:, 0, :], area_y)
        add_face(idx[:, -1, :], area_y)
        area_z = g.dx[:, None] * g.dy[None, :] * np.ones((nx, ny))
        add_face(idx[:, :, 0], area_z)
        add_face(idx[:, :, -1], area_z)
        self.bnd_cells = np.concatenate(bnd_cells)
        self.bnd_areas = np.concatenate(bnd_areas)
        self._centers = np.meshgrid(g.xc, g.yc, g.zc, indexing="ij")

        n = g.n_cells
        self._rows = np.concatenate([np.arange(n), self.face_lo, self.face_hi])
        self._cols = np.concatenate([np.arange(n), self.face_hi, self.face_lo])

    def source_field(self, t):
        """Cell-center source values [W/m^3] at time t, grid shaped."""
        xg, yg, zg = self._centers
        return goldak_flux(xg, yg, zg, t, self.config, self.track_length)

    def _face_transmissibility(self, k_cell):
        """tau = area / (wl/k_lo + wr/k_hi) for every internal face."""
        k_flat = k_cell.ravel()
        k_lo = k_flat[self.face_lo]
        k_hi = k_flat[self.face_hi]
        if np.any(k_lo <= 0) or np.any(k_hi <= 0):
            raise StepFailureError(
                "non-positive conductivity encountered",
                {"min_k": float(min(k_lo.min(), k_hi.min()))})
        return self.face_area / (self.face_wl / k_lo + self.face_wr / k_hi)

    def advance_step(self, T_n, dt, t_new):
        """One backward-Euler step from T_n to the state at t_new.

        Picard-iterates on lagged coefficients until the largest cell update
        falls below picard_tol; raises StepFailureError with diagnostics if
        the loop does not converge or the inner CG solve fails.  Returns the
        new grid-shaped temperature field; per-step energy bookkeeping is
        left in ``last_step_info``.
        """
        cfg = self.config
        g = self.grid
        n = g.n_cells
        T_n = np.asarray(T_n, dtype=float).reshape(g.shape)
        vol = self.cell_volume.ravel()
        q_src = self.source_field(t_new).ravel()
        source_power = float(np.sum(q_src * vol))

        T_lag = T_n.copy()
        T_new = T_n.copy()
        cg_iters_total = 0
        for it in range(1, cfg.picard_max_iters + 1):
            k_cell = self.material.conductivity(T_lag)
            tau = self._face_transmissibility(k_cell)
            cap = (self.material.volumetric_heat_capacity(T_lag).ravel()
                   * vol / dt)

            diag = cap.copy()
            np.add.at(diag, self.face_lo, tau)
            np.add.at(diag, self.face_hi, tau)
            rhs = cap * T_n.ravel() + q_src * vol

            # Convection enters the diagonal; radiation is lagged.
            T_bnd = T_lag.ravel()[self.bnd_cells]
            np.add.at(diag, self.bnd_cells, cfg.h_conv * self.bnd_areas)
            eps = self.material.emissivity(T_bnd)
            rad = (eps * STEFAN_BOLTZMANN
                   * (T_bnd ** 4 - cfg.t_ambient ** 4) * self.bnd_areas)
            np.add.at(rhs, self.bnd_cells,
                      cfg.h_conv * self.bnd_areas * cfg.t_ambient - rad)

            vals = np.concatenate([diag, -tau, -tau])
            A = sparse.coo_matrix((vals, (self._rows, self._cols)),
                                  shape=(n, n)).tocsr()

            M = sparse.diags(1.0 / A.diagonal())
            iters = [0]

            def count(_):
                iters[0] += 1

            x, info = cg(A, rhs, x0=T_new.ravel(), rtol=cfg.cg_rtol, atol=0.0,
                         M=M, callback=count)
            if info != 0:
                raise StepFailureError(
                    "conjugate-gradient solve failed",
                    {"time": t_new, "cg_info": int(info),
                     "picard_iter": it})
            cg_iters_total += iters[0]
            T_next = x.reshape(g.shape)
            delta = float(np.max(np.abs(T_next - T_lag)))
            T_lag = T_next
            T_new = T_next
            if delta < cfg.picard_tol:
                break
        else:
            raise StepFailureError(
                "Picard iteration did not converge",
                {"time": t_new, "iters": cfg.picard_max_iters,
                 "last_delta": delta, "tol": cfg.picard_tol})

        # Per-step energy bookkeeping at the converged coefficient state.
        cap_end = self.material.volumetric_heat_capacity(T_new).ravel() * vol
        T_bnd = T_new.ravel()[self.bnd_cells]
        boundary_power = float(np.sum(
            boundary_flux(T_bnd, self.material, cfg.h_conv, cfg.t_ambient)
            * self.bnd_areas))
        self.last_step_info = {
            "time": t_new,
            "picard_iters": it,
            "picard_delta": delta,
            "cg_iters": cg_iters_total,
            "enthalpy_change": float(np.sum(cap_end * (T_new - T_n).ravel())),
            "source_power": source_power,
            "boundary_power": boundary_power,
            "max_T": float(T_new.max()),
        }
        return T_new


def simulate_thermal(config: ThermalConfig, material, grid: StructuredGrid,
                     T_init=None, progress=None):
    """Run the transient thermal problem and record read-out snapshots.

    Starts from a uniform ambient field unless ``T_init`` is given.  Records
    the state every ``dt_readout`` (including t = 0) and returns a
    one-component temperature trajectory.
    """
    solver = ThermalSolver(grid, material, config)
    if T_init is None:
        T = np.full(grid.shape, config.t_ambient)
    else:
        T = np.asarray(T_init, dtype=float).reshape(grid.shape).copy()

    n_read = config.n_readout
    stride = config.steps_per_readout
    dt = config.dt_solver
    snaps = np.empty((n_read, grid.n_cells, 1))
    snaps[0, :, 0] = T.ravel()
    times = np.arange(n_read) * config.dt_readout

    step = 0
    for rec in range(1, n_read):
        for _ in range(stride):
            step += 1
            T = solver.advance_step(T, dt, step * dt)
        snaps[rec, :, 0] = T.ravel()
        if progress is not None:
            progress(rec, n_read - 1, solver.last_step_info)
    return FieldTrajectory(grid, times, snaps, components=("T",))
