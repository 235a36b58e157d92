"""Structured rectilinear grid shared by the thermal and mechanical solvers.

The grid is a box [0,Lx] x [0,Ly] x [0,Lz] split into nx*ny*nz hexahedral
cells.  y = 0 is the track symmetry plane and z = 0 the heated top surface,
with z measured downward into the part.  Temperatures live at cell centers
(finite-volume unknowns); displacements live at the (nx+1)(ny+1)(nz+1) cell
corners.  Optional geometric grading concentrates cells toward the
heat-affected zone (small y, small z); x spacing stays uniform because the
source sweeps the whole track.
"""

import numpy as np

from .errors import ConfigError


def _axis_widths(n, length, ratio):
    """Cell widths along one axis, finest first, coarsest/finest = ratio."""
    if ratio == 1.0:
        return np.full(n, length / n)
    if n == 1:
        return np.array([length])
    rho = ratio ** (1.0 / (n - 1))
    w = rho ** np.arange(n)
    return w * (length / w.sum())


class StructuredGrid:
    """Rectilinear grid over [0,Lx] x [0,Ly] x [0,Lz].

    Parameters
    ----------
    nx, ny, nz : int
        Cell counts per axis, all >= 1.
    lx, ly, lz : float
        Box extents in meters, all > 0.
    grading_y, grading_z : float
        Coarsest-to-finest cell width ratio along y and z (>= 1).  The finest
        cells sit at y = 0 (symmetry plane) and z = 0 (heated surface).
    """

    def __init__(self, nx, ny, nz, lx, ly, lz, grading_y=1.0, grading_z=1.0):
        for label, n in (("nx", nx), ("ny", ny), ("nz", nz)):
            if int(n) != n or n < 1:
                raise ConfigError(f"{label} must be a positive integer, got {n}")
        for label, ell in (("lx", lx), ("ly", ly), ("lz", lz)):
            if not ell > 0:
                raise ConfigError(f"{label} must be positive, got {ell}")
        if grading_y < 1.0 or grading_z < 1.0:
            raise ConfigError("grading ratios must be >= 1")

        self.nx, self.ny, self.nz = int(nx), int(ny), int(nz)
        self.lx, self.ly, self.lz = float(lx), float(ly), float(lz)
        self.grading_y = float(grading_y)
        self.grading_z = float(grading_z)

        self.dx = np.full(self.nx, self.lx / self.nx)
        self.dy = _axis_widths(self.ny, self.ly, self.grading_y)
        self.dz = _axis_widths(self.nz, self.lz, self.grading_z)

        # Node planes (cell corners) and cell centers per axis.
        self.xn = np.concatenate(([0.0], np.cumsum(self.dx)))
        self.yn = np.concatenate(([0.0], np.cumsum(self.dy)))
        self.zn = np.concatenate(([0.0], np.cumsum(self.dz)))
        self.xc = 0.5 * (self.xn[:-1] + self.xn[1:])
        self.yc = 0.5 * (self.yn[:-1] + self.yn[1:])
        self.zc = 0.5 * (self.zn[:-1] + self.zn[1:])

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self):
        return self.nx * self.ny * self.nz

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1) * (self.nz + 1)

    @property
    def is_uniform(self):
        return self.grading_y == 1.0 and self.grading_z == 1.0

    def cell_volumes(self):
        """Cell volume array of shape (nx, ny, nz)."""
        return (self.dx[:, None, None] * self.dy[None, :, None]
                * self.dz[None, None, :])

    def cell_centers(self):
        """Cell center coordinates, three arrays broadcastable to shape."""
        return np.meshgrid(self.xc, self.yc, self.zc, indexing="ij")

    def nearest_cell(self, point):
        """(i, j, k) of the cell whose center is nearest to ``point``.

        Ties break toward the lower index so probes at cell boundaries are
        deterministic.
        """
        x, y, z = point
        i = int(np.argmin(np.abs(self.xc - x)))
        j = int(np.argmin(np.abs(self.yc - y)))
        k = int(np.argmin(np.abs(self.zc - z)))
        return i, j, k

    def interpolate_cell_field(self, field, points):
        """Multilinear interpolation of a cell-centered field at ``points``.

        Coordinates beyond the first/last cell center are clamped, which
        matches the constant-tail convention used elsewhere.  ``field`` has
        grid shape; ``points`` is (m, 3).  Used for mesh-convergence probes
        that must refer to one physical location on every mesh.
        """
        from scipy.interpolate import RegularGridInterpolator

        field = np.asarray(field, dtype=float).reshape(self.shape)
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        for axis, centers in enumerate((self.xc, self.yc, self.zc)):
            pts[:, axis] = np.clip(pts[:, axis], centers[0], centers[-1])
        interp = RegularGridInterpolator((self.xc, self.yc, self.zc), field)
        return interp(pts)

    def readout_lattice(self, counts):
        """Evenly spread sub-lattice of cell indices for field read-out.

        ``counts`` = (mx, my, mz) points per axis.  Indices are rounded from
        a linspace over [0, n-1], so the lattice always includes both domain
        ends.  Returns (flat_indices, coords) with flat indices in C order
        over the grid shape and coords the matching cell-center positions.
        """
        mx, my, mz = counts
        for label, m, n in (("mx", mx, self.nx), ("my", my, self.ny),
                            ("mz", mz, self.nz)):
            if int(m) != m or not 1 <= m <= n:
                raise ConfigError(
                    f"readout count {label}={m} must be an integer in [1, {n}]")
        idx = [np.unique(np.round(np.linspace(0, n - 1, int(m))).astype(int))
               for m, n in ((mx, self.nx), (my, self.ny), (mz, self.nz))]
        ii, jj, kk = np.meshgrid(idx[0], idx[1], idx[2], indexing="ij")
        flat = np.ravel_multi_index((ii.ravel(), jj.ravel(), kk.ravel()),
                                    self.shape)
        coords = np.column_stack([self.xc[ii.ravel()], self.yc[jj.ravel()],
                                  self.zc[kk.ravel()]])
        return flat, coords

    def __repr__(self):
        return (f"StructuredGrid({self.nx}x{self.ny}x{self.nz}, "
                f"{self.lx:g}x{self.ly:g}x{self.lz:g} m)")
