"""Quasi-static thermo-elasto-plastic response driven by temperature fields.

At every read-out time the equilibrium equation div(sigma) = 0 is solved on
the same structured grid as the thermal problem, using trilinear hexahedral
elements with 2x2x2 Gauss quadrature.  Small strains decompose additively,

    eps = eps_el + eps_pl + eps_th,      eps_th = alpha(T) (T - T_ref) I,

stress follows isotropic linear elasticity in eps_el with temperature
dependent moduli, and plasticity is von Mises with linear isotropic
hardening, integrated by the closed-form radial return

    d_eps_pe = (vm(sigma_trial) - sigma_y0(T) - H eps_pe) / (3 mu(T) + H).

Voigt ordering is (11, 22, 33, 23, 13, 12) with engineering shear strains.
Material properties are evaluated at the end-of-step temperature; each
element takes the cell temperature of its grid cell at all Gauss points.

Boundary conditions for the fixture mode: zero normal displacement (roller)
on the bottom face z = Lz, the symmetry constraint u_y = 0 on y = 0, and one
corner node on the fixture plane fully fixed.  The 'free' mode keeps only a
3-2-1 rigid-body pinning so a uniformly heated body can expand without
stress.  Each step runs a full Newton iteration with the consistent
elastoplastic tangent; plastic state commits only once the step converges.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, solveh_banded
from scipy.sparse.linalg import splu

from .errors import ConfigError, MaterialDataError, StepFailureError
from .trajectory import FieldTrajectory, STRESS_COMPONENTS

_GAUSS = 1.0 / np.sqrt(3.0)
_VOIGT_ID = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


@dataclass
class MechConfig:
    """Settings for the quasi-static mechanical solve."""

    t_reference: float = 293.15
    newton_tol: float = 1.0e-8
    newton_max_iters: int = 30
    yield_floor: float = 1.0e6
    roller_face: str = "bottom"  # face carrying the roller: 'bottom' or 'top'
    constraint_mode: str = "fixture"  # 'fixture' or 'free'

    def __post_init__(self):
        if self.t_reference <= 0:
            raise ConfigError("t_reference must be positive")
        if not 0 < self.newton_tol < 1e-2:
            raise ConfigError("newton_tol must lie in (0, 1e-2)")
        if self.newton_max_iters < 1:
            raise ConfigError("newton_max_iters must be >= 1")
        if self.yield_floor <= 0:
            raise ConfigError("yield_floor must be positive")
        if self.roller_face not in ("bottom", "top"):
            raise ConfigError("roller_face must be 'bottom' or 'top'")
        if self.constraint_mode not in ("fixture", "free"):
            raise ConfigError("constraint_mode must be 'fixture' or 'free'")


def elastic_moduli(E, nu):
    """(lambda, mu, K) Lame and bulk moduli from (E, nu); array friendly."""
    E = np.asarray(E, dtype=float)
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    bulk = E / (3.0 * (1.0 - 2.0 * nu))
    return lam, mu, bulk


def thermal_strain(material, T, t_reference):
    """Isotropic thermal strain alpha(T) (T - T_ref) on the normal axes.

    Returns Voigt vectors (..., 6); shear entries are zero.
    """
    T = np.asarray(T, dtype=float)
    scale = material.thermal_expansion(T) * (T - t_reference)
    return np.asarray(scale)[..., None] * _VOIGT_ID


def elastic_stress(eps_el, E, nu):
    """Linear isotropic stress from elastic strain, both Voigt (..., 6).

    sigma = lambda tr(eps) I + 2 mu eps with engineering shear input, so the
    shear rows are mu * gamma.
    """
    eps_el = np.asarray(eps_el, dtype=float)
    lam, mu, _ = elastic_moduli(E, nu)
    lam = np.asarray(lam)[..., None]
    mu = np.asarray(mu)[..., None]
    tr = eps_el[..., :3].sum(axis=-1, keepdims=True)
    sig = 2.0 * mu * eps_el
    sig[..., 3:] *= 0.5
    sig[..., :3] += lam * tr
    return sig


def von_mises(sigma):
    """Equivalent stress sqrt(3/2 dev:dev) for Voigt input (..., 6)."""
    s = np.asarray(sigma, dtype=float)
    d = ((s[..., 0] - s[..., 1]) ** 2 + (s[..., 1] - s[..., 2]) ** 2
         + (s[..., 2] - s[..., 0]) ** 2)
    return np.sqrt(0.5 * d + 3.0 * (s[..., 3] ** 2 + s[..., 4] ** 2
                                    + s[..., 5] ** 2))


def radial_return(eps_el_trial, eps_pe, E, nu, sigma_y0, H, tangent=True):
    """Closed-form von Mises return with linear isotropic hardening.

    Parameters are broadcast over leading axes: trial elastic strain (n, 6)
    Voigt engineering, accumulated equivalent plastic strain (n,), Young's
    modulus (n,), initial yield stress (n,) at the current temperature.

    Returns a dict with stress (n, 6), new equivalent plastic strain (n,),
    plastic strain increment (n, 6) engineering Voigt, the consistent
    tangent (n, 6, 6) when requested, and the yield residual vm - y after
    the return for auditing.
    """
    eps = np.atleast_2d(np.asarray(eps_el_trial, dtype=float))
    n = eps.shape[0]
    eps_pe = np.broadcast_to(np.asarray(eps_pe, dtype=float), (n,))
    E = np.broadcast_to(np.asarray(E, dtype=float), (n,))
    sigma_y0 = np.broadcast_to(np.asarray(sigma_y0, dtype=float), (n,))
    if np.any(sigma_y0 <= 0):
        raise MaterialDataError("initial yield stress must be positive")
    if np.any(E <= 0):
        raise MaterialDataError("Young's modulus must be positive")

    lam, mu, bulk = elastic_moduli(E, nu)
    tr = eps[:, :3].sum(axis=1)
    dev = eps.copy()
    dev[:, :3] -= tr[:, None] / 3.0
    dev[:, 3:] *= 0.5  # tensor shear components
    s_tr = 2.0 * mu[:, None] * dev
    p = bulk * tr
    vm_tr = np.sqrt(1.5 * (np.sum(s_tr[:, :3] ** 2, axis=1)
                           + 2.0 * np.sum(s_tr[:, 3:] ** 2, axis=1)))
    yield_now = sigma_y0 + H * eps_pe
    plastic = vm_tr > yield_now
    safe_vm = np.where(vm_tr > 0, vm_tr, 1.0)
    dgamma = np.where(plastic, (vm_tr - yield_now) / (3.0 * mu + H), 0.0)
    beta = 1.0 - 3.0 * mu * dgamma / safe_vm

    sigma = beta[:, None] * s_tr
    sigma[:, :3] += p[:, None]

    # Engineering-shear flow direction: d_eps_pl = dgamma * (3/2) s/vm,
    # with shear rows doubled for the Voigt strain convention.
    flow = (1.5 / safe_vm)[:, None] * s_tr
    flow[:, 3:] *= 2.0
    d_eps_pl = dgamma[:, None] * flow
    eps_pe_new = eps_pe + dgamma

    vm_new = vm_tr - 3.0 * mu * dgamma
    residual = np.where(plastic, vm_new - (sigma_y0 + H * eps_pe_new), 0.0)

    out = {
        "sigma": sigma,
        "eps_pe": eps_pe_new,
        "d_eps_pl": d_eps_pl,
        "plastic": plastic,
        "yield_residual": residual,
    }
    if tangent:
        D = np.zeros((n, 6, 6))
        D[:, :3, :3] = bulk[:, None, None] * np.ones((3, 3))
        pdev = np.zeros((6, 6))
        pdev[:3, :3] = np.eye(3) - np.ones((3, 3)) / 3.0
        pdev[3:, 3:] = 0.5 * np.eye(3)
        D += (2.0 * mu * beta)[:, None, None] * pdev
        # Rank-one softening term, only where the return was plastic.
        coef = np.where(
            plastic,
            -9.0 * mu ** 2 * (safe_vm / (3.0 * mu + H) - dgamma) / safe_vm ** 3,
            0.0)
        D += coef[:, None, None] * s_tr[:, :, None] * s_tr[:, None, :]
        out["tangent"] = D
    return out


def _element_bmatrix(dx, dy, dz):
    """B matrices (8 GP, 6, 24) and Jacobian determinant for a box element.

    Local node order: (-,-,-), (+,-,-), (+,+,-), (-,+,-) then the same four
    at +z; shape function a is prod((1 + xi_i xi_i,a)/2).
    """
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
    gp = np.array([[sx, sy, sz]
                   for sx in (-_GAUSS, _GAUSS)
                   for sy in (-_GAUSS, _GAUSS)
                   for sz in (-_GAUSS, _GAUSS)])
    scale = np.array([2.0 / dx, 2.0 / dy, 2.0 / dz])
    B = np.zeros((8, 6, 24))
    for g, (xi, eta, zeta) in enumerate(gp):
        for a, (ca, cb, cc) in enumerate(corners):
            dndx = 0.125 * ca * (1 + cb * eta) * (1 + cc * zeta) * scale[0]
            dndy = 0.125 * cb * (1 + ca * xi) * (1 + cc * zeta) * scale[1]
            dndz = 0.125 * cc * (1 + ca * xi) * (1 + cb * eta) * scale[2]
            col = 3 * a
            B[g, 0, col + 0] = dndx
            B[g, 1, col + 1] = dndy
            B[g, 2, col + 2] = dndz
            B[g, 3, col + 1] = dndz
            B[g, 3, col + 2] = dndy
            B[g, 4, col + 0] = dndz
            B[g, 4, col + 2] = dndx
            B[g, 5, col + 0] = dndy
            B[g, 5, col + 1] = dndx
    det_j = dx * dy * dz / 8.0
    return B, det_j


@dataclass
class MechState:
    """Committed solution state after one quasi-static step."""

    u: np.ndarray          # (n_dofs,) nodal displacements
    eps_pl: np.ndarray     # (n_elem, 8, 6) plastic strain, engineering Voigt
    eps_pe: np.ndarray     # (n_elem, 8) accumulated equivalent plastic strain
    sigma: np.ndarray      # (n_elem, 8, 6) stress at the Gauss points
    info: dict = field(default_factory=dict)

    def cell_stress(self):
        """(n_elem, 6) Gauss-point average per cell."""
        return self.sigma.mean(axis=1)


class MechSolver:
    """Newton solver for the quasi-static step on one grid and material."""

    def __init__(self, grid, material, config: MechConfig | None = None):
        self.grid = grid
        self.material = material
        self.config = config or MechConfig()
        self.last_step_info = {}
        self._build_topology()

    def _build_topology(self):
        g = self.grid
        nx, ny, nz = g.shape
        node_id = np.arange(g.n_nodes).reshape(nx + 1, ny + 1, nz + 1)
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
        offsets = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                   (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
        conn = np.stack([node_id[ii + di, jj + dj, kk + dk]
                         for di, dj, dk in offsets], axis=1)
        self.n_elem = conn.shape[0]
        self.edofs = (3 * conn[:, :, None]
                      + np.arange(3)[None, None, :]).reshape(self.n_elem, 24)

        # One B matrix per distinct element size; uniform grids get one group.
        wx = g.dx[ii]
        wy = g.dy[jj]
        wz = g.dz[kk]
        triples = np.round(np.column_stack([wx, wy, wz]), 15)
        uniq, inv = np.unique(triples, axis=0, return_inverse=True)
        b_groups = np.empty((uniq.shape[0], 8, 6, 24))
        det_groups = np.empty(uniq.shape[0])
        for gidx, (dx, dy, dz) in enumerate(uniq):
            b_groups[gidx], det_groups[gidx] = _element_bmatrix(dx, dy, dz)
        self.B = b_groups[inv]            # (n_elem, 8, 6, 24)
        self.det_j = det_groups[inv]      # (n_elem,)

        self._build_constraints()
        rows = np.repeat(self.edofs, 24, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 24)).ravel()
        red = self._reduced_index
        rr, cc = red[rows], red[cols]
        keep = (rr >= 0) & (cc >= 0)
        self._k_rows = rr[keep]
        self._k_cols = cc[keep]
        self._k_keep = keep

        # Upper-triangle scatter map for the banded Cholesky solve.  With
        # x-major node numbering the half bandwidth is a few node planes, so
        # a symmetric banded factorization beats general sparse LU here.
        upper = keep & (rr <= cc)
        self._band_src = np.nonzero(upper)[0]
        ru, cu = rr[upper], cc[upper]
        self._bandwidth = int((cu - ru).max()) if ru.size else 0
        self._band_pos = (self._bandwidth + ru - cu) * self.n_free + cu

    def _build_constraints(self):
        g = self.grid
        cfg = self.config
        nx, ny, nz = g.shape
        node_id = np.arange(g.n_nodes).reshape(nx + 1, ny + 1, nz + 1)
        fixed = np.zeros(3 * g.n_nodes, dtype=bool)

        if cfg.constraint_mode == "fixture":
            k_roller = nz if cfg.roller_face == "bottom" else 0
            roller_nodes = node_id[:, :, k_roller].ravel()
            fixed[3 * roller_nodes + 2] = True
            symm_nodes = node_id[:, 0, :].ravel()
            fixed[3 * symm_nodes + 1] = True
            pin = node_id[0, 0, k_roller]
            fixed[3 * pin:3 * pin + 3] = True
        else:
            # 3-2-1 rigid-body pinning compatible with free expansion about
            # the origin corner.
            a = node_id[0, 0, 0]
            fixed[3 * a:3 * a + 3] = True
            b = node_id[nx, 0, 0]
            fixed[3 * b + 1] = True
            fixed[3 * b + 2] = True
            c = node_id[0, ny, 0]
            fixed[3 * c + 2] = True

        self.fixed = fixed
        self.free = ~fixed
        self._reduced_index = np.full(fixed.size, -1, dtype=np.int64)
        self._reduced_index[self.free] = np.arange(int(self.free.sum()))
        self.n_free = int(self.free.sum())

    def zero_state(self):
        return MechState(
            u=np.zeros(3 * self.grid.n_nodes),
            eps_pl=np.zeros((self.n_elem, 8, 6)),
            eps_pe=np.zeros((self.n_elem, 8)),
            sigma=np.zeros((self.n_elem, 8, 6)),
        )

    def _gp_properties(self, T_cells):
        """Per-element property arrays at the cell temperature."""
        mat = self.material
        E = mat.youngs_modulus(T_cells)
        sy = np.maximum(mat.yield_stress(T_cells), self.config.yield_floor)
        eps_th = thermal_strain(mat, T_cells, self.config.t_reference)
        return E, sy, eps_th

    def _constitutive(self, u, T_cells, props, state, tangent):
        """Strain -> radial return for all Gauss points at displacement u."""
        E, sy, eps_th = props
        u_e = u[self.edofs]                                   # (n_elem, 24)
        eps = np.einsum("egia,ea->egi", self.B, u_e)          # (n_elem, 8, 6)
        eps_el_tr = eps - state.eps_pl - eps_th[:, None, :]
        flat = eps_el_tr.reshape(-1, 6)
        ret = radial_return(
            flat, state.eps_pe.reshape(-1),
            np.repeat(E, 8), self.material.poisson_ratio,
            np.repeat(sy, 8), self.material.hardening_modulus,
            tangent=tangent)
        return ret

    def _internal_force(self, sigma_flat):
        sig = sigma_flat.reshape(self.n_elem, 8, 6)
        f_e = np.einsum("egia,egi->ea", self.B, sig) * self.det_j[:, None]
        f = np.zeros(3 * self.grid.n_nodes)
        np.add.at(f, self.edofs.ravel(), f_e.ravel())
        return f

    def _force_scale(self, props):
        """Norm of the elastic thermal load vector, used to scale newton_tol."""
        E, _, eps_th = props
        sig_th = elastic_stress(eps_th, E, self.material.poisson_ratio)
        sig_gp = np.repeat(sig_th[:, None, :], 8, axis=1)
        f = self._internal_force(sig_gp.reshape(-1, 6))
        return max(float(np.linalg.norm(f[self.free])), 1.0)

    def _solve_linear(self, k_vals, rhs):
        """Solve the reduced tangent system for one Newton update.

        Default path is a symmetric banded Cholesky; if the factorization
        reports loss of positive definiteness (possible far outside the
        converged regime) it falls back to sparse LU on the same values.
        """
        n = self.n_free
        ab = np.bincount(self._band_pos, weights=k_vals[self._band_src],
                         minlength=(self._bandwidth + 1) * n)
        try:
            return solveh_banded(ab.reshape(self._bandwidth + 1, n), rhs,
                                 lower=False)
        except LinAlgError:
            K = sparse.coo_matrix(
                (k_vals[self._k_keep], (self._k_rows, self._k_cols)),
                shape=(n, n)).tocsc()
            return splu(K).solve(rhs)

    def solve_step(self, state: MechState, T_field) -> MechState:
        """Equilibrate against the given cell temperature field.

        Newton iteration with the consistent tangent; raises
        StepFailureError with diagnostics when it fails to converge.
        """
        cfg = self.config
        T_cells = np.asarray(T_field, dtype=float).reshape(-1)
        if T_cells.size != self.n_elem:
            raise ConfigError(
                f"temperature field size {T_cells.size} != {self.n_elem} cells")
        props = self._gp_properties(T_cells)
        scale = self._force_scale(props)
        tol = cfg.newton_tol * scale

        u = state.u.copy()
        ret = None
        for it in range(cfg.newton_max_iters + 1):
            ret = self._constitutive(u, T_cells, props, state, tangent=True)
            resid = self._internal_force(ret["sigma"])
            r_free = resid[self.free]
            r_norm = float(np.linalg.norm(r_free))
            if r_norm <= tol:
                break
            if it == cfg.newton_max_iters:
                raise StepFailureError(
                    "Newton iteration did not converge",
                    {"iters": it, "residual": r_norm, "tol": tol})
            D = ret["tangent"].reshape(self.n_elem, 8, 6, 6)
            db = np.einsum("egij,egja->egia", D, self.B)
            b_flat = self.B.reshape(self.n_elem, 48, 24)
            db_flat = db.reshape(self.n_elem, 48, 24)
            k_e = np.matmul(b_flat.transpose(0, 2, 1), db_flat)
            k_e *= self.det_j[:, None, None]
            du = self._solve_linear(k_e.ravel(), -r_free)
            u[self.free] += du

        new_state = MechState(
            u=u,
            eps_pl=state.eps_pl + ret["d_eps_pl"].reshape(self.n_elem, 8, 6),
            eps_pe=ret["eps_pe"].reshape(self.n_elem, 8),
            sigma=ret["sigma"].reshape(self.n_elem, 8, 6),
        )
        new_state.info = {
            "newton_iters": it,
            "residual": r_norm,
            "force_scale": scale,
            "plastic_points": int(ret["plastic"].sum()),
            "max_yield_residual": float(np.max(np.abs(ret["yield_residual"]))),
            "max_eps_pe": float(new_state.eps_pe.max()),
        }
        self.last_step_info = new_state.info
        return new_state


def run_mechanical(temperature_trajectory, material, config=None,
                   progress=None):
    """March the quasi-static problem through a temperature trajectory.

    Returns a six-component stress trajectory (cell-averaged Voigt stress)
    on the same grid and read-out times.  The body starts stress free; each
    snapshot equilibrates against the corresponding temperature field with
    plastic history carried forward.
    """
    traj = temperature_trajectory
    solver = MechSolver(traj.grid, material, config)
    state = solver.zero_state()
    out = np.empty((traj.n_times, solver.n_elem, 6))
    for k in range(traj.n_times):
        state = solver.solve_step(state, traj.data[k, :, 0])
        out[k] = state.cell_stress()
        if progress is not None:
            progress(k, traj.n_times - 1, state.info)
    return FieldTrajectory(traj.grid, traj.times, out,
                           components=STRESS_COMPONENTS), state
