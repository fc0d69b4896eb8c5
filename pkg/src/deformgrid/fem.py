"""Static hyperelastic FEM on linear tetrahedra.

Saint Venant-Kirchhoff material (geometric nonlinearity, linear
stress-strain), solved for equilibrium with Newton iterations, backtracking
line search on the energy-minus-work objective, and Jacobi-preconditioned
conjugate gradient on the symmetrized tangent stiffness. Indefinite tangents
get a growing diagonal (Levenberg) shift until the step is a descent
direction. Dirichlet constraints are handled by dof elimination.

Forces are applied as a traction over a surface region: the total force
vector splits across region vertices proportional to one third of adjacent
triangle areas (triangles fully inside the region when any exist).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import LinearOperator, cg

from .meshgen import SurfaceMesh, TetMesh, extract_surface


class InvertedElement(Exception):
    """A deformation gradient determinant dropped to zero or below."""


class NonConvergence(Exception):
    """Newton failed to reach the residual tolerance.

    ``wall`` marks runs blocked by element collapse (det F -> 0 along the
    step direction); load stepping cannot rescue those.
    """

    def __init__(self, message: str, wall: bool = False):
        super().__init__(message)
        self.wall = wall


class SingularSystem(Exception):
    """Constraints are empty or degenerate; equilibrium is not unique."""


def lame_parameters(youngs_modulus: float, poisson_ratio: float) -> tuple[float, float]:
    """(lambda, mu) from (E, nu)."""
    e, nu = youngs_modulus, poisson_ratio
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = e / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass
class MaterialParams:
    youngs_modulus: float = 1700.0  # Pa
    poisson_ratio: float = 0.35

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("youngs_modulus must be positive")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must be in (0, 0.5)")

    @property
    def lam(self) -> float:
        return lame_parameters(self.youngs_modulus, self.poisson_ratio)[0]

    @property
    def mu(self) -> float:
        return lame_parameters(self.youngs_modulus, self.poisson_ratio)[1]


@dataclass
class BCSpec:
    """Boundary conditions: a pinned region and a pulled region.

    Seeds index vertices of the organ surface mesh; radii are geodesic,
    in meters. ``force_vector`` is the total force over the region, Newtons.
    """

    zero_seed: int
    zero_radius: float
    force_seed: int
    force_radius: float
    force_vector: np.ndarray

    def __post_init__(self):
        self.force_vector = np.asarray(self.force_vector, dtype=np.float64)
        if self.force_vector.shape != (3,):
            raise ValueError("force_vector must be a 3-vector")
        if self.zero_radius < 0 or self.force_radius < 0:
            raise ValueError("radii must be non-negative")


@dataclass
class SolverOptions:
    tol: float = 1e-6  # relative residual
    max_newton: int = 50
    max_backtracks: int = 30
    cg_tol: float = 1e-8
    cg_maxiter: int = 4000
    armijo: float = 1e-4
    # give up once this many accepted steps shave <1% off the residual
    stall_iters: int = 8
    # a step throttled this hard while elements near collapse is a wall
    wall_alpha: float = 1e-3
    wall_det: float = 0.01
    # load increments halve on failure until below this floor
    min_load_increment: float = 1.0 / 64.0


# ---------------------------------------------------------------------------
# surface regions and traction lumping


def select_surface_region(
    surface: SurfaceMesh, seed_vertex: int, radius: float
) -> np.ndarray:
    """Surface vertices within geodesic ``radius`` of the seed.

    Distance runs along surface edges (Dijkstra). Returns indices into the
    surface mesh, seed always included; map through ``surface.vertex_ids``
    for the parent tet mesh.
    """
    if not 0 <= seed_vertex < surface.num_vertices:
        raise ValueError("seed_vertex not on surface")
    edges = surface.edges()
    lengths = np.linalg.norm(
        surface.vertices[edges[:, 0]] - surface.vertices[edges[:, 1]], axis=1
    )
    n = surface.num_vertices
    graph = sp.csr_matrix(
        (lengths, (edges[:, 0], edges[:, 1])), shape=(n, n)
    )
    dist = dijkstra(graph, directed=False, indices=seed_vertex)
    region = np.flatnonzero(dist <= radius)
    if len(region) == 0:  # radius < 0 is rejected upstream; keep the seed
        region = np.array([seed_vertex])
    return region.astype(np.int32)


def region_vertex_weights(surface: SurfaceMesh, region: np.ndarray) -> np.ndarray:
    """Traction lumping weights for region vertices, sum 1.

    One third of adjacent triangle areas, counting triangles fully inside
    the region; if the region holds no complete triangle, full one-third
    vertex areas are used instead.
    """
    region = np.asarray(region)
    in_region = np.zeros(surface.num_vertices, dtype=bool)
    in_region[region] = True
    tri_in = in_region[surface.triangles].all(axis=1)
    areas = surface.triangle_areas()

    vert_area = np.zeros(surface.num_vertices)
    tris = surface.triangles[tri_in] if tri_in.any() else surface.triangles
    tri_area = areas[tri_in] if tri_in.any() else areas
    for k in range(3):
        np.add.at(vert_area, tris[:, k], tri_area / 3.0)

    w = vert_area[region]
    total = w.sum()
    if total <= 0:
        w = np.ones(len(region))
        total = float(len(region))
    return w / total


def region_nodal_forces(
    mesh: TetMesh, surface: SurfaceMesh, region: np.ndarray, force_vector: np.ndarray
) -> np.ndarray:
    """(V, 3) nodal force array on the tet mesh; sums to force_vector."""
    w = region_vertex_weights(surface, region)
    f = np.zeros((mesh.num_vertices, 3))
    parent = surface.vertex_ids[region]
    f[parent] = w[:, None] * np.asarray(force_vector, dtype=np.float64)
    return f


# ---------------------------------------------------------------------------
# element quantities


def _element_data(vertices: np.ndarray, tets: np.ndarray):
    """Shape-function gradients G (T,4,3) and rest volumes (T,)."""
    d = (vertices[tets[:, 1:]] - vertices[tets[:, :1]]).transpose(0, 2, 1)
    vol = np.linalg.det(d) / 6.0
    if (vol <= 0).any():
        raise InvertedElement("rest mesh contains non-positive tets")
    bm = np.linalg.inv(d)  # (T,3,3)
    g = np.empty((len(tets), 4, 3))
    g[:, 1:, :] = bm
    g[:, 0, :] = -bm.sum(axis=1)
    return g, vol


def _deformation_gradients(x: np.ndarray, tets: np.ndarray, g: np.ndarray):
    xe = x[tets]  # (T,4,3)
    return np.einsum("tva,tvb->tab", xe, g)


def _svk_stress(f: np.ndarray, lam: float, mu: float):
    """Green strain, second and first Piola stress for each element."""
    eye = np.eye(3)
    c = np.einsum("tab,tac->tbc", f, f)
    e = 0.5 * (c - eye)
    tr = np.trace(e, axis1=1, axis2=2)
    s = lam * tr[:, None, None] * eye + 2.0 * mu * e
    p = np.einsum("tab,tbc->tac", f, s)
    return e, tr, s, p


def _energy_terms(mesh, u, lam, mu, g, vol, clamp: bool):
    x = mesh.vertices + u
    f = _deformation_gradients(x, mesh.tets, g)
    det = np.linalg.det(f)
    if (det <= 0).any():
        if clamp:
            return np.inf
        raise InvertedElement(
            f"{int((det <= 0).sum())} element(s) inverted (min det {det.min():.3e})"
        )
    e, tr, _, _ = _svk_stress(f, lam, mu)
    dens = 0.5 * lam * tr**2 + mu * np.einsum("tab,tab->t", e, e)
    return float((vol * dens).sum())


def elastic_energy(mesh: TetMesh, u: np.ndarray, material: MaterialParams) -> float:
    """Total strain energy (J). Raises InvertedElement on det(F) <= 0."""
    g, vol = _element_data(mesh.vertices, mesh.tets)
    return _energy_terms(mesh, u, material.lam, material.mu, g, vol, clamp=False)


def _gradient(mesh, u, lam, mu, g, vol) -> np.ndarray:
    x = mesh.vertices + u
    f = _deformation_gradients(x, mesh.tets, g)
    _, _, _, p = _svk_stress(f, lam, mu)
    ge = np.einsum("t,tab,tvb->tva", vol, p, g)
    out = np.zeros_like(u, dtype=np.float64)
    np.add.at(out, mesh.tets, ge)
    return out


def internal_gradient(mesh: TetMesh, u: np.ndarray, material: MaterialParams) -> np.ndarray:
    """(V, 3) gradient of elastic energy with respect to u."""
    g, vol = _element_data(mesh.vertices, mesh.tets)
    return _gradient(mesh, u, material.lam, material.mu, g, vol)


def _hessian(mesh, u, lam, mu, g, vol) -> sp.csr_matrix:
    tets = mesh.tets
    x = mesh.vertices + u
    f = _deformation_gradients(x, tets, g)
    _, _, s, _ = _svk_stress(f, lam, mu)
    eye = np.eye(3)

    t_count = len(tets)
    helem = np.empty((t_count, 12, 12))
    for w in range(4):
        for c in range(3):
            df = np.zeros_like(f)
            df[:, c, :] = g[:, w, :]
            de = 0.5 * (
                np.einsum("tab,tac->tbc", df, f) + np.einsum("tab,tac->tbc", f, df)
            )
            dtr = np.trace(de, axis1=1, axis2=2)
            ds = lam * dtr[:, None, None] * eye + 2.0 * mu * de
            dp = np.einsum("tab,tbc->tac", df, s) + np.einsum("tab,tbc->tac", f, ds)
            col = np.einsum("t,tab,tvb->tva", vol, dp, g)  # (T,4,3)
            helem[:, :, 3 * w + c] = col.reshape(t_count, 12)

    gdof = (3 * tets[:, :, None] + np.arange(3)).reshape(t_count, 12)
    rows = np.repeat(gdof, 12, axis=1).ravel()
    cols = np.tile(gdof, (1, 12)).ravel()
    ndof = 3 * mesh.num_vertices
    k = sp.coo_matrix((helem.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    return 0.5 * (k + k.T)


def tangent_stiffness(mesh: TetMesh, u: np.ndarray, material: MaterialParams) -> sp.csr_matrix:
    """Symmetrized (3V, 3V) sparse Hessian of the elastic energy."""
    g, vol = _element_data(mesh.vertices, mesh.tets)
    return _hessian(mesh, u, material.lam, material.mu, g, vol)


# ---------------------------------------------------------------------------
# Newton solver


def _solve_spd(k_ff, rhs, opts: SolverOptions):
    """CG with Jacobi preconditioning and a growing diagonal shift.

    Returns a descent direction for the local quadratic model, falling back
    to preconditioned steepest descent if shifting fails.
    """
    diag = k_ff.diagonal().copy()
    base = float(np.abs(diag).mean())
    if base == 0.0:
        base = 1.0
    tau = 0.0
    identity = sp.identity(k_ff.shape[0], format="csr")
    for _ in range(10):
        a = k_ff + (tau * base) * identity if tau > 0 else k_ff
        d = a.diagonal()
        dinv = np.where(np.abs(d) > 1e-300, 1.0 / np.abs(d), 1.0)
        m = LinearOperator(a.shape, matvec=lambda v, dinv=dinv: dinv * v)
        x, info = cg(a, rhs, rtol=opts.cg_tol, atol=0.0, maxiter=opts.cg_maxiter, M=m)
        if info == 0 and np.isfinite(x).all() and float(rhs @ x) > 0.0:
            return x
        tau = 1e-6 if tau == 0.0 else tau * 10.0
    dinv = np.where(np.abs(diag) > 1e-300, 1.0 / np.abs(diag), 1.0)
    return dinv * rhs


def solve_displacement(
    mesh: TetMesh,
    material: MaterialParams,
    fixed_vertices: np.ndarray,
    fixed_values: np.ndarray,
    external_forces: np.ndarray,
    options: SolverOptions = None,
    return_info: bool = False,
    initial_guess: np.ndarray = None,
):
    """Equilibrium displacement under Dirichlet constraints and nodal forces.

    ``fixed_vertices`` pins all three components of those vertices to
    ``fixed_values`` rows. Raises SingularSystem when nothing is pinned and
    NonConvergence when Newton stalls or runs out of iterations.
    """
    opts = options or SolverOptions()
    fixed_vertices = np.asarray(fixed_vertices, dtype=np.int64)
    if len(fixed_vertices) == 0:
        raise SingularSystem("no constrained vertices")
    if len(np.unique(fixed_vertices)) != len(fixed_vertices):
        raise SingularSystem("duplicate constrained vertices")

    nv = mesh.num_vertices
    lam, mu = material.lam, material.mu
    g, vol = _element_data(mesh.vertices, mesh.tets)

    fixed_mask = np.zeros(nv, dtype=bool)
    fixed_mask[fixed_vertices] = True
    free = np.flatnonzero(~np.repeat(fixed_mask, 3))

    u = np.zeros((nv, 3)) if initial_guess is None else initial_guess.copy()
    u[fixed_vertices] = np.asarray(fixed_values, dtype=np.float64)
    f_ext = np.asarray(external_forces, dtype=np.float64)
    fe_flat = f_ext.ravel()

    def objective(vec):
        return _energy_terms(mesh, vec, lam, mu, g, vol, clamp=True) - float(
            fe_flat @ vec.ravel()
        )

    phi = objective(u)
    if not np.isfinite(phi):
        raise NonConvergence("constraints invert the mesh at the starting point")

    residual = fe_flat[free] - _gradient(mesh, u, lam, mu, g, vol).ravel()[free]
    ref = max(float(np.linalg.norm(fe_flat[free])), float(np.linalg.norm(residual)))
    # roundoff floor: rest-state gradients are ~eps * (stiffness scale), never
    # exactly zero, so a purely relative test would chase noise
    floor = 100.0 * np.finfo(np.float64).eps * mu * float(vol.sum()) ** (2.0 / 3.0)
    target = max(opts.tol * ref, floor)
    history = [phi]

    converged = np.linalg.norm(residual) <= target
    iters = 0
    res_trail = [float(np.linalg.norm(residual))]
    while not converged:
        if iters >= opts.max_newton:
            raise NonConvergence(
                f"residual {np.linalg.norm(residual):.3e} after {iters} iterations"
            )
        if (
            len(res_trail) > opts.stall_iters
            and res_trail[-1] > 0.99 * res_trail[-1 - opts.stall_iters]
        ):
            raise NonConvergence(
                f"stalled at residual {res_trail[-1]:.3e} "
                f"({opts.stall_iters} steps without progress)"
            )
        iters += 1

        k = _hessian(mesh, u, lam, mu, g, vol)
        step_free = _solve_spd(k[free][:, free].tocsr(), residual, opts)
        slope = float(residual @ step_free)  # descent rate along the step

        step = np.zeros(3 * nv)
        step[free] = step_free
        step = step.reshape(nv, 3)

        alpha = 1.0
        for _ in range(opts.max_backtracks):
            cand = u + alpha * step
            phi_c = objective(cand)
            if phi_c <= phi - opts.armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            raise NonConvergence("line search failed to decrease the objective")

        u = cand
        phi = phi_c
        history.append(phi)
        if alpha <= opts.wall_alpha:
            f_def = _deformation_gradients(mesh.vertices + u, mesh.tets, g)
            min_det = float(np.linalg.det(f_def).min())
            if min_det <= opts.wall_det:
                raise NonConvergence(
                    f"element collapse blocks progress (min det {min_det:.2e})",
                    wall=True,
                )
        residual = fe_flat[free] - _gradient(mesh, u, lam, mu, g, vol).ravel()[free]
        res_trail.append(float(np.linalg.norm(residual)))
        converged = res_trail[-1] <= target

    if return_info:
        info = {
            "iterations": iters,
            "objective_history": history,
            "residual": float(np.linalg.norm(residual)),
            "reference": ref,
        }
        return u, info
    return u


def solve_static(
    mesh: TetMesh,
    material: MaterialParams,
    bc: BCSpec,
    options: SolverOptions = None,
    surface: SurfaceMesh = None,
) -> np.ndarray:
    """Ground-truth displacement field for one boundary-condition draw.

    Pins the zero region, spreads ``bc.force_vector`` over the force region,
    and returns the per-vertex displacement (V, 3) in meters. Hard draws get
    a second chance through load stepping: the force ramps up in increments,
    each warm-started from the last, with increments halving on failure.
    """
    opts = options or SolverOptions()
    if surface is None:
        surface = extract_surface(mesh)
    zero_region = select_surface_region(surface, bc.zero_seed, bc.zero_radius)
    force_region = select_surface_region(surface, bc.force_seed, bc.force_radius)
    f_ext = region_nodal_forces(mesh, surface, force_region, bc.force_vector)
    fixed = surface.vertex_ids[zero_region]
    fixed_vals = np.zeros((len(fixed), 3))

    try:
        return solve_displacement(mesh, material, fixed, fixed_vals, f_ext, opts)
    except NonConvergence as e:
        if e.wall:
            raise

    u = np.zeros((mesh.num_vertices, 3))
    load, dt = 0.0, 0.25
    while load < 1.0:
        try:
            u = solve_displacement(
                mesh,
                material,
                fixed,
                fixed_vals,
                (load + dt) * f_ext,
                opts,
                initial_guess=u,
            )
            load += dt
            dt = min(2.0 * dt, 1.0 - load) if load < 1.0 else dt
        except NonConvergence as e:
            if e.wall:
                raise
            dt *= 0.5
            if dt < opts.min_load_increment:
                raise
    return u
