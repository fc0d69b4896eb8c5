"""Random organ-like tetrahedral mesh generation and validation.

Meshes are built by warping a tetrahedralized ball template with smooth
random Gaussian bumps, which keeps the tet topology valid by construction
(genus 0, closed boundary). Invalid results (outside the simulation cube,
self-intersecting, poor element quality) are reported so callers can
discard them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonManifoldBoundary(Exception):
    """Boundary of the tet complex is not a closed 2-manifold."""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class SurfaceMesh:
    """Closed triangle mesh with outward winding.

    ``vertex_ids`` maps surface vertices back to the parent tet mesh when the
    surface was extracted from one; otherwise None.
    """

    vertices: np.ndarray  # (V, 3) float64, meters
    triangles: np.ndarray  # (T, 3) int32
    normals: np.ndarray = field(default=None)  # (V, 3) unit outward
    vertex_ids: np.ndarray = field(default=None)  # (V,) int32 into parent mesh

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int32)
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def total_area(self) -> float:
        return float(self.triangle_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) int32."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def vertex_areas(self) -> np.ndarray:
        """One third of adjacent triangle areas per vertex; sums to total."""
        areas = self.triangle_areas()
        out = np.zeros(self.num_vertices)
        for k in range(3):
            np.add.at(out, self.triangles[:, k], areas / 3.0)
        return out


@dataclass
class TetMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    tets: np.ndarray  # (T, 4) int32, positive signed volume
    surface_vertex_ids: np.ndarray = field(default=None)  # (S,) int32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int32)
        if self.surface_vertex_ids is None:
            faces, _ = boundary_faces(self.tets)
            self.surface_vertex_ids = np.unique(faces).astype(np.int32)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)


@dataclass
class ValidityReport:
    inside_domain: bool
    self_intersecting: bool
    min_tet_quality: float

    def is_valid(self, quality_floor: float = 0.05) -> bool:
        return (
            self.inside_domain
            and not self.self_intersecting
            and self.min_tet_quality >= quality_floor
        )


@dataclass
class MeshGenConfig:
    """Controls the ball template and the random warp passes."""

    subdivisions: int = 2  # icosphere subdivision level
    shells: int = 4  # radial layers between center and surface
    semi_axis_range: tuple = (0.05, 0.095)  # meters, per-axis ellipsoid radii
    center_jitter: float = 0.02  # meters, uniform cube around domain center
    passes_range: tuple = (3, 8)  # warp passes, inclusive
    bumps_per_pass: tuple = (1, 3)  # Gaussian bumps per pass, inclusive
    # amplitude = frac * bandwidth keeps the warp gradient bounded, so tet
    # quality survives; 0.30 * 0.12 m stays under the 6 cm amplitude cap
    bump_amplitude_frac: tuple = (0.10, 0.30)
    bump_bandwidth_range: tuple = (0.04, 0.12)  # meters
    domain_side: float = 0.3  # meters
    quality_floor: float = 0.05  # min inradius/circumradius ratio
    max_backoff: int = 5  # amplitude halvings before a pass is skipped


# ---------------------------------------------------------------------------
# basic geometry


def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes, positive for correctly oriented tets."""
    v = vertices[tets]
    d = v[:, 1:] - v[:, :1]
    return np.linalg.det(d) / 6.0


def tet_quality(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Inradius / circumradius per tet; 1/3 for the regular tetrahedron.

    Signed by orientation: inverted tets come back negative, so a positive
    quality floor rejects them for free.
    """
    v = vertices[tets]
    vol = tet_volumes(vertices, tets)

    # face areas (opposite each vertex)
    areas = np.empty((len(tets), 4))
    faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
    for i, (a, b, c) in enumerate(faces):
        cr = np.cross(v[:, b] - v[:, a], v[:, c] - v[:, a])
        areas[:, i] = 0.5 * np.linalg.norm(cr, axis=1)
    total_area = areas.sum(axis=1)

    # circumcenter from the 3x3 system 2*(vi - v0) . x = |vi|^2 - |v0|^2
    a_mat = 2.0 * (v[:, 1:] - v[:, :1])
    sq = np.einsum("tij,tij->ti", v, v)
    rhs = sq[:, 1:] - sq[:, :1]
    ok = np.abs(np.linalg.det(a_mat)) > 1e-300
    quality = np.zeros(len(tets))
    if ok.any():
        center = np.linalg.solve(a_mat[ok], rhs[ok][..., None])[..., 0]
        circum_r = np.linalg.norm(center - v[ok, 0], axis=1)
        in_r = 3.0 * vol[ok] / total_area[ok]
        with np.errstate(invalid="ignore", divide="ignore"):
            q = in_r / circum_r
        quality[ok] = np.where(np.isfinite(q), q, 0.0)
    return quality


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals, normalized."""
    normals = np.zeros_like(vertices, dtype=np.float64)
    fn = np.cross(
        vertices[triangles[:, 1]] - vertices[triangles[:, 0]],
        vertices[triangles[:, 2]] - vertices[triangles[:, 0]],
    )
    for k in range(3):
        np.add.at(normals, triangles[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm < 1e-300] = 1.0
    return normals / norm


def boundary_faces(tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Faces belonging to exactly one tet, outward-wound.

    Returns (faces (F,3) int32, owner tet index (F,) int64). Assumes tets
    have positive signed volume, which makes the per-tet face table outward.
    """
    local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    faces = tets[:, local].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(
        key, axis=0, return_inverse=True, return_counts=True
    )
    on_boundary = counts[inverse] == 1
    return faces[on_boundary].astype(np.int32), owner[on_boundary]


def extract_surface(mesh: TetMesh) -> SurfaceMesh:
    """Boundary surface with outward winding and compacted vertices.

    Raises NonManifoldBoundary if any boundary edge is not shared by exactly
    two boundary triangles with opposite direction.
    """
    faces, _ = boundary_faces(mesh.tets)
    _check_closed_manifold(faces)

    used = np.unique(faces)
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(
        vertices=mesh.vertices[used].copy(),
        triangles=remap[faces].astype(np.int32),
        vertex_ids=used.astype(np.int32),
    )


def _check_closed_manifold(faces: np.ndarray):
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    if counts.min(initial=2) < 2 or counts.max(initial=2) > 2:
        raise NonManifoldBoundary("boundary edge not shared by exactly 2 triangles")
    # opposite direction: directed edge pairs must be distinct
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if dcounts.max(initial=1) > 1:
        raise NonManifoldBoundary("inconsistent boundary winding")


def euler_characteristic(surface: SurfaceMesh) -> int:
    v = surface.num_vertices
    f = len(surface.triangles)
    e = len(surface.edges())
    return v - e + f


# ---------------------------------------------------------------------------
# templates


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere (vertices, triangles), outward winding."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts, tris = _subdivide(verts, tris)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, tris.astype(np.int32)


def _subdivide(verts, tris):
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    mid = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    mid_idx = len(verts) + inverse.reshape(3, -1).T  # columns: m01, m12, m20
    new_verts = np.concatenate([verts, mid])
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    m01, m12, m20 = mid_idx[:, 0], mid_idx[:, 1], mid_idx[:, 2]
    new_tris = np.concatenate(
        [
            np.stack([a, m01, m20], axis=1),
            np.stack([b, m12, m01], axis=1),
            np.stack([c, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    return new_verts, new_tris


def _split_prism(prism: np.ndarray) -> list:
    """Split prism (v0..v2 bottom, v3..v5 top) into 3 tets.

    Quad-face diagonals pass through each face's smallest global vertex
    index, so adjacent prisms agree and the decomposition always exists.
    """
    rotations = [(0, 1, 2, 3, 4, 5), (1, 2, 0, 4, 5, 3), (2, 0, 1, 5, 3, 4),
                 (3, 5, 4, 0, 2, 1), (4, 3, 5, 1, 0, 2), (5, 4, 3, 2, 1, 0)]
    imin = int(np.argmin(prism))
    for rot in rotations:
        if rot[0] == imin:
            p = prism[list(rot)]
            break
    # diagonals from p[0] cut the two adjacent quads; the far quad
    # (p1,p2,p5,p4) is cut through its own smallest index
    if min(p[1], p[5]) < min(p[2], p[4]):
        tets = [(p[0], p[1], p[2], p[5]), (p[0], p[1], p[5], p[4]),
                (p[0], p[4], p[5], p[3])]
    else:
        tets = [(p[0], p[1], p[2], p[4]), (p[0], p[4], p[2], p[5]),
                (p[0], p[4], p[5], p[3])]
    return tets


def _orient_positive(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    vol = tet_volumes(vertices, tets)
    tets = tets.copy()
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return tets


def ball_template(
    subdivisions: int = 2,
    shells: int = 4,
    semi_axes=(1.0, 1.0, 1.0),
    center=(0.0, 0.0, 0.0),
) -> TetMesh:
    """Tetrahedralized ellipsoid: radial shells of an icosphere plus a
    center vertex, prisms split into tets with consistent diagonals."""
    sverts, stris = icosphere(subdivisions)
    ns = len(sverts)
    layers = [np.zeros((1, 3))]
    for k in range(shells):
        r = (k + 1) / shells
        layers.append(sverts * r)
    verts = np.concatenate(layers) * np.asarray(semi_axes) + np.asarray(center)

    tets = []
    # innermost shell to center
    first = 1
    for a, b, c in stris:
        tets.append((0, first + a, first + b, first + c))
    # prisms between consecutive shells
    for k in range(shells - 1):
        lo = 1 + k * ns
        hi = lo + ns
        for a, b, c in stris:
            prism = np.array([lo + a, lo + b, lo + c, hi + a, hi + b, hi + c])
            tets.extend(_split_prism(prism))
    tets = _orient_positive(verts, np.asarray(tets, dtype=np.int64))
    mesh = TetMesh(vertices=verts, tets=tets)
    assert tet_volumes(mesh.vertices, mesh.tets).min() > 0
    return mesh


def box_template(resolution=(4, 2, 2), size=(0.1, 0.05, 0.05), origin=(0.0, 0.0, 0.0)) -> TetMesh:
    """Axis-aligned box filled with 6 tets per cell (Kuhn subdivision)."""
    nx, ny, nz = resolution
    sx, sy, sz = size
    xs = np.linspace(0, sx, nx + 1)
    ys = np.linspace(0, sy, ny + 1)
    zs = np.linspace(0, sz, nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + np.asarray(origin)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # Kuhn: six permutation simplices sharing the main diagonal
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for p in perms:
                    steps = np.zeros((4, 3), dtype=np.int64)
                    for s, axis in enumerate(p):
                        steps[s + 1] = steps[s]
                        steps[s + 1, axis] += 1
                    corners = base + steps
                    tets.append([vid(*c) for c in corners])
    tets = _orient_positive(verts, np.asarray(tets, dtype=np.int64))
    return TetMesh(vertices=verts, tets=tets)


# ---------------------------------------------------------------------------
# random organ generation


def gaussian_bump_field(points, centers, amplitudes, bandwidths) -> np.ndarray:
    """Sum of vector Gaussian bumps evaluated at points, (P, 3)."""
    disp = np.zeros_like(points)
    for c, a, w in zip(centers, amplitudes, bandwidths):
        d2 = np.sum((points - c) ** 2, axis=1)
        disp += np.exp(-d2 / (2.0 * w * w))[:, None] * a
    return disp


def generate_random_organ(seed: int, cfg: MeshGenConfig = None) -> tuple[TetMesh, ValidityReport]:
    """Deterministic random organ for a given (seed, cfg).

    Never raises on a bad draw: the returned ValidityReport tells the caller
    whether to discard. Warp passes that would invert an element are
    re-applied at half amplitude, then skipped once cfg.max_backoff is hit.
    """
    cfg = cfg or MeshGenConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D657368]))

    semi = rng.uniform(*cfg.semi_axis_range, size=3)
    center = cfg.domain_side / 2.0 + rng.uniform(
        -cfg.center_jitter, cfg.center_jitter, size=3
    )
    mesh = ball_template(cfg.subdivisions, cfg.shells, semi_axes=semi, center=center)

    n_passes = int(rng.integers(cfg.passes_range[0], cfg.passes_range[1] + 1))
    verts = mesh.vertices
    for _ in range(n_passes):
        n_bumps = int(rng.integers(cfg.bumps_per_pass[0], cfg.bumps_per_pass[1] + 1))
        centers = verts[rng.integers(0, len(verts), size=n_bumps)] + rng.normal(
            0.0, 0.02, size=(n_bumps, 3)
        )
        directions = rng.normal(size=(n_bumps, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        bandwidths = rng.uniform(*cfg.bump_bandwidth_range, size=n_bumps)
        mags = rng.uniform(*cfg.bump_amplitude_frac, size=n_bumps) * bandwidths
        amplitudes = directions * mags[:, None]

        scale = 1.0
        for _ in range(cfg.max_backoff + 1):
            candidate = verts + scale * gaussian_bump_field(
                verts, centers, amplitudes, bandwidths
            )
            if tet_volumes(candidate, mesh.tets).min() > 0:
                verts = candidate
                break
            scale *= 0.5

    mesh = TetMesh(vertices=verts, tets=mesh.tets, surface_vertex_ids=mesh.surface_vertex_ids)
    return mesh, check_validity(mesh, cfg.domain_side)


def check_validity(mesh: TetMesh, domain_side: float) -> ValidityReport:
    inside = bool(
        (mesh.vertices >= 0.0).all() and (mesh.vertices <= domain_side).all()
    )
    surface = extract_surface(mesh)
    selfx = surface_self_intersects(surface)
    quality = float(tet_quality(mesh.vertices, mesh.tets).min())
    return ValidityReport(
        inside_domain=inside, self_intersecting=selfx, min_tet_quality=quality
    )


# ---------------------------------------------------------------------------
# exact triangle-triangle intersection (for the self-intersection test)


def surface_self_intersects(surface: SurfaceMesh) -> bool:
    """Exact pairwise test over non-adjacent triangle pairs.

    AABB prefilter keeps the candidate set small; candidates then go through
    the Moller interval test. Pairs sharing a vertex are skipped.
    """
    pairs = _aabb_candidate_pairs(surface)
    if len(pairs) == 0:
        return False
    tri = surface.triangles
    v = surface.vertices
    t1 = v[tri[pairs[:, 0]]]
    t2 = v[tri[pairs[:, 1]]]
    hits = triangles_intersect(t1, t2)
    return bool(hits.any())


def _aabb_candidate_pairs(surface: SurfaceMesh) -> np.ndarray:
    tri = surface.triangles
    v = surface.vertices[tri]  # (T, 3, 3)
    lo = v.min(axis=1)
    hi = v.max(axis=1)
    n = len(tri)
    i, j = np.triu_indices(n, k=1)
    overlap = np.all(lo[i] <= hi[j], axis=1) & np.all(lo[j] <= hi[i], axis=1)
    i, j = i[overlap], j[overlap]
    # exclude pairs sharing any vertex
    shared = (tri[i][:, :, None] == tri[j][:, None, :]).any(axis=(1, 2))
    return np.stack([i[~shared], j[~shared]], axis=1)


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Vectorized Moller test for triangle pairs t1, t2 of shape (P, 3, 3)."""
    eps = 1e-13
    n2 = np.cross(t2[:, 1] - t2[:, 0], t2[:, 2] - t2[:, 0])
    d2 = -np.einsum("pi,pi->p", n2, t2[:, 0])
    dist1 = np.einsum("pi,pti->pt", n2, t1) + d2[:, None]
    dist1 = np.where(np.abs(dist1) < eps, 0.0, dist1)

    n1 = np.cross(t1[:, 1] - t1[:, 0], t1[:, 2] - t1[:, 0])
    d1 = -np.einsum("pi,pi->p", n1, t1[:, 0])
    dist2 = np.einsum("pi,pti->pt", n1, t2) + d1[:, None]
    dist2 = np.where(np.abs(dist2) < eps, 0.0, dist2)

    sep1 = (dist1 > 0).all(axis=1) | (dist1 < 0).all(axis=1)
    sep2 = (dist2 > 0).all(axis=1) | (dist2 < 0).all(axis=1)
    alive = ~(sep1 | sep2)

    coplanar = (dist1 == 0).all(axis=1)
    result = np.zeros(len(t1), dtype=bool)

    idx = np.nonzero(alive & ~coplanar)[0]
    if len(idx):
        result[idx] = _interval_overlap(
            t1[idx], t2[idx], n1[idx], n2[idx], dist1[idx], dist2[idx]
        )
    idx = np.nonzero(alive & coplanar)[0]
    for k in idx:
        result[k] = _coplanar_intersect(t1[k], t2[k], n1[k])
    return result


def _interval_overlap(t1, t2, n1, n2, dist1, dist2):
    line = np.cross(n1, n2)
    axis = np.argmax(np.abs(line), axis=1)
    p1 = np.take_along_axis(t1[..., :], axis[:, None, None], axis=2)[..., 0]
    p2 = np.take_along_axis(t2[..., :], axis[:, None, None], axis=2)[..., 0]
    i1 = _line_interval(p1, dist1)
    i2 = _line_interval(p2, dist2)
    return (i1[:, 0] <= i2[:, 1]) & (i2[:, 0] <= i1[:, 1])


def _line_interval(proj, dist):
    """Interval of the intersection line covered by a triangle.

    proj: (P, 3) projections of the vertices on the line axis;
    dist: (P, 3) signed distances to the other triangle's plane.
    """
    out = np.empty((len(proj), 2))
    for p in range(len(proj)):
        d = dist[p]
        pr = proj[p]
        ts = []
        for a in range(3):
            for b in range(a + 1, 3):
                da, db = d[a], d[b]
                if da == 0.0 and db == 0.0:
                    ts.extend([pr[a], pr[b]])
                elif da == 0.0:
                    ts.append(pr[a])
                elif db == 0.0:
                    ts.append(pr[b])
                elif (da > 0) != (db > 0):
                    t = da / (da - db)
                    ts.append(pr[a] + t * (pr[b] - pr[a]))
        ts = np.asarray(ts)
        out[p] = (ts.min(), ts.max()) if len(ts) else (np.inf, -np.inf)
    return out


def _coplanar_intersect(t1, t2, n) -> bool:
    """2D separating-axis test after dropping the dominant normal axis."""
    drop = int(np.argmax(np.abs(n)))
    keep = [a for a in range(3) if a != drop]
    a = t1[:, keep]
    b = t2[:, keep]
    for tri in (a, b):
        for i in range(3):
            edge = tri[(i + 1) % 3] - tri[i]
            normal = np.array([-edge[1], edge[0]])
            pa = a @ normal
            pb = b @ normal
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
