"""End-to-end dataset generation: random meshes, boundary conditions, static
solves, voxelized samples, acceptance filtering, flip augmentation, and
persistence.

Each seed drives one fully deterministic pipeline attempt. Accepted samples
are expanded by the eight axis-flip combinations and written to disk; the
manifest assigns whole base meshes to train or validation so no flip family
straddles the split.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem, formats, meshgen, voxelize
from .meshgen import MeshGenConfig, SurfaceMesh
from .sample import CH_UVIS, Grid3, Sample

log = logging.getLogger(__name__)

# rejection reasons
OUTSIDE_CUBE = "outside_cube"
SELF_INTERSECTION = "self_intersection"
LOW_QUALITY = "low_quality"
NON_CONVERGENCE = "non_convergence"
TOO_LARGE = "too_large"

REASONS = (OUTSIDE_CUBE, SELF_INTERSECTION, LOW_QUALITY, NON_CONVERGENCE, TOO_LARGE)

# rng stream tags, fixed forever for reproducibility
_BC_TAG = 101
_VIS_TAG = 102


@dataclass
class DatasetConfig:
    """Generation knobs; defaults give the desk-scale dataset."""

    grid_n: int = 32
    side_length: float = 0.3
    num_meshes: int = 300  # accepted base meshes, before flip augmentation
    master_seed: int = 0  # first mesh seed attempted by generate_dataset
    train_fraction: float = 0.9
    max_displacement: float = 0.10  # meters, acceptance cap
    zero_radius_range: tuple = (0.025, 0.055)
    force_radius_range: tuple = (0.015, 0.025)
    force_max: float = 1.0  # newtons
    visible_radius_range: tuple = (0.02, 0.12)
    augment: bool = True
    meshgen: MeshGenConfig = field(default_factory=MeshGenConfig)
    material: fem.MaterialParams = field(default_factory=fem.MaterialParams)
    voxelize: voxelize.VoxelizeConfig = field(
        default_factory=voxelize.VoxelizeConfig
    )

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=float)
        return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# boundary-condition sampling


def sample_boundary_conditions(
    seed: int, surface: SurfaceMesh, cfg: DatasetConfig = None
) -> tuple:
    """Deterministic per-seed draw of (BCSpec, visible region indices)."""
    cfg = cfg or DatasetConfig()
    rng = np.random.default_rng([_BC_TAG, seed])
    nv = surface.num_vertices

    zero_seed = int(rng.integers(nv))
    zero_radius = float(rng.uniform(*cfg.zero_radius_range))
    force_seed = int(rng.integers(nv))
    force_radius = float(rng.uniform(*cfg.force_radius_range))
    magnitude = float(rng.uniform(0.0, cfg.force_max))
    direction = rng.normal(size=3)
    norm = np.linalg.norm(direction)
    while norm < 1e-12:  # pragma: no cover - probability ~0
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
    bc = fem.BCSpec(
        zero_seed=zero_seed,
        zero_radius=zero_radius,
        force_seed=force_seed,
        force_radius=force_radius,
        force_vector=magnitude * direction / norm,
    )

    vis_rng = np.random.default_rng([_VIS_TAG, seed])
    vis_seed = int(vis_rng.integers(nv))
    vis_radius = float(vis_rng.uniform(*cfg.visible_radius_range))
    visible = fem.select_surface_region(surface, vis_seed, vis_radius)
    return bc, visible


# ---------------------------------------------------------------------------
# acceptance


def accept_sample(
    validity: meshgen.ValidityReport,
    solve_error: Exception,
    u_tar: np.ndarray,
    cfg: DatasetConfig = None,
) -> tuple:
    """Pure accept/reject verdict: (accepted, reason or None)."""
    cfg = cfg or DatasetConfig()
    if validity is not None:
        if not validity.inside_domain:
            return False, OUTSIDE_CUBE
        if validity.self_intersecting:
            return False, SELF_INTERSECTION
        if validity.min_tet_quality < cfg.meshgen.quality_floor:
            return False, LOW_QUALITY
    if solve_error is not None:
        return False, NON_CONVERGENCE
    if u_tar is not None:
        max_mag = float(np.linalg.norm(u_tar, axis=1).max()) if len(u_tar) else 0.0
        if max_mag > cfg.max_displacement:
            return False, TOO_LARGE
    return True, None


# ---------------------------------------------------------------------------
# augmentation


def flip_grid(data: np.ndarray, flips: tuple) -> np.ndarray:
    """Mirror grid axes and negate the matching displacement components.

    Scalar channels ride along unchanged in value; for c >= 3 the LAST three
    channels are treated as a vector field whose component i is negated when
    axis i is flipped.
    """
    out = data
    for axis, flip in enumerate(flips):
        if flip:
            out = np.flip(out, axis=axis)
    out = out.copy()
    c = out.shape[3]
    if c >= 3:
        for axis, flip in enumerate(flips):
            if flip:
                out[..., c - 3 + axis] = -out[..., c - 3 + axis]
    return out


def augment_flips(sample: Sample) -> list:
    """All eight axis-flip combinations; index 0 is the original sample."""
    out = []
    for bits in range(8):
        flips = (bool(bits & 1), bool(bits & 2), bool(bits & 4))
        if bits == 0:
            out.append(sample)
            continue
        data_in = flip_grid(sample.input.data, flips)
        data_tar = flip_grid(sample.target.data, flips)
        out.append(
            Sample(
                Grid3(sample.n, sample.side_length, data_in),
                Grid3(sample.n, sample.side_length, data_tar),
                sample.meta,
            )
        )
    return out


# ---------------------------------------------------------------------------
# generation pipeline


@dataclass
class GenerationStats:
    attempted: int = 0
    accepted: int = 0
    rejected: dict = field(default_factory=lambda: {r: 0 for r in REASONS})

    def as_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "accepted": self.accepted,
            "rejected": dict(self.rejected),
        }


def generate_one(seed: int, cfg: DatasetConfig):
    """One pipeline attempt: (sample or None, reason or None)."""
    mesh, validity = meshgen.generate_random_organ(seed, cfg.meshgen)
    ok, reason = accept_sample(validity, None, None, cfg)
    if not ok:
        return None, reason

    surface = meshgen.extract_surface(mesh)
    bc, visible = sample_boundary_conditions(seed, surface, cfg)
    try:
        u_tar = fem.solve_static(mesh, cfg.material, bc, surface=surface)
    except (fem.NonConvergence, fem.SingularSystem) as err:
        ok, reason = accept_sample(None, err, None, cfg)
        return None, reason
    ok, reason = accept_sample(None, None, u_tar, cfg)
    if not ok:
        return None, reason

    sample = voxelize.assemble_sample(
        mesh,
        u_tar,
        bc,
        visible,
        cfg.grid_n,
        cfg.side_length,
        cfg=cfg.voxelize,
        seed=seed,
        surface=surface,
    )
    return sample, None


def generate_dataset(
    cfg: DatasetConfig, out_dir, seeds=None
) -> formats.DatasetManifest:
    """Run the full pipeline and persist samples + manifest.

    With ``seeds=None``, consecutive seeds are attempted until
    ``cfg.num_meshes`` base meshes are accepted (capped; a shortfall is
    logged, not raised). An explicit ``seeds`` iterable is attempted
    exactly once each, regardless of acceptance.

    Returns the manifest; writes ``manifest.txt`` and ``stats.json`` under
    ``out_dir``. Validation meshes are every k-th accepted base mesh so the
    split is exact, deterministic, and grouped by mesh.
    """
    os.makedirs(out_dir, exist_ok=True)
    if seeds is None:
        target = cfg.num_meshes
        attempt_cap = 8 * target + 32
        # master_seed offsets the whole seed sequence, giving disjoint
        # datasets from the same config
        seeds = range(cfg.master_seed, cfg.master_seed + attempt_cap)
    else:
        target = None

    val_every = max(2, round(1.0 / max(1.0 - cfg.train_fraction, 1e-9)))
    stats = GenerationStats()
    entries = []
    accepted_idx = 0
    for seed in seeds:
        if target is not None and stats.accepted >= target:
            break
        stats.attempted += 1
        sample, reason = generate_one(seed, cfg)
        if sample is None:
            stats.rejected[reason] += 1
            log.info("seed %d rejected: %s", seed, reason)
            continue
        split = "val" if (accepted_idx + 1) % val_every == 0 else "train"
        accepted_idx += 1
        stats.accepted += 1
        group = augment_flips(sample) if cfg.augment else [sample]
        for k, aug in enumerate(group):
            rel = f"s{seed:06d}_f{k}.dgs"
            formats.write_sample(aug, os.path.join(out_dir, rel))
            entries.append((rel, split))
        log.info("seed %d accepted (%s, %d files)", seed, split, len(group))

    if target is not None and stats.accepted < target:
        log.warning(
            "requested %d accepted meshes but got %d after %d attempts",
            target,
            stats.accepted,
            stats.attempted,
        )
    manifest = formats.DatasetManifest(entries=entries, config_digest=cfg.digest())
    formats.write_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    with open(os.path.join(out_dir, "stats.json"), "w") as f:
        json.dump(stats.as_dict(), f, indent=2, sort_keys=True)
    return manifest
