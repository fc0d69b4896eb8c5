"""Error metrics over estimated displacement fields.

Per-point error is the Euclidean norm of the estimate-minus-target vector,
evaluated only inside the organ (distance channel <= 0). Depth is the
distance to the nearest grid point carrying visible displacement. Reports
bin errors by depth slab, by target magnitude, and by visible-surface
fraction, and two reference estimators (all-zero and nearest-visible-copy)
give the floor any trained model must beat.

All lengths are meters.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from .sample import CH_SDF, CH_UVIS, Sample, grid_points

DEPTH_SLABS = ((0.02, 0.005), (0.04, 0.005), (0.06, 0.005))
MAGNITUDE_BIN = 0.002
FRACTION_BIN = 0.10


class EmptyVisibleSet(Exception):
    """No grid point carries visible displacement."""


# ---------------------------------------------------------------------------
# per-sample fields


def displacement_error(u_tar: np.ndarray, u_est: np.ndarray, organ_mask: np.ndarray):
    """Per-point error norm and (mean, max) over in-organ points.

    Returns (err, mean, max) where err is (n,n,n) with NaN outside the
    organ so downstream stats cannot silently include excluded points.
    """
    if u_tar.shape != u_est.shape or u_tar.shape[:3] != organ_mask.shape:
        raise ValueError(
            f"shape mismatch: {u_tar.shape} vs {u_est.shape} vs {organ_mask.shape}"
        )
    err = np.linalg.norm(
        np.asarray(u_tar, np.float64) - np.asarray(u_est, np.float64), axis=-1
    )
    inside = organ_mask > 0
    if not inside.any():
        raise ValueError("organ mask is empty")
    vals = err[inside]
    err = np.where(inside, err, np.nan)
    return err, float(vals.mean()), float(vals.max())


def depth_field(
    visible_mask: np.ndarray, n: int, side_length: float
) -> np.ndarray:
    """Distance from every grid point to the nearest visible grid point."""
    pts = grid_points(n, side_length)
    vis = np.asarray(visible_mask, bool).reshape(-1)
    if not vis.any():
        raise EmptyVisibleSet("no visible grid points")
    tree = cKDTree(pts[vis])
    d, _ = tree.query(pts)
    return d.reshape(n, n, n)


def visible_point_mask(sample: Sample) -> np.ndarray:
    """(n,n,n) bool: grid points carrying nonzero visible displacement."""
    return np.any(sample.input.data[..., CH_UVIS] != 0.0, axis=-1)


def has_visible_points(sample: Sample) -> bool:
    """False for degenerate samples whose visible patch does not move.

    A visible region fully inside the fixed (zero-displacement) patch
    splats an identically zero hint channel; depth to the visible surface
    is then undefined, so such samples cannot be scored and callers should
    skip them.
    """
    return bool(visible_point_mask(sample).any())


@dataclass
class EvalReport:
    """Aligned per-point arrays over one sample's in-organ points."""

    errors: np.ndarray
    depths: np.ndarray
    tar_mags: np.ndarray
    est_mags: np.ndarray
    visible_fraction: float
    seed: int = 0

    def __post_init__(self):
        m = len(self.errors)
        if not (len(self.depths) == len(self.tar_mags) == len(self.est_mags) == m):
            raise ValueError("per-point arrays must align")
        if m == 0:
            raise ValueError("report needs at least one in-organ point")

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean())

    @property
    def max_error(self) -> float:
        return float(self.errors.max())

    @property
    def num_points(self) -> int:
        return len(self.errors)


def sample_report(sample: Sample, u_est: np.ndarray) -> EvalReport:
    """Evaluate one estimate against its sample's target."""
    x = sample.input.data
    organ = x[..., CH_SDF] <= 0.0
    u_tar = np.asarray(sample.target.data, np.float64)
    err, _, _ = displacement_error(u_tar, u_est, organ)
    depth = depth_field(visible_point_mask(sample), sample.input.n,
                        sample.input.side_length)
    return EvalReport(
        errors=err[organ],
        depths=depth[organ],
        tar_mags=np.linalg.norm(u_tar, axis=-1)[organ],
        est_mags=np.linalg.norm(np.asarray(u_est, np.float64), axis=-1)[organ],
        visible_fraction=sample.meta.visible_fraction,
        seed=sample.meta.seed,
    )


# ---------------------------------------------------------------------------
# binned tables


def _magnitude_edges(max_mag: float, bin_size: float) -> np.ndarray:
    nbins = max(1, int(np.floor(max_mag / bin_size)) + 1)
    return bin_size * np.arange(nbins + 1)


@dataclass
class DepthSlabTable:
    """Error-vs-magnitude statistics for points in one depth slab."""

    center: float
    tolerance: float
    edges: np.ndarray  # magnitude bin edges, meters
    counts: np.ndarray  # points per target-magnitude bin
    mean_errors: np.ndarray  # mean E per bin, NaN where count = 0
    hist2d: np.ndarray  # counts over (target bin, estimate bin)


def bin_by_depth_and_magnitude(
    reports: list,
    depth_slabs=DEPTH_SLABS,
    magnitude_bin: float = MAGNITUDE_BIN,
) -> list:
    if not reports:
        raise ValueError("need at least one report")
    depths = np.concatenate([r.depths for r in reports])
    tar = np.concatenate([r.tar_mags for r in reports])
    est = np.concatenate([r.est_mags for r in reports])
    err = np.concatenate([r.errors for r in reports])

    top = float(max(tar.max(), est.max()))
    edges = _magnitude_edges(top, magnitude_bin)
    nbins = len(edges) - 1
    tables = []
    for center, tol in depth_slabs:
        sel = np.abs(depths - center) <= tol
        tbin = np.minimum((tar[sel] / magnitude_bin).astype(int), nbins - 1)
        ebin = np.minimum((est[sel] / magnitude_bin).astype(int), nbins - 1)
        counts = np.bincount(tbin, minlength=nbins)
        sums = np.bincount(tbin, weights=err[sel], minlength=nbins)
        with np.errstate(invalid="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        hist2d = np.zeros((nbins, nbins), dtype=np.int64)
        np.add.at(hist2d, (tbin, ebin), 1)
        tables.append(
            DepthSlabTable(center, tol, edges, counts, means, hist2d)
        )
    return tables


@dataclass
class FractionTable:
    edges: np.ndarray  # fraction bin edges in [0, 1]
    n_reports: np.ndarray
    n_points: np.ndarray
    mean_errors: np.ndarray  # pooled over all points of the bin's reports


def bin_by_visible_fraction(reports: list, bin_width: float = FRACTION_BIN):
    if not reports:
        raise ValueError("need at least one report")
    nbins = int(round(1.0 / bin_width))
    edges = bin_width * np.arange(nbins + 1)
    n_reports = np.zeros(nbins, dtype=np.int64)
    n_points = np.zeros(nbins, dtype=np.int64)
    sums = np.zeros(nbins)
    for r in reports:
        b = min(int(r.visible_fraction / bin_width), nbins - 1)
        n_reports[b] += 1
        n_points[b] += r.num_points
        sums[b] += r.errors.sum()
    means = np.where(n_points > 0, sums / np.maximum(n_points, 1), np.nan)
    return FractionTable(edges, n_reports, n_points, means)


def _spearman(x, y) -> float:
    """Rank correlation; NaN (quietly) when either input is constant."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", stats.ConstantInputWarning)
        return spearmanr(x, y).statistic


def depth_error_trend(reports: list, bin_width: float = 0.01):
    """Spearman rank correlation between depth bin and its mean error."""
    depths = np.concatenate([r.depths for r in reports])
    errors = np.concatenate([r.errors for r in reports])
    bins = (depths / bin_width).astype(int)
    centers, means = [], []
    for b in np.unique(bins):
        sel = bins == b
        centers.append((b + 0.5) * bin_width)
        means.append(errors[sel].mean())
    rho = _spearman(centers, means) if len(centers) > 1 else np.nan
    return float(rho), np.array(centers), np.array(means)


def fraction_error_trend(reports: list, bin_width: float = FRACTION_BIN):
    """Spearman rank correlation between fraction bin and its mean error."""
    table = bin_by_visible_fraction(reports, bin_width)
    sel = table.n_points > 0
    centers = 0.5 * (table.edges[:-1] + table.edges[1:])[sel]
    means = table.mean_errors[sel]
    rho = _spearman(centers, means) if sel.sum() > 1 else np.nan
    return float(rho), centers, means


# ---------------------------------------------------------------------------
# sparse correspondences


@dataclass
class SparseCorrespondences:
    """Annotated surface points and where they moved to."""

    source_points: np.ndarray  # (k, 3) rest positions on the surface
    target_positions: np.ndarray  # (k, 3) observed deformed positions

    def __post_init__(self):
        self.source_points = np.atleast_2d(np.asarray(self.source_points, float))
        self.target_positions = np.atleast_2d(
            np.asarray(self.target_positions, float)
        )
        if self.source_points.shape != self.target_positions.shape:
            raise ValueError("source/target shapes differ")
        if len(self.source_points) < 1 or self.source_points.shape[1] != 3:
            raise ValueError("need at least one 3D pair")
        if not (
            np.isfinite(self.source_points).all()
            and np.isfinite(self.target_positions).all()
        ):
            raise ValueError("non-finite correspondence")

    @property
    def displacements(self) -> np.ndarray:
        return self.target_positions - self.source_points


def sparse_to_dense_surface(
    corrs: SparseCorrespondences, surface, falloff: float = 0.03
):
    """Spread sparse pair displacements over nearby surface vertices.

    Gaussian-weighted inverse-square Shepard interpolation, exact at the
    annotated points; vertices farther than `falloff` from every
    annotation stay outside the returned region. Returns (field, region)
    with field (V, 3) and region a boolean vertex mask.
    """
    verts = surface.vertices
    disp = corrs.displacements
    diff = verts[:, None, :] - corrs.source_points[None, :, :]
    dist = np.linalg.norm(diff, axis=2)  # (V, k)
    region = dist.min(axis=1) <= falloff
    field = np.zeros((len(verts), 3))

    exact = dist < 1e-12
    has_exact = exact.any(axis=1)
    with np.errstate(divide="ignore", over="ignore"):
        w = np.exp(-0.5 * (dist / falloff) ** 2) / np.maximum(dist, 1e-300) ** 2
    wsum = w.sum(axis=1, keepdims=True)
    smooth = ~has_exact & region
    field[smooth] = (w[smooth] / wsum[smooth]) @ disp
    for v in np.nonzero(has_exact & region)[0]:
        field[v] = disp[np.argmax(exact[v])]
    return field, region


# ---------------------------------------------------------------------------
# reference estimators


def zero_field_estimate(sample: Sample) -> np.ndarray:
    return np.zeros_like(sample.target.data)


def nearest_visible_copy(sample: Sample) -> np.ndarray:
    """Copy each in-organ point's displacement from its nearest visible
    grid point; zero outside the organ like the network output."""
    x = sample.input.data
    n = sample.input.n
    vis = visible_point_mask(sample).reshape(-1)
    if not vis.any():
        raise EmptyVisibleSet("no visible grid points")
    pts = grid_points(n, sample.input.side_length)
    tree = cKDTree(pts[vis])
    _, idx = tree.query(pts)
    u_vis = x[..., CH_UVIS].reshape(-1, 3)
    est = u_vis[np.nonzero(vis)[0][idx]].reshape(n, n, n, 3)
    organ = x[..., CH_SDF] <= 0.0
    return (est * organ[..., None]).astype(sample.target.data.dtype)


def baseline_estimates(sample: Sample) -> dict:
    return {
        "zeroField": zero_field_estimate(sample),
        "nearestVisibleCopy": nearest_visible_copy(sample),
    }


# ---------------------------------------------------------------------------
# export


def export_tables(out_dir, slab_tables: list, fraction_table, reports: list):
    """Write the binned tables as CSV plus a JSON summary.

    Files: depth_magnitude.csv, hist2d_<center>cm.csv (one per slab),
    fraction_bins.csv, summary.json.
    """
    os.makedirs(out_dir, exist_ok=True)

    path = os.path.join(out_dir, "depth_magnitude.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([
            "slab_center_m", "slab_tol_m", "mag_bin_lo_m", "mag_bin_hi_m",
            "count", "mean_error_m",
        ])
        for t in slab_tables:
            for b in range(len(t.counts)):
                mean = "" if np.isnan(t.mean_errors[b]) else f"{t.mean_errors[b]:.9e}"
                wr.writerow([
                    f"{t.center:.4f}", f"{t.tolerance:.4f}",
                    f"{t.edges[b]:.4f}", f"{t.edges[b + 1]:.4f}",
                    int(t.counts[b]), mean,
                ])

    for t in slab_tables:
        path = os.path.join(out_dir, f"hist2d_{round(t.center * 100)}cm.csv")
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["tar_bin_lo_m", "est_bin_lo_m", "count"])
            for i, j in zip(*np.nonzero(t.hist2d)):
                wr.writerow([
                    f"{t.edges[i]:.4f}", f"{t.edges[j]:.4f}", int(t.hist2d[i, j])
                ])

    path = os.path.join(out_dir, "fraction_bins.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([
            "fraction_lo", "fraction_hi", "n_reports", "n_points", "mean_error_m"
        ])
        t = fraction_table
        for b in range(len(t.n_reports)):
            mean = "" if np.isnan(t.mean_errors[b]) else f"{t.mean_errors[b]:.9e}"
            wr.writerow([
                f"{t.edges[b]:.2f}", f"{t.edges[b + 1]:.2f}",
                int(t.n_reports[b]), int(t.n_points[b]), mean,
            ])

    errors = np.concatenate([r.errors for r in reports])
    depth_rho, _, _ = depth_error_trend(reports)
    frac_rho, _, _ = fraction_error_trend(reports)
    # undefined correlations (constant or empty inputs) become JSON null
    summary = {
        "n_reports": len(reports),
        "n_points": int(errors.size),
        "mean_error_m": float(errors.mean()),
        "max_error_m": float(errors.max()),
        "spearman_depth_vs_error": depth_rho if np.isfinite(depth_rho) else None,
        "spearman_fraction_vs_error": frac_rho if np.isfinite(frac_rho) else None,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary
