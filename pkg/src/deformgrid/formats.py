"""Little-endian binary containers and the dataset manifest.

Containers carry magic bytes so corrupted or misrouted files fail cleanly:
  DGMESH1  tet mesh: vertex/tet counts, f64 coordinates, i32 indices
  DGSMP1   sample: grid header, meta, raw f32 channel blocks
  DGNET1   network checkpoint: JSON header, raw f32 parameter blocks

Grid channel blocks store per-point channel tuples with the x index varying
fastest. All multi-byte values are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .meshgen import TetMesh
from .sample import Grid3, Sample, SampleMeta

MESH_MAGIC = b"DGMESH1"
SAMPLE_MAGIC = b"DGSMP1"
NET_MAGIC = b"DGNET1"


class FormatError(Exception):
    """Raised for bad magic bytes, truncation, or inconsistent headers."""


# ---------------------------------------------------------------------------
# helpers


def _read_exact(f, size: int) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated file: wanted {size} bytes, got {len(buf)}")
    return buf


def _expect_magic(f, magic: bytes, kind: str):
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"not a {kind} file: bad magic {got!r}")


def _grid_to_bytes(data: np.ndarray) -> bytes:
    """(nx, ny, nz, c) -> per-point channel tuples, x-fastest."""
    return np.ascontiguousarray(data.transpose(2, 1, 0, 3)).tobytes()


def _grid_from_bytes(buf: bytes, n: int, c: int, dtype) -> np.ndarray:
    arr = np.frombuffer(buf, dtype=dtype).reshape(n, n, n, c)
    return np.ascontiguousarray(arr.transpose(2, 1, 0, 3))


# ---------------------------------------------------------------------------
# tet mesh container


def write_mesh(mesh: TetMesh, path):
    with open(path, "wb") as f:
        f.write(MESH_MAGIC)
        f.write(struct.pack("<II", mesh.num_vertices, mesh.num_tets))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.tets, dtype="<i4").tobytes())


def read_mesh(path) -> TetMesh:
    with open(path, "rb") as f:
        _expect_magic(f, MESH_MAGIC, "mesh")
        nv, nt = struct.unpack("<II", _read_exact(f, 8))
        verts = np.frombuffer(_read_exact(f, nv * 24), dtype="<f8").reshape(nv, 3)
        tets = np.frombuffer(_read_exact(f, nt * 16), dtype="<i4").reshape(nt, 4)
    return TetMesh(vertices=verts.copy(), tets=tets.copy())


def export_surface_obj(surface, path):
    """ASCII Wavefront export of a triangle surface, for inspection."""
    with open(path, "w") as f:
        for v in surface.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in surface.triangles + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


# ---------------------------------------------------------------------------
# sample container

_SAMPLE_HEADER = struct.Struct("<IdII Qdd".replace(" ", ""))


def write_sample(s: Sample, path):
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(
            _SAMPLE_HEADER.pack(
                s.n,
                s.side_length,
                s.input.channels,
                s.target.channels,
                s.meta.seed,
                s.meta.visible_fraction,
                s.meta.max_target_magnitude,
            )
        )
        f.write(_grid_to_bytes(s.input.data.astype("<f4", copy=False)))
        f.write(_grid_to_bytes(s.target.data.astype("<f4", copy=False)))


def read_sample(path) -> Sample:
    with open(path, "rb") as f:
        _expect_magic(f, SAMPLE_MAGIC, "sample")
        n, side, c_in, c_tar, seed, frac, maxmag = _SAMPLE_HEADER.unpack(
            _read_exact(f, _SAMPLE_HEADER.size)
        )
        n3 = n * n * n
        inp = _grid_from_bytes(_read_exact(f, n3 * c_in * 4), n, c_in, "<f4")
        tar = _grid_from_bytes(_read_exact(f, n3 * c_tar * 4), n, c_tar, "<f4")
    meta = SampleMeta(seed=seed, visible_fraction=frac, max_target_magnitude=maxmag)
    return Sample(Grid3(n, side, inp), Grid3(n, side, tar), meta)


def export_grid_ascii(grid: Grid3, channel: int, path):
    """One line per grid point: ix iy iz value, x index fastest."""
    data = grid.data[..., channel]
    with open(path, "w") as f:
        f.write(f"# n={grid.n} side={grid.side_length!r} channel={channel}\n")
        for iz in range(grid.n):
            for iy in range(grid.n):
                for ix in range(grid.n):
                    f.write(f"{ix} {iy} {iz} {data[ix, iy, iz]:.9g}\n")


# ---------------------------------------------------------------------------
# network checkpoint


def write_checkpoint(path, header: dict, params: list, state: dict = None):
    """header must contain the network config and parameter shapes; an
    optional optimizer state (first/second moments, step count) rides along
    so training can resume."""
    header = dict(header)
    header["param_shapes"] = [list(p.shape) for p in params]
    header["has_state"] = state is not None
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        if state is not None:
            f.write(struct.pack("<Q", state["step"]))
            for key in ("m", "v"):
                for arr in state[key]:
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, list, dict]:
    """Returns (header, params, state_or_None)."""
    with open(path, "rb") as f:
        _expect_magic(f, NET_MAGIC, "checkpoint")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, blob_len).decode("utf-8"))
        shapes = [tuple(s) for s in header["param_shapes"]]
        params = []
        for shape in shapes:
            count = int(np.prod(shape))
            params.append(
                np.frombuffer(_read_exact(f, count * 4), dtype="<f4")
                .reshape(shape)
                .copy()
            )
        state = None
        if header.get("has_state"):
            (step,) = struct.unpack("<Q", _read_exact(f, 8))
            state = {"step": step, "m": [], "v": []}
            for key in ("m", "v"):
                for shape in shapes:
                    count = int(np.prod(shape))
                    state[key].append(
                        np.frombuffer(_read_exact(f, count * 4), dtype="<f4")
                        .reshape(shape)
                        .copy()
                    )
    return header, params, state


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class DatasetManifest:
    entries: list  # of (relative path, "train" | "val")
    config_digest: str

    def paths(self, split: str) -> list:
        return [p for p, s in self.entries if s == split]


def write_manifest(manifest: DatasetManifest, path):
    lines = ["# deformgrid-manifest v1", f"# config-digest: {manifest.config_digest}"]
    for rel, split in manifest.entries:
        if split not in ("train", "val"):
            raise ValueError(f"bad split label {split!r}")
        lines.append(f"{rel}\t{split}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    entries = []
    digest = ""
    with open(path, errors="replace") as f:
        first = f.readline().rstrip("\n")
        if first != "# deformgrid-manifest v1":
            raise FormatError(f"not a manifest: {first!r}")
        for num, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# config-digest: "):
                digest = line.split(": ", 1)[1]
                continue
            if line.startswith("#"):
                continue
            try:
                rel, split = line.split("\t")
            except ValueError:
                raise FormatError(f"{path}:{num}: bad manifest line {line!r}")
            entries.append((rel, split))
    return DatasetManifest(entries=entries, config_digest=digest)
