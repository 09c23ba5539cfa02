"""Binary occupancy grids, cuboid dissection masks, and rigid augmentation.

Grids live on a cubic lattice of edge ``c``. Voxel ``(i, j, k)`` has its
center at coordinates ``(i, j, k)`` in voxel units, so the geometric center
of the lattice is ``((c-1)/2,)*3``. Arrays are indexed ``data[x, y, z]``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, SamplingExhausted, SpecMismatch

log = logging.getLogger(__name__)

_VXG_MAGIC = b"VXG1"
_VXF_MAGIC = b"VXF1"


@dataclass(frozen=True)
class GridSpec:
    """Cubic lattice: edge length in voxels and physical voxel edge in mm."""

    c: int
    voxel_size: float = 1.0

    def __post_init__(self):
        if int(self.c) != self.c or self.c < 8:
            raise ValueError(f"grid edge must be an integer >= 8, got {self.c}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")

    @property
    def center(self) -> np.ndarray:
        return np.full(3, (self.c - 1) / 2.0)

    def voxel_centers(self) -> np.ndarray:
        """(c, c, c, 3) array of voxel center coordinates."""
        axes = np.arange(self.c, dtype=np.float64)
        gx, gy, gz = np.meshgrid(axes, axes, axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def _check_same_spec(a, b):
    if a.spec != b.spec:
        raise SpecMismatch(f"grid specs differ: {a.spec} vs {b.spec}")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy map, data[x, y, z] in {0, 1}."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        c = self.spec.c
        if arr.shape != (c, c, c):
            raise ValueError(f"expected shape {(c, c, c)}, got {arr.shape}")
        if arr.max(initial=0) > 1:
            raise ValueError("occupancy values must be 0 or 1")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def count(self) -> int:
        """Number of set voxels."""
        return int(self.data.sum())

    def same_as(self, other: "VoxelGrid") -> bool:
        return self.spec == other.spec and np.array_equal(self.data, other.data)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.zeros((spec.c,) * 3, dtype=np.uint8))

    @classmethod
    def ones(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.ones((spec.c,) * 3, dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class ProbGrid:
    """Real-valued probability map, data[x, y, z] in [0, 1]."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        c = self.spec.c
        if arr.shape != (c, c, c):
            raise ValueError(f"expected shape {(c, c, c)}, got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("probability values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def binarize(self, threshold: float = 0.5) -> VoxelGrid:
        """Voxels strictly above threshold become occupied."""
        return VoxelGrid(self.spec, (self.data > threshold).astype(np.uint8))


@dataclass(frozen=True, eq=False)
class DissectionCuboid:
    """Oriented box mask: center and half extents in voxel units."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        ctr = np.asarray(self.center, dtype=np.float64).reshape(3)
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.all(he > 0):
            raise ValueError("half extents must be positive")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=1e-6):
            raise ValueError("rotation must be proper (det +1)")
        for name, v in (("center", ctr), ("half_extents", he), ("rotation", rot)):
            v.flags.writeable = False
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class RigidAugmentation:
    """Per-axis rotation (degrees), integer voxel translation, optional
    mirroring across the mid-sagittal plane (x -> c-1-x)."""

    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation_vox: tuple = (0, 0, 0)
    mirror_sagittal: bool = False

    @property
    def is_identity(self) -> bool:
        return (
            not any(self.rotation_deg)
            and not any(self.translation_vox)
            and not self.mirror_sagittal
        )


@dataclass(frozen=True)
class AugmentationConfig:
    max_rotation_deg: float = 10.0
    max_translation_vox: int = 3
    mirror_prob: float = 0.5


@dataclass(frozen=True)
class DissectionConfig:
    """Rejection bounds for random cuboid dissection.

    Accepted cuboids remove between ``min_removed_fraction`` and
    ``max_removed_fraction`` of the shape's voxels. Half extents are drawn
    uniformly per axis as a fraction of the grid edge; centers are drawn
    uniformly over the shape's set voxels; orientation is uniform over
    rotations via quaternion sampling.
    """

    min_removed_fraction: float = 0.02
    max_removed_fraction: float = 0.5
    max_attempts: int = 100
    half_extent_frac: tuple = (0.15, 0.5)


def rasterize_cuboid(cuboid: DissectionCuboid, spec: GridSpec) -> VoxelGrid:
    """Occupancy of the oriented box: voxel centers transformed into the
    box frame and tested against the half extents (boundary inclusive)."""
    pts = spec.voxel_centers().reshape(-1, 3)
    local = (pts - cuboid.center) @ cuboid.rotation
    inside = np.all(np.abs(local) <= cuboid.half_extents, axis=1)
    return VoxelGrid(spec, inside.reshape((spec.c,) * 3).astype(np.uint8))


def complement(b: VoxelGrid) -> VoxelGrid:
    return VoxelGrid(b.spec, 1 - b.data)


def dissect(s: VoxelGrid, b: VoxelGrid):
    """Split a shape by a binary mask into (remainder, removed segment)."""
    _check_same_spec(s, b)
    x = VoxelGrid(s.spec, s.data * (1 - b.data))
    y = VoxelGrid(s.spec, s.data * b.data)
    return x, y


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    return _quat_to_matrix(q)


def sample_dissection(
    s: VoxelGrid,
    rng_seed: int,
    config: DissectionConfig | None = None,
):
    """Draw a random cuboid that removes a nontrivial chunk of the shape.

    Returns ``(cuboid, x, y)`` with ``x = s`` outside and ``y = s`` inside
    the cuboid. Deterministic for a fixed seed. Raises SamplingExhausted
    when no draw within the attempt budget satisfies the removal bounds.
    """
    cfg = config or DissectionConfig()
    n_set = s.count
    if n_set == 0:
        raise ValueError("cannot dissect an empty shape")
    rng = np.random.default_rng(rng_seed)
    set_voxels = np.argwhere(s.data)
    c = s.spec.c
    lo, hi = cfg.half_extent_frac
    min_removed = max(1, int(np.ceil(cfg.min_removed_fraction * n_set)))
    max_removed = int(np.floor(cfg.max_removed_fraction * n_set))

    for _ in range(cfg.max_attempts):
        center = set_voxels[rng.integers(len(set_voxels))].astype(np.float64)
        half_extents = rng.uniform(lo * c, hi * c, size=3)
        rotation = random_rotation(rng)
        cuboid = DissectionCuboid(center, half_extents, rotation)
        b = rasterize_cuboid(cuboid, s.spec)
        removed = int((s.data & b.data).sum())
        if min_removed <= removed <= max_removed:
            x, y = dissect(s, b)
            return cuboid, x, y
    raise SamplingExhausted(
        f"no cuboid removing [{min_removed}, {max_removed}] voxels "
        f"found in {cfg.max_attempts} attempts"
    )


def sample_augmentation(
    rng: np.random.Generator, config: AugmentationConfig | None = None
) -> RigidAugmentation:
    cfg = config or AugmentationConfig()
    rot = tuple(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3))
    trans = tuple(
        int(v)
        for v in rng.integers(
            -cfg.max_translation_vox, cfg.max_translation_vox + 1, size=3
        )
    )
    mirror = bool(rng.random() < cfg.mirror_prob)
    return RigidAugmentation(rot, trans, mirror)


def _euler_deg_to_matrix(rotation_deg) -> np.ndarray:
    """Rz @ Ry @ Rx from per-axis angles in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_augmentation(s: VoxelGrid, aug: RigidAugmentation) -> VoxelGrid:
    """Nearest-neighbor resample under a rigid transform about the grid
    center, then optional sagittal mirror. Voxels transported outside the
    grid are dropped (logged when the loss exceeds 1% of the shape)."""
    c = s.spec.c
    if aug.is_identity:
        return s
    if not any(aug.rotation_deg) and not any(aug.translation_vox):
        data = s.data
    else:
        ctr = s.spec.center
        rot = _euler_deg_to_matrix(aug.rotation_deg)
        t = np.asarray(aug.translation_vox, dtype=np.float64)
        # backward map: source point for each output voxel center
        q = s.spec.voxel_centers().reshape(-1, 3)
        src = (q - ctr - t) @ rot + ctr
        idx = np.rint(src).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < c), axis=1)
        out = np.zeros(len(q), dtype=np.uint8)
        iv = idx[valid]
        out[valid] = s.data[iv[:, 0], iv[:, 1], iv[:, 2]]
        data = out.reshape((c, c, c))
        lost = s.count - int(data.sum())
        if lost > 0.01 * max(s.count, 1):
            log.info("augmentation dropped %d of %d voxels (>1%%)", lost, s.count)
    if aug.mirror_sagittal:
        data = data[::-1, :, :]
    return VoxelGrid(s.spec, data)


# ---------------------------------------------------------------------------
# VXG1 / VXF1 file formats: magic, three equal uint32 LE dims, float32 LE
# voxel size in mm, then c^3 payload values with x varying fastest.
# ---------------------------------------------------------------------------


def _write_header(fh, magic: bytes, spec: GridSpec):
    fh.write(magic)
    fh.write(struct.pack("<IIIf", spec.c, spec.c, spec.c, spec.voxel_size))


def _read_header(fh, path, expect_magic: bytes) -> GridSpec:
    magic = fh.read(4)
    if magic != expect_magic:
        raise ParseError(
            f"bad magic {magic!r}, expected {expect_magic!r} in {path}", 0
        )
    raw = fh.read(16)
    if len(raw) != 16:
        raise ParseError(f"truncated header in {path}", 4)
    nx, ny, nz, voxel_size = struct.unpack("<IIIf", raw)
    if not (nx == ny == nz):
        raise ParseError(f"dims must be equal, got {(nx, ny, nz)} in {path}", 4)
    return GridSpec(int(nx), float(voxel_size))


def save_vxg(grid: VoxelGrid, path):
    with open(path, "wb") as fh:
        _write_header(fh, _VXG_MAGIC, grid.spec)
        fh.write(grid.data.tobytes(order="F"))


def load_vxg(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        spec = _read_header(fh, path, _VXG_MAGIC)
        payload = fh.read()
    n = spec.c**3
    if len(payload) != n:
        raise ParseError(f"expected {n} payload bytes, got {len(payload)}", 20)
    data = np.frombuffer(payload, dtype=np.uint8).reshape((spec.c,) * 3, order="F")
    return VoxelGrid(spec, data)


def save_vxf(grid: ProbGrid, path):
    with open(path, "wb") as fh:
        _write_header(fh, _VXF_MAGIC, grid.spec)
        fh.write(grid.data.astype("<f4").tobytes(order="F"))


def load_vxf(path) -> ProbGrid:
    with open(path, "rb") as fh:
        spec = _read_header(fh, path, _VXF_MAGIC)
        payload = fh.read()
    n = spec.c**3 * 4
    if len(payload) != n:
        raise ParseError(f"expected {n} payload bytes, got {len(payload)}", 20)
    data = np.frombuffer(payload, dtype="<f4").reshape((spec.c,) * 3, order="F")
    return ProbGrid(spec, data.astype(np.float64))
