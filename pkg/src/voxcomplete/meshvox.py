"""Triangle mesh ingestion and ray-parity voxelization.

Meshes are filled by casting axis-aligned rays through voxel centers and
counting surface crossings; a voxel is inside when the count is odd. The
three axes vote independently and the majority wins, which tolerates
isolated parity glitches. Boundary hits are resolved by a deterministic
simulation-of-simplicity rule so that edges shared between two triangles
are counted exactly once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DoesNotFit, NonWatertight, ParseError, UnsupportedFormat
from .grids import GridSpec, VoxelGrid

_MERGE_TOL_MM = 1e-6
_STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices in mm and vertex-index triplets."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 4:
            raise ValueError("mesh needs at least 4 vertices of dimension 3")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) < 1:
            raise ValueError("mesh needs at least one triangle")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle indices out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def from_raw(cls, vertices, triangles) -> "TriangleMesh":
        """Build a mesh after deduplicating vertices (1e-6 mm) and dropping
        degenerate triangles."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0 or len(t) == 0:
            raise ValueError("empty mesh")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle indices out of range")
        keys = np.round(v / _MERGE_TOL_MM).astype(np.int64)
        _, first_idx, inverse = np.unique(
            keys, axis=0, return_index=True, return_inverse=True
        )
        v = v[first_idx]
        t = inverse.reshape(-1)[t]
        ok = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        t = t[ok]
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        t = t[area2 > 1e-12]
        if len(t) == 0:
            raise ValueError("all triangles degenerate after cleanup")
        return cls(v, t)


# ---------------------------------------------------------------------------
# mesh file parsing
# ---------------------------------------------------------------------------


def load_mesh(path) -> TriangleMesh:
    """Parse binary STL, ASCII STL, or OBJ (v/f records) into a cleaned mesh."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".stl":
        raw = p.read_bytes()
        if _looks_like_ascii_stl(raw):
            return _parse_ascii_stl(raw, p)
        return _parse_binary_stl(raw, p)
    if suffix == ".obj":
        return _parse_obj(p.read_bytes(), p)
    raise UnsupportedFormat(f"unsupported mesh format: {p.suffix!r}")


def _looks_like_ascii_stl(raw: bytes) -> bool:
    head = raw.lstrip()[:6].lower()
    return head.startswith(b"solid") and b"facet" in raw[:2048].lower()


def _parse_ascii_stl(raw: bytes, path) -> TriangleMesh:
    vertices = []
    triangles = []
    facet_verts = 0
    for lineno, line in enumerate(raw.decode("latin-1").splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0].lower()
        if key == "vertex":
            if len(tokens) != 4:
                raise ParseError("vertex record needs 3 coordinates", f"line {lineno}")
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ParseError("bad vertex coordinate", f"line {lineno}") from None
            facet_verts += 1
        elif key == "endfacet":
            if facet_verts != 3:
                raise ParseError(
                    f"facet has {facet_verts} vertices, expected 3", f"line {lineno}"
                )
            n = len(vertices)
            triangles.append([n - 3, n - 2, n - 1])
            facet_verts = 0
    if not triangles:
        raise ParseError("no facets found in ASCII STL", str(path))
    return TriangleMesh.from_raw(vertices, triangles)


def _parse_binary_stl(raw: bytes, path) -> TriangleMesh:
    if len(raw) < 84:
        raise ParseError("binary STL shorter than 84-byte preamble", len(raw))
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) < expected:
        raise ParseError(
            f"binary STL truncated: {count} facets need {expected} bytes, "
            f"got {len(raw)}",
            len(raw),
        )
    records = np.frombuffer(raw, dtype=_STL_RECORD, count=count, offset=84)
    vertices = records["verts"].reshape(-1, 3).astype(np.float64)
    triangles = np.arange(3 * count, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh.from_raw(vertices, triangles)


def _parse_obj(raw: bytes, path) -> TriangleMesh:
    vertices = []
    faces = []
    for lineno, line in enumerate(raw.decode("latin-1").splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise ParseError("vertex record needs 3 coordinates", f"line {lineno}")
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ParseError("bad vertex coordinate", f"line {lineno}") from None
        elif tokens[0] == "f":
            if len(tokens) < 4:
                raise ParseError("face needs at least 3 indices", f"line {lineno}")
            idx = []
            for tok in tokens[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise ParseError("bad face index", f"line {lineno}") from None
                idx.append(i + len(vertices) if i < 0 else i - 1)
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not faces:
        raise ParseError("no faces found in OBJ", str(path))
    faces = np.asarray(faces, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise ParseError("face index out of range", str(path))
    return TriangleMesh.from_raw(vertices, faces)


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TightGrid:
    """Occupancy on the world voxel lattice, trimmed to the occupied box.

    Voxel (i, j, k) covers world cube [(origin+idx)*vs, (origin+idx+1)*vs);
    its center sits at (origin + idx + 0.5) * voxel_size.
    """

    data: np.ndarray
    voxel_size: float
    origin: tuple

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def count(self) -> int:
        return int(self.data.sum())


def _edge_positive(du, dv):
    """Tie-break sign of a zero edge function: corresponds to nudging the
    sample point along (-eps^2, +eps), so every boundary point lands in
    exactly one of two triangles sharing an edge."""
    return (du > 0) | ((du == 0) & (dv > 0))


def _axis_parity(verts, tris, lo, dims, axis):
    """Inside parity for rays cast along +axis through all voxel centers.

    verts are in voxel units on the world lattice; lo/dims define the grid.
    Returns a bool array of shape dims (axes in x, y, z order).
    """
    u_ax, v_ax = [a for a in range(3) if a != axis]
    nu, nv, nw = dims[u_ax], dims[v_ax], dims[axis]
    n_cols = nu * nv
    hits = np.zeros((n_cols, nw + 1), dtype=np.int64)

    a3 = verts[tris[:, 0]]
    b3 = verts[tris[:, 1]]
    c3 = verts[tris[:, 2]]
    normals = np.cross(b3 - a3, c3 - a3)

    for t in range(len(tris)):
        n = normals[t]
        tv = np.array([a3[t], b3[t], c3[t]])
        area2 = (tv[1, u_ax] - tv[0, u_ax]) * (tv[2, v_ax] - tv[0, v_ax]) - (
            tv[1, v_ax] - tv[0, v_ax]
        ) * (tv[2, u_ax] - tv[0, u_ax])
        if area2 == 0.0:
            continue  # edge-on to the ray; neighbors carry the parity
        if area2 < 0:
            tv = tv[::-1]  # normalize projected winding to CCW
        pu = tv[:, u_ax]
        pv = tv[:, v_ax]
        # candidate columns: centers lo+i+0.5 within the projected bbox
        iu0 = max(0, int(np.ceil(pu.min() - lo[u_ax] - 0.5)))
        iu1 = min(nu - 1, int(np.floor(pu.max() - lo[u_ax] - 0.5)))
        iv0 = max(0, int(np.ceil(pv.min() - lo[v_ax] - 0.5)))
        iv1 = min(nv - 1, int(np.floor(pv.max() - lo[v_ax] - 0.5)))
        if iu0 > iu1 or iv0 > iv1:
            continue
        iu = np.arange(iu0, iu1 + 1)
        iv = np.arange(iv0, iv1 + 1)
        u0 = lo[u_ax] + iu + 0.5
        v0 = lo[v_ax] + iv + 0.5
        uu, vv = np.meshgrid(u0, v0, indexing="ij")

        inside = np.ones(uu.shape, dtype=bool)
        for i in range(3):
            au, av = pu[i], pv[i]
            du, dv = pu[(i + 1) % 3] - au, pv[(i + 1) % 3] - av
            e = du * (vv - av) - dv * (uu - au)
            inside &= (e > 0) | ((e == 0) & _edge_positive(du, dv))
        if not inside.any():
            continue

        # ray-plane intersection coordinate along the cast axis
        d = float(n @ tv[0])
        w = (d - n[u_ax] * uu - n[v_ax] * vv) / n[axis]
        kk = np.ceil(w - lo[axis] - 0.5).astype(np.int64)
        np.clip(kk, 0, nw, out=kk)
        cols = iu[:, None] * nv + iv[None, :]
        np.add.at(hits, (cols[inside], kk[inside]), 1)

    # crossings strictly beyond a center: total minus those at-or-below
    total = hits.sum(axis=1, keepdims=True)
    count_leq = np.cumsum(hits, axis=1)[:, :nw]
    grid_cols = (((total - count_leq) % 2) == 1).reshape(nu, nv, nw)

    # grid_cols axes are (u, v, ray); rearrange to (x, y, z)
    transpose = {0: (2, 0, 1), 1: (0, 2, 1), 2: (0, 1, 2)}[axis]
    return grid_cols.transpose(transpose)


def voxelize(mesh: TriangleMesh, voxel_size_mm: float) -> TightGrid:
    """Fill a mesh on the world lattice of edge ``voxel_size_mm``.

    Raises NonWatertight when more than 1% of grid voxels get inconsistent
    parity votes from the three ray axes.
    """
    if not voxel_size_mm > 0:
        raise ValueError("voxel size must be positive")
    verts = mesh.vertices / voxel_size_mm
    lo = np.floor(verts.min(axis=0)).astype(np.int64) - 1
    hi = np.ceil(verts.max(axis=0)).astype(np.int64) + 1
    dims = tuple(int(v) for v in (hi - lo))

    votes = np.zeros(dims, dtype=np.int8)
    for axis in range(3):
        votes += _axis_parity(verts, mesh.triangles, lo, dims, axis)
    occupancy = votes >= 2
    disagree = (votes == 1) | (votes == 2)
    frac = disagree.sum() / max(votes.size, 1)
    if frac > 0.01:
        raise NonWatertight(
            f"{frac:.1%} of voxels have inconsistent ray parity; "
            "mesh is not watertight enough"
        )

    if occupancy.any():
        nz = np.argwhere(occupancy)
        mins = nz.min(axis=0)
        maxs = nz.max(axis=0) + 1
        occupancy = occupancy[mins[0]:maxs[0], mins[1]:maxs[1], mins[2]:maxs[2]]
        lo = lo + mins
    return TightGrid(occupancy.astype(np.uint8), float(voxel_size_mm), tuple(int(v) for v in lo))


def pad_to_cube(g, c: int) -> VoxelGrid:
    """Center grid content in a cube of edge ``c`` with equal zero margins."""
    if isinstance(g, VoxelGrid):
        data = g.data
        voxel_size = g.spec.voxel_size
    elif isinstance(g, TightGrid):
        data = g.data
        voxel_size = g.voxel_size
    else:
        raise TypeError(f"cannot pad {type(g).__name__}")
    dims = data.shape
    if any(d > c for d in dims):
        raise DoesNotFit(f"content of shape {dims} does not fit in {c}^3")
    out = np.zeros((c, c, c), dtype=np.uint8)
    starts = [(c - d) // 2 for d in dims]
    out[
        starts[0]:starts[0] + dims[0],
        starts[1]:starts[1] + dims[1],
        starts[2]:starts[2] + dims[2],
    ] = data
    return VoxelGrid(GridSpec(c, voxel_size), out)
