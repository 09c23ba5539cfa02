"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest
import torch

from voxcomplete.grids import GridSpec, VoxelGrid
from voxcomplete.meshvox import TriangleMesh


def pytest_configure(config):
    torch.set_num_threads(2)


@pytest.fixture
def spec8():
    return GridSpec(8)


@pytest.fixture
def spec16():
    return GridSpec(16)


def random_grid(spec, rng, density=0.4) -> VoxelGrid:
    return VoxelGrid(spec, (rng.random((spec.c,) * 3) < density).astype(np.uint8))


def random_blob(spec, rng, radius_frac=0.25) -> VoxelGrid:
    """Solid ball at a random interior center."""
    c = spec.c
    r = radius_frac * c
    margin = int(np.ceil(r)) + 1
    ctr = rng.uniform(margin, c - 1 - margin, size=3)
    pts = spec.voxel_centers()
    d2 = ((pts - ctr) ** 2).sum(axis=-1)
    return VoxelGrid(spec, (d2 <= r * r).astype(np.uint8))


# -- independent oracles ------------------------------------------------------


def brute_rasterize(cuboid, spec) -> np.ndarray:
    """Cuboid membership by per-voxel python loops."""
    out = np.zeros((spec.c,) * 3, dtype=np.uint8)
    rot = cuboid.rotation
    for i in range(spec.c):
        for j in range(spec.c):
            for k in range(spec.c):
                local = rot.T @ (np.array([i, j, k], float) - cuboid.center)
                if np.all(np.abs(local) <= cuboid.half_extents):
                    out[i, j, k] = 1
    return out


def brute_directed_avg(a: np.ndarray, b: np.ndarray) -> float:
    """O(n*m) nearest-neighbor mean distance."""
    total = 0.0
    for p in a:
        total += np.sqrt(((b - p) ** 2).sum(axis=1)).min()
    return total / len(a)


def brute_hd95(a: np.ndarray, b: np.ndarray) -> float:
    d_ab = [np.sqrt(((b - p) ** 2).sum(axis=1)).min() for p in a]
    d_ba = [np.sqrt(((a - q) ** 2).sum(axis=1)).min() for q in b]
    return float(np.percentile(np.array(d_ab + d_ba), 95))


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((num / den).max())


# -- end-to-end gradient check ------------------------------------------------


def tiny_gradcheck(rel_floor=1e-6, h=1e-4):
    """Finite-difference check of the full multi-target training loss
    against backprop for every parameter of a tiny double-precision model.

    Returns the worst relative error. Batch norm runs in eval (frozen
    statistics) mode and dropout is disabled so the loss is smooth.
    """
    from voxcomplete.grids import GridSpec
    from voxcomplete.losses import LossConfig
    from voxcomplete.model import CompletionNet, ModelConfig
    from voxcomplete.train import TrainConfig, compute_batch_loss, make_batch

    spec = GridSpec(8)
    rng = np.random.default_rng(0)
    shapes = [random_blob(spec, rng, radius_frac=0.22) for _ in range(3)]
    train_cfg = TrainConfig(
        objective="cvae_vwdice_tw", m=1, batch_size=1, augment=False
    )
    loss_cfg = LossConfig()
    batch = make_batch(shapes[:1], shapes, np.random.default_rng(1), train_cfg, loss_cfg)

    torch.manual_seed(0)
    cfg = ModelConfig(
        c=8, base_channels=2, depth=2, latent_dim=2, dropout_p=0.0,
        mode="probabilistic", mix_channels=4,
    )
    net = CompletionNet(cfg).double()
    net.eval()  # frozen batch-norm statistics; no dropout

    def loss_value():
        gen = torch.Generator().manual_seed(99)
        loss, _ = compute_batch_loss(
            net, batch, train_cfg, loss_cfg, gen, dtype=torch.float64
        )
        return loss

    loss = loss_value()
    net.zero_grad()
    loss.backward()

    worst = 0.0
    with torch.no_grad():
        for _name, param in net.named_parameters():
            grad = param.grad.reshape(-1)
            flat = param.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                fp = float(loss_value())
                flat[i] = old - h
                fm = float(loss_value())
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                an = float(grad[i])
                err = abs(an - fd) / max(abs(an), abs(fd), rel_floor)
                worst = max(worst, err)
    return worst


# -- mesh builders ------------------------------------------------------------


def box_mesh(lo, hi) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array(
        [
            [lo[0], lo[1], lo[2]],
            [hi[0], lo[1], lo[2]],
            [hi[0], hi[1], lo[2]],
            [lo[0], hi[1], lo[2]],
            [lo[0], lo[1], hi[2]],
            [hi[0], lo[1], hi[2]],
            [hi[0], hi[1], hi[2]],
            [lo[0], hi[1], hi[2]],
        ]
    )
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh.from_raw(corners, tris)


def icosphere(radius: float, subdiv: int) -> TriangleMesh:
    t = (1 + 5**0.5) / 2
    verts = [
        np.array(v, float)
        for v in [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ]
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(subdiv):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                w = verts[i] + verts[j]
                w = w / np.linalg.norm(w)
                cache[key] = len(verts)
                verts.append(w)
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh.from_raw(np.array(verts) * radius, faces)


ASCII_STL_CUBE = """solid cube
""" + "".join(
    f"""facet normal 0 0 0
outer loop
vertex {v0}
vertex {v1}
vertex {v2}
endloop
endfacet
"""
    for v0, v1, v2 in [
        ("0 0 0", "0 10 0", "10 10 0"), ("0 0 0", "10 10 0", "10 0 0"),
        ("0 0 10", "10 0 10", "10 10 10"), ("0 0 10", "10 10 10", "0 10 10"),
        ("0 0 0", "10 0 0", "10 0 10"), ("0 0 0", "10 0 10", "0 0 10"),
        ("10 10 0", "0 10 0", "0 10 10"), ("10 10 0", "0 10 10", "10 10 10"),
        ("10 0 0", "10 10 0", "10 10 10"), ("10 0 0", "10 10 10", "10 0 10"),
        ("0 0 0", "0 0 10", "0 10 10"), ("0 0 0", "0 10 10", "0 10 0"),
    ]
) + "endsolid cube\n"
