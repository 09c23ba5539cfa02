"""Procedural horseshoe shapes: an axial arc with two vertical rami.

These stand in for real jaw scans so that training and evaluation run
without any clinical data. A shape is the set of voxels within a varying
radius of a polyline curve; the radius is modulated by a seeded
low-frequency perturbation and a bulge toward the top of each ramus.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateShape
from .grids import GridSpec, VoxelGrid, save_vxg

log = logging.getLogger(__name__)

_ARC_SAMPLES = 96  # per half-arc
_RAMUS_SAMPLES = 40


@dataclass(frozen=True)
class SynthParams:
    arch_radius_frac: float = 0.30
    arch_opening_deg: float = 170.0
    tube_radius_frac: float = 0.09
    ramus_height_frac: float = 0.32
    condyle_bulge: float = 0.4
    perturb_amp: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name in ("arch_radius_frac", "tube_radius_frac", "ramus_height_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5), got {v}")
        if not 120.0 <= self.arch_opening_deg <= 220.0:
            raise ValueError(
                f"arch_opening_deg must lie in [120, 220], got {self.arch_opening_deg}"
            )


@dataclass(frozen=True)
class SynthRanges:
    """Uniform parameter ranges for dataset sampling."""

    arch_radius_frac: tuple = (0.24, 0.32)
    arch_opening_deg: tuple = (140.0, 200.0)
    tube_radius_frac: tuple = (0.07, 0.11)
    ramus_height_frac: tuple = (0.24, 0.38)
    condyle_bulge: tuple = (0.2, 0.5)
    perturb_amp: tuple = (0.05, 0.25)


def _half_curve(params: SynthParams, c: int):
    """Right half of the curve (x >= center), chained chin -> ramus top.

    Returns (points, along) where ``along`` is the normalized position used
    by the radius modulation, 0 at the chin and 1 at the ramus top.
    """
    r_arc = params.arch_radius_frac * c
    half_open = np.deg2rad(params.arch_opening_deg) / 2.0
    phi = np.linspace(0.0, half_open, _ARC_SAMPLES)
    arc = np.stack(
        [r_arc * np.sin(phi), -r_arc * np.cos(phi), np.zeros_like(phi)], axis=1
    )
    h = params.ramus_height_frac * c
    t = np.linspace(0.0, 1.0, _RAMUS_SAMPLES)[1:]
    end = arc[-1]
    ramus = np.stack(
        [np.full_like(t, end[0]), np.full_like(t, end[1]), h * t], axis=1
    )
    pts = np.concatenate([arc, ramus], axis=0)

    arc_len = r_arc * half_open
    along = np.concatenate([phi * r_arc, arc_len + t * h]) / max(arc_len + h, 1e-9)
    return pts, along


def _curve_and_radii(params: SynthParams, spec: GridSpec):
    """Two mirrored half-polylines with per-point tube radii (voxel units).

    The x coordinates stay relative to the sagittal plane and the two
    halves run chin -> ramus top with exactly negated x, so mirror-partner
    segments evaluate to bit-identical distances. With ``perturb_amp = 0``
    the voxelized tube is therefore exactly symmetric.
    """
    c = spec.c
    right, along = _half_curve(params, c)
    left = right.copy()
    left[:, 0] = -left[:, 0]

    base = params.tube_radius_frac * c
    # condyle: radius swells quadratically toward the ramus top
    ramus_pos = np.clip((along - 0.55) / 0.45, 0.0, 1.0)
    radii_right = base * (1.0 + params.condyle_bulge * ramus_pos**2)
    radii_left = radii_right.copy()

    if params.perturb_amp > 0.0:
        rng = np.random.default_rng(params.seed)
        n = len(along)
        # chain parameter over left top -> chin -> right top
        s_right = (np.arange(n) + n - 1) / (2 * n - 2)
        s_left = 1.0 - s_right
        amps = rng.uniform(0.3, 1.0, size=3)
        amps /= amps.sum()
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)

        def wave(s):
            w = np.zeros_like(s)
            for k in range(3):
                w += amps[k] * np.sin(2.0 * np.pi * (k + 1) * s + phases[k])
            return w

        radii_right = radii_right * (1.0 + params.perturb_amp * wave(s_right))
        radii_left = radii_left * (1.0 + params.perturb_amp * wave(s_left))
    floor = np.maximum(1.0, 0.35 * base)
    radii_right = np.maximum(radii_right, floor)
    radii_left = np.maximum(radii_left, floor)

    # center the curve's bounding box along y and z; x needs no shift by
    # symmetry. Using the bare curve (not the inflated tube) keeps the
    # placement independent of the radius parameters, so growing the tube
    # radius strictly grows the occupied set.
    ctr = spec.center
    pp = np.concatenate([left, right], axis=0)
    lo = pp.min(axis=0)
    hi = pp.max(axis=0)
    for ax in (1, 2):
        shift = ctr[ax] - (lo[ax] + hi[ax]) / 2.0
        right[:, ax] += shift
        left[:, ax] += shift
    return (left, radii_left), (right, radii_right)


def generate_shape(params: SynthParams, spec: GridSpec) -> VoxelGrid:
    """Voxels within the modulated tube radius of the horseshoe curve."""
    halves = _curve_and_radii(params, spec)
    centers = spec.voxel_centers().reshape(-1, 3)
    centers[:, 0] -= spec.center[0]  # match the curve's sagittal-relative x

    margin = np.full(len(centers), np.inf)
    for pts, radii in halves:
        for i in range(len(pts) - 1):
            a, b = pts[i], pts[i + 1]
            ra, rb = radii[i], radii[i + 1]
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                t = np.zeros(len(centers))
            else:
                t = np.clip((centers - a) @ ab / denom, 0.0, 1.0)
            delta = centers - a - t[:, None] * ab
            dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
            np.minimum(margin, dist - (ra + t * (rb - ra)), out=margin)

    data = (margin <= 0.0).reshape((spec.c,) * 3).astype(np.uint8)
    volume = int(data.sum())
    if volume < 0.01 * spec.c**3:
        raise DegenerateShape(
            f"shape volume {volume} below 1% of the grid ({spec.c ** 3})"
        )
    six_conn = ndimage.generate_binary_structure(3, 1)
    _, n_components = ndimage.label(data, structure=six_conn)
    if n_components != 1:
        raise DegenerateShape(f"shape has {n_components} connected components")
    return VoxelGrid(spec, data)


def sample_params(rng: np.random.Generator, ranges: SynthRanges) -> SynthParams:
    def u(pair):
        return float(rng.uniform(*pair))

    return SynthParams(
        arch_radius_frac=u(ranges.arch_radius_frac),
        arch_opening_deg=u(ranges.arch_opening_deg),
        tube_radius_frac=u(ranges.tube_radius_frac),
        ramus_height_frac=u(ranges.ramus_height_frac),
        condyle_bulge=u(ranges.condyle_bulge),
        perturb_amp=u(ranges.perturb_amp),
        seed=int(rng.integers(2**31)),
    )


def generate_dataset(
    n: int,
    spec: GridSpec,
    seed: int,
    ranges: SynthRanges | None = None,
    out_dir=None,
):
    """Generate ``n`` shapes with parameters drawn from ``ranges``.

    Deterministic per seed. Degenerate draws are resampled up to 10 times
    before the error propagates. When ``out_dir`` is given, writes one VXG1
    file per shape plus a JSON manifest of the parameters.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    ranges = ranges or SynthRanges()
    rng = np.random.default_rng(seed)
    shapes = []
    manifest = []
    for i in range(n):
        last_err = None
        for _ in range(10):
            params = sample_params(rng, ranges)
            try:
                shape = generate_shape(params, spec)
                break
            except DegenerateShape as err:
                last_err = err
        else:
            raise last_err
        shapes.append(shape)
        manifest.append(params)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, shape in enumerate(shapes):
            save_vxg(shape, out / f"shape_{i:03d}.vxg")
        with open(out / "manifest.json", "w") as fh:
            json.dump([asdict(p) for p in manifest], fh, indent=2, sort_keys=True)
    return shapes, manifest
