"""Objective functions for completion training.

The reconstruction loss is a Dice complement in which every voxel is
weighted by its relevance to the removed segment: weight 1 inside the
dissection mask, and a Gaussian falloff (centered on the segment centroid,
sigma = c/3 by default) outside it. This keeps the optimization focused on
the defect while still anchoring the prediction to the surrounding anatomy.

For probabilistic training, several donor segments cut with the same mask
act as alternative targets; their losses are averaged with weights equal
to each target's overlap ("conformity") with the true segment, plus a KL
pull of the posterior toward the unit normal.

All losses come with hand-derived gradients so they can be verified
against finite differences and drive the network optimizer directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTarget, NonPositiveSigma, SpecMismatch
from .grids import GridSpec, ProbGrid, VoxelGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1  # KL weight
    sigma_w_frac: float = 1.0 / 3.0  # falloff sigma as a fraction of c
    smooth_eps: float = 1e-6  # Dice denominator guard
    m: int = 2  # extra donor targets
    kl_weighting: str = "mean"  # "mean" or "conformity"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.smooth_eps > 0:
            raise ValueError("smooth_eps must be > 0")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.kl_weighting not in ("mean", "conformity"):
            raise ValueError(f"unknown kl_weighting {self.kl_weighting!r}")


@dataclass(frozen=True, eq=False)
class WeightField:
    """Per-voxel loss weights: 1 inside the dissection mask, Gaussian
    falloff from the target centroid outside it."""

    spec: GridSpec
    data: np.ndarray
    sigma_w: float
    center: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        ctr = np.ascontiguousarray(self.center, dtype=np.float64).reshape(3)
        ctr.flags.writeable = False
        object.__setattr__(self, "center", ctr)


@dataclass(frozen=True, eq=False)
class TargetSet:
    """Candidate reconstruction targets and their conformity weights.

    Slot 0 is the true removed segment with conformity exactly 1; the rest
    are donor segments cut by the same mask.
    """

    targets: list
    conformities: np.ndarray

    def __post_init__(self):
        conf = np.ascontiguousarray(self.conformities, dtype=np.float64)
        if len(conf) != len(self.targets):
            raise ValueError("one conformity per target required")
        if len(conf) == 0:
            raise ValueError("target set cannot be empty")
        if conf[0] != 1.0:
            raise ValueError("the true target must have conformity 1")
        if conf.min() < 0.0 or conf.max() > 1.0:
            raise ValueError("conformities must lie in [0, 1]")
        conf.flags.writeable = False
        object.__setattr__(self, "conformities", conf)

    @property
    def m(self) -> int:
        return len(self.targets) - 1


@dataclass(frozen=True, eq=False)
class PosteriorParams:
    """Mean and standard deviation of a diagonal-normal latent posterior."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.ascontiguousarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma must have the same length")
        if np.any(sigma <= 0):
            raise NonPositiveSigma("sigma must be strictly positive")
        for name, v in (("mu", mu), ("sigma", sigma)):
            v.flags.writeable = False
            object.__setattr__(self, name, v)


# ---------------------------------------------------------------------------
# array cores (dtype-generic, shared by the numpy API and the torch bridge)
# ---------------------------------------------------------------------------


def soft_dice_array(p, t, eps: float) -> float:
    num = 2.0 * float((p * t).sum())
    den = float(p.sum()) + float(t.sum()) + eps
    return num / den


def vw_dice_array(p, t, w, eps: float):
    """Weighted Dice complement and its gradient with respect to ``p``.

    loss = 1 - N/D with N = 2*sum(p*t*w), D = sum((p+t)*w) + eps, hence
    dloss/dp = w * (N - 2*t*D) / D^2.
    """
    tw = t * w
    num = 2.0 * float((p * tw).sum())
    den = float((p * w).sum()) + float(tw.sum()) + eps
    loss = 1.0 - num / den
    grad = w * (num - 2.0 * t * den) / den**2
    return loss, grad


def masked_dice_array(p, t, mask, eps: float):
    """Dice complement of the masked prediction against a target inside the
    mask: loss = 1 - 2*sum(p*mask*t) / (sum(p*mask) + sum(t) + eps)."""
    pm = p * mask
    num = 2.0 * float((pm * t).sum())
    den = float(pm.sum()) + float(t.sum()) + eps
    loss = 1.0 - num / den
    grad = mask * (num - 2.0 * t * den) / den**2
    return loss, grad


def kl_std_normal_array(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)) with gradients in mu and sigma."""
    kl = 0.5 * float((mu**2 + sigma**2 - 1.0).sum()) - float(np.log(sigma).sum())
    grad_mu = mu.copy()
    grad_sigma = sigma - 1.0 / sigma
    return kl, grad_mu, grad_sigma


# ---------------------------------------------------------------------------
# grid-typed API
# ---------------------------------------------------------------------------


def _data(g):
    return g.data


def soft_dice(p: ProbGrid, t: VoxelGrid, eps: float = 1e-6) -> float:
    """Soft overlap value 2*sum(p*t)/(sum(p)+sum(t)+eps); the corresponding
    loss is its complement."""
    if p.spec != t.spec:
        raise SpecMismatch("grids differ in spec")
    return soft_dice_array(p.data, t.data.astype(np.float64), eps)


def build_weight_field(b: VoxelGrid, y: VoxelGrid, cfg: LossConfig) -> WeightField:
    """Weight 1 inside the mask ``b``; outside, a Gaussian falloff from the
    centroid of the removed segment ``y`` with sigma = sigma_w_frac * c."""
    if b.spec != y.spec:
        raise SpecMismatch("grids differ in spec")
    if y.count == 0:
        raise EmptyTarget("weight field needs a nonempty target segment")
    spec = y.spec
    center = np.argwhere(y.data).mean(axis=0)
    sigma_w = cfg.sigma_w_frac * spec.c
    delta = spec.voxel_centers() - center
    sq = np.einsum("...i,...i->...", delta, delta)
    data = np.exp(-sq / (2.0 * sigma_w**2))
    data[b.data == 1] = 1.0
    return WeightField(spec, data, float(sigma_w), center)


def vw_dice_loss(
    x: VoxelGrid, y: VoxelGrid, p: ProbGrid, w: WeightField, eps: float = 1e-6
):
    """Voxel-weighted Dice loss against the recomposed shape ``x + y`` and
    its analytic gradient with respect to the prediction."""
    for g in (y, p):
        if g.spec != x.spec:
            raise SpecMismatch("grids differ in spec")
    if w.spec != x.spec:
        raise SpecMismatch("weight field differs in spec")
    if np.any(x.data & y.data):
        raise ValueError("x and y must not overlap")
    t = (x.data + y.data).astype(np.float64)
    return vw_dice_array(p.data, t, w.data, eps)


def dice_whole_loss(p: ProbGrid, x: VoxelGrid, y: VoxelGrid, eps: float = 1e-6):
    """Unweighted Dice loss against the whole recomposed shape."""
    t = (x.data + y.data).astype(np.float64)
    return vw_dice_array(p.data, t, np.ones_like(t), eps)


def dice_target_loss(p: ProbGrid, y: VoxelGrid, b: VoxelGrid, eps: float = 1e-6):
    """Dice loss of the prediction restricted to the dissection mask
    against the removed segment only."""
    return masked_dice_array(
        p.data, y.data.astype(np.float64), b.data.astype(np.float64), eps
    )


def reduction_check(x: VoxelGrid, y: VoxelGrid, p: ProbGrid, eps: float = 1e-6) -> float:
    """Gap between the weighted loss under an all-ones field and the plain
    Dice loss against x + y; algebraically zero."""
    spec = x.spec
    ones = WeightField(spec, np.ones((spec.c,) * 3), 0.0, spec.center)
    loss_w, _ = vw_dice_loss(x, y, p, ones, eps)
    t = VoxelGrid(spec, x.data | y.data)
    loss_plain = 1.0 - soft_dice(p, t, eps)
    return abs(loss_w - loss_plain)


def conformity(a: VoxelGrid, b: VoxelGrid) -> float:
    """Hard Dice between two binary shapes; 1.0 when both are empty."""
    if a.spec != b.spec:
        raise SpecMismatch("grids differ in spec")
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def build_target_set(
    batch_shapes,
    cuboid_mask: VoxelGrid,
    y0: VoxelGrid,
    m: int,
    rng: np.random.Generator,
    transform=None,
) -> TargetSet:
    """Cut ``m`` donor shapes with the shared mask and weight them by their
    overlap with the true segment.

    Donors producing an empty segment are redrawn up to 10 times, then the
    slot is dropped with a warning. ``transform`` (e.g. the sample's
    augmentation) is applied to each donor before cutting.
    """
    if m > len(batch_shapes):
        raise ValueError(f"m={m} exceeds the {len(batch_shapes)} available shapes")
    targets = [y0]
    confs = [1.0]
    if m > 0:
        pool = list(rng.permutation(len(batch_shapes)))
        for _ in range(m):
            target = None
            for _try in range(10):
                if not pool:
                    break
                donor = batch_shapes[pool.pop()]
                if transform is not None:
                    donor = transform(donor)
                cand = VoxelGrid(donor.spec, donor.data * cuboid_mask.data)
                if cand.count > 0:
                    target = cand
                    break
            if target is None:
                log.warning("dropping donor target slot: all candidates empty")
                continue
            targets.append(target)
            confs.append(conformity(y0, target))
    return TargetSet(targets, np.asarray(confs))


def kl_to_standard_normal(q: PosteriorParams):
    """KL divergence to the unit normal with analytic gradients."""
    kl, grad_mu, grad_sigma = kl_std_normal_array(q.mu, q.sigma)
    return kl, (grad_mu, grad_sigma)


def conformity_weighted_mean(values, lams) -> float:
    """Weighted mean normalized by the weight sum; invariant to positive
    rescaling of the weights."""
    values = np.asarray(values, dtype=np.float64)
    lams = np.asarray(lams, dtype=np.float64)
    total = lams.sum()
    if total <= 0:
        raise ValueError("weights must have positive sum")
    return float((lams * values).sum() / total)


def target_weighted_loss(
    x: VoxelGrid,
    predictions,
    tset: TargetSet,
    posteriors,
    w_fields,
    cfg: LossConfig,
) -> float:
    """Conformity-weighted average of per-target weighted Dice losses plus
    the KL regularizer.

    The weights are normalized by the conformity sum, so rescaling all
    conformities leaves the reconstruction term unchanged.
    """
    k = len(tset.targets)
    if not (len(predictions) == len(posteriors) == len(w_fields) == k):
        raise ValueError("predictions, posteriors, weight fields must match targets")
    lam = tset.conformities
    per_target = [
        vw_dice_loss(x, tset.targets[i], predictions[i], w_fields[i], cfg.smooth_eps)[0]
        for i in range(k)
    ]
    recon = conformity_weighted_mean(per_target, lam)

    kls = np.array([kl_to_standard_normal(q)[0] for q in posteriors])
    if cfg.kl_weighting == "conformity":
        kl_term = conformity_weighted_mean(kls, lam)
    else:
        kl_term = float(kls.mean())
    return recon + cfg.gamma * kl_term
