"""Training loop: on-the-fly dissection and augmentation, multi-target
batches, Adam with decoupled weight decay, exponential learning-rate
schedule, validation-tracked checkpointing, and inference helpers.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import torchloss
from .errors import ConfigMismatch, NonFiniteLoss, SamplingExhausted
from .grids import (
    AugmentationConfig,
    DissectionConfig,
    GridSpec,
    ProbGrid,
    VoxelGrid,
    apply_augmentation,
    rasterize_cuboid,
    sample_augmentation,
    sample_dissection,
)
from .losses import LossConfig, TargetSet, build_target_set, build_weight_field
from .metrics import hard_dice
from .model import CompletionNet, ModelConfig, reparameterize

log = logging.getLogger(__name__)

OBJECTIVES = ("dice_whole", "dice_target", "vwdice", "cvae_basic", "cvae_vwdice_tw")
_PROBABILISTIC = ("cvae_basic", "cvae_vwdice_tw")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "vwdice"
    lr0: float = 1e-2
    lr_decay: float = 0.98
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = True
    batch_size: int = 4
    epochs: int = 300
    m: int = 2  # extra donor targets for the multi-target objective
    seed: int = 0
    patience: int = 30
    augment: bool = True
    val_dissections_per_shape: int = 1
    val_seed: int = 20_000_000

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")

    @property
    def probabilistic(self) -> bool:
        return self.objective in _PROBABILISTIC


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    lr: float
    loss: float
    recon: float
    kl: float
    val_dsc: float | None
    wall_time: float


@dataclass
class BatchSample:
    x: VoxelGrid
    mask: VoxelGrid
    tset: TargetSet
    weights: list


@dataclass
class EvalCase:
    """Frozen dissection of a held-out shape."""

    x: VoxelGrid
    y: VoxelGrid
    mask: VoxelGrid


@dataclass
class TrainResult:
    net: CompletionNet
    rows: list
    best_epoch: int
    best_val_dsc: float


def _needs_weight_fields(objective: str) -> bool:
    return objective in ("vwdice", "cvae_vwdice_tw")


def make_batch(
    shapes,
    donor_pool,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    dissect_cfg: DissectionConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
):
    """Assemble one mini-batch from the given shapes.

    Each shape is augmented, dissected by a fresh random cuboid, and (for
    the multi-target objective) paired with donor segments cut by the
    identical mask after the identical augmentation, so all targets stay
    mutually registered.
    """
    dissect_cfg = dissect_cfg or DissectionConfig()
    m = train_cfg.m if train_cfg.objective == "cvae_vwdice_tw" else 0
    batch = []
    for s in shapes:
        aug = None
        if train_cfg.augment:
            aug = sample_augmentation(rng, aug_cfg)
            s_work = apply_augmentation(s, aug)
        else:
            s_work = s
        cuboid = None
        for _ in range(10):
            try:
                cuboid, x, y0 = sample_dissection(
                    s_work, int(rng.integers(2**31)), dissect_cfg
                )
                break
            except SamplingExhausted:
                continue
        if cuboid is None:
            raise SamplingExhausted("could not dissect shape after 10 seeds")
        mask = rasterize_cuboid(cuboid, s_work.spec)
        transform = None
        if aug is not None and not aug.is_identity:
            transform = lambda g, _a=aug: apply_augmentation(g, _a)  # noqa: E731
        tset = build_target_set(donor_pool, mask, y0, m, rng, transform)
        if _needs_weight_fields(train_cfg.objective):
            weights = [build_weight_field(mask, t, loss_cfg) for t in tset.targets]
        else:
            weights = [None] * len(tset.targets)
        batch.append(BatchSample(x, mask, tset, weights))
    return batch


def _to_tensor(grids, dtype=torch.float32) -> torch.Tensor:
    arrs = [np.asarray(g.data, dtype=np.float32) for g in grids]
    return torch.from_numpy(np.stack(arrs)[:, None]).to(dtype)


def compute_batch_loss(
    net: CompletionNet,
    batch,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    generator=None,
    dtype=torch.float32,
):
    """Mean objective over the batch plus (reconstruction, KL) parts.

    The trunk runs once per sample; probabilistic objectives reuse its
    features across all targets of that sample.
    """
    objective = train_cfg.objective
    eps = loss_cfg.smooth_eps
    xs = _to_tensor([s.x for s in batch], dtype)
    features = net.trunk(xs)
    recon_terms = []
    kl_terms = []

    if objective in ("dice_whole", "dice_target", "vwdice"):
        probs = net.decode(features)
        for i, sample in enumerate(batch):
            p = probs[i, 0]
            y0 = sample.tset.targets[0]
            if objective == "dice_whole":
                t = torch.from_numpy(
                    (sample.x.data + y0.data).astype(np.float32)
                ).to(dtype)
                ones = torch.ones_like(t)
                recon_terms.append(torchloss.masked_dice(p, t, ones, eps))
            elif objective == "dice_target":
                t = torch.from_numpy(y0.data.astype(np.float32)).to(dtype)
                mask = torch.from_numpy(sample.mask.data.astype(np.float32)).to(dtype)
                recon_terms.append(torchloss.masked_dice(p, t, mask, eps))
            else:
                t = torch.from_numpy(
                    (sample.x.data + y0.data).astype(np.float32)
                ).to(dtype)
                w = torch.from_numpy(sample.weights[0].data.astype(np.float32)).to(
                    dtype
                )
                recon_terms.append(torchloss.vw_dice(p, t, w, eps))
        loss = torch.stack(recon_terms).mean()
        return loss, {"recon": float(loss.detach()), "kl": 0.0}

    for i, sample in enumerate(batch):
        feats_i = features[i : i + 1]
        x_i = xs[i : i + 1]
        per_target = []
        kls = []
        lam = torch.from_numpy(sample.tset.conformities.copy()).to(dtype)
        for j, target in enumerate(sample.tset.targets):
            y_t = torch.from_numpy(target.data.astype(np.float32)).to(dtype)
            mu, sigma = net.encode_posterior(x_i, y_t[None, None])
            z = reparameterize(mu, sigma, generator)
            pred = net.decode_with_latent(feats_i, z)[0, 0]
            if objective == "cvae_basic":
                mask = torch.from_numpy(sample.mask.data.astype(np.float32)).to(dtype)
                per_target.append(torchloss.masked_dice(pred, y_t, mask, eps))
            else:
                t = torch.from_numpy(
                    (sample.x.data + target.data).astype(np.float32)
                ).to(dtype)
                w = torch.from_numpy(sample.weights[j].data.astype(np.float32)).to(
                    dtype
                )
                per_target.append(torchloss.vw_dice(pred, t, w, eps))
            kls.append(torchloss.kl_std_normal(mu[0], sigma[0]))
        per_target = torch.stack(per_target)
        kls = torch.stack(kls)
        recon = (lam * per_target).sum() / lam.sum()
        if loss_cfg.kl_weighting == "conformity":
            kl = (lam * kls).sum() / lam.sum()
        else:
            kl = kls.mean()
        recon_terms.append(recon)
        kl_terms.append(kl)

    recon = torch.stack(recon_terms).mean()
    kl = torch.stack(kl_terms).mean()
    loss = recon + loss_cfg.gamma * kl
    return loss, {"recon": float(recon.detach()), "kl": float(kl.detach())}


def build_eval_cases(
    shapes,
    seed: int,
    per_shape: int = 1,
    dissect_cfg: DissectionConfig | None = None,
    total: int | None = None,
):
    """Frozen seeded dissections over held-out shapes.

    With ``total`` given, shapes are cycled round-robin until exactly that
    many cases exist; otherwise ``per_shape`` cases are cut per shape.
    """
    dissect_cfg = dissect_cfg or DissectionConfig()
    n = total if total is not None else len(shapes) * per_shape
    cases = []
    i = 0
    while len(cases) < n:
        shape = shapes[i % len(shapes)]
        try:
            cuboid, x, y = sample_dissection(shape, seed + i, dissect_cfg)
            cases.append(EvalCase(x, y, rasterize_cuboid(cuboid, shape.spec)))
        except SamplingExhausted:
            log.warning("skipping eval dissection seed %d", seed + i)
        i += 1
    return cases


def infer_complete(net: CompletionNet, x: VoxelGrid, z=None) -> ProbGrid:
    """Complete one input; probabilistic models decode at the prior mean
    unless a latent code is supplied, deterministic models ignore ``z``."""
    if x.spec.c != net.cfg.c:
        raise ConfigMismatch(f"input c={x.spec.c} does not match model c={net.cfg.c}")
    net.eval()
    with torch.no_grad():
        xt = _to_tensor([x])
        if net.cfg.mode == "probabilistic":
            zt = None
            if z is not None:
                zt = torch.as_tensor(np.asarray(z, dtype=np.float32))
            probs, _ = net(xt, z=zt)
        else:
            probs, _ = net(xt)
    data = probs[0, 0].numpy().astype(np.float64)
    return ProbGrid(x.spec, np.clip(data, 0.0, 1.0))


def sample_variations(net: CompletionNet, x: VoxelGrid, n: int, seed: int):
    """Draw ``n`` latent codes from the prior and decode each."""
    if net.cfg.mode != "probabilistic":
        raise ConfigMismatch("variation sampling needs a probabilistic model")
    net.eval()
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        xt = _to_tensor([x])
        feats = net.trunk(xt)
        for _ in range(n):
            z = torch.empty(1, net.cfg.latent_dim).normal_(generator=gen)
            probs = net.decode_with_latent(feats, z)
            data = np.clip(probs[0, 0].numpy().astype(np.float64), 0.0, 1.0)
            out.append((z[0].numpy().copy(), ProbGrid(x.spec, data)))
    return out


def region_dice(pred: ProbGrid, mask: VoxelGrid, y: VoxelGrid, threshold=0.5) -> float:
    """Hard Dice between the mask-restricted binarized prediction and the
    removed segment."""
    pred_bin = pred.binarize(threshold)
    restricted = VoxelGrid(pred.spec, pred_bin.data & mask.data)
    return hard_dice(restricted, y)


def _validation_dsc(net, cases, batch_size=8) -> float:
    scores = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start : start + batch_size]
        net.eval()
        with torch.no_grad():
            xt = _to_tensor([c.x for c in chunk])
            probs, _ = net(xt)  # prior-mean latent for probabilistic nets
        for k, case in enumerate(chunk):
            data = np.clip(probs[k, 0].numpy().astype(np.float64), 0.0, 1.0)
            pred = ProbGrid(case.x.spec, data)
            scores.append(region_dice(pred, case.mask, case.y))
    return float(np.mean(scores)) if scores else 0.0


def train(
    train_shapes,
    val_shapes,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    dissect_cfg: DissectionConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
) -> TrainResult:
    """Optimize a completion network on the training shapes.

    Uses Adam (betas 0.9/0.999, eps 1e-8) with decoupled weight decay by
    default, learning rate lr0 * lr_decay^epoch, per-epoch validation DSC
    at the prior mean, and keeps the best-on-validation parameters.
    """
    loss_cfg = loss_cfg or LossConfig()
    if train_cfg.probabilistic != (model_cfg.mode == "probabilistic"):
        raise ConfigMismatch(
            f"objective {train_cfg.objective!r} needs model mode "
            f"{'probabilistic' if train_cfg.probabilistic else 'deterministic'}"
        )
    torch.manual_seed(train_cfg.seed)
    net = CompletionNet(model_cfg)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    rng = np.random.default_rng(train_cfg.seed)

    if train_cfg.decoupled_weight_decay:
        opt = torch.optim.AdamW(
            net.parameters(),
            lr=train_cfg.lr0,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=train_cfg.weight_decay,
        )
    else:
        opt = torch.optim.Adam(
            net.parameters(),
            lr=train_cfg.lr0,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=train_cfg.weight_decay,
        )

    val_cases = build_eval_cases(
        val_shapes, train_cfg.val_seed, train_cfg.val_dissections_per_shape, dissect_cfg
    )
    rows = []
    best_state = None
    best_val = -1.0
    best_epoch = -1
    t0 = time.perf_counter()
    step = 0
    n_train = len(train_shapes)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr0 * train_cfg.lr_decay**epoch
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        perm = rng.permutation(n_train)
        for start in range(0, n_train, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            batch_seed = int(rng.integers(2**31))
            batch_rng = np.random.default_rng(batch_seed)
            batch = make_batch(
                [train_shapes[i] for i in idx],
                train_shapes,
                batch_rng,
                train_cfg,
                loss_cfg,
                dissect_cfg,
                aug_cfg,
            )
            loss, parts = compute_batch_loss(net, batch, train_cfg, loss_cfg, gen)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} step {step}", batch_seed
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append(
                TrainLogRow(
                    epoch,
                    step,
                    lr,
                    float(loss.detach()),
                    parts["recon"],
                    parts["kl"],
                    None,
                    time.perf_counter() - t0,
                )
            )
            step += 1
        val_dsc = _validation_dsc(net, val_cases)
        rows[-1].val_dsc = val_dsc
        if val_dsc > best_val:
            best_val = val_dsc
            best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())
        if epoch - best_epoch >= train_cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return TrainResult(net, rows, best_epoch, best_val)


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "step", "lr", "loss", "recon", "kl", "val_dsc", "wall_time"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.epoch,
                    r.step,
                    f"{r.lr:.10e}",
                    f"{r.loss:.8f}",
                    f"{r.recon:.8f}",
                    f"{r.kl:.8f}",
                    "" if r.val_dsc is None else f"{r.val_dsc:.6f}",
                    f"{r.wall_time:.3f}",
                ]
            )


def latent_deviation_sweep(
    net: CompletionNet,
    cases,
    k_per_case: int = 8,
    seed: int = 0,
    max_radius: float = 3.0,
):
    """Decode each case at latent codes of graded distance from the
    posterior mean and record the region Dice against the true segment.

    Returns (rows, spearman_rho): one row per (case, draw) with the latent
    deviation and Dice; rho is the rank correlation across all rows.
    """
    from scipy import stats

    if net.cfg.mode != "probabilistic":
        raise ConfigMismatch("latent sweep needs a probabilistic model")
    net.eval()
    rng = np.random.default_rng(seed)
    radii = np.linspace(0.0, max_radius, k_per_case)
    rows = []
    with torch.no_grad():
        for ci, case in enumerate(cases):
            xt = _to_tensor([case.x])
            yt = _to_tensor([case.y])
            mu, _sigma = net.encode_posterior(xt, yt)
            feats = net.trunk(xt)
            for r in radii:
                if r == 0.0:
                    z = mu
                else:
                    direction = rng.normal(size=net.cfg.latent_dim)
                    direction /= np.linalg.norm(direction)
                    z = mu + torch.from_numpy(r * direction).to(mu.dtype)[None, :]
                pred = net.decode_with_latent(feats, z)
                data = np.clip(pred[0, 0].numpy().astype(np.float64), 0.0, 1.0)
                dsc = region_dice(ProbGrid(case.x.spec, data), case.mask, case.y)
                deviation = float(torch.linalg.vector_norm(z - mu))
                rows.append({"case": ci, "deviation": deviation, "dsc": dsc})
    rho = stats.spearmanr(
        [r["deviation"] for r in rows], [r["dsc"] for r in rows]
    ).statistic
    return rows, float(rho)
