"""Completion network: a compact volumetric encoder-decoder trunk with a
deterministic head and an optional latent branch.

The trunk downsamples with strided convolutions and upsamples with
transposed convolutions (batch norm + ELU throughout), concatenating the
matching encoder feature map at every resolution, and emits four
full-resolution feature maps. The deterministic head turns those into a
probability volume with a size-2 convolution and a sigmoid. The latent
branch encodes (input, target) pairs into a diagonal-normal posterior,
tiles a latent sample across the volume, and mixes it into the trunk
features with two pointwise convolutions before the same output head.

Elementwise dropout is applied on the deepest two encoder levels and the
first two decoder levels during training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigMismatch, ModeArgumentMismatch, ParseError

_CKPT_MAGIC = b"VCK1"
_DTYPE_TAGS = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class ModelConfig:
    c: int = 32
    base_channels: int = 8
    depth: int = 4
    latent_dim: int = 8
    dropout_p: float = 0.5
    mode: str = "deterministic"  # or "probabilistic"
    trunk_out_channels: int = 4
    mix_channels: int = 8

    def __post_init__(self):
        if self.c % (2**self.depth) != 0:
            raise ConfigMismatch(
                f"grid edge {self.c} not divisible by 2^{self.depth}"
            )
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.mode not in ("deterministic", "probabilistic"):
            raise ValueError(f"unknown mode {self.mode!r}")


class _DownBlock(nn.Module):
    def __init__(self, ch_in, ch_out, dropout_p):
        super().__init__()
        self.reduce = nn.Conv3d(ch_in, ch_out, 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm3d(ch_out)
        self.refine = nn.Conv3d(ch_out, ch_out, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(ch_out)
        self.act = nn.ELU()
        self.drop = nn.Dropout(dropout_p) if dropout_p > 0 else None

    def forward(self, x):
        x = self.act(self.bn1(self.reduce(x)))
        x = self.act(self.bn2(self.refine(x)))
        if self.drop is not None:
            x = self.drop(x)
        return x


class _UpBlock(nn.Module):
    def __init__(self, ch_in, ch_up, ch_skip, ch_out, dropout_p):
        super().__init__()
        self.expand = nn.ConvTranspose3d(ch_in, ch_up, 4, stride=2, padding=1)
        self.bn1 = nn.BatchNorm3d(ch_up)
        self.refine = nn.Conv3d(ch_up + ch_skip, ch_out, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(ch_out)
        self.act = nn.ELU()
        self.drop = nn.Dropout(dropout_p) if dropout_p > 0 else None

    def forward(self, x, skip):
        x = self.act(self.bn1(self.expand(x)))
        x = torch.cat([x, skip], dim=1)
        x = self.act(self.bn2(self.refine(x)))
        if self.drop is not None:
            x = self.drop(x)
        return x


class _OutputHead(nn.Module):
    """Size-2 convolution to one channel plus sigmoid. The even kernel
    cannot be padded symmetrically; one leading zero per axis keeps the
    output at full resolution."""

    def __init__(self, ch_in):
        super().__init__()
        self.conv = nn.Conv3d(ch_in, 1, 2)

    def forward(self, x):
        x = nn.functional.pad(x, (1, 0, 1, 0, 1, 0))
        return torch.sigmoid(self.conv(x))


class _PosteriorEncoder(nn.Module):
    """Strided-conv tower over (input, target) pairs to latent mean and
    log-variance."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        ch = 2
        for level in range(cfg.depth):
            ch_out = cfg.base_channels * 2**level
            layers += [nn.Conv3d(ch, ch_out, 3, stride=2, padding=1), nn.ELU()]
            ch = ch_out
        self.tower = nn.Sequential(*layers)
        self.head_mu = nn.Linear(ch, cfg.latent_dim)
        self.head_logvar = nn.Linear(ch, cfg.latent_dim)

    def forward(self, x, y):
        h = self.tower(torch.cat([x, y], dim=1))
        h = h.mean(dim=(2, 3, 4))
        return self.head_mu(h), self.head_logvar(h)


class _LatentMixer(nn.Module):
    """Tile the latent code over the volume and fold it into the trunk
    features with two pointwise convolutions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch_in = cfg.trunk_out_channels + cfg.latent_dim
        self.conv1 = nn.Conv3d(ch_in, cfg.mix_channels, 1)
        self.conv2 = nn.Conv3d(cfg.mix_channels, cfg.mix_channels, 1)
        self.act = nn.ELU()

    def forward(self, features, z):
        b, _, d, h, w = features.shape
        tiled = z.view(b, -1, 1, 1, 1).expand(b, z.shape[1], d, h, w)
        x = torch.cat([features, tiled], dim=1)
        x = self.act(self.conv1(x))
        return self.conv2(x)


class CompletionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        downs = []
        ch = 1
        for level in range(cfg.depth):
            ch_out = cfg.base_channels * 2**level
            p = cfg.dropout_p if level >= cfg.depth - 2 else 0.0
            downs.append(_DownBlock(ch, ch_out, p))
            ch = ch_out
        self.downs = nn.ModuleList(downs)

        ups = []
        for level in range(cfg.depth - 1, -1, -1):
            ch_up = cfg.base_channels * 2 ** max(level - 1, 0)
            ch_skip = cfg.base_channels * 2 ** (level - 1) if level >= 1 else 1
            ch_out = (
                cfg.base_channels * 2 ** (level - 1)
                if level >= 1
                else cfg.trunk_out_channels
            )
            # dropout on the first two up-transitions (the deepest ones)
            p = cfg.dropout_p if level >= cfg.depth - 2 else 0.0
            ups.append(_UpBlock(ch, ch_up, ch_skip, ch_out, p))
            ch = ch_out
        self.ups = nn.ModuleList(ups)

        self.head = _OutputHead(
            cfg.mix_channels if cfg.mode == "probabilistic" else cfg.trunk_out_channels
        )
        if cfg.mode == "probabilistic":
            self.posterior = _PosteriorEncoder(cfg)
            self.mixer = _LatentMixer(cfg)

    # -- building blocks ---------------------------------------------------

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Full-resolution feature maps, (B, trunk_out_channels, c, c, c)."""
        if x.shape[2:] != (self.cfg.c,) * 3:
            raise ConfigMismatch(
                f"input shape {tuple(x.shape[2:])} does not match c={self.cfg.c}"
            )
        skips = [x]
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        for i, up in enumerate(self.ups):
            h = up(h, skips[self.cfg.depth - 1 - i])
        return h

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        """Deterministic head over trunk features."""
        if self.cfg.mode != "deterministic":
            raise ModeArgumentMismatch("decode() is the deterministic head")
        return self.head(features)

    def encode_posterior(self, x: torch.Tensor, y: torch.Tensor):
        """Latent posterior (mu, sigma) for an (input, target) pair."""
        if self.cfg.mode != "probabilistic":
            raise ModeArgumentMismatch("model has no posterior encoder")
        mu, logvar = self.posterior(x, y)
        sigma = torch.exp(0.5 * logvar)
        return mu, sigma

    def decode_with_latent(self, features: torch.Tensor, z: torch.Tensor):
        if self.cfg.mode != "probabilistic":
            raise ModeArgumentMismatch("model has no latent branch")
        return self.head(self.mixer(features, z))

    # -- orchestration -----------------------------------------------------

    def forward(self, x, y=None, z=None, generator=None):
        """Complete a batch of inputs.

        Deterministic mode ignores ``y``/``z``. Probabilistic mode encodes
        ``y`` into a posterior and samples it when given (training path);
        otherwise decodes with ``z``, defaulting to the prior mean (zeros).
        Returns (probabilities, (mu, sigma) or None).
        """
        features = self.trunk(x)
        if self.cfg.mode == "deterministic":
            return self.decode(features), None
        if y is not None:
            mu, sigma = self.encode_posterior(x, y)
            z = reparameterize(mu, sigma, generator)
            return self.decode_with_latent(features, z), (mu, sigma)
        if z is None:
            z = torch.zeros(
                x.shape[0], self.cfg.latent_dim, dtype=x.dtype, device=x.device
            )
        elif z.dim() == 1:
            z = z.unsqueeze(0).expand(x.shape[0], -1)
        return self.decode_with_latent(features, z), None


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, generator=None):
    """z = mu + sigma * eps with eps drawn from the (optionally seeded)
    standard normal; gradients flow into mu and sigma."""
    eps = torch.empty_like(mu).normal_(generator=generator)
    return mu + sigma * eps


def build_model(cfg: ModelConfig, init_seed: int | None = None) -> CompletionNet:
    """Construct a network, optionally with seeded parameter init."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return CompletionNet(cfg)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON index, raw little-endian blobs
# ---------------------------------------------------------------------------


def save_checkpoint(path, net: CompletionNet):
    state = net.state_dict()
    names = sorted(state.keys())
    index = []
    blobs = []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        tag = _DTYPE_TAGS.get(t.dtype)
        if tag is None:
            raise ValueError(f"cannot serialize dtype {t.dtype} of {name}")
        index.append({"name": name, "shape": list(t.shape), "dtype": tag})
        blobs.append(t.numpy().astype(tag).tobytes())
    header = json.dumps(
        {"version": 1, "config": asdict(net.cfg), "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CompletionNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", 0)
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise ParseError("truncated checkpoint header", 4)
        (header_len,) = struct.unpack("<I", raw_len)
        header = json.loads(fh.read(header_len).decode())
        cfg = ModelConfig(**header["config"])
        net = CompletionNet(cfg)
        state = {}
        for entry in header["tensors"]:
            dtype = _TAG_DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            nbytes = n * np.dtype(entry["dtype"]).itemsize
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ParseError(f"truncated blob for {entry['name']}", None)
            arr = np.frombuffer(buf, dtype=entry["dtype"]).reshape(shape)
            state[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
        net.load_state_dict(state)
    return net
