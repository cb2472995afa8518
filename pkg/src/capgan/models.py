"""CVAE and conditional GAN networks, plus CVAE -> GAN weight transfer.

Images travel as ``[N, H, W, C]`` tensors (the dataset layout) and are
permuted to channels-first only inside the convolution stacks.

Parameter naming is what makes the transfer resolvable by prefix::

    encoder.trunk.*          strided conv stack, shared by both heads
    encoder.mu_head.*        dense -> latent mean
    encoder.logvar_head.*    dense -> latent log-variance
    embedder.table.*         class id -> latent-sized vector
    decoder.dense.*          latent -> lowest-resolution feature map
    decoder.deconv.*         transposed conv stack, logistic output

The generator owns ``embedder.*`` and ``decoder.*`` under the same names;
the discriminator owns ``trunk.*`` (copied from ``encoder.trunk.*``) and a
freshly initialized ``label_embed.*`` / ``head.*``.
"""
from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ShapeError, TransferError
from .storage import save_npz

ARCHIVE_META_KEY = "__metadata__"


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (32, 32, 1)
    num_classes: int = 10
    latent_dim: int = 128
    channels: tuple[int, ...] = (32, 64, 128)
    label_dim: int = 16
    head_hidden: int = 64
    leak: float = 0.2

    def __post_init__(self):
        h, w, _ = self.image_shape
        f = 2 ** len(self.channels)
        if h % f or w % f:
            raise ShapeError(
                f"image size {h}x{w} is not divisible by 2**{len(self.channels)}")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        h, w, _ = self.image_shape
        f = 2 ** len(self.channels)
        return self.channels[-1], h // f, w // f

    @property
    def trunk_features(self) -> int:
        c, h, w = self.bottleneck
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@contextlib.contextmanager
def seeded(seed: int):
    """Run module construction under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def _check_images(x: torch.Tensor, image_shape) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(image_shape):
        raise ShapeError(
            f"expected images shaped [N, {', '.join(map(str, image_shape))}], "
            f"got {list(x.shape)}")


def _check_labels(y: torch.Tensor, num_classes: int, n: int | None = None) -> None:
    if y.dim() != 1 or (n is not None and y.shape[0] != n):
        raise ShapeError(f"labels must be a length-{n} vector, got {list(y.shape)}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")


class ConvTrunk(nn.Module):
    """Strided 4x4 convolutions, each halving the spatial size."""

    def __init__(self, in_channels: int, channels, leak: float):
        super().__init__()
        layers, prev = [], in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(leak)]
            prev = ch
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        # [N, H, W, C] -> flat features
        return self.layers(x.permute(0, 3, 1, 2)).flatten(1)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_shape = cfg.image_shape
        self.trunk = ConvTrunk(cfg.image_shape[2], cfg.channels, cfg.leak)
        self.mu_head = nn.Linear(cfg.trunk_features, cfg.latent_dim)
        self.logvar_head = nn.Linear(cfg.trunk_features, cfg.latent_dim)

    def forward(self, x):
        _check_images(x, self.image_shape)
        h = self.trunk(x)
        return self.mu_head(h), self.logvar_head(h)


class LabelEmbedder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        # default N(0, 1) rows: under an isotropic prior only |e(y)| carries the
        # class, so a near-constant table would leave samples unconditioned
        self.table = nn.Embedding(cfg.num_classes, cfg.latent_dim)

    def forward(self, y):
        _check_labels(y, self.num_classes)
        return self.table(y)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.bottleneck = cfg.bottleneck
        self.dense = nn.Linear(cfg.latent_dim, cfg.trunk_features)
        self.act = nn.LeakyReLU(cfg.leak)
        rev = list(cfg.channels[::-1]) + [cfg.image_shape[2]]
        layers = []
        for i, (a, b) in enumerate(zip(rev[:-1], rev[1:])):
            layers.append(nn.ConvTranspose2d(a, b, 4, stride=2, padding=1))
            if i < len(rev) - 2:
                layers.append(nn.LeakyReLU(cfg.leak))
        self.deconv = nn.Sequential(*layers)

    def pre_activation(self, o):
        if o.dim() != 2 or o.shape[1] != self.latent_dim:
            raise ShapeError(f"expected latent codes [N, {self.latent_dim}], got {list(o.shape)}")
        h = self.act(self.dense(o)).view(o.shape[0], *self.bottleneck)
        return self.deconv(h).permute(0, 2, 3, 1)

    def forward(self, o):
        return torch.sigmoid(self.pre_activation(o))


@dataclass
class LatentSample:
    mu: torch.Tensor
    logvar: torch.Tensor
    noise: torch.Tensor
    z: torch.Tensor


class CVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.embedder = LabelEmbedder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x, y, noise):
        mu, logvar = self.encoder(x)
        z = reparameterize(mu, logvar, noise)
        x_hat = self.decoder(embed_and_combine(self.embedder, z, y))
        return x_hat, LatentSample(mu, logvar, noise, z)


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embedder = LabelEmbedder(cfg)
        self.decoder = Decoder(cfg)

    @property
    def num_classes(self):
        return self.config.num_classes

    def forward(self, z, y):
        return self.decoder(embed_and_combine(self.embedder, z, y))


class Discriminator(nn.Module):
    """Encoder-shaped trunk; label embedding is concatenated before the head.

    The head has one hidden layer: a single linear map over the concatenation
    would only add a per-class bias and could never score image/label fit.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.trunk = ConvTrunk(cfg.image_shape[2], cfg.channels, cfg.leak)
        self.label_embed = nn.Embedding(cfg.num_classes, cfg.label_dim)
        self.head = nn.Sequential(
            nn.Linear(cfg.trunk_features + cfg.label_dim, cfg.head_hidden),
            nn.LeakyReLU(cfg.leak),
            nn.Linear(cfg.head_hidden, 1),
        )

    def forward(self, x, y):
        _check_images(x, self.config.image_shape)
        _check_labels(y, self.config.num_classes, x.shape[0])
        h = torch.cat([self.trunk(x), self.label_embed(y)], dim=1)
        return self.head(h).squeeze(1)


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def encode(encoder: Encoder, x):
    return encoder(torch.as_tensor(x))


def reparameterize(mu, logvar, noise):
    """``z = mu + exp(0.5 * logvar) * noise``; logvar is log sigma^2."""
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError("mu, logvar and noise must share one shape")
    return mu + torch.exp(0.5 * logvar) * noise


def embed_and_combine(embedder: LabelEmbedder, z, y):
    y = torch.as_tensor(y, dtype=torch.long)
    return z * embedder(y)


def decode(decoder: Decoder, o):
    return decoder(torch.as_tensor(o))


def generate(generator: Generator, z, y):
    return generator(torch.as_tensor(z), torch.as_tensor(y, dtype=torch.long))


def discriminate(discriminator: Discriminator, x, y):
    return discriminator(torch.as_tensor(x), torch.as_tensor(y, dtype=torch.long))


def sample_noise(shape, seed: int, kind: str = "normal", dtype=torch.float32):
    """Latent noise from a private generator. ``kind`` is 'normal' or 'uniform'."""
    g = torch.Generator().manual_seed(int(seed))
    if kind == "normal":
        return torch.randn(shape, generator=g, dtype=dtype)
    if kind == "uniform":
        return torch.rand(shape, generator=g, dtype=dtype)
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# Weight archives and transfer
# ---------------------------------------------------------------------------

@dataclass
class WeightArchive:
    arrays: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, **metadata) -> "WeightArchive":
        arrays = OrderedDict(
            (k, v.detach().cpu().numpy().copy()) for k, v in module.state_dict().items())
        cfg = getattr(module, "config", None)
        if cfg is not None and "model" not in metadata:
            metadata["model"] = cfg.to_dict()
        return cls(arrays, metadata)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.metadata["model"])

    def load_into(self, module: nn.Module, prefix_map: dict | None = None) -> nn.Module:
        state = OrderedDict()
        for name, arr in self.arrays.items():
            state[_rename(name, prefix_map)] = torch.from_numpy(arr.copy())
        module.load_state_dict(state)
        return module

    def save(self, path) -> None:
        meta = np.frombuffer(json.dumps(self.metadata, sort_keys=True).encode(), dtype=np.uint8)
        save_npz(path, {ARCHIVE_META_KEY: meta, **self.arrays})

    @classmethod
    def load(cls, path) -> "WeightArchive":
        try:
            with np.load(path) as z:
                arrays = OrderedDict((k, z[k]) for k in z.files if k != ARCHIVE_META_KEY)
                metadata = json.loads(z[ARCHIVE_META_KEY].tobytes().decode())
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"{path}: unreadable weight archive ({exc})") from exc
        return cls(arrays, metadata)

    def topology(self) -> list[tuple[str, tuple]]:
        return [(k, tuple(v.shape)) for k, v in self.arrays.items()]


def _rename(name, prefix_map):
    for old, new in (prefix_map or {}).items():
        if name.startswith(old):
            return new + name[len(old):]
    return name


def build_cvae(cfg: ModelConfig, seed: int) -> CVAE:
    with seeded(seed):
        return CVAE(cfg)


def build_gan(cfg: ModelConfig, seed: int) -> tuple[Generator, Discriminator]:
    """Randomly initialized generator/discriminator (the no-pretrain baseline)."""
    with seeded(seed):
        return Generator(cfg), Discriminator(cfg)


def transfer_weights(cvae_archive: WeightArchive, seed: int,
                     config: ModelConfig | None = None) -> tuple[Generator, Discriminator]:
    """Initialize a conditional GAN from a trained CVAE.

    The generator takes the embedder and decoder verbatim; the discriminator
    takes the encoder trunk.  The discriminator's label pathway and scalar
    head are drawn fresh from ``seed``.
    """
    cfg = config or cvae_archive.model_config
    expected = None
    if config is not None:
        with seeded(0):
            expected = [(k, tuple(v.shape)) for k, v in CVAE(cfg).state_dict().items()]
    got = cvae_archive.topology()
    if expected is not None:
        exp_map, got_map = dict(expected), dict(got)
        for name, shape in expected:
            if got_map.get(name) != shape:
                raise TransferError(
                    f"layer {name}: archive has {got_map.get(name, 'nothing')}, "
                    f"GAN topology expects {shape}")
        extra = [k for k, _ in got if k not in exp_map]
        if extra:
            raise TransferError(f"layer {extra[0]}: not part of the configured topology")

    with seeded(seed):
        generator, discriminator = Generator(cfg), Discriminator(cfg)
    dtype = torch.from_numpy(next(iter(cvae_archive.arrays.values()))[:0].copy()).dtype
    generator.to(dtype)
    discriminator.to(dtype)

    gen_state = generator.state_dict()
    for name in gen_state:
        if name not in cvae_archive.arrays:
            raise TransferError(f"layer {name}: missing from CVAE archive")
        arr = cvae_archive.arrays[name]
        if tuple(arr.shape) != tuple(gen_state[name].shape):
            raise TransferError(
                f"layer {name}: archive shape {arr.shape} != generator shape "
                f"{tuple(gen_state[name].shape)}")
        gen_state[name] = torch.from_numpy(arr.copy())
    generator.load_state_dict(gen_state)

    disc_state = discriminator.state_dict()
    for name in disc_state:
        if not name.startswith("trunk."):
            continue
        src = "encoder." + name
        if src not in cvae_archive.arrays:
            raise TransferError(f"layer {src}: missing from CVAE archive")
        arr = cvae_archive.arrays[src]
        if tuple(arr.shape) != tuple(disc_state[name].shape):
            raise TransferError(
                f"layer {src}: archive shape {arr.shape} != discriminator shape "
                f"{tuple(disc_state[name].shape)}")
        disc_state[name] = torch.from_numpy(arr.copy())
    discriminator.load_state_dict(disc_state)
    return generator, discriminator
