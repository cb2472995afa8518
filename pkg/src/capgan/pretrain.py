"""CVAE pre-training: the composite objective and the balancing strategies.

The objective is KL + binary cross-entropy + MSE.  Reductions: KL and BCE
are summed over latent dims / pixels, MSE is the per-pixel mean; all three
are then averaged over the batch.
"""
from __future__ import annotations

import csv
import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (ImageBatch, balanced_subsample, class_histogram,
                   random_oversample)
from .errors import ConfigError, NumericError, TrainingError
from .models import CVAE, ModelConfig, WeightArchive, build_cvae, sample_noise

BCE_EPS = 1e-7
STRATEGIES = ("ros", "two_phase", "ensemble", "imbalanced")


def derive_seed(seed: int, *parts) -> int:
    """Stable 31-bit sub-seed from a master seed and a tag path."""
    key = ":".join([str(int(seed))] + [str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "big") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _as_tensor(a):
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, mean over batch."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must share a shape")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NumericError("non-finite mu/logvar passed to kl_divergence")
    if mu.dim() == 1:
        mu, logvar = mu[None], logvar[None]
    per_sample = -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp(), dim=1)
    return per_sample.mean()


def _per_sample_dims(x):
    return tuple(range(1, x.dim())) if x.dim() > 1 else ()


def reconstruction_bce(x, x_hat, eps: float = BCE_EPS):
    """Pixel-summed binary cross-entropy, mean over batch; x_hat clamped to [eps, 1-eps]."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.dim() == 1:
        x, x_hat = x[None], x_hat[None]
    x_hat = x_hat.clamp(eps, 1 - eps)
    bce = -(x * torch.log(x_hat) + (1 - x) * torch.log1p(-x_hat))
    return bce.sum(dim=_per_sample_dims(bce)).mean()


def reconstruction_mse(x, x_hat):
    """Per-pixel mean squared error, mean over batch."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat must share a shape")
    if x.dim() == 1:
        x, x_hat = x[None], x_hat[None]
    return (x - x_hat).pow(2).mean(dim=_per_sample_dims(x)).mean()


@dataclass
class CvaeLossBreakdown:
    """Unweighted terms plus the (weighted) total.

    With the default unit weights ``total == kl + bce + mse``.
    """

    kl: torch.Tensor
    bce: torch.Tensor
    mse: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("kl", "bce", "mse", "total")}


def cvae_loss(x, x_hat, mu, logvar, weights=(1.0, 1.0, 1.0)) -> CvaeLossBreakdown:
    kl = kl_divergence(mu, logvar)
    bce = reconstruction_bce(x, x_hat)
    mse = reconstruction_mse(x, x_hat)
    wk, wb, wm = weights
    if (wk, wb, wm) == (1.0, 1.0, 1.0):
        total = kl + bce + mse
    else:
        total = wk * kl + wb * bce + wm * mse
    return CvaeLossBreakdown(kl, bce, mse, total)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    strategy: str = "ros"
    epochs: int = 30
    learning_rate: float = 0.0005
    adam_beta1: float = 0.5
    batch_size: int = 64
    latent_dim: int = 128
    seed: int = 0
    finetune_epochs: int = 5
    num_members: int = 3
    channels: tuple = (32, 64, 128)
    loss_weights: tuple = (1.0, 1.0, 1.0)
    noise: str = "normal"
    resample_each_epoch: bool = True
    # fixed optimizer-step budget per epoch; None means one pass over the data
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown pre-training strategy {self.strategy!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("batch_size and latent_dim must be positive")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if self.noise not in ("normal", "uniform"):
            raise ConfigError("noise must be 'normal' or 'uniform'")
        self.channels = tuple(self.channels)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def model_config(self, batch: ImageBatch, label_dim: int = 16) -> ModelConfig:
        return ModelConfig(batch.image_shape, batch.num_classes, self.latent_dim,
                           self.channels, label_dim)


@dataclass
class EpochRecord:
    epoch: int
    kl: float
    bce: float
    mse: float
    total: float
    tag: str
    steps: int
    class_counts: list = field(default_factory=list)


def _epoch_indices(n: int, batch_size: int, steps: int | None, rng) -> list[np.ndarray]:
    if steps is None:
        perm = rng.permutation(n)
        return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    need = steps * batch_size
    reps = math.ceil(need / n)
    perm = np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


def _run_epochs(model: CVAE, optimizer, data_for_epoch, config: PretrainConfig,
                epochs: int, tag: str, history: list, seed: int, member=None):
    dtype = next(model.parameters()).dtype
    for epoch in range(epochs):
        batch = data_for_epoch(epoch)
        rng = np.random.default_rng(derive_seed(seed, tag, "order", epoch))
        x_all = torch.as_tensor(batch.pixels, dtype=dtype)
        y_all = torch.as_tensor(batch.labels)
        sums = np.zeros(4)
        seen = np.zeros(batch.num_classes, dtype=np.int64)
        n_seen = 0
        chunks = _epoch_indices(len(batch), config.batch_size, config.steps_per_epoch, rng)
        for step, idx in enumerate(chunks):
            idx_t = torch.as_tensor(idx)
            x, y = x_all[idx_t], y_all[idx_t]
            noise = sample_noise((len(idx), config.latent_dim),
                                 derive_seed(seed, tag, "noise", epoch, step),
                                 config.noise, dtype)
            x_hat, lat = model(x, y, noise)
            try:
                loss = cvae_loss(x, x_hat, lat.mu, lat.logvar, config.loss_weights)
                finite = bool(torch.isfinite(loss.total))
            except NumericError:
                finite = False
            if not finite:
                who = f" (member {member})" if member is not None else ""
                raise TrainingError(
                    f"non-finite CVAE loss at epoch {epoch + 1}, step {step}{who}",
                    epoch=epoch + 1, step=step, member=member)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            vals = loss.as_floats()
            sums += len(idx) * np.array([vals["kl"], vals["bce"], vals["mse"], vals["total"]])
            seen += np.bincount(batch.labels[idx], minlength=batch.num_classes)
            n_seen += len(idx)
        kl, bce, mse, total = (float(v) for v in sums / max(n_seen, 1))
        history.append(EpochRecord(len(history) + 1, kl, bce, mse, total, tag,
                                   len(chunks), seen.tolist()))


def _optimizer(model, config: PretrainConfig):
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                            betas=(config.adam_beta1, 0.999), eps=1e-8)


def _archive(model: CVAE, config: PretrainConfig, **extra) -> WeightArchive:
    return WeightArchive.from_module(model, seed=config.seed, strategy=config.strategy,
                                     loss_weights=list(config.loss_weights), **extra)


def _init_model(batch: ImageBatch, config: PretrainConfig, model_config, dtype):
    cfg = model_config or config.model_config(batch)
    return build_cvae(cfg, derive_seed(config.seed, "init")).to(dtype)


def pretrain_ros(batch: ImageBatch, config: PretrainConfig, model_config=None,
                 dtype=torch.float32):
    """Train on a randomly oversampled copy of ``batch``.

    The oversampling is redrawn every epoch unless
    ``config.resample_each_epoch`` is false.
    """
    model = _init_model(batch, config, model_config, dtype)
    opt = _optimizer(model, config)
    history: list[EpochRecord] = []

    def data(epoch):
        e = epoch if config.resample_each_epoch else 0
        return random_oversample(batch, derive_seed(config.seed, "ros", e))

    _run_epochs(model, opt, data, config, config.epochs, "ros", history, config.seed)
    return _archive(model, config), history


def pretrain_imbalanced(batch: ImageBatch, config: PretrainConfig, model_config=None,
                        dtype=torch.float32):
    """Train on ``batch`` as given: the unbalanced baseline initialization."""
    model = _init_model(batch, config, model_config, dtype)
    opt = _optimizer(model, config)
    history: list[EpochRecord] = []
    _run_epochs(model, opt, lambda e: batch, config, config.epochs, "imbalanced",
                history, config.seed)
    return _archive(model, config), history


def pretrain_two_phase(batch: ImageBatch, config: PretrainConfig, model_config=None,
                       dtype=torch.float32):
    """Phase 1 on a min-count balanced subset, phase 2 fine-tunes on ``batch``."""
    model = _init_model(batch, config, model_config, dtype)
    opt = _optimizer(model, config)
    history: list[EpochRecord] = []

    def phase1(epoch):
        e = epoch if config.resample_each_epoch else 0
        return balanced_subsample(batch, derive_seed(config.seed, "phase1", e))

    _run_epochs(model, opt, phase1, config, config.epochs, "phase1", history, config.seed)
    if config.finetune_epochs:
        _run_epochs(model, opt, lambda e: batch, config, config.finetune_epochs,
                    "phase2", history, config.seed)
    return _archive(model, config), history


def ensemble_weights(final_losses) -> np.ndarray:
    """Normalized inverse-loss weights."""
    losses = np.asarray(final_losses, dtype=np.float64)
    if np.any(~np.isfinite(losses)) or np.any(losses <= 0):
        raise ValueError("ensemble weighting needs finite positive losses")
    inv = 1.0 / losses
    return inv / inv.sum()


def average_archives(archives, weights) -> WeightArchive:
    names = [list(a.arrays) for a in archives]
    if any(n != names[0] for n in names):
        raise ValueError("archives disagree on parameter names")
    out = OrderedDict()
    for name in names[0]:
        stack = [a.arrays[name] for a in archives]
        if any(s.shape != stack[0].shape for s in stack):
            raise ValueError(f"archives disagree on the shape of {name}")
        if np.issubdtype(stack[0].dtype, np.floating):
            acc = np.zeros(stack[0].shape, dtype=np.float64)
            for w, s in zip(weights, stack):
                acc += w * s
            out[name] = acc.astype(stack[0].dtype)
        else:
            out[name] = stack[0].copy()
    return WeightArchive(out, dict(archives[0].metadata))


def pretrain_ensemble(batch: ImageBatch, config: PretrainConfig, model_config=None,
                      dtype=torch.float32):
    """Train one CVAE per disjoint slice of the majority class (each with every
    minority sample), then average their weights by inverse final loss.

    Members start from one shared initialization so the average is taken
    between comparable parameterizations.
    """
    k = config.num_members
    if k < 2:
        raise ConfigError("ensemble pre-training needs num_members >= 2")
    counts = class_histogram(batch)
    majority = int(np.argmax(counts))
    if counts[majority] < k:
        raise ConfigError(
            f"majority class {majority} has {counts[majority]} samples, "
            f"cannot split into {k} members")
    rng = np.random.default_rng(derive_seed(config.seed, "ensemble-split"))
    maj_idx = rng.permutation(np.flatnonzero(batch.labels == majority))
    minority_idx = np.flatnonzero(batch.labels != majority)
    base = _init_model(batch, config, model_config, dtype)
    init_state = {k_: v.clone() for k_, v in base.state_dict().items()}

    history: list[EpochRecord] = []
    archives, final_losses = [], []
    for m, part in enumerate(np.array_split(maj_idx, k)):
        subset = batch.take(np.sort(np.concatenate([part, minority_idx])))
        base.load_state_dict(init_state)
        opt = _optimizer(base, config)
        member_hist: list[EpochRecord] = []
        _run_epochs(base, opt, lambda e, s=subset: s, config, config.epochs,
                    f"member{m}", member_hist, derive_seed(config.seed, "member", m),
                    member=m)
        final_losses.append(member_hist[-1].total)
        archives.append(_archive(base, config))
        for rec in member_hist:
            rec.epoch = len(history) + 1
            history.append(rec)
    weights = ensemble_weights(final_losses)
    merged = average_archives(archives, weights)
    merged.metadata["member_weights"] = weights.tolist()
    merged.metadata["member_losses"] = [float(v) for v in final_losses]
    return merged, history


def pretrain(batch: ImageBatch, config: PretrainConfig, model_config=None,
             dtype=torch.float32):
    fn = {"ros": pretrain_ros, "two_phase": pretrain_two_phase,
          "ensemble": pretrain_ensemble, "imbalanced": pretrain_imbalanced}[config.strategy]
    return fn(batch, config, model_config, dtype)


def reconstruction_error(archive: WeightArchive, batch: ImageBatch, chunk: int = 256) -> float:
    """Mean BCE + MSE when decoding the posterior mean (no sampling noise)."""
    model = archive.load_into(CVAE(archive.model_config))
    model.eval()
    dtype = next(model.parameters()).dtype
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(batch), chunk):
            x = torch.as_tensor(batch.pixels[i:i + chunk], dtype=dtype)
            y = torch.as_tensor(batch.labels[i:i + chunk])
            mu, _ = model.encoder(x)
            x_hat = model.decoder(mu * model.embedder(y))
            err = reconstruction_bce(x, x_hat) + reconstruction_mse(x, x_hat)
            total += float(err) * x.shape[0]
            n += x.shape[0]
    return total / max(n, 1)


HISTORY_FIELDS = ("epoch", "kl", "bce", "mse", "total", "tag", "steps")


def write_history_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, repr(r.kl), repr(r.bce), repr(r.mse), repr(r.total),
                        r.tag, r.steps])
