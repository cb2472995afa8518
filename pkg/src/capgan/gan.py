"""Adversarial fine-tuning of a transferred generator/discriminator pair.

All randomness inside a training step (minibatch order, latent noise, fake
labels, wrong labels, interpolation weights) is derived statelessly from
``(seed, step)``.  A run can therefore be resumed from a checkpoint that
stores only parameters, optimizer moments and the step counter, and still
reproduce the uninterrupted run exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch, random_oversample
from .errors import ConfigError, FormatError, NumericError, TrainingError
from .storage import save_npz
from .models import Discriminator, Generator, ModelConfig, sample_noise
from .pretrain import derive_seed

LOGIT_CLAMP = 20.0
CHECKPOINT_VERSION = 1


@dataclass
class GanConfig:
    lr_generator: float = 0.0002
    lr_discriminator: float = 0.0002
    gp_weight: float = 10.0
    train_ratio: int = 5
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    adam_beta1: float = 0.5
    # 'fake': interpolate real<->generated; 'dragan': real<->noise-perturbed real
    gp_mode: str = "fake"
    # 'imbalanced' trains on the data as given, 'ros' oversamples each epoch
    data_mode: str = "imbalanced"

    def __post_init__(self):
        if self.train_ratio < 1:
            raise ConfigError("train_ratio must be >= 1")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.gp_mode not in ("fake", "dragan"):
            raise ConfigError(f"unknown gp_mode {self.gp_mode!r}")
        if self.data_mode not in ("imbalanced", "ros"):
            raise ConfigError(f"unknown data_mode {self.data_mode!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DiscLossBreakdown:
    real_term: torch.Tensor
    fake_term: torch.Tensor
    wrong_label_term: torch.Tensor
    gp_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach())
                for k in ("real_term", "fake_term", "wrong_label_term", "gp_term", "total")}


@dataclass
class StepRecord:
    step: int
    kind: str           # "D" or "G"
    epoch: int
    d_real: float = math.nan
    d_fake: float = math.nan
    d_wrong: float = math.nan
    d_gp: float = math.nan
    d_total: float = math.nan
    g_loss: float = math.nan
    grad_norm_mean: float = math.nan
    grad_norm_max: float = math.nan


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("history steps must increase")
        self.records.append(rec)

    def kinds(self) -> str:
        return "".join(r.kind for r in self.records)

    def losses(self) -> np.ndarray:
        return np.array([[r.d_total, r.g_loss] for r in self.records])

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(StepRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v
                            for v in (getattr(r, n) for n in names)])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits, target: float):
    """Mean BCE of sigmoid(logits) against a constant target, logits clamped."""
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    # -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
    if target == 1.0:
        return F.softplus(-z).mean()
    if target == 0.0:
        return F.softplus(z).mean()
    return (target * F.softplus(-z) + (1 - target) * F.softplus(z)).mean()


def _uniform(shape, seed, dtype):
    return torch.rand(shape, generator=torch.Generator().manual_seed(int(seed)), dtype=dtype)


def interpolate(x_real, x_other, alpha):
    """``alpha * x_real + (1 - alpha) * x_other`` with one alpha per sample."""
    a = alpha.view(-1, *([1] * (x_real.dim() - 1)))
    return a * x_real + (1 - a) * x_other


def dragan_perturb(x_real, seed: int):
    """Real images pushed by uniform noise scaled to half their std."""
    u = _uniform(x_real.shape, seed, x_real.dtype)
    return x_real + 0.5 * x_real.std() * u


def gradient_penalty(discriminator, x_real, x_fake, y, gp_weight: float, seed: int,
                     create_graph: bool = True):
    """``lambda * mean((||grad_xhat D(xhat, y)||_2 - 1)^2)`` on random interpolates.

    ``discriminator`` is any callable ``(x, y) -> logits``.
    """
    if x_real.shape != x_fake.shape:
        raise ValueError("x_real and x_fake must share a shape")
    if gp_weight < 0:
        raise ValueError("gradient penalty weight must be >= 0")
    alpha = _uniform((x_real.shape[0],), seed, x_real.dtype)
    x_hat = interpolate(x_real.detach(), x_fake.detach(), alpha).requires_grad_(True)
    out = discriminator(x_hat, y)
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=create_graph,
                                      allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite gradient inside the gradient penalty")
    norms = grad.flatten(1).norm(dim=1)
    return gp_weight * (norms - 1).pow(2).mean()


def wrong_labels(y, num_classes: int, seed: int):
    """For each label, a uniformly drawn different class."""
    if num_classes < 2:
        raise ConfigError("wrong-label loss needs at least two classes")
    g = torch.Generator().manual_seed(int(seed))
    offset = torch.randint(1, num_classes, y.shape, generator=g)
    return (y + offset) % num_classes


def discriminator_loss(discriminator: Discriminator, generator: Generator, x_real, y_real,
                       noise, gp_weight: float, seed: int, gp_mode: str = "fake",
                       create_graph: bool = True) -> DiscLossBreakdown:
    """Real, fake and wrong-label BCE terms plus the gradient penalty.

    Fake labels are uniform over classes; wrong labels differ from the real
    ones sample by sample.
    """
    num_classes = discriminator.config.num_classes
    if num_classes < 2:
        raise ConfigError("wrong-label loss needs at least two classes")
    n = x_real.shape[0]
    g = torch.Generator().manual_seed(derive_seed(seed, "y_fake"))
    y_fake = torch.randint(0, num_classes, (n,), generator=g)
    y_wrong = wrong_labels(y_real, num_classes, derive_seed(seed, "y_wrong"))

    x_fake = generator(noise, y_fake).detach()
    real_term = bce_with_logits(discriminator(x_real, y_real), 1.0)
    fake_term = bce_with_logits(discriminator(x_fake, y_fake), 0.0)
    wrong_term = bce_with_logits(discriminator(x_real, y_wrong), 0.0)
    other = x_fake if gp_mode == "fake" else dragan_perturb(x_real, derive_seed(seed, "dragan"))
    gp = gradient_penalty(discriminator, x_real, other, y_real, gp_weight,
                          derive_seed(seed, "alpha"), create_graph=create_graph)
    total = real_term + fake_term + wrong_term + gp
    return DiscLossBreakdown(real_term, fake_term, wrong_term, gp, total)


def generator_loss(discriminator: Discriminator, generator: Generator, noise, y):
    """Generator wins when its fakes are scored real."""
    return bce_with_logits(discriminator(generator(noise, y), y), 1.0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _grad_stats(module) -> tuple[float, float]:
    norms = [float(p.grad.norm()) for p in module.parameters() if p.grad is not None]
    if not norms:
        return 0.0, 0.0
    return float(np.mean(norms)), float(np.max(norms))


def _grads_finite(module) -> bool:
    return all(torch.isfinite(p.grad).all() for p in module.parameters() if p.grad is not None)


def make_optimizers(generator, discriminator, config: GanConfig):
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr_generator,
                             betas=(config.adam_beta1, 0.999), eps=1e-8)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr_discriminator,
                             betas=(config.adam_beta1, 0.999), eps=1e-8)
    return opt_g, opt_d


@dataclass
class GanState:
    """Everything needed to resume: parameters, optimizer moments, step."""

    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def train(generator: Generator, discriminator: Discriminator, batch: ImageBatch,
          config: GanConfig, state: GanState | None = None, stop_step: int | None = None,
          history: TrainingHistory | None = None):
    """Alternate ``train_ratio`` discriminator steps with one generator step.

    Every minibatch drives one discriminator step; after each block of
    ``train_ratio`` of them, the generator takes one step.  Pass ``state``
    (e.g. from :func:`load_checkpoint`) to resume; ``stop_step`` halts early.

    Returns ``(state, history)``.
    """
    if batch.num_classes < 2:
        raise ConfigError("conditional GAN training needs at least two classes")
    if state is None:
        opt_g, opt_d = make_optimizers(generator, discriminator, config)
        state = GanState(generator, discriminator, opt_g, opt_d, 0)
    history = history if history is not None else TrainingHistory()
    gen, disc = state.generator, state.discriminator
    dtype = next(gen.parameters()).dtype
    latent = gen.config.latent_dim
    n_data = len(batch)
    if config.data_mode == "ros":
        n_data = int(np.bincount(batch.labels, minlength=batch.num_classes).max()) * batch.num_classes
    n_batches = steps_per_epoch(n_data, config.batch_size)
    total = config.epochs * n_batches
    end = total if stop_step is None else min(stop_step, total)
    if end <= state.step:
        return state, history

    cached_epoch, x_all, y_all, order = None, None, None, None
    while state.step < end:
        step = state.step
        epoch, pos = divmod(step, n_batches)
        if epoch != cached_epoch:
            data = batch if config.data_mode == "imbalanced" else \
                random_oversample(batch, derive_seed(config.seed, "gan-ros", epoch))
            x_all = torch.as_tensor(data.pixels, dtype=dtype)
            y_all = torch.as_tensor(data.labels)
            rng = np.random.default_rng(derive_seed(config.seed, "gan-order", epoch))
            order = rng.permutation(len(data))
            bs = config.batch_size
            cached_epoch = epoch
        idx = torch.as_tensor(order[pos * bs:(pos + 1) * bs])
        x_real, y_real = x_all[idx], y_all[idx]
        step_seed = derive_seed(config.seed, "step", step)
        noise = sample_noise((len(idx), latent), derive_seed(step_seed, "z"), dtype=dtype)

        try:
            d_loss = discriminator_loss(disc, gen, x_real, y_real, noise, config.gp_weight,
                                        step_seed, config.gp_mode)
        except NumericError as exc:
            raise TrainingError(f"discriminator loss failed at step {step}: {exc}",
                                step=step, epoch=epoch, state=state) from exc
        if not torch.isfinite(d_loss.total):
            raise TrainingError(f"non-finite discriminator loss at step {step}",
                                step=step, epoch=epoch, state=state)
        state.opt_d.zero_grad()
        d_loss.total.backward()
        if not _grads_finite(disc):
            raise TrainingError(f"non-finite discriminator gradient at step {step}",
                                step=step, epoch=epoch, state=state)
        gmean, gmax = _grad_stats(disc)
        state.opt_d.step()
        f = d_loss.as_floats()
        history.append(StepRecord(2 * step, "D", epoch, f["real_term"], f["fake_term"],
                                  f["wrong_label_term"], f["gp_term"], f["total"],
                                  grad_norm_mean=gmean, grad_norm_max=gmax))

        if (step + 1) % config.train_ratio == 0:
            g = torch.Generator().manual_seed(derive_seed(step_seed, "g-labels"))
            y_g = torch.randint(0, gen.num_classes, (len(idx),), generator=g)
            z_g = sample_noise((len(idx), latent), derive_seed(step_seed, "g-z"), dtype=dtype)
            g_loss = generator_loss(disc, gen, z_g, y_g)
            if not torch.isfinite(g_loss):
                raise TrainingError(f"non-finite generator loss at step {step}",
                                    step=step, epoch=epoch, state=state)
            state.opt_g.zero_grad()
            g_loss.backward()
            if not _grads_finite(gen):
                raise TrainingError(f"non-finite generator gradient at step {step}",
                                    step=step, epoch=epoch, state=state)
            gmean, gmax = _grad_stats(gen)
            state.opt_g.step()
            # discriminator grads from the generator pass are discarded by zero_grad
            history.append(StepRecord(2 * step + 1, "G", epoch, g_loss=float(g_loss.detach()),
                                      grad_norm_mean=gmean, grad_norm_max=gmax))
        state.step += 1
    return state, history


def sample(generator: Generator, class_id: int, n: int, seed: int, chunk: int = 500) -> ImageBatch:
    """``n`` images of ``class_id`` from standard-normal latents."""
    k = generator.num_classes
    if not 0 <= class_id < k:
        raise ValueError(f"class id {class_id} outside [0, {k})")
    if n < 1:
        raise ValueError("n must be >= 1")
    dtype = next(generator.parameters()).dtype
    z = sample_noise((n, generator.config.latent_dim), seed, dtype=dtype)
    y = torch.full((n,), class_id, dtype=torch.long)
    with torch.no_grad():
        out = torch.cat([generator(z[i:i + chunk], y[i:i + chunk])
                         for i in range(0, n, chunk)])
    pixels = out.numpy().astype(np.float32).clip(0.0, 1.0)
    return ImageBatch(pixels, np.full(n, class_id, dtype=np.int64), k)


# ---------------------------------------------------------------------------
# Checkpoints: flat npz of named arrays + JSON header
# ---------------------------------------------------------------------------

def _optimizer_arrays(prefix, opt, module):
    out = {}
    sd = opt.state_dict()
    names = [n for n, _ in module.named_parameters()]
    for i, name in enumerate(names):
        st = sd["state"].get(i)
        if st is None:
            continue
        out[f"{prefix}.{name}.step"] = np.asarray(float(st["step"]))
        out[f"{prefix}.{name}.exp_avg"] = st["exp_avg"].numpy().copy()
        out[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    return out


def _restore_optimizer(prefix, opt, module, arrays):
    sd = opt.state_dict()
    state = {}
    for i, (name, p) in enumerate(module.named_parameters()):
        key = f"{prefix}.{name}"
        if key + ".step" not in arrays:
            continue
        state[i] = {
            "step": torch.tensor(float(arrays[key + ".step"])),
            "exp_avg": torch.from_numpy(arrays[key + ".exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[key + ".exp_avg_sq"].copy()),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(path, state: GanState, config: GanConfig) -> None:
    if not str(path):
        raise ValueError("checkpoint path is empty")
    arrays = {}
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        for k, v in module.state_dict().items():
            arrays[f"{prefix}.{k}"] = v.detach().numpy().copy()
    arrays.update(_optimizer_arrays("opt_g", state.opt_g, state.generator))
    arrays.update(_optimizer_arrays("opt_d", state.opt_d, state.discriminator))
    header = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config_hash": config.digest(),
        "gan_config": asdict(config),
        "model": state.generator.config.to_dict(),
    }
    meta = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    save_npz(path, {"__header__": meta, **arrays})


def load_checkpoint(path, config: GanConfig | None = None) -> tuple[GanState, dict]:
    """Rebuild a :class:`GanState` from disk.

    If ``config`` is given its optimizer settings are used and its hash must
    match the one recorded at save time.
    """
    if not str(path):
        raise ValueError("checkpoint path is empty")
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__header__" not in arrays:
        raise FormatError(f"{path}: checkpoint header missing")
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    saved_cfg = GanConfig(**header["gan_config"])
    if config is not None and config.digest() != header["config_hash"]:
        raise ConfigError(f"{path}: checkpoint was written under a different GAN config")
    config = config or saved_cfg
    mcfg = ModelConfig.from_dict(header["model"])
    gen, disc = Generator(mcfg), Discriminator(mcfg)
    dtype = torch.from_numpy(arrays["generator.decoder.dense.weight"][:0].copy()).dtype
    gen.to(dtype)
    disc.to(dtype)
    for prefix, module in (("generator", gen), ("discriminator", disc)):
        sd = {k: torch.from_numpy(arrays[f"{prefix}.{k}"].copy()) for k in module.state_dict()}
        module.load_state_dict(sd)
    opt_g, opt_d = make_optimizers(gen, disc, config)
    _restore_optimizer("opt_g", opt_g, gen, arrays)
    _restore_optimizer("opt_d", opt_d, disc, arrays)
    return GanState(gen, disc, opt_g, opt_d, int(header["step"])), header
