"""Sample-quality evaluation: Fréchet distance, SSIM, per-class reports, t-tests.

Fréchet distances are computed on features from a pluggable embedder
(raw pixels, or the penultimate layer of a small classifier trained
in-repo), so absolute values are only comparable within one embedder.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats
from torch import nn

from . import kernels
from .data import ImageBatch, class_histogram
from .errors import ConfigError, EvaluationError, NumericError, ShapeError
from .storage import save_npz
from .models import seeded

log = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSD_TOL = 1e-8
COV_EPS = 1e-6


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

class PixelEmbedder:
    kind = "pixel"

    def __init__(self, image_shape=None):
        self.embedding_dim = int(np.prod(image_shape)) if image_shape is not None else None

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        return np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)


class OracleClassifier(nn.Module):
    def __init__(self, image_shape, num_classes: int, embedding_dim: int = 64,
                 channels=(16, 32)):
        super().__init__()
        h, w, c = image_shape
        layers, prev = [], c
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            prev = ch
        self.features = nn.Sequential(*layers, nn.Flatten())
        f = 2 ** len(channels)
        self.penultimate = nn.Sequential(
            nn.Linear(prev * (h // f) * (w // f), embedding_dim), nn.ReLU())
        self.logits = nn.Linear(embedding_dim, num_classes)

    def embed(self, x):
        return self.penultimate(self.features(x.permute(0, 3, 1, 2)))

    def forward(self, x):
        return self.logits(self.embed(x))


class ClassifierEmbedder:
    """Penultimate activations of a trained :class:`OracleClassifier`."""

    kind = "classifier"

    def __init__(self, model: OracleClassifier, train_accuracy=math.nan, test_accuracy=math.nan):
        self.model = model.eval()
        self.embedding_dim = model.logits.in_features
        self.num_classes = model.logits.out_features
        self.train_accuracy = train_accuracy
        self.test_accuracy = test_accuracy

    def _forward(self, pixels, fn, chunk=512):
        outs = []
        with torch.no_grad():
            for i in range(0, len(pixels), chunk):
                x = torch.as_tensor(np.asarray(pixels[i:i + chunk], dtype=np.float32))
                outs.append(fn(x).double().numpy())
        width = self.embedding_dim if fn == self.model.embed else self.num_classes
        return np.concatenate(outs) if outs else np.zeros((0, width))

    def __call__(self, pixels) -> np.ndarray:
        return self._forward(pixels, self.model.embed)

    def predict(self, pixels) -> np.ndarray:
        return self._forward(pixels, self.model.forward).argmax(axis=1)

    def accuracy(self, batch: ImageBatch) -> float:
        return float(np.mean(self.predict(batch.pixels) == batch.labels))


def embed(embedder, batch: ImageBatch) -> np.ndarray:
    return embedder(batch.pixels)


@dataclass
class ClassifierConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 64
    embedding_dim: int = 64
    channels: tuple = (16, 32)
    seed: int = 0


def train_oracle_classifier(balanced_batch: ImageBatch, config: ClassifierConfig | None = None,
                            test_batch: ImageBatch | None = None) -> ClassifierEmbedder:
    """Fit the small CNN used as FID feature extractor and as class oracle."""
    config = config or ClassifierConfig()
    if balanced_batch.num_classes < 2:
        raise ConfigError("a classifier needs at least two classes")
    with seeded(config.seed):
        model = OracleClassifier(balanced_batch.image_shape, balanced_batch.num_classes,
                                 config.embedding_dim, config.channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x_all = torch.as_tensor(balanced_batch.pixels, dtype=torch.float32)
    y_all = torch.as_tensor(balanced_batch.labels)
    rng = np.random.default_rng(config.seed)
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(balanced_batch))
        for i in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[i:i + config.batch_size])
            loss = nn.functional.cross_entropy(model(x_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    emb = ClassifierEmbedder(model)
    emb.train_accuracy = emb.accuracy(balanced_batch)
    if test_batch is not None:
        emb.test_accuracy = emb.accuracy(test_batch)
    return emb


def save_classifier(path, emb: ClassifierEmbedder, config: ClassifierConfig, image_shape) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.numpy() for k, v in emb.model.state_dict().items()}
    meta = {"config": {**asdict(config), "channels": list(config.channels)},
            "image_shape": list(image_shape), "num_classes": emb.num_classes,
            "train_accuracy": emb.train_accuracy, "test_accuracy": emb.test_accuracy}
    save_npz(path, {"__header__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                    **arrays})


def load_classifier(path) -> ClassifierEmbedder:
    with np.load(path) as z:
        meta = json.loads(z["__header__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    cfg = meta["config"]
    model = OracleClassifier(tuple(meta["image_shape"]), meta["num_classes"],
                             cfg["embedding_dim"], tuple(cfg["channels"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return ClassifierEmbedder(model, meta["train_accuracy"], meta["test_accuracy"])


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased sample covariance of ``[N, D]`` features."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError("need at least two feature rows to fit a Gaussian")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2)


def matrix_sqrt_psd(m) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    The input is symmetrized first; eigenvalues within ``PSD_TOL`` below zero
    are clipped.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("matrix_sqrt_psd needs a square matrix")
    sym = (m + m.T) / 2
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def _trace_sqrt_product(s1, s2) -> float:
    # Tr((s1 s2)^1/2) = Tr((r s2 r)^1/2) with r = s1^1/2; the inner matrix is PSD
    r = matrix_sqrt_psd(s1)
    inner = r @ s2 @ r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians."""
    mu1, mu2 = np.atleast_1d(a.mean), np.atleast_1d(b.mean)
    s1, s2 = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ShapeError("Gaussian statistics have mismatched dimensions")
    diff = mu1 - mu2
    try:
        tr_sqrt = _trace_sqrt_product(s1, s2)
    except (NumericError, np.linalg.LinAlgError):
        eye = COV_EPS * np.eye(s1.shape[0])
        try:
            tr_sqrt = _trace_sqrt_product(s1 + eye, s2 + eye)
        except (NumericError, np.linalg.LinAlgError) as exc:
            raise NumericError(f"matrix square root failed: {exc}") from exc
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    if not math.isfinite(d):
        raise NumericError("Fréchet distance is not finite")
    return max(d, 0.0)


def fid_between(embedder, x: ImageBatch, y: ImageBatch) -> float:
    return frechet_distance(fit_gaussian(embed(embedder, x)), fit_gaussian(embed(embedder, y)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 1:
        return img[None, :, None]
    if img.ndim == 2:
        return img[..., None]
    if img.ndim == 3:
        return img
    raise ShapeError(f"ssim expects a single image, got shape {img.shape}")


def ssim(a, b, dynamic_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """SSIM of one image pair: uniform ``window x window`` sliding windows,
    stride 1, averaged; whole-image statistics below window size."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    c1, c2 = (SSIM_K1 * dynamic_range) ** 2, (SSIM_K2 * dynamic_range) ** 2
    return float(kernels.ssim_batch(a[None], b[None], c1, c2, window)[0])


def ssim_pairs(a, b, dynamic_range: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    """Vectorized :func:`ssim` over ``[K, H, W, C]`` pair stacks."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    c1, c2 = (SSIM_K1 * dynamic_range) ** 2, (SSIM_K2 * dynamic_range) ** 2
    return kernels.ssim_batch(a, b, c1, c2, window)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    class_id: int
    fid: float
    ssim: float
    n_generated: int
    n_test: int


@dataclass
class MetricReport:
    """Per-class FID/SSIM plus the minority-average and majority rows."""

    per_class: list
    majority_class: int
    embedder: str = "pixel"
    meta: dict = field(default_factory=dict)

    @property
    def minority(self) -> list:
        return [r for r in self.per_class if r.class_id != self.majority_class]

    @property
    def majority(self) -> ClassMetrics:
        return next(r for r in self.per_class if r.class_id == self.majority_class)

    @property
    def minority_avg_fid(self) -> float:
        return float(np.mean([r.fid for r in self.minority]))

    @property
    def minority_avg_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.minority]))

    def summary_rows(self) -> list[dict]:
        """Table layout: one row per group, FID and SSIM columns."""
        return [
            {"group": "avg(Minority)", "fid": self.minority_avg_fid, "ssim": self.minority_avg_ssim},
            {"group": "Majority", "fid": self.majority.fid, "ssim": self.majority.ssim},
        ]

    def to_dict(self) -> dict:
        return {
            "embedder": self.embedder,
            "majority_class": self.majority_class,
            "per_class": [asdict(r) for r in self.per_class],
            "summary": {r["group"]: {"FID": r["fid"], "SSIM": r["ssim"]}
                        for r in self.summary_rows()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([ClassMetrics(**r) for r in d["per_class"]], d["majority_class"],
                   d.get("embedder", "pixel"), d.get("meta", {}))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "class", "FID", "SSIM"])
            for r in self.per_class:
                kind = "majority" if r.class_id == self.majority_class else "minority"
                w.writerow([kind, r.class_id, repr(r.fid), repr(r.ssim)])
            for r in self.summary_rows():
                w.writerow([r["group"], "", repr(r["fid"]), repr(r["ssim"])])


Sampler = Callable[[int, int, int], ImageBatch]


def _as_sampler(generator) -> Sampler:
    from .gan import sample
    from .models import Generator

    if isinstance(generator, Generator):
        return lambda c, n, s: sample(generator, c, n, s)
    if callable(generator):
        return generator
    raise TypeError("generator must be a Generator or a callable (class_id, n, seed)")


def evaluate(generator, test_batch: ImageBatch, embedder=None, samples_per_class: int = 1000,
             seed: int = 0, majority_class: int = 0, ssim_pairs_per_class: int = 1000,
             pairing: str = "random") -> MetricReport:
    """Per-class FID and SSIM of generated samples against the test split.

    ``generator`` is a :class:`~capgan.models.Generator` or any callable
    ``(class_id, n, seed) -> ImageBatch``.  With ``pairing='random'`` SSIM is
    the mean over ``ssim_pairs_per_class`` seeded random (generated, test)
    pairs; ``pairing='identity'`` pairs the i-th generated with the i-th test
    image.
    """
    from .pretrain import derive_seed

    if pairing not in ("random", "identity"):
        raise ConfigError(f"unknown SSIM pairing {pairing!r}")
    embedder = embedder or PixelEmbedder(test_batch.image_shape)
    sampler = _as_sampler(generator)
    counts = class_histogram(test_batch)
    missing = np.flatnonzero(counts == 0).tolist()
    if missing:
        raise EvaluationError(f"test set has no samples of classes {missing}")
    rows = []
    for c in range(test_batch.num_classes):
        test_c = test_batch.of_class(c)
        gen_c = sampler(c, samples_per_class, derive_seed(seed, "generate", c))
        if len(gen_c) < 2 or len(test_c) < 2:
            raise EvaluationError(f"class {c}: need at least two images per side for FID")
        fid = fid_between(embedder, gen_c, test_c)
        if pairing == "identity":
            k = min(len(gen_c), len(test_c))
            gi, ti = np.arange(k), np.arange(k)
        else:
            rng = np.random.default_rng(derive_seed(seed, "ssim-pairs", c))
            gi = rng.integers(0, len(gen_c), ssim_pairs_per_class)
            ti = rng.integers(0, len(test_c), ssim_pairs_per_class)
        s = float(np.mean(ssim_pairs(gen_c.pixels[gi], test_c.pixels[ti])))
        rows.append(ClassMetrics(c, fid, s, len(gen_c), len(test_c)))
    return MetricReport(rows, majority_class, getattr(embedder, "kind", "custom"),
                        {"samples_per_class": samples_per_class, "seed": seed, "pairing": pairing})


# ---------------------------------------------------------------------------
# Significance
# ---------------------------------------------------------------------------

def paired_t_test(values_a, values_b) -> tuple[float, float]:
    """Two-tailed paired Student t-test; returns ``(t, p)``.

    All-zero differences give ``(0, 1)``.  Constant non-zero differences have
    zero variance: ``t`` is infinite and ``p`` is reported as 0 with a warning.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired t-test needs two equal-length vectors")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        warnings.warn("paired differences have zero variance; p-value below machine floor",
                      RuntimeWarning, stacklevel=2)
        return math.copysign(math.inf, mean), 0.0
    t = float(mean / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, p
