"""Class-balanced image synthesis: CVAE pre-training, weight transfer to a
conditional GAN, gradient-penalty adversarial training, and evaluation."""

__version__ = "0.1.0"

from .data import (DatasetManifest, ImageBatch, ImbalancePlan, class_histogram,
                   impose_imbalance, load_cifar10, load_idx, load_image_dir, random_oversample,
                   resize)
from .errors import CapganError
from .gan import GanConfig, discriminator_loss, generator_loss, gradient_penalty, sample, train
from .metrics import evaluate, frechet_distance, paired_t_test, ssim
from .models import CVAE, Discriminator, Generator, ModelConfig, WeightArchive, transfer_weights
from .pretrain import PretrainConfig, cvae_loss, kl_divergence, pretrain

__all__ = [
    "CVAE", "CapganError", "DatasetManifest", "Discriminator", "GanConfig", "Generator",
    "ImageBatch", "ImbalancePlan", "ModelConfig", "PretrainConfig", "WeightArchive",
    "class_histogram", "cvae_loss", "discriminator_loss", "evaluate", "frechet_distance",
    "generator_loss", "gradient_penalty", "impose_imbalance", "kl_divergence", "load_cifar10",
    "load_idx", "load_image_dir", "paired_t_test", "pretrain", "random_oversample", "resize",
    "sample", "ssim", "train", "transfer_weights",
]
