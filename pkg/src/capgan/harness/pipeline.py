"""Seeded, resumable experiment pipeline.

Stages run in order ``prepare -> pretrain -> transfer -> train -> generate ->
evaluate``.  Each completed stage is recorded in ``run_manifest.json`` with
a key (hash of the config sections it depends on plus its upstream keys)
and the sha256 of every file it wrote.  Re-running with the same config
skips recorded stages; a recorded output whose bytes changed is reported as
a corrupted intermediate rather than silently recomputed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, kernels
from ..data import (ImageBatch, ImbalancePlan, impose_imbalance, load_batch, load_cifar10,
                    load_idx, load_image_dir, make_synthetic, random_oversample, resize,
                    save_batch, stratified_split)
from ..errors import CapganError, FormatError, StageError, TrainingError
from ..gan import GanState, load_checkpoint, make_optimizers, sample, save_checkpoint, train
from ..metrics import (MetricReport, PixelEmbedder, evaluate, load_classifier,
                       paired_t_test, save_classifier, train_oracle_classifier)
from ..models import ModelConfig, WeightArchive, build_gan, transfer_weights
from ..pretrain import pretrain, write_history_csv
from ..storage import sha256_file
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STAGES = ("prepare", "pretrain", "transfer", "train", "generate", "evaluate")
# top-level config keys each stage reads (beyond its upstream stages)
STAGE_DEPS = {
    "prepare": ("seed", "dataset", "imbalance"),
    "pretrain": ("init", "pretrain", "model"),
    "transfer": ("gan",),
    "train": ("gan",),
    "generate": ("samples_per_class",),
    "evaluate": ("embedder", "classifier", "ssim_pairs_per_class"),
}
MANIFEST = "run_manifest.json"


@dataclass
class RunManifest:
    out_dir: Path
    config_hash: str = ""
    command: str = ""
    versions: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "command": self.command,
                "versions": self.versions, "stages": self.stages}

    def write(self) -> None:
        (self.out_dir / MANIFEST).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, out_dir: Path) -> "RunManifest":
        path = out_dir / MANIFEST
        if not path.exists():
            return cls(out_dir)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise StageError(f"{path}: corrupted run manifest ({exc})") from exc
        return cls(out_dir, d.get("config_hash", ""), d.get("command", ""),
                   d.get("versions", {}), d.get("stages", {}))

    def artifact_hashes(self) -> dict:
        return {f"{s}/{p}": h for s, rec in sorted(self.stages.items())
                for p, h in sorted(rec["outputs"].items())}

    def artifacts(self) -> list[Path]:
        return [self.out_dir / p for rec in self.stages.values() for p in rec["outputs"]]


def stage_keys(cfg: ExperimentConfig) -> dict:
    keys, upstream = {}, ""
    for stage in STAGES:
        h = hashlib.sha256((upstream + cfg.digest(STAGE_DEPS[stage])).encode()).hexdigest()[:16]
        keys[stage] = upstream = h
    return keys


def _versions() -> dict:
    import torch
    return {"capgan": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__,
            "kernel_backend": kernels.BACKEND}


# ---------------------------------------------------------------------------
# Stage bodies; each returns the relative paths it wrote
# ---------------------------------------------------------------------------

def _load_dataset(cfg: ExperimentConfig) -> tuple[ImageBatch, ImageBatch]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train_b = make_synthetic(ds.num_classes, ds.synthetic_per_class, 28,
                                 cfg.stage_seed("synthetic-train"))
        test_b = make_synthetic(ds.num_classes, ds.synthetic_test_per_class, 28,
                                cfg.stage_seed("synthetic-test"))
    elif ds.kind in ("mnist", "fashion_mnist"):
        train_b = load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test_b = load_idx(ds.test_images, ds.test_labels, ds.num_classes)
    elif ds.kind == "cifar10":
        train_b, test_b = load_cifar10(ds.train_files), load_cifar10(ds.test_files)
    else:
        full = load_image_dir(ds.root, ds.channels, tuple(ds.resize) if ds.resize else None)
        train_b, test_b = stratified_split(full, ds.test_fraction, cfg.stage_seed("split"))
    if ds.resize:
        h, w = ds.resize
        train_b, test_b = resize(train_b, h, w), resize(test_b, h, w)
    return train_b, test_b


def _stage_prepare(cfg, out: Path) -> list[str]:
    reference, test_b = _load_dataset(cfg)
    plan = ImbalancePlan(cfg.imbalance.majority_class, cfg.imbalance.rate,
                         cfg.stage_seed("imbalance"))
    train_b = impose_imbalance(reference, plan) if cfg.imbalance.rate > 1 else reference
    name = cfg.dataset.kind
    save_batch(out / "data/reference.npz", reference, name + "-reference")
    save_batch(out / "data/train.npz", train_b, name + "-train")
    save_batch(out / "data/test.npz", test_b, name + "-test")
    return ["data/reference.npz", "data/reference.json", "data/train.npz", "data/train.json",
            "data/test.npz", "data/test.json"]


def _model_config(cfg, batch: ImageBatch) -> ModelConfig:
    return ModelConfig(batch.image_shape, batch.num_classes, cfg.pretrain.latent_dim,
                       tuple(cfg.pretrain.channels), int(cfg.model.get("label_dim", 16)))


def _pretrain_config(cfg):
    from dataclasses import replace
    return replace(cfg.pretrain, seed=cfg.stage_seed("pretrain"))


def _gan_config(cfg):
    from dataclasses import replace
    return replace(cfg.gan, seed=cfg.stage_seed("gan"))


def _stage_pretrain(cfg, out: Path) -> list[str]:
    if cfg.init == "random":
        (out / "pretrain_skipped.txt").write_text("init=random: no CVAE pre-training\n")
        return ["pretrain_skipped.txt"]
    train_b, _ = load_batch(out / "data/train.npz")
    archive, history = pretrain(train_b, _pretrain_config(cfg), _model_config(cfg, train_b))
    archive.save(out / "cvae.npz")
    write_history_csv(out / "pretrain_history.csv", history)
    return ["cvae.npz", "pretrain_history.csv"]


def _stage_transfer(cfg, out: Path) -> list[str]:
    train_b, _ = load_batch(out / "data/train.npz")
    mcfg = _model_config(cfg, train_b)
    seed = cfg.stage_seed("transfer")
    if cfg.init == "random":
        gen, disc = build_gan(mcfg, seed)
    else:
        gen, disc = transfer_weights(WeightArchive.load(out / "cvae.npz"), seed, mcfg)
    gcfg = _gan_config(cfg)
    opt_g, opt_d = make_optimizers(gen, disc, gcfg)
    save_checkpoint(out / "gan_init.npz", GanState(gen, disc, opt_g, opt_d, 0), gcfg)
    return ["gan_init.npz"]


def _stage_train(cfg, out: Path) -> list[str]:
    train_b, _ = load_batch(out / "data/train.npz")
    gcfg = _gan_config(cfg)
    state, _ = load_checkpoint(out / "gan_init.npz", gcfg)
    try:
        state, history = train(state.generator, state.discriminator, train_b, gcfg, state=state)
    except TrainingError as err:
        if err.state is not None:
            save_checkpoint(out / "gan_last_finite.npz", err.state, gcfg)
        raise
    save_checkpoint(out / "gan_final.npz", state, gcfg)
    history.to_csv(out / "gan_history.csv")
    return ["gan_final.npz", "gan_history.csv"]


def _stage_generate(cfg, out: Path) -> list[str]:
    state, _ = load_checkpoint(out / "gan_final.npz")
    gen = state.generator
    parts = [sample(gen, c, cfg.samples_per_class, _class_seed(cfg, c))
             for c in range(gen.num_classes)]
    pixels = np.concatenate([p.pixels for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    batch = ImageBatch(pixels, labels, gen.num_classes)
    save_batch(out / "samples.npz", batch, "generated")
    cols = min(10, cfg.samples_per_class)
    grid = np.concatenate([p.pixels[:cols] for p in parts])
    render_grid(grid, gen.num_classes, cols, out / "samples_grid.png")
    return ["samples.npz", "samples.json", "samples_grid.png"]


def _class_seed(cfg, c: int) -> int:
    from ..pretrain import derive_seed
    return derive_seed(cfg.stage_seed("generate"), c)


def replay_sampler(batch: ImageBatch):
    """Sampler that hands back stored images of the requested class."""
    def _sample(class_id, n, seed):
        part = batch.of_class(class_id)
        return part.take(np.arange(min(n, len(part))))
    return _sample


def _stage_evaluate(cfg, out: Path) -> list[str]:
    samples, _ = load_batch(out / "samples.npz")
    test_b, _ = load_batch(out / "data/test.npz")
    written = []
    if cfg.embedder == "classifier":
        reference, _ = load_batch(out / "data/reference.npz")
        balanced = random_oversample(reference, cfg.stage_seed("classifier-data"))
        from dataclasses import replace
        ccfg = replace(cfg.classifier, seed=cfg.stage_seed("classifier"))
        embedder = train_oracle_classifier(balanced, ccfg, test_b)
        save_classifier(out / "classifier.npz", embedder, ccfg, test_b.image_shape)
        written.append("classifier.npz")
    else:
        embedder = PixelEmbedder(test_b.image_shape)
    report = evaluate(replay_sampler(samples), test_b, embedder, cfg.samples_per_class,
                      cfg.stage_seed("evaluate"), cfg.imbalance.majority_class,
                      cfg.ssim_pairs_per_class)
    report.meta.update({"rate": cfg.imbalance.rate, "seed": cfg.seed, "init": cfg.init,
                        "strategy": cfg.pretrain.strategy if cfg.init == "cvae" else "none"})
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    return written + ["report.json", "report.csv"]


STAGE_FUNCS = {
    "prepare": _stage_prepare, "pretrain": _stage_pretrain, "transfer": _stage_transfer,
    "train": _stage_train, "generate": _stage_generate, "evaluate": _stage_evaluate,
}


def _stage_intact(manifest: RunManifest, stage: str, key: str) -> bool:
    rec = manifest.stages.get(stage)
    if rec is None or rec.get("key") != key:
        return False
    for rel, digest in rec["outputs"].items():
        path = manifest.out_dir / rel
        if not path.exists() or sha256_file(path) != digest:
            raise StageError(
                f"stage '{stage}': intermediate {rel} is missing or corrupted; "
                f"rerun with --force")
    return True


def run_pipeline(cfg: ExperimentConfig, upto: str = "evaluate", force: bool = False) -> RunManifest:
    """Run (or resume) every stage through ``upto``; returns the manifest."""
    if upto not in STAGES:
        raise StageError(f"unknown stage {upto!r}")
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.read(out)
    keys = stage_keys(cfg)
    if manifest.config_hash and manifest.config_hash != cfg.digest():
        log.info("config changed since last run in %s; stale stages will rerun", out)
    manifest.config_hash = cfg.digest()
    manifest.versions = _versions()
    manifest.command = f"capgan run --config {out / 'config.yaml'}"
    cfg.save(out / "config.yaml")

    stale = force
    for stage in STAGES[:STAGES.index(upto) + 1]:
        if not stale and _stage_intact(manifest, stage, keys[stage]):
            log.info("stage %s: up to date", stage)
            continue
        stale = True
        log.info("stage %s: running", stage)
        t0 = time.perf_counter()
        try:
            outputs = STAGE_FUNCS[stage](cfg, out)
        except CapganError:
            raise
        except (FileNotFoundError, KeyError, ValueError) as exc:
            raise StageError(f"stage '{stage}' failed: {exc}") from exc
        manifest.stages[stage] = {
            "key": keys[stage],
            "seconds": round(time.perf_counter() - t0, 3),
            "outputs": {rel: sha256_file(out / rel) for rel in outputs},
        }
        manifest.write()
    manifest.write()
    return manifest


def load_report(out_dir) -> MetricReport:
    path = Path(out_dir) / "report.json"
    try:
        return MetricReport.from_dict(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable metric report ({exc})") from exc


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

PRETRAIN_VARIANTS = ("ros", "two_phase", "ensemble", "imbalanced", "no-pretrain")
LOSS_VARIANTS = ("full", "mse")


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """``'<pretrain>[+<loss>]'`` e.g. ``ros``, ``imbalanced+mse``, ``no-pretrain``."""
    init, _, loss = variant.partition("+")
    loss = loss or "full"
    if init not in PRETRAIN_VARIANTS or loss not in LOSS_VARIANTS:
        raise StageError(f"unknown ablation variant {variant!r}")
    d = cfg.to_dict()
    d["output_dir"] = str(Path(cfg.output_dir) / "ablation" / variant.replace("+", "_"))
    if init == "no-pretrain":
        d["init"] = "random"
    else:
        d["init"] = "cvae"
        d["pretrain"]["strategy"] = init
    d["pretrain"]["loss_weights"] = [0.0, 0.0, 1.0] if loss == "mse" else [1.0, 1.0, 1.0]
    return ExperimentConfig.from_dict(d)


def _run_variant(args):
    cfg_dict, variant = args
    vcfg = variant_config(ExperimentConfig.from_dict(cfg_dict), variant)
    run_pipeline(vcfg)
    return variant, load_report(vcfg.output_path()).to_dict()


def run_ablation(cfg: ExperimentConfig, variants=("ros", "no-pretrain"), workers: int = 1) -> dict:
    """Run one full pipeline per variant and tabulate per-class metrics."""
    jobs = [(cfg.to_dict(), v) for v in variants]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_variant, jobs))
    else:
        results = [_run_variant(j) for j in jobs]
    rows, summary = [], []
    for variant, rep in results:
        report = MetricReport.from_dict(rep)
        for r in report.per_class:
            kind = "majority" if r.class_id == report.majority_class else "minority"
            rows.append({"variant": variant, "class": r.class_id, "kind": kind,
                         "fid": r.fid, "ssim": r.ssim})
        for s in report.summary_rows():
            summary.append({"variant": variant, **s})
    result = {"rows": rows, "summary": summary, "seed": cfg.seed}
    out = cfg.output_path() / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_report.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    with open(out / "ablation_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["variant", "class", "kind", "fid", "ssim"])
        w.writeheader()
        w.writerows(rows)
    return result


def compare_runs(runs_a, runs_b) -> dict:
    """Paired t-tests of minority-average FID and SSIM over matched runs."""
    a = [load_report(r) for r in runs_a]
    b = [load_report(r) for r in runs_b]
    if len(a) != len(b):
        raise StageError("comparison needs the same number of runs on each side")
    t_fid, p_fid = paired_t_test([r.minority_avg_fid for r in a], [r.minority_avg_fid for r in b])
    t_ssim, p_ssim = paired_t_test([r.minority_avg_ssim for r in a],
                                   [r.minority_avg_ssim for r in b])
    return {"n": len(a), "fid": {"t": t_fid, "p": p_fid}, "ssim": {"t": t_ssim, "p": p_ssim}}


def summary_table(run_dirs) -> list[dict]:
    """One row per run: rate, variant and the minority/majority FID and SSIM."""
    rows = []
    for d in run_dirs:
        rep = load_report(d)
        rows.append({
            "run": str(d), "rate": rep.meta.get("rate"), "seed": rep.meta.get("seed"),
            "strategy": rep.meta.get("strategy"),
            "minority_fid": rep.minority_avg_fid, "minority_ssim": rep.minority_avg_ssim,
            "majority_fid": rep.majority.fid, "majority_ssim": rep.majority.ssim,
        })
    return rows


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def render_grid(images, rows: int, cols: int, path) -> None:
    """Tile ``rows * cols`` images (``[N, H, W, C]`` in [0, 1]) into one PNG."""
    from PIL import Image

    images = np.asarray(images)
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    if len(images) < rows * cols:
        raise ValueError(f"{len(images)} images cannot fill a {rows}x{cols} grid")
    n, h, w, c = images.shape
    tiles = images[:rows * cols].reshape(rows, cols, h, w, c)
    canvas = tiles.transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, c)
    canvas = np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    img = Image.fromarray(canvas[..., 0] if c == 1 else canvas, mode="L" if c == 1 else "RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", optimize=False)
