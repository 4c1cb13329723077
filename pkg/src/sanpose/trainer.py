"""Alternating discriminator/generator optimisation, schedule, evaluation and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import build, to_dict
from .data import DatasetManifest, DatasetTensors, load_dataset, load_tensors, make_pairs, pair_indices
from .discriminator import Discriminator, DiscriminatorConfig
from .errors import ConfigError, NumericError
from .generator import GeneratorConfig, build_generator, generate, init_weights
from .losses import (
    FeatureExtractor,
    LossWeights,
    discriminator_loss,
    full_loss,
    generator_adv_loss,
    l1_loss,
    perceptual_loss,
)
from .metrics import image_fid, lpips, mask_lpips, masked_l1
from .rng import derive_seed, numpy_rng

log = logging.getLogger(__name__)

STEP_FIELDS = ("step", "epoch", "lr", "adv_d", "adv_g", "l1", "perc", "full")
EVAL_FIELDS = ("epoch", "masked_l1", "fid", "lpips", "mask_lpips")
CHECKPOINT_KIND = "san-gan"


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "synthetic"
    data: str = ""
    train_split: str = "train"
    test_split: str = "test"
    epochs: int = 30
    decay_start: int = 15
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    alpha: float = 10.0
    beta: float = 15.0
    gamma: float = 5.0
    sab_count: int = 5
    base_channels: int = 16
    d_channels: int = 16
    n_down: int = 2
    norm: str = "batch"
    slope: float = 0.2
    code_skip: bool = True
    target_skip: bool = True
    color_jitter: bool = True
    label_smoothing: bool = True
    disable_perceptual: bool = False
    disable_mask: bool = False
    pairs_per_epoch: int = 0          # 0 = every ordered pair
    probe_pairs: int = 128
    perc_channels: tuple = (16, 32, 64)
    perc_layers: tuple = (0, 1, 2)
    extractor_seed: int = 1234
    metric_seed: int = 4321
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.decay_start < 0:
            raise ConfigError("decay_start must be >= 0")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)


# Total epoch counts for the real-data presets are twice the published decay start.
PRESETS = {
    "market-like": dict(epochs=600, decay_start=300, batch_size=32, lr=2e-4,
                        alpha=10.0, beta=15.0, gamma=5.0, base_channels=64, d_channels=64),
    "fashion-like": dict(epochs=1000, decay_start=500, batch_size=8, lr=2e-4,
                         alpha=15.0, beta=1.0, gamma=5.0, base_channels=64, d_channels=64),
    "synthetic": dict(epochs=30, decay_start=15, batch_size=8, lr=2e-4,
                      alpha=10.0, beta=15.0, gamma=5.0, base_channels=16, d_channels=16, n_down=1),
}


def make_config(preset: str = "synthetic", *layers) -> TrainConfig:
    """Preset defaults, then each override layer in order."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return build(TrainConfig, {"preset": preset}, PRESETS[preset], *layers)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Constant through ``decay_start``, then linear to zero at the final epoch."""
    last = config.epochs - 1
    if not 0 <= epoch <= last:
        raise ConfigError(f"epoch {epoch} outside [0, {last}]")
    if epoch <= config.decay_start or config.decay_start >= last:
        return config.lr
    return config.lr * (last - epoch) / (last - config.decay_start)


class Trainer:
    def __init__(self, config: TrainConfig, train: DatasetManifest, test: DatasetManifest | None = None,
                 dtype=torch.float32):
        self.config = config
        self.train_manifest = train
        self.test_manifest = test
        self.dtype = dtype
        self.gen_config = GeneratorConfig(
            num_labels=train.num_labels, image_size=tuple(train.image_size),
            base_channels=config.base_channels, sab_count=config.sab_count, n_down=config.n_down,
            slope=config.slope, norm=config.norm, code_skip=config.code_skip,
            target_skip=config.target_skip)
        self.disc_config = DiscriminatorConfig(
            base_channels=config.d_channels, image_size=tuple(train.image_size), slope=config.slope)
        self.generator = build_generator(self.gen_config, derive_seed(config.seed, "init-g")).to(dtype)
        self.discriminator = init_weights(Discriminator(self.disc_config),
                                          derive_seed(config.seed, "init-d")).to(dtype)
        self.perceptual = FeatureExtractor(config.perc_channels, config.perc_layers,
                                           seed=config.extractor_seed).to(dtype)
        self.metric_extractor = FeatureExtractor(config.perc_channels, seed=config.metric_seed).to(dtype)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr, betas=betas)
        self.data = _cast(load_tensors(train), dtype)
        self.test_data = _cast(load_tensors(test), dtype) if test is not None else None
        self.epoch = 0
        self.step = 0

    # ---- optimisation -------------------------------------------------

    def batch(self, data: DatasetTensors, src, tgt, augment_key=None) -> dict:
        b = data.inputs(src, tgt)
        if augment_key is not None and self.config.color_jitter:
            rng = numpy_rng(self.config.seed, "augment", augment_key)
            b["img_src"], b["img_tgt"] = color_jitter(rng, b["img_src"], b["img_tgt"])
        return b

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def _generate(self, batch):
        return generate(self.generator, batch, self.config.disable_mask)

    def generator_losses(self, batch, fake=None) -> dict:
        if fake is None:
            fake = self._generate(batch)
        target = batch["img_tgt"]
        adv_g = generator_adv_loss(self.discriminator(batch["img_src"], fake))
        l1 = l1_loss(target, fake)
        if self.config.disable_perceptual:
            perc = torch.zeros((), dtype=self.dtype)
        else:
            perc = perceptual_loss(self.perceptual, target, fake)
        full = full_loss(self.config.weights, adv_g, l1, perc)
        return {"adv_g": adv_g, "l1": l1, "perc": perc, "full": full}

    def discriminator_step(self, batch, fake) -> torch.Tensor:
        d_real = self.discriminator(batch["img_src"], batch["img_tgt"])
        d_fake = self.discriminator(batch["img_src"], fake.detach())
        loss = discriminator_loss(d_real, d_fake, self.config.label_smoothing)
        _check_finite({"adv_d": loss})
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return loss

    def generator_step(self, batch, fake=None) -> dict:
        losses = self.generator_losses(batch, fake)
        _check_finite(losses)
        self.opt_g.zero_grad(set_to_none=True)
        losses["full"].backward()
        self.opt_g.step()
        return losses

    def train_step(self, batch) -> dict:
        """One discriminator update then one generator update on the same batch."""
        self.generator.train()
        self.discriminator.train()
        fake = self._generate(batch)
        adv_d = self.discriminator_step(batch, fake)
        losses = self.generator_step(batch, fake)
        self.step += 1
        return {"adv_d": float(adv_d.detach()), **{k: float(v.detach()) for k, v in losses.items()}}

    def epoch_order(self, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        cap = self.config.pairs_per_epoch or None
        pairs = make_pairs(self.train_manifest, derive_seed(self.config.seed, "pairs", epoch), cap)
        src, tgt = pair_indices(self.train_manifest, pairs)
        perm = numpy_rng(self.config.seed, "shuffle", epoch).permutation(len(src))
        return src[perm], tgt[perm]

    # ---- evaluation ---------------------------------------------------

    @torch.no_grad()
    def evaluate(self, batch_size: int = 64) -> dict:
        if self.test_data is None:
            raise ConfigError("evaluation needs a test split")
        self.generator.eval()
        return evaluate_generator(self.generator, self.test_manifest, self.test_data, self.metric_extractor,
                                  self.config.metric_seed, self.config.probe_pairs,
                                  self.config.disable_mask, batch_size)

    # ---- checkpoints --------------------------------------------------

    def save(self, path) -> Path:
        tensors = {}
        tensors.update(checkpoint.module_tensors("generator", self.generator))
        tensors.update(checkpoint.module_tensors("discriminator", self.discriminator))
        tensors.update(_optimizer_tensors("optim_g", self.opt_g))
        tensors.update(_optimizer_tensors("optim_d", self.opt_d))
        meta = {
            "kind": CHECKPOINT_KIND,
            "epoch": self.epoch,
            "step": self.step,
            "train_config": to_dict(self.config),
            "generator_config": to_dict(self.gen_config),
            "discriminator_config": to_dict(self.disc_config),
        }
        return checkpoint.save(path, tensors, meta)

    def load(self, path) -> dict:
        meta, arrays = checkpoint.load(path)
        checkpoint.load_module("generator", self.generator, arrays)
        checkpoint.load_module("discriminator", self.discriminator, arrays)
        _load_optimizer("optim_g", self.opt_g, arrays)
        _load_optimizer("optim_d", self.opt_d, arrays)
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        return meta

    # ---- loop ---------------------------------------------------------

    def fit(self, out_dir, resume: str | None = None, progress=None) -> Path:
        """Train to ``config.epochs``; returns the final checkpoint path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            self.load(resume)
        steps_file = out / "metrics.csv"
        eval_file = out / "eval.csv"
        append = bool(resume) and steps_file.exists()
        with open(steps_file, "a" if append else "w", newline="") as sf, \
                open(eval_file, "a" if append and eval_file.exists() else "w", newline="") as ef:
            step_w = csv.writer(sf)
            eval_w = csv.writer(ef)
            if not append:
                step_w.writerow(STEP_FIELDS)
                eval_w.writerow(EVAL_FIELDS)
            final = out / "last.ckpt"
            while self.epoch < self.config.epochs:
                epoch = self.epoch
                lr = lr_schedule(self.config, epoch)
                self.set_lr(lr)
                src, tgt = self.epoch_order(epoch)
                bs = self.config.batch_size
                for i in range(0, len(src) - bs + 1, bs):
                    batch = self.batch(self.data, src[i:i + bs], tgt[i:i + bs], augment_key=self.step)
                    rec = self.train_step(batch)
                    step_w.writerow([self.step, epoch, lr] + [rec[k] for k in STEP_FIELDS[3:]])
                self.epoch += 1
                if self.test_data is not None:
                    ev = self.evaluate()
                    eval_w.writerow([epoch] + [ev[k] for k in EVAL_FIELDS[1:]])
                    ef.flush()
                    if progress:
                        progress(epoch, ev)
                sf.flush()
                if self.config.checkpoint_every and self.epoch % self.config.checkpoint_every == 0:
                    self.save(out / f"epoch_{self.epoch:04d}.ckpt")
            self.save(final)
        return final


def probe_pairs(manifest: DatasetManifest, seed: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """The fixed held-out pairs every evaluation scores, chosen by ``seed`` alone."""
    return pair_indices(manifest, make_pairs(manifest, derive_seed(seed, "probe"), count or None))


@torch.no_grad()
def evaluate_generator(generator, manifest: DatasetManifest, data: DatasetTensors, extractor, seed: int,
                       count: int, disable_mask: bool = False, batch_size: int = 64) -> dict:
    """Masked L1, FID, LPIPS and mask-LPIPS of ``generator`` over the probe pairs of ``manifest``."""
    src, tgt = probe_pairs(manifest, seed, count)
    fakes, reals, l1s, lp, mlp = [], [], [], [], []
    for i in range(0, len(src), batch_size):
        b = data.inputs(src[i:i + batch_size], tgt[i:i + batch_size])
        fake = generate(generator, b, disable_mask)
        fakes.append(fake)
        reals.append(b["img_tgt"])
        l1s.append(masked_l1(b["img_tgt"], fake, b["mask_tgt"]))
        lp.append(lpips(extractor, b["img_tgt"], fake))
        mlp.append(mask_lpips(extractor, b["img_tgt"], fake, b["mask_tgt"]))
    return {
        "masked_l1": float(torch.cat(l1s).mean()),
        "fid": image_fid(extractor, torch.cat(reals), torch.cat(fakes)),
        "lpips": float(torch.cat(lp).mean()),
        "mask_lpips": float(torch.cat(mlp).mean()),
        "n_pairs": int(len(src)),
    }


def color_jitter(rng: np.random.Generator, *images: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Per-sample RGB permutation and channel inversion, shared by every image of a sample.

    Source and target of a pair get the same recolouring, so the pair stays one "person" while
    the training set covers far more appearances than it has identities.
    """
    n = images[0].shape[0]
    perm = np.stack([rng.permutation(3) for _ in range(n)])
    sign = rng.choice([-1.0, 1.0], size=(n, 3))
    index = torch.as_tensor(perm).view(n, 3, 1, 1)
    scale = torch.as_tensor(sign, dtype=images[0].dtype).view(n, 3, 1, 1)
    out = []
    for img in images:
        out.append(torch.gather(img, 1, index.expand_as(img)) * scale)
    return tuple(out)


def _cast(data: DatasetTensors, dtype) -> DatasetTensors:
    return replace(data, images=data.images.to(dtype), masks=data.masks.to(dtype))


def _check_finite(losses: dict) -> None:
    for name, value in losses.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} loss: {value}")


def _optimizer_tensors(prefix, opt) -> dict:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        for key, val in opt.state.get(p, {}).items():
            out[f"{prefix}.{i}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return out


def _load_optimizer(prefix, opt, arrays) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    opt.state.clear()
    for i, p in enumerate(params):
        keys = [k for k in arrays if k.startswith(f"{prefix}.{i}.")]
        if keys:
            opt.state[p] = {k.rsplit(".", 1)[1]: torch.from_numpy(arrays[k]).to(p.dtype) for k in keys}


def load_generator(path):
    """Rebuild an evaluation-mode generator (and its run config) from a checkpoint."""
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ConfigError(f"{path} is not a generator checkpoint (kind={meta.get('kind')!r})")
    gcfg = build(GeneratorConfig, meta["generator_config"])
    gen = build_generator(gcfg, 0)
    checkpoint.load_module("generator", gen, arrays)
    gen.eval()
    return gen, build(TrainConfig, meta["train_config"])


def train(config: TrainConfig, out_dir, resume=None, progress=None) -> Path:
    train_m = load_dataset(config.data, config.train_split)
    test_m = load_dataset(config.data, config.test_split)
    trainer = Trainer(config, train_m, test_m)
    return trainer.fit(out_dir, resume=resume, progress=progress)
