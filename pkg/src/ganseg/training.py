"""Adversarial training of the segmentation branch against a weak critic.

Both generators stay frozen; only the segmentation branch and a
from-scratch discriminator learn. Composites blend an independently drawn
foreground and background through the predicted mask, and the critic scores
them against reference images. No style mixing and no path-length
regularization are applied anywhere; an optional R1 penalty keeps the
from-scratch critic stable at small scale.

The branch minimizes

    adv_weight * softplus(-D(composite)) + lambda1 * B(M) + lambda2 * (C(M) + E(M))

where B is the binary-enforcing term min(M, 1-M), and C/E are hinge floors
on the mean foreground and background areas that keep the mask away from
the all-background / all-foreground collapse.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alpha import AlphaNet, AlphaNetSpec, build_alpha, last_layer_spec, save_alpha
from .generator import LatentCode, sample_noise_bank
from .io import (load_checkpoint, read_config, save_checkpoint, substream_seed,
                 torch_generator, write_json)

logger = logging.getLogger(__name__)

BG_SOURCES = ("trimmed_generator", "external_images")
ALPHA_FEATURES = ("selected_layers", "last_layer_only")
REAL_SOURCES = ("generator_samples", "dataset_dir")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    psi: float = 1.0                      # truncation for the foreground stream only
    lambda1: float = 1.2                  # weight of the binary-enforcing term
    lambda2: float = 0.0                  # shared weight of both area floors
    phi1: float = 0.25                    # foreground-area floor
    phi2: float = 0.25                    # background-area floor
    adv_weight: float = 0.1
    lr: float = 2e-4
    d_lr: float | None = None
    iterations: int = 1000
    batch_size: int = 8
    bg_source: str = "trimmed_generator"
    bg_dir: str | None = None
    alpha_features: str = "selected_layers"
    selected_layers: tuple[int, ...] | None = None   # None => all layers
    compress_channels: int = 32
    upsample_mode: str = "nearest"
    r1_gamma: float = 1.0                 # 0 disables the R1 penalty
    r1_interval: int = 1
    real_source: str = "generator_samples"
    real_dir: str | None = None
    d_width: int = 32
    degeneracy_low: float = 0.02
    degeneracy_high: float = 0.98
    degeneracy_patience: int = 50
    log_every: int = 25
    seed: int = 0

    def __post_init__(self):
        for name in ("psi", "phi1", "phi2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bg_source not in BG_SOURCES:
            raise ValueError(f"bg_source must be one of {BG_SOURCES}")
        if self.alpha_features not in ALPHA_FEATURES:
            raise ValueError(f"alpha_features must be one of {ALPHA_FEATURES}")
        if self.real_source not in REAL_SOURCES:
            raise ValueError(f"real_source must be one of {REAL_SOURCES}")
        if self.bg_source == "external_images" and not self.bg_dir:
            raise ValueError("bg_source=external_images requires bg_dir")
        if self.real_source == "dataset_dir" and not self.real_dir:
            raise ValueError("real_source=dataset_dir requires real_dir")
        if self.selected_layers is not None:
            self.selected_layers = tuple(int(k) for k in self.selected_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["selected_layers"] is not None:
            d["selected_layers"] = list(d["selected_layers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_config(path))


# -- the compositing and regularizer formulas ---------------------------------

def composite(fg: torch.Tensor, bg: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Alpha blend: mask * fg + (1 - mask) * bg, mask broadcast over channels."""
    if fg.shape != bg.shape:
        raise ValueError(f"foreground {tuple(fg.shape)} and background "
                         f"{tuple(bg.shape)} shapes differ")
    if mask.shape[-2:] != fg.shape[-2:] or mask.shape[0] != fg.shape[0]:
        raise ValueError(f"mask {tuple(mask.shape)} does not broadcast over "
                         f"images {tuple(fg.shape)}")
    return mask * fg + (1.0 - mask) * bg


def binary_reg(mask: torch.Tensor) -> torch.Tensor:
    """Mean of min(M, 1-M): zero iff binary, maximal 0.5 at M = 0.5."""
    return torch.minimum(mask, 1.0 - mask).mean()


def area_regs(mask: torch.Tensor, phi1: float, phi2: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge floors on per-image mean foreground and background areas.

    c = relu(phi1 - mean(M)) keeps the mask from collapsing to background
    only; e = relu(phi2 - mean(1 - M)) keeps it from covering everything.
    Reductions are per image, then averaged over the batch, which makes the
    weights resolution-free.
    """
    fg_area = mask.mean(dim=(1, 2, 3)) if mask.dim() == 4 else mask.mean()
    c = F.relu(phi1 - fg_area).mean()
    e = F.relu(phi2 - (1.0 - fg_area)).mean()
    return c, e


# -- the weak critic ------------------------------------------------------------

class Discriminator(nn.Module):
    """Fresh convolutional critic in the generator's family, never warm-started."""

    def __init__(self, resolution: int, base_width: int = 32, max_width: int = 256,
                 img_channels: int = 3):
        super().__init__()
        self.resolution = resolution
        layers = []
        width = base_width
        res = resolution
        in_ch = img_channels
        while res > 4:
            layers += [nn.Conv2d(in_ch, width, 3, padding=1),
                       nn.LeakyReLU(0.2),
                       nn.AvgPool2d(2)]
            in_ch, width, res = width, min(width * 2, max_width), res // 2
        layers += [nn.Conv2d(in_ch, in_ch, 3, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.final = nn.Linear(in_ch * 16, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-1] != self.resolution:
            raise ValueError(f"critic expects {self.resolution}px images, "
                             f"got {img.shape[-1]}px")
        x = self.features(img)
        return self.final(x.flatten(1)).squeeze(1)


def build_discriminator(resolution: int, width: int, seed: int,
                        dtype: torch.dtype = torch.float32) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        critic = Discriminator(resolution, base_width=width)
    return critic.to(dtype)


def save_discriminator(critic: Discriminator, path, steps_trained: int) -> str:
    arrays = {k: v.detach().cpu().double().numpy() for k, v in critic.state_dict().items()}
    meta = {"format": 1, "kind": "discriminator", "steps_trained": int(steps_trained),
            "resolution": critic.resolution}
    return save_checkpoint(path, arrays, meta)


def load_discriminator(path, require_fresh: bool = True,
                       dtype: torch.dtype = torch.float32) -> Discriminator:
    """Load a critic checkpoint; refuses pretrained critics for the trainer.

    Warm-starting from a trained critic stalls the whole setup (it already
    encodes foreground/background correlations), so the trainer only accepts
    checkpoints recorded with zero training steps.
    """
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "discriminator":
        raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not a critic")
    if require_fresh and meta.get("steps_trained", 0) > 0:
        raise ValueError(
            f"refusing pretrained discriminator ({meta['steps_trained']} steps trained): "
            "the critic must be trained from scratch")
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    base_width = state["features.0.weight"].shape[0]
    critic = Discriminator(meta["resolution"], base_width=base_width)
    critic.load_state_dict(state)
    return critic.to(dtype)


# -- background / real image pools -----------------------------------------------

class ImagePool:
    """Directory of images as training tensors in [-1, 1] at a fixed resolution."""

    def __init__(self, directory, resolution: int, dtype: torch.dtype = torch.float32):
        from PIL import Image

        directory = Path(directory)
        paths = sorted(p for p in directory.glob("*") if p.suffix.lower() in
                       (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise ValueError(f"no images found in {directory}")
        images = []
        for p in paths:
            arr = np.asarray(Image.open(p).convert("RGB").resize((resolution, resolution),
                                                                 Image.BILINEAR))
            images.append(torch.from_numpy(arr).permute(2, 0, 1).to(dtype) / 127.5 - 1.0)
        self.images = torch.stack(images)
        self.paths = paths

    def sample(self, batch: int, seed: int) -> torch.Tensor:
        gen = torch_generator(seed)
        idx = torch.randint(0, len(self.images), (batch,), generator=gen)
        return self.images[idx]


# -- batches and history ----------------------------------------------------------

@dataclass
class CompositeBatch:
    """One blended batch plus the four independent draws that produced it."""

    fg_images: torch.Tensor
    bg_images: torch.Tensor
    masks: torch.Tensor
    composites: torch.Tensor
    fg_code: LatentCode
    bg_code: LatentCode | None


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    degenerate: bool = False

    def append(self, record: dict) -> None:
        self.records.append(record)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainHistory":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        hist = cls(records=records)
        hist.degenerate = any(r.get("degenerate") for r in records)
        return hist

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]


def parameter_snapshot(module) -> np.ndarray:
    params = [p.detach().cpu().double().numpy().ravel() for p in module.parameters()]
    return np.concatenate(params) if params else np.zeros(0)


class AlphaTrainer:
    """Owns the mutable training state: the segmentation branch and the critic.

    The foreground and background generators are frozen on entry; their
    parameters never appear in any optimizer and no gradient is ever
    requested for them.
    """

    def __init__(self, generator, background, alpha: AlphaNet, config: TrainConfig,
                 dtype: torch.dtype = torch.float32):
        self.config = config
        self.generator = generator
        self.background = background        # TrimmedGenerator or ImagePool
        self.alpha = alpha.to(dtype)
        self.dtype = dtype
        for frozen in self._frozen_modules():
            frozen.requires_grad_(False)
        if config.psi < 1.0 and not generator.w_mean_fitted:
            raise RuntimeError("truncation requested but generator has no fitted w_mean")
        self.critic = build_discriminator(generator.spec.resolution, config.d_width,
                                          substream_seed(config.seed, "critic"), dtype)
        betas = (0.0, 0.99)
        self.opt_alpha = torch.optim.Adam(self.alpha.parameters(), lr=config.lr, betas=betas)
        self.opt_critic = torch.optim.Adam(self.critic.parameters(),
                                           lr=config.d_lr or config.lr, betas=betas)
        self.history = TrainHistory()
        self.real_pool = None
        if config.real_source == "dataset_dir":
            self.real_pool = ImagePool(config.real_dir, generator.spec.resolution, dtype)
        self._fg_seed = substream_seed(config.seed, "fg")
        self._bg_seed = substream_seed(config.seed, "bg")
        self._real_seed = substream_seed(config.seed, "real")

    def _frozen_modules(self):
        mods = [self.generator]
        if hasattr(self.background, "parameters"):
            mods.append(self.background)
        return [m for m in mods if hasattr(m, "requires_grad_")]

    # -- sampling ---------------------------------------------------------

    def _draw_code(self, stream_seed: int, step: int, truncate: bool) -> LatentCode:
        seed = substream_seed(stream_seed, f"step{step}")
        gen = torch_generator(substream_seed(seed, "z"))
        z = torch.randn(self.config.batch_size, self.generator.spec.z_dim,
                        generator=gen).to(self.dtype)
        w = self.generator.map_latent(z)
        if truncate and self.config.psi < 1.0:
            w = self.generator.truncate(w, self.config.psi)
        bank = sample_noise_bank(self.generator.spec, seed, self.config.batch_size, self.dtype)
        return LatentCode(w=w, noise_bank=bank, seed=seed)

    def draw_codes(self, step: int) -> tuple[LatentCode, LatentCode | None]:
        """Independent foreground/background draws; truncation on the fg stream only."""
        fg = self._draw_code(self._fg_seed, step, truncate=True)
        if isinstance(self.background, ImagePool):
            return fg, None
        bg = self._draw_code(self._bg_seed, step, truncate=False)
        return fg, bg

    def _background_images(self, bg_code: LatentCode | None, step: int) -> torch.Tensor:
        if isinstance(self.background, ImagePool):
            return self.background.sample(self.config.batch_size,
                                          substream_seed(self._bg_seed, f"pool{step}"))
        return self.background.synthesize(bg_code).final_image

    def _real_images(self, step: int) -> torch.Tensor:
        if self.real_pool is not None:
            return self.real_pool.sample(self.config.batch_size,
                                         substream_seed(self._real_seed, f"pool{step}"))
        code = self._draw_code(self._real_seed, step, truncate=False)
        return self.generator.synthesize(code).final_image

    def compose(self, fg_code: LatentCode, bg_code: LatentCode | None,
                step: int = 0) -> CompositeBatch:
        """Blend one batch with the current mask (no parameter updates)."""
        with torch.no_grad():
            stack = self.generator.synthesize(fg_code, capture=True)
            bg = self._background_images(bg_code, step)
            mask = self.alpha(stack)
            blended = composite(stack.final_image, bg, mask)
        return CompositeBatch(fg_images=stack.final_image, bg_images=bg, masks=mask,
                              composites=blended, fg_code=fg_code, bg_code=bg_code)

    # -- one optimization step ------------------------------------------------

    def train_step(self, step: int) -> dict:
        cfg = self.config
        fg_code, bg_code = self.draw_codes(step)
        with torch.no_grad():
            stack = self.generator.synthesize(fg_code, capture=True)
            features = {k: t for k, (_, t) in enumerate(stack.layers)}
            fg = stack.final_image
            bg = self._background_images(bg_code, step)
            reals = self._real_images(step)

        # Critic update: reference images against current composites.
        with torch.no_grad():
            mask_d = self.alpha(features)
            fake = composite(fg, bg, mask_d)
        logits_real = self.critic(reals)
        logits_fake = self.critic(fake)
        loss_critic = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
        r1_value = 0.0
        if cfg.r1_gamma > 0 and step % cfg.r1_interval == 0:
            reals_rg = reals.detach().requires_grad_(True)
            r1_logits = self.critic(reals_rg)
            (r1_grad,) = torch.autograd.grad(r1_logits.sum(), reals_rg, create_graph=True)
            r1 = r1_grad.pow(2).sum(dim=(1, 2, 3)).mean()
            loss_critic = loss_critic + (cfg.r1_gamma / 2) * cfg.r1_interval * r1
            r1_value = float(r1)
        self.opt_critic.zero_grad(set_to_none=True)
        loss_critic.backward()
        self.opt_critic.step()

        # Branch update against the updated critic.
        mask = self.alpha(features)
        blended = composite(fg, bg, mask)
        adv = F.softplus(-self.critic(blended)).mean()
        breg = binary_reg(mask)
        c, e = area_regs(mask, cfg.phi1, cfg.phi2)
        loss_alpha = cfg.adv_weight * adv + cfg.lambda1 * breg + cfg.lambda2 * (c + e)
        self.opt_alpha.zero_grad(set_to_none=True)
        loss_alpha.backward()
        self.opt_alpha.step()

        record = {
            "step": step,
            "loss_alpha": float(loss_alpha),
            "loss_adv": float(adv),
            "loss_critic": float(loss_critic),
            "binary_reg": float(breg),
            "area_reg_c": float(c),
            "area_reg_e": float(e),
            "r1": r1_value,
            "mask_mean": float(mask.mean()),
            "wall_clock": time.time(),
        }
        if not all(math.isfinite(v) for k, v in record.items() if k != "step"):
            raise TrainingDiverged(f"non-finite loss at step {step}: {record}")
        return record


def make_alpha_for_config(generator, config: TrainConfig,
                          seed: int | None = None) -> AlphaNet:
    if config.alpha_features == "last_layer_only":
        spec = last_layer_spec(generator.spec, upsample_mode=config.upsample_mode)
    else:
        layers = config.selected_layers or tuple(range(generator.spec.num_layers))
        spec = AlphaNetSpec(
            selected_layers=layers,
            output_resolution=generator.spec.resolution,
            compress_channels=min(config.compress_channels,
                                  *(generator.spec.channels[k] for k in layers)),
            upsample_mode=config.upsample_mode)
    return build_alpha(generator.spec, spec,
                       seed=substream_seed(config.seed, "alpha") if seed is None else seed)


def run_training(generator, background, config: TrainConfig, out_dir,
                 alpha: AlphaNet | None = None, dtype: torch.dtype = torch.float32,
                 step_callback=None):
    """Full training run: returns (alpha net, history); persists both.

    Halts with a degeneracy flag if the mean mask saturates (below
    ``degeneracy_low`` or above ``degeneracy_high``) for
    ``degeneracy_patience`` consecutive steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if alpha is None:
        alpha = make_alpha_for_config(generator, config)
    trainer = AlphaTrainer(generator, background, alpha, config, dtype)

    frozen_before = [parameter_snapshot(m) for m in trainer._frozen_modules()]
    saturated = 0
    for step in range(config.iterations):
        try:
            record = trainer.train_step(step)
        except TrainingDiverged:
            trainer.history.save(out_dir / "history.jsonl")
            save_alpha(trainer.alpha, out_dir / "alpha_diverged.ckpt",
                       generator.fingerprint(), extra_meta={"diverged_at": step})
            raise
        mean = record["mask_mean"]
        if mean < config.degeneracy_low or mean > config.degeneracy_high:
            saturated += 1
        else:
            saturated = 0
        if saturated >= config.degeneracy_patience:
            record["degenerate"] = True
            trainer.history.append(record)
            trainer.history.degenerate = True
            logger.warning("degenerate mask (mean=%.3f) for %d consecutive steps; halting",
                           mean, saturated)
            break
        trainer.history.append(record)
        if step_callback is not None:
            if step_callback(step, trainer) is True:
                break
        if step % config.log_every == 0:
            logger.info("step %d: alpha=%.4f critic=%.4f mask_mean=%.3f",
                        step, record["loss_alpha"], record["loss_critic"], mean)

    frozen_after = [parameter_snapshot(m) for m in trainer._frozen_modules()]
    for before, after in zip(frozen_before, frozen_after):
        if before.size and not np.array_equal(before, after):
            raise AssertionError("frozen generator parameters drifted during training")

    trainer.history.save(out_dir / "history.jsonl")
    ckpt_path = out_dir / "alpha.ckpt"
    save_alpha(trainer.alpha, ckpt_path, generator.fingerprint(),
               extra_meta={"train_config": config.to_dict()})
    write_json(out_dir / "train_config.json", config.to_dict())
    return trainer.alpha, trainer.history
