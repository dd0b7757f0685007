"""tRGB noise-probe analysis for choosing the segmentation branch's inputs.

For each resolution, the probe replaces that resolution's tRGB input
activation with per-pixel standard-normal noise, regenerates, and measures
SSIM against the unperturbed sample. Layers whose perturbation leaves the
image nearly unchanged (high SSIM) contribute little and are discarded;
selection starts at the first layer preceded by a large relative SSIM drop
and keeps every finer layer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .generator import LatentCode
from .io import substream_seed, torch_generator

DEFAULT_DROP_THRESHOLD = 0.20


# -- SSIM ----------------------------------------------------------------------

def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _as_chw(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {x.shape}")
    return x


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 2.0) -> float:
    """Structural similarity of two images, channel-averaged.

    Uses the standard 11x11 Gaussian window (sigma 1.5) and valid-mode
    windows (no padding). The default dynamic range of 2 matches images in
    [-1, 1]. If the image is smaller than the window, the window shrinks to
    the largest odd size that fits.
    """
    xa, xb = _as_chw(a), _as_chw(b)
    if xa.shape != xb.shape:
        raise ValueError(f"image shapes differ: {xa.shape} vs {xb.shape}")
    size = min(window_size, xa.shape[-2], xa.shape[-1])
    if size % 2 == 0:
        size -= 1
    win = _gaussian_window(size, sigma * size / window_size if size != window_size else sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(img):
        return convolve2d(img, win, mode="valid")

    values = []
    for ca, cb in zip(xa, xb):
        mu_a, mu_b = filt(ca), filt(cb)
        var_a = filt(ca * ca) - mu_a ** 2
        var_b = filt(cb * cb) - mu_b ** 2
        cov = filt(ca * cb) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# -- the probe ------------------------------------------------------------------

@dataclass
class TrgbProbeReport:
    resolutions: list[int]
    mean_ssim: list[float]                  # per resolution, averaged over samples
    per_sample: list[list[float]]           # [sample][layer]
    control_ssim: float                     # resynthesis without perturbation
    n_samples: int
    seed: int
    data_range: float
    selected_layers: list[int] = field(default_factory=list)
    drop_threshold: float | None = None
    no_drop_flag: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrgbProbeReport":
        return cls(**json.loads(Path(path).read_text()))


def trgb_noise_probe(generator, n_samples: int, seed: int = 0,
                     data_range: float = 2.0) -> TrgbProbeReport:
    """Average SSIM after replacing each resolution's tRGB input with N(0, I)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    spec = generator.spec
    scores = np.zeros((n_samples, spec.num_layers))
    control = 0.0
    with torch.no_grad():
        for i in range(n_samples):
            sample_seed = substream_seed(seed, f"probe{i}")
            code = LatentCode.sample(spec, sample_seed, batch=1, dtype=generator.dtype)
            base = generator.synthesize(code).final_image
            control += ssim(base[0], generator.synthesize(code).final_image[0],
                            data_range=data_range)
            for k in range(spec.num_layers):
                res = spec.layer_resolution(k)
                gen_k = torch_generator(substream_seed(sample_seed, f"inject{k}"))
                noise = torch.randn(1, spec.channels[k], res, res,
                                    generator=gen_k).to(generator.dtype)
                perturbed = generator.synthesize(code, trgb_inject={k: noise}).final_image
                scores[i, k] = ssim(base[0], perturbed[0], data_range=data_range)
    return TrgbProbeReport(
        resolutions=list(spec.resolutions),
        mean_ssim=[float(v) for v in scores.mean(axis=0)],
        per_sample=[[float(v) for v in row] for row in scores],
        control_ssim=control / n_samples,
        n_samples=n_samples, seed=seed, data_range=data_range)


def select_layers(report: TrgbProbeReport,
                  relative_drop_threshold: float = DEFAULT_DROP_THRESHOLD) -> tuple[int, ...]:
    """Keep the suffix of the ladder starting at the first big SSIM drop.

    The cutoff is the coarsest layer whose predecessor's average SSIM exceeds
    it by at least the threshold (relative to the predecessor). If no drop
    qualifies, all layers are kept and the report is flagged.
    """
    scores = report.mean_ssim
    if len(scores) < 2:
        raise ValueError("need at least 2 resolutions to select layers")
    cutoff = None
    for k in range(1, len(scores)):
        prev = scores[k - 1]
        if prev > 0 and (prev - scores[k]) / prev >= relative_drop_threshold:
            cutoff = k
            break
    if cutoff is None:
        selected = tuple(range(len(scores)))
        report.no_drop_flag = True
    else:
        selected = tuple(range(cutoff, len(scores)))
        report.no_drop_flag = False
    report.selected_layers = list(selected)
    report.drop_threshold = relative_drop_threshold
    return selected


# -- visualization ---------------------------------------------------------------

def normalize_for_viz(tensor) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant tensor maps to all 0.5 with a warning."""
    if isinstance(tensor, torch.Tensor):
        tensor = tensor.detach().cpu().numpy()
    x = np.asarray(tensor, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        warnings.warn("constant tensor passed to normalize_for_viz; returning all 0.5")
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def save_trgb_panels(stack, path, upsample_to: int | None = None) -> None:
    """Write a per-resolution panel strip of normalized tRGB contributions."""
    from PIL import Image

    if not stack.trgb:
        raise ValueError("feature stack has no captured tRGB tensors")
    target = upsample_to or stack.final_image.shape[-1]
    panels = []
    for _, tensor in stack.trgb:
        img = normalize_for_viz(tensor[0])
        if img.shape[0] != 3:
            img = np.repeat(img[:1], 3, axis=0)
        chw = torch.from_numpy(img).unsqueeze(0)
        chw = torch.nn.functional.interpolate(chw, size=(target, target), mode="nearest")
        panels.append(chw[0].numpy())
    strip = np.concatenate(panels, axis=2)
    arr = (np.clip(strip, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
