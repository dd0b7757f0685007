"""Deriving the background generator from the frozen foreground generator.

The foreground-carrying layer is found by differentiating a background
reconstruction objective ||G(w, n) - x||^2 against every per-layer activation
tensor, where x is an upsampled background crop harvested from sampled
images. Per layer, the score is the sum over channels of the gradient-map
norm, averaged over (crop, code) pairs. Zeroing all channels of the winning
layer turns the generator into a background generator without touching any
weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .generator import FeatureStack, LatentCode
from .io import content_hash, load_checkpoint, save_checkpoint, substream_seed

logger = logging.getLogger(__name__)

TRGB_STAGE = "trgb"  # pseudo-target naming the image-forming path; never trimmable


@dataclass
class BackgroundCrop:
    """An upsampled background crop at generator resolution, values in [-1, 1]."""

    image: torch.Tensor
    source_id: str

    def __post_init__(self):
        if self.image.dim() == 3:
            self.image = self.image.unsqueeze(0)
        if self.image.shape[-1] != self.image.shape[-2]:
            raise ValueError(f"crop must be square, got {tuple(self.image.shape)}")
        if float(self.image.abs().max()) > 1.0 + 1e-6:
            raise ValueError("crop values must lie in [-1, 1]")


@dataclass
class LayerScoreReport:
    per_layer: list[float]
    argmax_layer: int
    per_pair: list[dict]
    n_pairs: int
    dropped_pairs: int
    norm: str
    resolutions: list[int]
    channel_scores: list[list[float]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "LayerScoreReport":
        return cls(**json.loads(Path(path).read_text()))


def harvest_crops(generator, n: int, seed: int = 0,
                  crop_rule: str = "border_strips",
                  strip_frac: float = 1.0 / 8.0) -> list[BackgroundCrop]:
    """Collect n generic background crops from sampled images.

    The default rule cycles through the four border strips of width
    ``strip_frac * m``; the object prior keeps foregrounds central, so the
    strips are background by construction. Each strip is upsampled
    (bilinearly stretched) back to m x m.
    """
    if crop_rule != "border_strips":
        raise ValueError(f"unknown crop_rule {crop_rule!r}")
    m = generator.spec.resolution
    width = max(1, int(round(m * strip_frac)))
    crops: list[BackgroundCrop] = []
    sides = ("top", "bottom", "left", "right")
    with torch.no_grad():
        for i in range(n):
            code = LatentCode.sample(generator.spec, substream_seed(seed, f"crop{i}"),
                                     batch=1, dtype=generator.dtype)
            img = generator.synthesize(code).final_image
            side = sides[i % 4]
            if side == "top":
                strip = img[..., :width, :]
            elif side == "bottom":
                strip = img[..., m - width:, :]
            elif side == "left":
                strip = img[..., :, :width]
            else:
                strip = img[..., :, m - width:]
            up = F.interpolate(strip, size=(m, m), mode="bilinear", align_corners=False)
            crops.append(BackgroundCrop(image=up.clamp(-1, 1),
                                        source_id=f"seed{seed}/{i}/{side}"))
    return crops


def score_layers(generator, crops: list[BackgroundCrop], codes: list[LatentCode],
                 norm: str = "l2", per_channel: bool = False) -> LayerScoreReport:
    """Score layers by reconstruction-gradient mass over all (crop, code) pairs.

    For every pair, the squared-error objective against the crop is
    differentiated with respect to each captured activation tensor; a layer's
    score is the sum over channels of the L2 (or L1) norm of that channel's
    gradient map, averaged over pairs. Pairs with non-finite gradients are
    dropped and logged; ties in the argmax resolve to the lowest layer index.
    """
    if not crops or not codes:
        raise ValueError("need at least one crop and one code to score layers")
    if norm not in ("l2", "l1"):
        raise ValueError(f"norm must be 'l2' or 'l1', got {norm!r}")
    n_layers = generator.spec.num_layers
    totals = np.zeros(n_layers)
    channel_totals = [np.zeros(generator.spec.channels[k]) for k in range(n_layers)]
    per_pair, kept, dropped = [], 0, 0
    for code in codes:
        for crop in crops:
            with torch.enable_grad():
                # Styles enter as a differentiable leaf so the synthesis graph
                # exists even when every generator weight is frozen.
                styles = generator.styles_from_code(code).detach().clone().requires_grad_(True)
                graph_code = LatentCode(w_plus=styles, noise_bank=code.noise_bank,
                                        seed=code.seed)
                stack = generator.synthesize(graph_code, capture=True)
                activations = [t for _, t in stack.layers]
                target = crop.image.to(stack.final_image.dtype)
                loss = ((stack.final_image - target) ** 2).sum()
                grads = torch.autograd.grad(loss, activations, allow_unused=True)
            scores = np.zeros(n_layers)
            finite = True
            for k, g in enumerate(grads):
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    finite = False
                    break
                flat = g.reshape(g.shape[0] * g.shape[1], -1)
                per_ch = flat.norm(p=2 if norm == "l2" else 1, dim=1)
                scores[k] = float(per_ch.sum())
                if per_channel:
                    channel_totals[k] += per_ch.detach().numpy()
            if not finite:
                dropped += 1
                logger.warning("dropping (crop=%s, code seed=%s): non-finite gradients",
                               crop.source_id, code.seed)
                continue
            kept += 1
            totals += scores
            per_pair.append({"crop": crop.source_id, "code_seed": code.seed,
                             "scores": [float(s) for s in scores]})
    if kept == 0:
        raise RuntimeError("all (crop, code) pairs produced non-finite gradients")
    mean_scores = totals / kept
    return LayerScoreReport(
        per_layer=[float(s) for s in mean_scores],
        argmax_layer=int(np.argmax(mean_scores)),
        per_pair=per_pair, n_pairs=kept, dropped_pairs=dropped, norm=norm,
        resolutions=list(generator.spec.resolutions),
        channel_scores=[[float(v / kept) for v in ch] for ch in channel_totals]
        if per_channel else None)


class TrimmedGenerator:
    """The base generator with one layer's activations forced to zero.

    Shares the base generator's weights (no copy); the wrapper is immutable
    and delegates everything except the trim directive. An optional channel
    mask supports the analysis-only curated mode where only a subset of
    channels is zeroed.
    """

    def __init__(self, base, layer_id: int, keep_channels: list[int] | None = None):
        self.base = base
        self.layer_id = int(layer_id)
        self.keep_channels = sorted(keep_channels) if keep_channels is not None else None

    @property
    def spec(self):
        return self.base.spec

    @property
    def dtype(self):
        return self.base.dtype

    @property
    def w_mean_fitted(self):
        return self.base.w_mean_fitted

    def map_latent(self, z):
        return self.base.map_latent(z)

    def truncate(self, w, psi):
        return self.base.truncate(w, psi)

    def styles_from_code(self, code):
        return self.base.styles_from_code(code)

    def parameters(self):
        return self.base.parameters()

    def synthesize(self, code: LatentCode, capture: bool = False,
                   **kwargs) -> FeatureStack:
        if self.keep_channels is None:
            return self.base.synthesize(code, capture=capture,
                                        trim_layer=self.layer_id, **kwargs)
        # Curated mode: recompute with only the kept channels active.
        stack = self.base.synthesize(code, capture=True)
        act = stack.layers[self.layer_id][1].detach().clone()
        mask = torch.zeros(act.shape[1], dtype=act.dtype)
        mask[self.keep_channels] = 1.0
        act = act * mask.reshape(1, -1, 1, 1)
        return self.base.synthesize(code, capture=capture,
                                    inject_activations={self.layer_id: act}, **kwargs)

    def fingerprint(self) -> str:
        return content_hash({}, {"kind": "trimmed", "base": self.base.fingerprint(),
                                 "layer": self.layer_id,
                                 "keep_channels": self.keep_channels})

    def save(self, path, base_path) -> str:
        """Persist as a reference to the base checkpoint plus the trim directive."""
        meta = {"format": 1, "kind": "trimmed", "base_path": str(base_path),
                "base_fingerprint": self.base.fingerprint(),
                "trim_layer": self.layer_id, "keep_channels": self.keep_channels}
        return save_checkpoint(path, {}, meta)

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "TrimmedGenerator":
        from .generator import load_any_generator

        _, meta = load_checkpoint(path)
        if meta.get("kind") != "trimmed":
            raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not a trim directive")
        base_path = Path(meta["base_path"])
        if not base_path.is_absolute():
            base_path = Path(path).parent / base_path
        base = load_any_generator(base_path, dtype)
        if base.fingerprint() != meta["base_fingerprint"]:
            raise ValueError(f"base checkpoint {base_path} does not match the "
                             "fingerprint recorded in the trim directive")
        return cls(base, meta["trim_layer"], meta.get("keep_channels"))


def trim(generator, layer_id, keep_channels: list[int] | None = None) -> TrimmedGenerator:
    """Zero out all channels of one layer, producing the background generator.

    Trimming is idempotent: re-trimming at the same layer returns an
    equivalent wrapper. The image-forming tRGB path is not a valid target
    (zeroing it would zero the image); it is addressed by the pseudo-id
    ``"trgb"`` or by the index one past the last trunk layer.
    """
    n = generator.spec.num_layers
    if layer_id == TRGB_STAGE or (isinstance(layer_id, int) and layer_id == n):
        raise ValueError("refusing to trim the tRGB/image path: it would zero the image")
    if not isinstance(layer_id, int) or not 0 <= layer_id < n:
        raise ValueError(f"layer_id must be an int in [0, {n}), got {layer_id!r}")
    if isinstance(generator, TrimmedGenerator):
        if generator.layer_id != layer_id or generator.keep_channels != (
                sorted(keep_channels) if keep_channels is not None else None):
            raise ValueError("generator is already trimmed at a different layer")
        return TrimmedGenerator(generator.base, layer_id, keep_channels)
    return TrimmedGenerator(generator, layer_id, keep_channels)


def curated_keep_channels(report: LayerScoreReport, layer_id: int,
                          keep_fraction: float = 0.5) -> list[int]:
    """Analysis-only: channels of a layer to keep, by smallest gradient score.

    Curated backgrounds can look better but occasionally retain foreground
    traces, so this never feeds the training path.
    """
    if report.channel_scores is None:
        raise ValueError("score report was produced without per_channel=True")
    scores = np.asarray(report.channel_scores[layer_id])
    n_keep = int(round(len(scores) * keep_fraction))
    order = np.argsort(scores, kind="stable")
    return sorted(int(i) for i in order[:n_keep])
