"""Segmentation branch: per-layer 1x1 compression, upsampling, sigmoid head.

The branch reads selected generator activations, compresses each with a 1x1
convolution, upsamples every stream to the output resolution, concatenates,
and fuses with a stack of further 1x1 convolutions ending in a sigmoid.
With nearest-neighbor upsampling the whole network is per-pixel local: the
mask value at a pixel depends only on the feature columns at that pixel's
ancestors in each selected resolution. Bilinear mode trades that locality
for smoother masks and is flagged as non-local.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .generator import FeatureStack
from .io import load_checkpoint, save_checkpoint

UPSAMPLE_MODES = ("nearest", "bilinear")


class AlphaInputError(ValueError):
    """A required feature layer is missing from the input."""


@dataclass(frozen=True)
class AlphaNetSpec:
    selected_layers: tuple[int, ...]
    output_resolution: int
    compress_channels: int = 32
    fuse_channels: tuple[int, ...] = (64, 32)
    upsample_mode: str = "nearest"
    negative_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "selected_layers", tuple(sorted(set(self.selected_layers))))
        object.__setattr__(self, "fuse_channels", tuple(self.fuse_channels))
        if not self.selected_layers:
            raise ValueError("selected_layers must be non-empty")
        if self.compress_channels < 1:
            raise ValueError("compress_channels must be >= 1")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}")

    @property
    def is_local(self) -> bool:
        return self.upsample_mode == "nearest"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaNetSpec":
        d = dict(d)
        d["selected_layers"] = tuple(d["selected_layers"])
        d["fuse_channels"] = tuple(d["fuse_channels"])
        return cls(**d)


@dataclass
class SoftMask:
    """Per-pixel foreground probabilities, strictly inside (0, 1).

    Sigmoid outputs can round to exactly 0.0 or 1.0 in finite precision, so
    construction nudges values into the open interval by one epsilon.
    """

    values: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError("mask contains non-finite values")
        eps = torch.finfo(self.values.dtype).eps
        self.values = self.values.clamp(min=eps, max=1.0 - eps)

    @property
    def resolution(self) -> int:
        return self.values.shape[-1]

    def hard(self, threshold: float = 0.9) -> torch.Tensor:
        """Binary view: 1 where value >= threshold. Idempotent for a fixed threshold."""
        return (self.values >= threshold).to(torch.uint8)


class AlphaNet(nn.Module):
    def __init__(self, layer_channels: dict[int, int], spec: AlphaNetSpec):
        super().__init__()
        self.spec = spec
        self.taps = nn.ModuleDict({
            str(k): nn.Conv2d(layer_channels[k], spec.compress_channels, kernel_size=1)
            for k in spec.selected_layers
        })
        widths = [spec.compress_channels * len(spec.selected_layers), *spec.fuse_channels]
        self.fuse = nn.ModuleList(nn.Conv2d(a, b, kernel_size=1)
                                  for a, b in zip(widths, widths[1:]))
        self.head = nn.Conv2d(widths[-1], 1, kernel_size=1)
        # Neutral start: zero head weights put the initial mask at sigmoid(0) = 0.5.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _upsample(self, x: torch.Tensor) -> torch.Tensor:
        m = self.spec.output_resolution
        if x.shape[-1] == m:
            return x
        if self.spec.upsample_mode == "nearest":
            return F.interpolate(x, size=(m, m), mode="nearest")
        return F.interpolate(x, size=(m, m), mode="bilinear", align_corners=False)

    def forward(self, features) -> torch.Tensor:
        """Mask in (0, 1) of shape (batch, 1, m, m)."""
        if isinstance(features, FeatureStack):
            if not features.captured:
                raise AlphaInputError("feature stack was synthesized without capture=True")
            features = {k: t for k, (_, t) in enumerate(features.layers)}
        streams = []
        for k in self.spec.selected_layers:
            if k not in features:
                raise AlphaInputError(f"feature layer {k} missing from input "
                                      f"(have {sorted(features)})")
            x = self.taps[str(k)](features[k])
            x = F.leaky_relu(x, self.spec.negative_slope)
            streams.append(self._upsample(x))
        x = torch.cat(streams, dim=1)
        for conv in self.fuse:
            x = F.leaky_relu(conv(x), self.spec.negative_slope)
        return torch.sigmoid(self.head(x))


def build_alpha(gen_spec, alpha_spec: AlphaNetSpec, seed: int | None = None) -> AlphaNet:
    """Construct the segmentation branch for a paired generator spec."""
    bad = [k for k in alpha_spec.selected_layers if not 0 <= k < gen_spec.num_layers]
    if bad:
        raise ValueError(f"invalid layer indices {bad} for a "
                         f"{gen_spec.num_layers}-layer generator")
    if alpha_spec.output_resolution != gen_spec.resolution:
        raise ValueError(f"alpha output resolution {alpha_spec.output_resolution} "
                         f"!= generator resolution {gen_spec.resolution}")
    layer_channels = {k: gen_spec.channels[k] for k in alpha_spec.selected_layers}
    over = [k for k in alpha_spec.selected_layers
            if alpha_spec.compress_channels > gen_spec.channels[k]]
    if over:
        raise ValueError(f"compress_channels {alpha_spec.compress_channels} exceeds "
                         f"source channels at layers {over}")
    if seed is None:
        return AlphaNet(layer_channels, alpha_spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return AlphaNet(layer_channels, alpha_spec)


def last_layer_spec(gen_spec, **kwargs) -> AlphaNetSpec:
    """Ablation wiring: read only the finest layer before the output."""
    kwargs.setdefault("compress_channels", min(32, gen_spec.channels[-1]))
    return AlphaNetSpec(selected_layers=(gen_spec.num_layers - 1,),
                        output_resolution=gen_spec.resolution, **kwargs)


def predict_mask(net: AlphaNet, features) -> SoftMask:
    """Inference wrapper returning a validated SoftMask."""
    with torch.no_grad():
        return SoftMask(values=net(features))


# -- checkpointing -------------------------------------------------------------


def save_alpha(net: AlphaNet, path, generator_fingerprint: str,
               extra_meta: dict | None = None) -> str:
    arrays = {name: t.detach().cpu().double().numpy() for name, t in net.state_dict().items()}
    meta = {"format": 1, "kind": "alpha", "spec": net.spec.to_dict(),
            "layer_channels": {str(k): int(net.taps[str(k)].weight.shape[1])
                               for k in net.spec.selected_layers},
            "generator_fingerprint": generator_fingerprint}
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, arrays, meta)


def load_alpha(path, generator=None, dtype: torch.dtype = torch.float32) -> AlphaNet:
    """Load an alpha checkpoint, verifying it was trained against `generator`."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "alpha":
        raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not an alpha network")
    if generator is not None:
        want = meta.get("generator_fingerprint")
        have = generator.fingerprint()
        if want != have:
            raise ValueError(
                f"alpha checkpoint is paired with generator {want[:12]}..., "
                f"got {have[:12]}...; refusing mismatched load")
    spec = AlphaNetSpec.from_dict(meta["spec"])
    layer_channels = {int(k): int(v) for k, v in meta["layer_channels"].items()}
    net = AlphaNet(layer_channels, spec)
    net.load_state_dict({name: torch.from_numpy(a) for name, a in arrays.items()})
    net.to(dtype)
    return net


# -- gradient validation ---------------------------------------------------------


def _probe_functional(mask: torch.Tensor) -> torch.Tensor:
    """Fixed scalar functional of the mask used by the gradient check."""
    m = mask.shape[-1]
    idx = torch.arange(m * m, dtype=mask.dtype).reshape(1, 1, m, m)
    weights = torch.cos(0.37 * idx) + 0.5
    return (mask * weights).sum()


def mask_gradient_check(net: AlphaNet, features, functional=None,
                        h: float = 1e-5) -> float:
    """Compare analytic parameter gradients against central finite differences.

    Returns max_i |analytic_i - fd_i| / max_i |fd_i| over all parameters of a
    scalar functional of the predicted mask. Run in double precision.
    """
    functional = functional or _probe_functional
    if isinstance(features, FeatureStack):
        features = {k: t.detach() for k, (_, t) in enumerate(features.layers)}
    else:
        features = {k: t.detach() for k, t in features.items()}

    net.zero_grad()
    functional(net(features)).backward()
    analytic = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
        for p in net.parameters()])

    params = [p for p in net.parameters()]
    fd = torch.zeros_like(analytic)
    pos = 0
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = functional(net(features)).item()
                flat[i] = orig - h
                lo = functional(net(features)).item()
                flat[i] = orig
                fd[pos] = (hi - lo) / (2 * h)
                pos += 1
    scale = float(fd.abs().max())
    if scale == 0.0:
        return float(analytic.abs().max())
    return float((analytic - fd).abs().max() / scale)
