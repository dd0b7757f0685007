"""A small style-based generator with taps on its internal features.

The generator follows the usual recipe: a mapping MLP turns normal latents
``z`` into style vectors ``w``, a synthesis trunk starts from a learned
constant and doubles resolution per block with style-modulated convolutions
and per-pixel noise, and every resolution contributes to the final image
through a 1x1 "tRGB" converter whose outputs are summed along a skip path.

Three seams matter for the analysis code built on top:

* ``capture=True`` records every trunk activation and tRGB contribution in a
  :class:`FeatureStack`;
* ``trim_layer=k`` zeroes the trunk activation of layer ``k`` (used to derive
  the background generator);
* ``inject_activations`` / ``trgb_inject`` replace a trunk activation or a
  tRGB input with a caller-provided tensor (used by gradient checks and the
  tRGB noise probe).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .io import content_hash, load_checkpoint, save_checkpoint, substream_seed, torch_generator

BASE_RESOLUTION = 4


class LatentError(ValueError):
    """Invalid latent input (non-finite, wrong shape, wrong layer count)."""


def default_channels(resolution: int) -> tuple[int, ...]:
    """Channel widths per resolution: 256 at 4x4, halving down to a floor of 16."""
    n = num_layers(resolution)
    return tuple(max(16, 256 >> k) for k in range(n))


def num_layers(resolution: int) -> int:
    if resolution < 2 * BASE_RESOLUTION or resolution & (resolution - 1) != 0:
        raise ValueError(f"output resolution must be a power of two >= 16, got {resolution}")
    return int(math.log2(resolution // BASE_RESOLUTION)) + 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture description of a generator (no fitted state)."""

    resolution: int = 64
    channels: tuple[int, ...] = ()
    z_dim: int = 128
    w_dim: int = 128
    mapping_layers: int = 4
    img_channels: int = 3

    def __post_init__(self):
        n = num_layers(self.resolution)
        if not self.channels:
            object.__setattr__(self, "channels", default_channels(self.resolution))
        else:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != n:
            raise ValueError(
                f"need {n} channel widths for resolution {self.resolution}, "
                f"got {len(self.channels)}")

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    def layer_resolution(self, k: int) -> int:
        return BASE_RESOLUTION * (2 ** k)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.layer_resolution(k) for k in range(self.num_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(resolution=d["resolution"], channels=tuple(d["channels"]),
                   z_dim=d["z_dim"], w_dim=d["w_dim"],
                   mapping_layers=d["mapping_layers"], img_channels=d["img_channels"])


@dataclass
class LatentCode:
    """One sample point: exactly one of z / w / w_plus, plus the noise bank.

    Tensors carry a leading batch dimension. ``w_plus`` has shape
    (batch, num_layers, w_dim) and lets every style-injection layer receive
    its own style vector.
    """

    z: torch.Tensor | None = None
    w: torch.Tensor | None = None
    w_plus: torch.Tensor | None = None
    noise_bank: list[torch.Tensor] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        given = [name for name in ("z", "w", "w_plus") if getattr(self, name) is not None]
        if len(given) != 1:
            raise LatentError(f"exactly one of z/w/w_plus must be set, got {given or 'none'}")
        for name in given:
            t = getattr(self, name)
            if not torch.isfinite(t).all():
                raise LatentError(f"non-finite values in latent '{name}'")

    @property
    def batch_size(self) -> int:
        for t in (self.z, self.w, self.w_plus):
            if t is not None:
                return t.shape[0]
        raise LatentError("empty latent code")

    @classmethod
    def sample(cls, spec: GeneratorSpec, seed: int, batch: int = 1,
               dtype: torch.dtype = torch.float32) -> "LatentCode":
        """Draw z ~ N(0, I) and fresh per-layer noise grids from named substreams."""
        gen = torch_generator(substream_seed(seed, "z"))
        z = torch.randn(batch, spec.z_dim, generator=gen).to(dtype)
        return cls(z=z, noise_bank=sample_noise_bank(spec, seed, batch, dtype), seed=seed)

    def with_noise(self, noise_bank: list[torch.Tensor]) -> "LatentCode":
        return LatentCode(z=self.z, w=self.w, w_plus=self.w_plus,
                          noise_bank=noise_bank, seed=self.seed)


def sample_noise_bank(spec: GeneratorSpec, seed: int, batch: int = 1,
                      dtype: torch.dtype = torch.float32) -> list[torch.Tensor]:
    bank = []
    for k in range(spec.num_layers):
        r = spec.layer_resolution(k)
        gen = torch_generator(substream_seed(seed, f"noise{k}"))
        bank.append(torch.randn(batch, 1, r, r, generator=gen).to(dtype))
    return bank


def zero_noise_bank(spec: GeneratorSpec, batch: int = 1,
                    dtype: torch.dtype = torch.float32) -> list[torch.Tensor]:
    return [torch.zeros(batch, 1, spec.layer_resolution(k), spec.layer_resolution(k), dtype=dtype)
            for k in range(spec.num_layers)]


@dataclass
class FeatureStack:
    """Per-resolution activations and tRGB contributions from one synthesis pass."""

    layers: list[tuple[int, torch.Tensor]]
    trgb: list[tuple[int, torch.Tensor]]
    final_image: torch.Tensor

    def __post_init__(self):
        if len(self.layers) != len(self.trgb):
            raise ValueError("tRGB list must parallel the layer list one-to-one")
        if self.layers:
            resolutions = [r for r, _ in self.layers]
            for a, b in zip(resolutions, resolutions[1:]):
                if b != 2 * a:
                    raise ValueError(f"layer resolutions must strictly double, got {resolutions}")
            if resolutions[-1] != self.final_image.shape[-1]:
                raise ValueError("finest layer resolution must equal the output resolution")
            for (ra, _), (rb, _) in zip(self.layers, self.trgb):
                if ra != rb:
                    raise ValueError("tRGB resolutions must match layer resolutions")

    @property
    def captured(self) -> bool:
        return bool(self.layers)

    def activations(self, k: int) -> torch.Tensor:
        return self.layers[k][1]


# -- building blocks ----------------------------------------------------------

class EqualizedLinear(nn.Module):
    """Linear layer with weights scaled at runtime by 1/sqrt(fan_in)."""

    def __init__(self, in_dim, out_dim, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = 1.0 / math.sqrt(in_dim)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with optional weight demodulation."""

    def __init__(self, in_ch, out_ch, kernel, w_dim, demodulate=True):
        super().__init__()
        self.out_ch = out_ch
        self.kernel = kernel
        self.demodulate = demodulate
        self.padding = kernel // 2
        self.affine = EqualizedLinear(w_dim, in_ch, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)

    def forward(self, x, w):
        batch, in_ch, height, width = x.shape
        style = self.affine(w).reshape(batch, 1, in_ch, 1, 1)
        weight = self.weight.unsqueeze(0) * self.scale * style
        if self.demodulate:
            denom = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * denom.reshape(batch, self.out_ch, 1, 1, 1)
        x = x.reshape(1, batch * in_ch, height, width)
        weight = weight.reshape(batch * self.out_ch, in_ch, self.kernel, self.kernel)
        out = F.conv2d(x, weight, padding=self.padding, groups=batch)
        return out.reshape(batch, self.out_ch, out.shape[-2], out.shape[-1])


class SynthesisLayer(nn.Module):
    """One trunk block: (upsample,) modulated 3x3 conv, noise, bias, leaky relu."""

    def __init__(self, in_ch, out_ch, w_dim, resolution, upsample):
        super().__init__()
        self.resolution = resolution
        self.upsample = upsample
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, w_dim, demodulate=True)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w, noise):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w)
        x = x + self.noise_strength * noise
        x = x + self.bias.reshape(1, -1, 1, 1)
        return F.leaky_relu(x, 0.2) * math.sqrt(2)


class TRGBLayer(nn.Module):
    def __init__(self, in_ch, img_channels, w_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, img_channels, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(img_channels))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias.reshape(1, -1, 1, 1)


class MappingNetwork(nn.Module):
    def __init__(self, z_dim, w_dim, depth):
        super().__init__()
        dims = [z_dim] + [w_dim] * depth
        self.layers = nn.ModuleList(EqualizedLinear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2) * math.sqrt(2)
        return x


class Generator(nn.Module):
    """Mapping network + synthesis trunk + per-resolution tRGB layers.

    Weights are immutable after loading; :meth:`synthesize` is a pure function
    of (weights, LatentCode) and safe to call concurrently.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.mapping = MappingNetwork(spec.z_dim, spec.w_dim, spec.mapping_layers)
        self.const = nn.Parameter(torch.randn(spec.channels[0], BASE_RESOLUTION, BASE_RESOLUTION))
        blocks, trgbs = [], []
        for k, out_ch in enumerate(spec.channels):
            in_ch = spec.channels[max(k - 1, 0)]
            blocks.append(SynthesisLayer(in_ch, out_ch, spec.w_dim,
                                         spec.layer_resolution(k), upsample=k > 0))
            trgbs.append(TRGBLayer(out_ch, spec.img_channels, spec.w_dim))
        self.blocks = nn.ModuleList(blocks)
        self.trgbs = nn.ModuleList(trgbs)
        self.register_buffer("w_mean", torch.full((spec.w_dim,), float("nan")))

    # -- latent handling -------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.const.dtype

    @property
    def w_mean_fitted(self) -> bool:
        return bool(torch.isfinite(self.w_mean).all())

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.spec.z_dim:
            raise LatentError(f"z has dim {z.shape[-1]}, expected {self.spec.z_dim}")
        if not torch.isfinite(z).all():
            raise LatentError("non-finite values in z")
        return self.mapping(z.to(self.dtype))

    def fit_w_mean(self, n: int = 10_000, seed: int = 0) -> torch.Tensor:
        """Fit the truncation anchor as the mean of n mapped normal samples."""
        gen = torch_generator(substream_seed(seed, "w_mean"))
        total = torch.zeros(self.spec.w_dim, dtype=torch.float64)
        done = 0
        with torch.no_grad():
            while done < n:
                take = min(1024, n - done)
                z = torch.randn(take, self.spec.z_dim, generator=gen).to(self.dtype)
                total += self.mapping(z).sum(dim=0).double()
                done += take
        self.w_mean.copy_((total / n).to(self.dtype))
        return self.w_mean

    def truncate(self, w: torch.Tensor, psi: float) -> torch.Tensor:
        """Pull w toward the fitted mean: w_mean + psi * (w - w_mean)."""
        if not 0.0 <= psi <= 1.0:
            raise ValueError(f"truncation psi must be in [0, 1], got {psi}")
        if not self.w_mean_fitted:
            raise RuntimeError("w_mean has not been fit; call fit_w_mean() first")
        return self.w_mean + psi * (w - self.w_mean)

    def styles_from_code(self, code: LatentCode) -> torch.Tensor:
        """Resolve a LatentCode to per-layer styles of shape (B, L, w_dim)."""
        n = self.spec.num_layers
        if code.w_plus is not None:
            wp = code.w_plus
            if wp.dim() == 2:
                wp = wp.unsqueeze(0)
            if wp.shape[1] != n:
                raise LatentError(
                    f"w_plus has {wp.shape[1]} layers, generator expects {n}")
            return wp.to(self.dtype)
        w = code.w if code.w is not None else self.map_latent(code.z)
        if w.dim() == 1:
            w = w.unsqueeze(0)
        return w.to(self.dtype).unsqueeze(1).expand(-1, n, -1)

    # -- synthesis ---------------------------------------------------------

    def synthesize(self, code: LatentCode, capture: bool = False,
                   trim_layer: int | None = None,
                   inject_activations: dict[int, torch.Tensor] | None = None,
                   trgb_inject: dict[int, torch.Tensor] | None = None) -> FeatureStack:
        styles = self.styles_from_code(code)
        batch = styles.shape[0]
        noise = code.noise_bank or zero_noise_bank(self.spec, batch, self.dtype)
        if len(noise) != self.spec.num_layers:
            raise LatentError(
                f"noise bank has {len(noise)} layers, expected {self.spec.num_layers}")
        inject_activations = inject_activations or {}
        trgb_inject = trgb_inject or {}

        layers, trgbs = [], []
        x = self.const.unsqueeze(0).expand(batch, -1, -1, -1)
        img = None
        for k, (block, trgb) in enumerate(zip(self.blocks, self.trgbs)):
            x = block(x, styles[:, k], noise[k].to(self.dtype))
            if trim_layer == k:
                x = torch.zeros_like(x)
            if k in inject_activations:
                x = inject_activations[k]
            rgb_in = trgb_inject.get(k, x)
            contribution = trgb(rgb_in, styles[:, k])
            img = contribution if img is None else \
                F.interpolate(img, scale_factor=2, mode="nearest") + contribution
            if capture:
                layers.append((block.resolution, x))
                trgbs.append((block.resolution, contribution))
        final = torch.tanh(img)
        return FeatureStack(layers=layers, trgb=trgbs, final_image=final)

    # -- persistence ---------------------------------------------------------

    def _arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.detach().cpu().double().numpy()
                for name, tensor in self.state_dict().items()}

    def _meta(self, extra: dict | None = None) -> dict:
        meta = {"format": 1, "kind": "generator", "spec": self.spec.to_dict()}
        if extra:
            meta.update(extra)
        return meta

    def fingerprint(self) -> str:
        return content_hash(self._arrays(), self._meta())

    def save(self, path, extra_meta: dict | None = None) -> str:
        return save_checkpoint(path, self._arrays(), self._meta(extra_meta))

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "Generator":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "generator":
            raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not a generator")
        gen = cls(GeneratorSpec.from_dict(meta["spec"]))
        state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
        gen.load_state_dict(state)
        gen.to(dtype)
        gen.requires_grad_(False)
        return gen


def load_any_generator(path, dtype: torch.dtype = torch.float32):
    """Load a generator checkpoint of any registered kind.

    Dispatches on the checkpoint's ``kind`` field. External full-scale
    checkpoints can be supported by registering a loader under their kind;
    the loader must return an object with the Generator synthesis interface
    (``spec``, ``map_latent``, ``truncate``, ``synthesize``, ``fingerprint``).
    """
    _, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "generator":
        return Generator.load(path, dtype)
    if kind == "oracle":
        from .oracle import OracleGenerator
        return OracleGenerator.load(path, dtype)
    if kind == "trimmed":
        from .background import TrimmedGenerator
        return TrimmedGenerator.load(path, dtype)
    if kind in _EXTERNAL_LOADERS:
        return _EXTERNAL_LOADERS[kind](path, dtype)
    raise ValueError(f"no loader registered for checkpoint kind {kind!r}")


_EXTERNAL_LOADERS: dict[str, object] = {}


def register_generator_loader(kind: str, loader) -> None:
    """Adapter seam for external checkpoints (feature taps by layer name)."""
    _EXTERNAL_LOADERS[kind] = loader
