"""Hand-constructed oracle generator with analytically known masks.

A deterministic, differentiable renderer that walks and talks like the real
generator (styles per layer, noise bank, per-layer activations, tRGB
contributions summed along a skip path) but whose ground truth is known in
closed form: the latent encodes a soft-edged disc (center, radius, fill
color) over a linear two-color background gradient.

Construction invariants the acceptance suite leans on:

* the final image is the exact alpha composite of ``true_mask`` with the
  analytic foreground/background renders (tRGB bands telescope to it);
* every shape-dependent value downstream is decoded from the layer-1
  activation tensor, so zeroing that tensor reproduces the pure background
  render exactly;
* layer 0 carries the background parameters (with damped sensitivity), and
  layers 2+ carry only band corrections plus read-only exposure channels
  (coarse mask views, local composite colors) for the segmentation branch.
  The finest layer exposes no mask view and no color prototype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .generator import (BASE_RESOLUTION, FeatureStack, LatentCode, LatentError,
                        num_layers, zero_noise_bank)
from .io import content_hash, load_checkpoint, save_checkpoint, substream_seed, torch_generator

FOREGROUND_LAYER = 1

# Per-layer gains applied between the stored band channels and the image.
# Damping the coarse background band and the fine bands keeps the
# reconstruction-gradient mass concentrated on the foreground layer.
_BAND_GAIN_FIRST = 0.15
_BAND_GAIN_FG = 1.0
_BAND_GAIN_TAIL = (0.5, 0.35, 0.25, 0.2, 0.15)
_BG_ENC = 4.0


def _band_gain(k: int, n: int) -> float:
    if k == 0:
        return _BAND_GAIN_FIRST
    if k == FOREGROUND_LAYER:
        return _BAND_GAIN_FG
    return _BAND_GAIN_TAIL[min(k - 2, len(_BAND_GAIN_TAIL) - 1)]


@dataclass(frozen=True)
class OracleSpec:
    """Scene prior of the oracle renderer."""

    resolution: int = 64
    z_dim: int = 16
    edge_band: float = 0.05          # soft-edge width, fraction of image side
    radius_range: tuple[float, float] = (0.12, 0.25)
    center_span: float = 0.10        # max |offset| of the disc center
    color_span: float = 0.8          # colors live in [-span, span]

    def __post_init__(self):
        if num_layers(self.resolution) < 3:
            raise ValueError("oracle needs at least 3 layers (resolution >= 16)")

    @property
    def w_dim(self) -> int:
        return self.z_dim

    @property
    def num_layers(self) -> int:
        return num_layers(self.resolution)

    def layer_resolution(self, k: int) -> int:
        return BASE_RESOLUTION * (2 ** k)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.layer_resolution(k) for k in range(self.num_layers))

    @property
    def channels(self) -> tuple[int, ...]:
        n = self.num_layers
        out = []
        for k in range(n):
            if k == 0:
                out.append(11)
            elif k == FOREGROUND_LAYER:
                out.append(12)
            elif k == n - 1:
                out.append(7)
            else:
                out.append(8)
        return tuple(out)

    @property
    def area_bounds(self) -> tuple[float, float]:
        lo, hi = self.radius_range
        return (math.pi * lo * lo, math.pi * hi * hi)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        d = dict(d)
        d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


def _smoothstep(t: torch.Tensor) -> torch.Tensor:
    t = t.clamp(0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _pixel_grid(res: int, dtype, device):
    coords = (torch.arange(res, dtype=dtype, device=device) + 0.5) / res - 0.5
    yy = coords.reshape(1, 1, res, 1)
    xx = coords.reshape(1, 1, 1, res)
    return xx, yy


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def _up_to(x: torch.Tensor, res: int) -> torch.Tensor:
    if x.shape[-1] == res:
        return x
    return F.interpolate(x, size=(res, res), mode="nearest")


class OracleGenerator(nn.Module):
    """Analytic disc-over-gradient renderer with the generator interface."""

    def __init__(self, spec: OracleSpec | None = None):
        super().__init__()
        self.spec = spec or OracleSpec()
        self.register_buffer("w_mean", torch.full((self.spec.w_dim,), float("nan")))

    # -- latent handling ---------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.w_mean.dtype

    @property
    def w_mean_fitted(self) -> bool:
        return bool(torch.isfinite(self.w_mean).all())

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """The oracle's mapping is the identity (w == z), kept for interface parity."""
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.spec.z_dim:
            raise LatentError(f"z has dim {z.shape[-1]}, expected {self.spec.z_dim}")
        if not torch.isfinite(z).all():
            raise LatentError("non-finite values in z")
        return z.to(self.dtype)

    def fit_w_mean(self, n: int = 10_000, seed: int = 0) -> torch.Tensor:
        gen = torch_generator(substream_seed(seed, "w_mean"))
        z = torch.randn(n, self.spec.z_dim, generator=gen)
        self.w_mean.copy_(z.mean(dim=0).to(self.dtype))
        return self.w_mean

    def truncate(self, w: torch.Tensor, psi: float) -> torch.Tensor:
        if not 0.0 <= psi <= 1.0:
            raise ValueError(f"truncation psi must be in [0, 1], got {psi}")
        if not self.w_mean_fitted:
            raise RuntimeError("w_mean has not been fit; call fit_w_mean() first")
        return self.w_mean + psi * (w - self.w_mean)

    def styles_from_code(self, code: LatentCode) -> torch.Tensor:
        n = self.spec.num_layers
        if code.w_plus is not None:
            wp = code.w_plus
            if wp.dim() == 2:
                wp = wp.unsqueeze(0)
            if wp.shape[1] != n:
                raise LatentError(f"w_plus has {wp.shape[1]} layers, generator expects {n}")
            return wp.to(self.dtype)
        w = code.w if code.w is not None else self.map_latent(code.z)
        if w.dim() == 1:
            w = w.unsqueeze(0)
        return w.to(self.dtype).unsqueeze(1).expand(-1, n, -1)

    # -- scene parameters ----------------------------------------------------

    def _fg_params(self, style_row: torch.Tensor):
        """Disc parameters from latent components 0..5 of the foreground row."""
        s = self.spec
        cx = s.center_span * torch.tanh(style_row[:, 0])
        cy = s.center_span * torch.tanh(style_row[:, 1])
        lo, hi = s.radius_range
        radius = lo + (hi - lo) * torch.sigmoid(style_row[:, 2])
        color = s.color_span * torch.tanh(style_row[:, 3:6])
        return cx, cy, radius, color

    def _bg_params(self, style_row: torch.Tensor):
        """Gradient parameters from latent components 6..12 of the background row."""
        s = self.spec
        color_a = s.color_span * torch.tanh(style_row[:, 6:9])
        color_b = s.color_span * torch.tanh(style_row[:, 9:12])
        theta = math.pi * torch.tanh(style_row[:, 12])
        return color_a, color_b, theta

    def _render_bg(self, color_a, color_b, theta, res: int) -> torch.Tensor:
        xx, yy = _pixel_grid(res, color_a.dtype, color_a.device)
        ramp = 0.5 + xx * torch.cos(theta).reshape(-1, 1, 1, 1) \
                   + yy * torch.sin(theta).reshape(-1, 1, 1, 1)
        ramp = ramp.clamp(0.0, 1.0)
        a = color_a.reshape(-1, 3, 1, 1)
        b = color_b.reshape(-1, 3, 1, 1)
        return a + (b - a) * ramp

    def _render_mask(self, cx, cy, radius, res: int) -> torch.Tensor:
        xx, yy = _pixel_grid(res, cx.dtype, cx.device)
        dist = torch.sqrt((xx - cx.reshape(-1, 1, 1, 1)) ** 2
                          + (yy - cy.reshape(-1, 1, 1, 1)) ** 2 + 1e-12)
        band = self.spec.edge_band
        return _smoothstep((radius.reshape(-1, 1, 1, 1) + band / 2 - dist) / band)

    # -- analytic ground truth --------------------------------------------

    def true_mask(self, code: LatentCode) -> torch.Tensor:
        """Foreground probability of every output pixel, in closed form."""
        styles = self.styles_from_code(code)
        cx, cy, radius, _ = self._fg_params(styles[:, FOREGROUND_LAYER])
        return self._render_mask(cx, cy, radius, self.spec.resolution)

    def background_image(self, code: LatentCode) -> torch.Tensor:
        styles = self.styles_from_code(code)
        color_a, color_b, theta = self._bg_params(styles[:, 0])
        return self._render_bg(color_a, color_b, theta, self.spec.resolution)

    def foreground_image(self, code: LatentCode) -> torch.Tensor:
        styles = self.styles_from_code(code)
        _, _, _, color = self._fg_params(styles[:, FOREGROUND_LAYER])
        res = self.spec.resolution
        return color.reshape(-1, 3, 1, 1).expand(-1, -1, res, res)

    # -- synthesis ---------------------------------------------------------

    def synthesize(self, code: LatentCode, capture: bool = False,
                   trim_layer: int | None = None,
                   inject_activations: dict[int, torch.Tensor] | None = None,
                   trgb_inject: dict[int, torch.Tensor] | None = None) -> FeatureStack:
        spec = self.spec
        styles = self.styles_from_code(code)
        batch = styles.shape[0]
        dtype = styles.dtype
        n = spec.num_layers
        noise = code.noise_bank or zero_noise_bank_oracle(spec, batch, dtype)
        if len(noise) != n:
            raise LatentError(f"noise bank has {len(noise)} layers, expected {n}")
        inject_activations = inject_activations or {}
        trgb_inject = trgb_inject or {}

        def finalize(k, tensor):
            if trim_layer == k:
                tensor = torch.zeros_like(tensor)
            if k in inject_activations:
                tensor = inject_activations[k]
            return tensor

        def const_field(values, res):
            return values.reshape(batch, -1, 1, 1).expand(-1, -1, res, res)

        # Layer 0: background parameters (damped) plus the coarsest band.
        bg_a, bg_b, theta = self._bg_params(styles[:, 0])
        g0 = _band_gain(0, n)
        band0 = self._render_bg(bg_a, bg_b, theta, BASE_RESOLUTION)
        t0 = torch.cat([
            const_field(bg_a * _BG_ENC, 4),
            const_field(bg_b * _BG_ENC, 4),
            const_field((theta * _BG_ENC).unsqueeze(1), 4),
            band0 / g0,
            noise[0].to(dtype),
        ], dim=1)
        t0 = finalize(0, t0)
        # Everything downstream decodes from the layer tensor itself so that
        # trimming or injecting a layer propagates honestly.
        bg_a_hat = t0[:, 0:3].mean(dim=(2, 3)) / _BG_ENC
        bg_b_hat = t0[:, 3:6].mean(dim=(2, 3)) / _BG_ENC
        theta_hat = t0[:, 6].mean(dim=(1, 2)) / _BG_ENC
        trgb0 = g0 * trgb_inject.get(0, t0)[:, 7:10]
        img = trgb0

        bg_hat = [self._render_bg(bg_a_hat, bg_b_hat, theta_hat, spec.layer_resolution(k))
                  for k in range(n)]

        # Layer 1: every shape-dependent quantity enters here. Its band is the
        # object-only correction at 8x8, so zeroing the tensor removes the
        # foreground and nothing else.
        cx, cy, radius, color = self._fg_params(styles[:, FOREGROUND_LAYER])
        g1 = _band_gain(1, n)
        mask8_raw = self._render_mask(cx, cy, radius, 8)
        band1 = mask8_raw * (color.reshape(-1, 3, 1, 1) - bg_hat[1])
        t1 = torch.cat([
            const_field(torch.ones(batch, 1, dtype=dtype), 8),
            const_field(cx.unsqueeze(1), 8),
            const_field(cy.unsqueeze(1), 8),
            const_field(radius.unsqueeze(1), 8),
            const_field(color, 8),
            band1 / g1,
            mask8_raw,
            noise[1].to(dtype),
        ], dim=1)
        t1 = finalize(1, t1)
        amp_hat = t1[:, 0].mean(dim=(1, 2))
        cx_hat = t1[:, 1].mean(dim=(1, 2))
        cy_hat = t1[:, 2].mean(dim=(1, 2))
        radius_hat = t1[:, 3].mean(dim=(1, 2))
        color_hat = t1[:, 4:7].mean(dim=(2, 3))
        rgb_in1 = trgb_inject.get(1, t1)
        trgb1 = g1 * rgb_in1[:, 7:10]
        img = _up2(img) + trgb1

        masks_hat = [amp_hat.reshape(-1, 1, 1, 1)
                     * self._render_mask(cx_hat, cy_hat, radius_hat, spec.layer_resolution(k))
                     for k in range(n)]
        comps_hat = [m * color_hat.reshape(-1, 3, 1, 1) + (1 - m) * bg
                     for m, bg in zip(masks_hat, bg_hat)]

        layers = [(4, t0), (8, t1)]
        trgbs = [(4, trgb0), (8, trgb1)]

        # Finer layers emit band corrections toward the exact composite; their
        # extra channels are read-only views for the segmentation branch.
        for k in range(2, n):
            res = spec.layer_resolution(k)
            gk = _band_gain(k, n)
            if k == 2:
                object8 = comps_hat[1] - bg_hat[1]
                band = comps_hat[2] - _up_to(bg_hat[0], res) - _up2(object8)
            else:
                band = comps_hat[k] - _up2(comps_hat[k - 1])
            pieces = []
            if k < n - 1:
                pieces.append(masks_hat[k])
            pieces.append(band / gk)
            pieces.append(comps_hat[k])
            pieces.append(noise[k].to(dtype))
            tk = finalize(k, torch.cat(pieces, dim=1))
            offset = 1 if k < n - 1 else 0
            rgb_in = trgb_inject.get(k, tk)
            trgb_k = gk * rgb_in[:, offset:offset + 3]
            img = _up2(img) + trgb_k
            layers.append((res, tk))
            trgbs.append((res, trgb_k))

        if not capture:
            layers, trgbs = [], []
        return FeatureStack(layers=layers, trgb=trgbs, final_image=img)

    # -- persistence ---------------------------------------------------------

    def _meta(self) -> dict:
        return {"format": 1, "kind": "oracle", "spec": self.spec.to_dict()}

    def fingerprint(self) -> str:
        return content_hash({}, self._meta())

    def save(self, path, extra_meta: dict | None = None) -> str:
        meta = self._meta()
        if extra_meta:
            meta.update(extra_meta)
        return save_checkpoint(path, {"w_mean": self.w_mean.double().numpy()}, meta)

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "OracleGenerator":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "oracle":
            raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not an oracle")
        gen = cls(OracleSpec.from_dict(meta["spec"]))
        gen.w_mean.copy_(torch.from_numpy(arrays["w_mean"]).to(torch.float32))
        gen.to(dtype)
        return gen


def zero_noise_bank_oracle(spec: OracleSpec, batch: int = 1,
                           dtype: torch.dtype = torch.float32) -> list[torch.Tensor]:
    return [torch.zeros(batch, 1, spec.layer_resolution(k), spec.layer_resolution(k), dtype=dtype)
            for k in range(spec.num_layers)]


def sample_oracle_code(spec: OracleSpec, seed: int, batch: int = 1,
                       dtype: torch.dtype = torch.float32) -> LatentCode:
    gen = torch_generator(substream_seed(seed, "z"))
    z = torch.randn(batch, spec.z_dim, generator=gen).to(dtype)
    bank = []
    for k in range(spec.num_layers):
        r = spec.layer_resolution(k)
        g = torch_generator(substream_seed(seed, f"noise{k}"))
        bank.append(torch.randn(batch, 1, r, r, generator=g).to(dtype))
    return LatentCode(z=z, noise_bank=bank, seed=seed)


def make_oracle_generator(spec: OracleSpec | None = None, seed: int = 0) -> OracleGenerator:
    """Build the oracle renderer and fit its truncation anchor."""
    gen = OracleGenerator(spec)
    gen.fit_w_mean(seed=seed)
    return gen
