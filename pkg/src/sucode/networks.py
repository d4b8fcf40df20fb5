"""Learnable blocks: shared encoder backbone, decoders, attention and fusion.

Backbone: stride-2 conv pyramid with 2 residual blocks per level and a single
self-attention block at the bottleneck; 3 levels give the default 8x
downsampling (256 -> 32 latent grid).  Channel widths are derived from the
embedding dim so toy configs stay CPU-light.

Spectral transform convention: unnormalized forward rFFT2, 1/(h*w) inverse
(torch norm="backward"); asserted by the round-trip tests.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


class SpectralPair(NamedTuple):
    magnitude: torch.Tensor   # [B, C, H, W_half], nonnegative
    phase: torch.Tensor       # [B, C, H, W_half] in (-pi, pi]


def spectral_decompose(feature: torch.Tensor) -> SpectralPair:
    """Channel-wise real 2D FFT split into one-sided magnitude and phase."""
    spectrum = torch.fft.rfft2(feature, norm="backward")
    return SpectralPair(magnitude=spectrum.abs(), phase=spectrum.angle())


def spectral_reconstruct(pair: SpectralPair,
                         size: tuple[int, int]) -> torch.Tensor:
    """Invert a magnitude/phase pair back to the spatial domain.

    The half-spectrum is completed to a full spectrum by explicit Hermitian
    mirroring and inverted with ifft2; unlike irfft2 this treatment stays
    exactly adjoint to its forward when a learned magnitude map breaks the
    redundancy constraints of the one-sided layout, so autograd gradients
    match finite differences.
    """
    magnitude, phase = pair
    if magnitude.shape != phase.shape:
        raise ShapeError(
            f"magnitude {tuple(magnitude.shape)} != phase {tuple(phase.shape)}"
        )
    h, w = size
    if magnitude.shape[-2] != h or magnitude.shape[-1] != w // 2 + 1:
        raise ShapeError(
            f"spectrum {tuple(magnitude.shape[-2:])} does not invert to {size}"
        )
    # explicit cos/sin instead of torch.polar: a learned magnitude map can go
    # negative, where polar's backward returns the wrong sign
    spec = torch.complex(magnitude * torch.cos(phase),
                         magnitude * torch.sin(phase))
    lo = 1
    hi = spec.shape[-1] - 1 if w % 2 == 0 else spec.shape[-1]
    mirror = torch.conj(torch.flip(spec[..., lo:hi], dims=(-1,)))
    mirror = torch.roll(torch.flip(mirror, dims=(-2,)), shifts=1, dims=-2)
    full = torch.cat([spec, mirror], dim=-1)
    return torch.fft.ifft2(full, norm="backward").real


def base_width(embed_dim: int) -> int:
    return max(24, embed_dim // 4)


def level_count(downsample_factor: int) -> int:
    levels = int(round(math.log2(downsample_factor)))
    if 2 ** levels != downsample_factor or levels < 1:
        raise ShapeError(f"downsample factor {downsample_factor} must be a power of 2")
    return levels


def _widths(embed_dim: int, levels: int) -> list[int]:
    base = base_width(embed_dim)
    mults = [1, 2, 4, 4, 4][:levels]
    return [base * m for m in mults]


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch, eps=1e-6)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch=None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single-head self-attention over all spatial positions."""

    def __init__(self, ch):
        super().__init__()
        self.norm = _norm(ch)
        self.q = nn.Conv2d(ch, ch, 1)
        self.k = nn.Conv2d(ch, ch, 1)
        self.v = nn.Conv2d(ch, ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        y = self.norm(x)
        q = self.q(y).reshape(b, c, h * w).transpose(1, 2)
        k = self.k(y).reshape(b, c, h * w)
        v = self.v(y).reshape(b, c, h * w).transpose(1, 2)
        attn = torch.softmax(q @ k / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class GatedChannelAttention(nn.Module):
    """Residual channel-reweighting block (checkpoint prefix ``gcam``).

    Channel layer norm -> split-channel simple gating -> sigmoid channel
    attention from pooled conv features -> gated pointwise MLP -> residual
    add.  The entry norm keeps the two gating products bounded (they are
    quadratic in their input scale); zeroing the final projection still makes
    the block an exact identity.
    """

    def __init__(self, ch):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.expand = nn.Conv2d(ch, 2 * ch, 3, padding=1)
        self.pool_attn = nn.Conv2d(ch, ch, 1)
        self.mlp = nn.Conv2d(ch, 2 * ch, 1)
        self.project = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        y = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2).contiguous()
        a, b = self.expand(y).chunk(2, dim=1)
        h = a * b
        attn = torch.sigmoid(self.pool_attn(h.mean(dim=(2, 3), keepdim=True)))
        h = h * attn
        c, d = self.mlp(h).chunk(2, dim=1)
        return x + self.project(c * d)


class FrequencyAwareFusion(nn.Module):
    """Fuse raw-stream and enhance-stream features (checkpoint prefix ``faff``).

    The magnitude of the fused feature spectrum passes through a pointwise
    mapper while the phase is reused untouched; the reconstructed frequency
    feature self-modulates the fused input via a zero-initialized per-channel
    gamma, then two conv branches produce a scale/shift of the enhance stream.
    """

    def __init__(self, ch):
        super().__init__()
        self.fuse = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.norm = nn.LayerNorm(ch)
        self.magnitude_mapper = nn.Sequential(
            nn.Conv2d(ch, ch, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 1),
        )
        self.gamma = nn.Parameter(torch.zeros(ch))
        self.scale_branch = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, padding=1),
        )
        self.shift_branch = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, padding=1),
        )

    def fuse_inputs(self, f_raw, f_enh):
        if f_raw.shape != f_enh.shape:
            raise ShapeError(
                f"raw features {tuple(f_raw.shape)} != enhance features "
                f"{tuple(f_enh.shape)}"
            )
        x = self.fuse(torch.cat([f_raw, f_enh], dim=1))
        # per-location layer norm over channels; contiguous() drops the
        # channels-last layout the permute would otherwise propagate
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2).contiguous()

    def frequency_features(self, fused):
        magnitude, phase = spectral_decompose(fused)
        mapped = self.magnitude_mapper(magnitude)
        freq = spectral_reconstruct(SpectralPair(mapped, phase), fused.shape[-2:])
        return freq, magnitude, phase, mapped

    def fused_features(self, f_raw, f_enh):
        fused = self.fuse_inputs(f_raw, f_enh)
        freq, *_ = self.frequency_features(fused)
        return fused + self.gamma.view(1, -1, 1, 1) * (fused * freq)

    def forward(self, f_raw, f_enh):
        modulated = self.fused_features(f_raw, f_enh)
        return self.scale_branch(modulated) * f_enh + self.shift_branch(modulated)


class Encoder(nn.Module):
    """Multi-scale encoder; also owns the projection used by the code-feature
    alignment loss term (serialized under ``<prefix>/code_proj``)."""

    def __init__(self, embed_dim, downsample_factor=8, in_ch=3, proj_ch=64):
        super().__init__()
        levels = level_count(downsample_factor)
        widths = _widths(embed_dim, levels)
        self.downsample_factor = downsample_factor
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        stages = []
        ch = widths[0]
        for i in range(levels):
            out = widths[i]
            stages.append(nn.Sequential(
                ResidualBlock(ch, out),
                ResidualBlock(out),
                nn.Conv2d(out, out, 3, stride=2, padding=1),
            ))
            ch = out
        self.stages = nn.ModuleList(stages)
        self.mid = nn.Sequential(
            ResidualBlock(ch), AttentionBlock(ch), ResidualBlock(ch)
        )
        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, embed_dim, 3, padding=1)
        # start the latent at the codebooks' init scale (entries ~ 1/N) so
        # quantization is meaningful from the first steps; both scales then
        # grow together through the commitment coupling
        with torch.no_grad():
            self.out_conv.weight.mul_(0.05)
            self.out_conv.bias.zero_()
        self.code_proj = nn.Conv2d(embed_dim, proj_ch, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        f = self.downsample_factor
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} not divisible by factor {f}")
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
        y = self.mid(y)
        return self.out_conv(F.silu(self.out_norm(y)))


class _DecoderBase(nn.Module):
    """Shared latent->image scaffolding for the three decoders."""

    def __init__(self, embed_dim, downsample_factor=8, out_ch=3):
        super().__init__()
        levels = level_count(downsample_factor)
        widths = _widths(embed_dim, levels)[::-1]  # bottleneck first
        self.levels = levels
        self.widths = widths
        self.conv_in = nn.Conv2d(embed_dim, widths[0], 3, padding=1)
        self.mid = nn.Sequential(
            ResidualBlock(widths[0]), AttentionBlock(widths[0]),
            ResidualBlock(widths[0]),
        )
        ups = []
        for i in range(levels):
            nxt = widths[i + 1] if i + 1 < levels else widths[-1]
            ups.append(nn.Conv2d(widths[i], nxt, 3, padding=1))
        self.ups = nn.ModuleList(ups)
        self.head_norm = _norm(widths[-1])
        self.head = nn.Conv2d(widths[-1], out_ch, 3, padding=1)

    def _upsample(self, x, i):
        return self.ups[i](F.interpolate(x, scale_factor=2, mode="nearest"))

    def _finish(self, x):
        out = self.head(F.silu(self.head_norm(x)))
        return out if self.training else out.clamp(0.0, 1.0)


class ImageDecoder(_DecoderBase):
    """Plain reconstruction decoder (stage-1 G_q)."""

    def __init__(self, embed_dim, downsample_factor=8, out_ch=3):
        super().__init__(embed_dim, downsample_factor, out_ch)
        self.blocks = nn.ModuleList(
            nn.Sequential(ResidualBlock(w), ResidualBlock(w)) for w in self.widths
        )

    def forward(self, z):
        y = self.mid(self.conv_in(z))
        for i in range(self.levels):
            y = self.blocks[i](y)
            y = self._upsample(y, i)
        return self._finish(y)


class RawDecoder(_DecoderBase):
    """GCAM-based raw-domain decoder (G_r); returns per-scale feature taps."""

    def __init__(self, embed_dim, downsample_factor=8, out_ch=3):
        super().__init__(embed_dim, downsample_factor, out_ch)
        # two attention blocks per upsampling scale, enumerated flat so the
        # checkpoint can address them as gcam/<idx>
        self.gcams = nn.ModuleList(
            GatedChannelAttention(w) for w in self.widths for _ in range(2)
        )

    def forward(self, z):
        y = self.mid(self.conv_in(z))
        taps = []
        for i in range(self.levels):
            y = self.gcams[2 * i](y)
            y = self.gcams[2 * i + 1](y)
            taps.append(y)
            y = self._upsample(y, i)
        return self._finish(y), taps


class EnhanceDecoder(_DecoderBase):
    """Enhancement decoder (G_e) fusing raw-decoder taps through FAFF."""

    def __init__(self, embed_dim, downsample_factor=8, out_ch=3,
                 faff_scales="all"):
        super().__init__(embed_dim, downsample_factor, out_ch)
        self.blocks = nn.ModuleList(
            nn.Sequential(ResidualBlock(w), ResidualBlock(w)) for w in self.widths
        )
        if faff_scales == "all":
            self.faff_at = list(range(self.levels))
        elif faff_scales == "last":
            self.faff_at = [self.levels - 1]
        else:
            raise ShapeError(f"unknown faff placement {faff_scales!r}")
        self.faffs = nn.ModuleDict({
            str(i): FrequencyAwareFusion(self.widths[i]) for i in self.faff_at
        })

    def forward(self, z, raw_taps):
        if len(raw_taps) != self.levels:
            raise ShapeError(
                f"expected {self.levels} raw taps, got {len(raw_taps)}"
            )
        y = self.mid(self.conv_in(z))
        for i in range(self.levels):
            y = self.blocks[i](y)
            if i in self.faff_at:
                if raw_taps[i].shape != y.shape:
                    raise ShapeError(
                        f"tap {i} shape {tuple(raw_taps[i].shape)} != "
                        f"stream shape {tuple(y.shape)}"
                    )
                y = self.faffs[str(i)](raw_taps[i], y)
            y = self._upsample(y, i)
        return self._finish(y)


class WindowAttentionBlock(nn.Module):
    """One windowed self-attention transformer layer (no shift)."""

    def __init__(self, dim, window=8, heads=4, mlp_ratio=2.0):
        super().__init__()
        if dim % heads:
            heads = 1
        self.window = window
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def _window_size(self, h, w):
        win = min(self.window, h, w)
        while h % win or w % win:
            win -= 1
        return max(win, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        win = self._window_size(h, w)
        t = x.permute(0, 2, 3, 1)                       # [B, H, W, C]
        t = t.reshape(b, h // win, win, w // win, win, c)
        t = t.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)

        y = self.norm1(t)
        qkv = self.qkv(y).reshape(-1, win * win, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), -1)
        y = (attn @ v).transpose(1, 2).reshape(-1, win * win, c)
        t = t + self.proj(y)
        t = t + self.mlp(self.norm2(t))

        t = t.reshape(b, h // win, w // win, win, win, c)
        t = t.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        return t.permute(0, 3, 1, 2)


class WeightPredictor(nn.Module):
    """Windowed-attention block + conv head, softmax-normalized per location."""

    def __init__(self, embed_dim, class_count, window=8, heads=4):
        super().__init__()
        self.block = WindowAttentionBlock(embed_dim, window=window, heads=heads)
        self.to_weights = nn.Conv2d(embed_dim, class_count, 3, padding=1)

    def forward(self, z):
        logits = self.to_weights(self.block(z))
        return torch.softmax(logits, dim=1)


class PatchDiscriminator(nn.Module):
    """4 stride-2 conv layers + 1-channel head: 256 -> 16x16 patch logits."""

    def __init__(self, in_ch=3, base=64):
        super().__init__()
        widths = [base, base * 2, base * 4, base * 8]
        layers = [nn.Conv2d(in_ch, widths[0], 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2)]
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(widths[-1], 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)
