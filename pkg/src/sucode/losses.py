"""Training objectives for the three stages, plus the perceptual extractor.

The default perceptual extractor is a frozen, seed-fixed random conv pyramid:
random stationary features give a deterministic training signal without any
external pretrained download.  A pretrained extractor with the same
``features(x) -> list`` interface can be swapped in wherever a
PerceptualExtractor is accepted.

Stage totals (lambda_adv = 0.1 throughout):

    stage 1/2:  L1 + L_per + lambda_adv * L_adv + L_VQ
    stage 3:    L1 + L_per + lambda_adv * L_adv + L_code

with L_VQ = codebook + beta * commit + lambda_s * semantic and
L_code = beta * ||z_hat - sg[z_gt]||^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LossSpecError, ShapeError
from .quantize import QuantizationResult


class PerceptualExtractor(nn.Module):
    """Frozen 4-stage conv pyramid; same seed -> bit-identical features.

    Stage weights calibrate the feature-distance scale against the pixel
    term so neither dominates the stage objectives.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64),
                 stage_weights=(0.25, 0.25, 0.25, 0.25)):
        super().__init__()
        if len(widths) != len(stage_weights):
            raise LossSpecError("widths and stage_weights must align")
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for out_ch in widths:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(
                    conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.stage_weights = tuple(float(w) for w in stage_weights)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        y = x
        for conv in self.convs:
            y = F.leaky_relu(conv(y), 0.2)
            taps.append(y)
        return taps

    def stage_for_factor(self, factor: int) -> int:
        """Index of the pyramid stage whose stride matches `factor`."""
        idx = int(round(math.log2(factor))) - 1
        if not 0 <= idx < len(self.convs):
            raise LossSpecError(f"no pyramid stage at stride {factor}")
        return idx

    @property
    def out_channels(self) -> list[int]:
        return [conv.out_channels for conv in self.convs]


@dataclass
class LossReport:
    step: int
    stage: int
    pixel: float = 0.0
    perceptual: float = 0.0
    adversarial: float = 0.0
    vq_commit: float = 0.0
    vq_codebook: float = 0.0
    vq_semantic: float = 0.0
    code: float = 0.0
    total: float = 0.0

    CSV_HEADER = ("step,stage,pixel,perceptual,adversarial,"
                  "vq_commit,vq_codebook,vq_semantic,code,total")

    def csv_line(self) -> str:
        return (f"{self.step},{self.stage},{self.pixel:.8g},{self.perceptual:.8g},"
                f"{self.adversarial:.8g},{self.vq_commit:.8g},"
                f"{self.vq_codebook:.8g},{self.vq_semantic:.8g},"
                f"{self.code:.8g},{self.total:.8g}")


def pixel_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"pixel_l1: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def perceptual_loss(a: torch.Tensor, b: torch.Tensor,
                    phi: PerceptualExtractor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"perceptual_loss: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    for w, fa, fb in zip(phi.stage_weights, phi.features(a), phi.features(b)):
        total = total + w * (fa - fb).abs().mean()
    return total


def adversarial_losses(logits_fake: torch.Tensor,
                       logits_real: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN objective on patch logits."""
    gen = F.softplus(-logits_fake).mean()
    disc = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
    return gen, disc


def semantic_term(proj_zq: torch.Tensor, phi_x: torch.Tensor) -> torch.Tensor:
    """Mean-squared gap between projected codes and frozen image features."""
    if proj_zq.shape[-2:] != phi_x.shape[-2:]:
        proj_zq = F.interpolate(proj_zq, size=phi_x.shape[-2:],
                                mode="bilinear", align_corners=False)
    if proj_zq.shape != phi_x.shape:
        raise ShapeError(
            f"semantic_term: {tuple(proj_zq.shape)} vs {tuple(phi_x.shape)}"
        )
    return ((proj_zq - phi_x.detach()) ** 2).mean()


def vq_loss(result: QuantizationResult,
            proj_zq: torch.Tensor | None, phi_x: torch.Tensor | None,
            beta: float, lambda_s: float) -> torch.Tensor:
    """codebook + beta * commit + lambda_s * semantic, gradient-routed.

    The stop-gradient terms are carried by `result`; gradients reach the
    codebooks only through the codebook term and the encoder only through the
    commitment and semantic terms.
    """
    total = result.codebook_term + beta * result.commit_term
    if lambda_s > 0:
        if proj_zq is None or phi_x is None:
            raise LossSpecError("semantic term requires proj_zq and phi_x")
        total = total + lambda_s * semantic_term(proj_zq, phi_x)
    return total


def code_loss(z_hat: torch.Tensor, z_gt: torch.Tensor,
              beta: float) -> torch.Tensor:
    """beta * mean ||z_hat - sg[z_gt]||^2; no gradient to the target path."""
    if z_hat.shape != z_gt.shape:
        raise ShapeError(f"code_loss: {tuple(z_hat.shape)} vs {tuple(z_gt.shape)}")
    return beta * ((z_hat - z_gt.detach()) ** 2).mean()


def stage_total(stage: int, *, pixel: float, perceptual: float,
                adversarial: float, vq_commit: float | None = None,
                vq_codebook: float | None = None,
                vq_semantic: float | None = None, code: float | None = None,
                beta: float = 0.25, lambda_s: float = 0.1,
                lambda_adv: float = 0.1, step: int = 0) -> LossReport:
    """Assemble the stage objective into a LossReport."""
    if stage in (1, 2):
        if vq_commit is None or vq_codebook is None or vq_semantic is None:
            raise LossSpecError(f"stage {stage} requires the three VQ terms")
        vq = vq_codebook + beta * vq_commit + lambda_s * vq_semantic
        total = pixel + perceptual + lambda_adv * adversarial + vq
        return LossReport(step=step, stage=stage, pixel=pixel,
                          perceptual=perceptual, adversarial=adversarial,
                          vq_commit=vq_commit, vq_codebook=vq_codebook,
                          vq_semantic=vq_semantic, total=total)
    if stage == 3:
        if code is None:
            raise LossSpecError("stage 3 requires the code term")
        total = pixel + perceptual + lambda_adv * adversarial + code
        return LossReport(step=step, stage=stage, pixel=pixel,
                          perceptual=perceptual, adversarial=adversarial,
                          code=code, total=total)
    raise LossSpecError(f"unknown stage {stage}")
