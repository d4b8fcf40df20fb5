"""Semantic per-class codebooks and mask-guided nearest-neighbor quantization.

Conventions fixed here and relied on by the tests:

* distances are squared Euclidean; argmin ties break toward the lowest index
  (and lowest label for mask downsampling),
* distance search runs in float64 so implementation and brute-force oracle
  agree index-exactly,
* gradient flow through quantization uses the straight-through composition
  ``z + sg[z_q - z]``, applied by the caller via :func:`straight_through`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import RunConfig
from .errors import AggregateInvalid, MaskInvalid


@dataclass
class QuantizationResult:
    z_q: torch.Tensor                 # [B, n_z, h, w] exact codebook rows
    indices: torch.Tensor             # [B, h, w] entry per location
    class_of_location: torch.Tensor   # [B, h, w]
    commit_term: torch.Tensor         # mean ||z_hat - sg[z_q]||^2
    codebook_term: torch.Tensor       # mean ||sg[z_hat] - z_q||^2


@dataclass
class UsageStats:
    counts: torch.Tensor              # [C, N] int64
    perplexity_per_class: torch.Tensor  # [C]


def straight_through(z_hat: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward the quantized values, backward the identity onto z_hat."""
    return z_hat + (quantized - z_hat).detach()


def nearest_code(feature: torch.Tensor, book: torch.Tensor) -> tuple[int, torch.Tensor]:
    """Brute-force nearest entry for a single vector; first index wins ties."""
    if feature.shape[-1] != book.shape[-1]:
        raise MaskInvalid(
            f"feature dim {feature.shape[-1]} != book dim {book.shape[-1]}"
        )
    dist = ((book - feature.unsqueeze(0)) ** 2).sum(dim=1)
    index = int(torch.argmin(dist).item())
    return index, book[index]


def _nearest_indices(flat: torch.Tensor, book: torch.Tensor) -> torch.Tensor:
    # ||z||^2 - 2 z.b + ||b||^2 in float64; [L, N] fits easily at our scales
    f = flat.detach().double()
    b = book.detach().double()
    dist = (f * f).sum(1, keepdim=True) - 2.0 * (f @ b.t()) + (b * b).sum(1)
    return dist.argmin(dim=1)


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Majority label per factor x factor block, ties to the lowest label."""
    if mask.dim() != 2:
        raise MaskInvalid(f"expected [H, W] mask, got shape {tuple(mask.shape)}")
    h, w = mask.shape
    if factor < 1 or h % factor or w % factor:
        raise MaskInvalid(f"mask {h}x{w} not divisible by factor {factor}")
    labels = int(mask.max().item()) + 1 if mask.numel() else 1
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    counts = torch.stack(
        [(blocks == c).sum(dim=(1, 3)) for c in range(labels)], dim=0
    )
    # unique score: majority first, then lowest label
    bias = torch.arange(labels - 1, -1, -1, dtype=torch.long).view(-1, 1, 1)
    return (counts * (labels + 1) + bias).argmax(dim=0)


class CodebookSet(nn.Module):
    """C learnable codebooks of N entries x n_z dims, one per semantic class."""

    def __init__(self, class_count: int, entries: int, embed_dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        books = torch.empty(class_count, entries, embed_dim)
        books.uniform_(-1.0 / entries, 1.0 / entries, generator=gen)
        self.books = nn.Parameter(books)
        self.frozen = False
        # instrumentation: the trainer asserts which dataflow each stage used
        self.masked_calls = 0
        self.per_class_calls = 0

    @property
    def class_count(self) -> int:
        return self.books.shape[0]

    @property
    def entries(self) -> int:
        return self.books.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.books.shape[2]

    def freeze(self) -> None:
        self.frozen = True
        self.books.requires_grad_(False)

    def quantize_with_mask(self, z_hat: torch.Tensor,
                           mask_lowres: torch.Tensor) -> QuantizationResult:
        """Quantize each location against the codebook of its class."""
        squeeze = z_hat.dim() == 3
        if squeeze:
            z_hat = z_hat.unsqueeze(0)
            mask_lowres = mask_lowres.unsqueeze(0)
        b, n_z, h, w = z_hat.shape
        if n_z != self.embed_dim:
            raise MaskInvalid(f"latent dim {n_z} != codebook dim {self.embed_dim}")
        if mask_lowres.shape != (b, h, w):
            raise MaskInvalid(
                f"mask shape {tuple(mask_lowres.shape)} != latent grid {(b, h, w)}"
            )
        if mask_lowres.numel() and (
            mask_lowres.min() < 0 or mask_lowres.max() >= self.class_count
        ):
            raise MaskInvalid(
                f"mask labels must lie in [0, {self.class_count})"
            )
        self.masked_calls += 1

        flat = z_hat.permute(0, 2, 3, 1).reshape(-1, n_z)
        cls = mask_lowres.reshape(-1).long()
        indices = torch.zeros_like(cls)
        for c in cls.unique().tolist():
            sel = cls == c
            indices[sel] = _nearest_indices(flat[sel], self.books[c])
        z_q_flat = self.books[cls, indices]
        z_q = z_q_flat.reshape(b, h, w, n_z).permute(0, 3, 1, 2)

        commit = ((z_hat - z_q.detach()) ** 2).mean()
        codebook = ((z_hat.detach() - z_q) ** 2).mean()
        result = QuantizationResult(
            z_q=z_q.squeeze(0) if squeeze else z_q,
            indices=indices.reshape(b, h, w).squeeze(0) if squeeze
            else indices.reshape(b, h, w),
            class_of_location=mask_lowres.squeeze(0) if squeeze else mask_lowres,
            commit_term=commit,
            codebook_term=codebook,
        )
        return result

    def quantize_per_class(self, z_hat: torch.Tensor) -> list[torch.Tensor]:
        """Quantize the whole map against each class book separately."""
        squeeze = z_hat.dim() == 3
        if squeeze:
            z_hat = z_hat.unsqueeze(0)
        b, n_z, h, w = z_hat.shape
        if n_z != self.embed_dim:
            raise MaskInvalid(f"latent dim {n_z} != codebook dim {self.embed_dim}")
        self.per_class_calls += 1
        flat = z_hat.permute(0, 2, 3, 1).reshape(-1, n_z)
        maps = []
        for c in range(self.class_count):
            idx = _nearest_indices(flat, self.books[c])
            z_q = self.books[c][idx].reshape(b, h, w, n_z).permute(0, 3, 1, 2)
            maps.append(z_q.squeeze(0) if squeeze else z_q)
        return maps


def init_codebooks(config: RunConfig, seed: int) -> CodebookSet:
    """Fresh codebooks, entries uniform in [-1/N, 1/N], deterministic in seed."""
    return CodebookSet(
        class_count=config.class_count,
        entries=config.codebook_entries,
        embed_dim=config.embed_dim,
        seed=seed,
    )


def aggregate_weighted(maps: list[torch.Tensor],
                       weights: torch.Tensor) -> torch.Tensor:
    """Per-location convex combination of the C class-quantized maps."""
    if not maps:
        raise AggregateInvalid("no maps to aggregate")
    squeeze = maps[0].dim() == 3
    maps = [m.unsqueeze(0) if m.dim() == 3 else m for m in maps]
    if weights.dim() == 3:
        weights = weights.unsqueeze(0)
    b, n_z, h, w = maps[0].shape
    for m in maps:
        if m.shape != maps[0].shape:
            raise AggregateInvalid("per-class maps disagree in shape")
    if weights.shape != (b, len(maps), h, w):
        raise AggregateInvalid(
            f"weights shape {tuple(weights.shape)} != {(b, len(maps), h, w)}"
        )
    out = torch.zeros_like(maps[0])
    for c, m in enumerate(maps):
        out = out + weights[:, c:c + 1] * m
    return out.squeeze(0) if squeeze else out


def usage_stats(results: list[QuantizationResult] | "QuantizationResult",
                class_count: int, entries: int) -> UsageStats:
    """Accumulate per-class code usage counts and perplexities."""
    if isinstance(results, QuantizationResult):
        results = [results]
    counts = torch.zeros(class_count, entries, dtype=torch.long)
    for res in results:
        cls = res.class_of_location.reshape(-1)
        idx = res.indices.reshape(-1)
        flat = cls * entries + idx
        counts += torch.bincount(flat, minlength=class_count * entries).reshape(
            class_count, entries
        )
    perplexity = torch.ones(class_count, dtype=torch.float64)
    for c in range(class_count):
        total = counts[c].sum()
        if total > 0:
            p = counts[c].double() / total
            nonzero = p[p > 0]
            entropy = -(nonzero * nonzero.log()).sum()
            perplexity[c] = entropy.exp()
    return UsageStats(counts=counts, perplexity_per_class=perplexity)
