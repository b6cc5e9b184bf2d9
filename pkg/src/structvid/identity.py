"""Identity tokens stamped through tracked masks, injected via zero convolutions."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class IdEmbeddingTable(nn.Module):
    """``N x C`` learnable identity vectors; row ``n - 1`` belongs to label ``n``."""

    def __init__(self, num_identities: int = 5, channels: int = 3, init_std: float = 0.02):
        super().__init__()
        if num_identities < 1 or channels < 1:
            raise ValueError("table needs at least one row and one channel")
        self.weight = nn.Parameter(torch.randn(num_identities, channels) * init_std)

    @property
    def num_identities(self) -> int:
        return self.weight.shape[0]

    @property
    def channels(self) -> int:
        return self.weight.shape[1]


def _as_label_tensor(masks) -> torch.Tensor:
    if isinstance(masks, np.ndarray):
        masks = torch.from_numpy(masks.astype(np.int64))
    return masks.long()


def validate_labels(masks, num_identities: int) -> torch.Tensor:
    labels = _as_label_tensor(masks)
    if labels.ndim < 2:
        raise ValueError("masks must have at least two (spatial) dimensions")
    if labels.numel() and labels.min() < 0:
        raise ValueError("identity labels must be non-negative")
    if labels.numel() and labels.max() > num_identities:
        flat = labels.reshape(-1, *labels.shape[-2:])
        bad = int(torch.nonzero(flat.amax(dim=(-2, -1)) > num_identities)[0, 0])
        raise ValueError(
            f"frame {bad}: label {int(flat[bad].max())} exceeds the table size {num_identities}"
        )
    return labels


def expand_masks(masks, table: IdEmbeddingTable | torch.Tensor) -> torch.Tensor:
    """Per-pixel lookup: label ``n >= 1`` gets row ``n - 1``, background gets zeros.

    ``masks`` is ``(..., H, W)``; the result is ``(..., H, W, C)``. Rows of
    identities absent from ``masks`` are never read.
    """
    weight = table.weight if isinstance(table, IdEmbeddingTable) else table
    labels = validate_labels(masks, weight.shape[0])
    padded = torch.cat([weight.new_zeros(1, weight.shape[1]), weight], dim=0)
    return F.embedding(labels, padded)


def resample_labels(labels, size: tuple[int, int], mode: str = "nearest") -> torch.Tensor:
    """Bring an ``(..., H, W)`` label map onto a coarser ``size`` grid.

    ``nearest`` picks the label at each cell's sampling point; ``majority``
    takes the most frequent label in each ``H/h x W/w`` block (ties go to the
    smaller label) and needs an integer ratio.
    """
    labels = _as_label_tensor(labels)
    H, W = labels.shape[-2:]
    h, w = size
    if (H, W) == (h, w):
        return labels
    lead = labels.shape[:-2]
    flat = labels.reshape(-1, 1, H, W)
    if mode == "nearest":
        out = F.interpolate(flat.float(), size=(h, w), mode="nearest").long()
    elif mode == "majority":
        if H % h or W % w:
            raise ValueError(f"majority resampling needs an integer ratio, got {(H, W)} -> {size}")
        kh, kw = H // h, W // w
        blocks = F.unfold(flat.float(), kernel_size=(kh, kw), stride=(kh, kw)).long()
        n_labels = int(labels.max()) + 1 if labels.numel() else 1
        counts = F.one_hot(blocks, n_labels).sum(dim=1)
        out = counts.argmax(dim=-1).reshape(-1, 1, h, w)
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    return out.reshape(*lead, h, w)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def zero_conv(in_channels: int, out_channels: int, kernel_size: int = 1) -> nn.Conv2d:
    if kernel_size not in (1, 3):
        raise ValueError("zero_conv supports 1x1 or 3x3 kernels")
    # linear (bias-free), so an all-zero input map adds nothing whatever the weights
    conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=False)
    return zero_module(conv)


def inject(x_t: torch.Tensor, emap: torch.Tensor, proj: nn.Conv2d) -> torch.Tensor:
    """``x_t + proj(emap)`` for channel-first ``x_t (..., C, h, w)`` and
    channel-last ``emap (..., h, w, C_id)``."""
    e = emap.movedim(-1, -3)
    if e.shape[:-3] != x_t.shape[:-3] or e.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"ID map {tuple(emap.shape)} does not align with latent {tuple(x_t.shape)}")
    lead = x_t.shape[:-3]
    delta = proj(e.reshape(-1, *e.shape[-3:]))
    return x_t + delta.reshape(*lead, *delta.shape[-3:])
