"""Pixel <-> latent codecs.

The desk-scale model diffuses directly on pixels rescaled to [-1, 1]. The
codec interface keeps a learned autoencoder pluggable: anything with
``encode``/``decode``, ``channels(pixel_channels)`` and ``factor`` works.
Videos on the pixel side are ``(..., F, H, W, C)`` in [0, 1]; on the latent
side they are ``(..., F, C, h, w)`` tensors.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(x)).float()


class IdentityCodec:
    """Channel-last [0, 1] pixels to channel-first [-1, 1] latents, nothing else."""

    factor = 1

    def channels(self, pixel_channels: int) -> int:
        return pixel_channels

    def encode(self, pixels) -> torch.Tensor:
        x = _to_tensor(pixels)
        return (x * 2.0 - 1.0).movedim(-1, -3).contiguous()

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return ((latents + 1.0) * 0.5).movedim(-3, -1).contiguous()


class SpaceToDepthCodec(IdentityCodec):
    """Lossless pixel-unshuffle: trades spatial resolution for channels."""

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be positive")
        self.factor = factor

    def channels(self, pixel_channels: int) -> int:
        return pixel_channels * self.factor**2

    def encode(self, pixels) -> torch.Tensor:
        x = super().encode(pixels)
        lead = x.shape[:-3]
        y = F.pixel_unshuffle(x.reshape(-1, *x.shape[-3:]), self.factor)
        return y.reshape(*lead, *y.shape[-3:])

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        lead = latents.shape[:-3]
        y = F.pixel_shuffle(latents.reshape(-1, *latents.shape[-3:]), self.factor)
        return super().decode(y.reshape(*lead, *y.shape[-3:]))


def make_codec(name: str = "identity", factor: int = 2):
    if name == "identity":
        return IdentityCodec()
    if name == "space_to_depth":
        return SpaceToDepthCodec(factor)
    raise ValueError(f"unknown codec {name!r}")
