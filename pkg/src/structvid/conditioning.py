"""Condition encoders (pose guider, camera encoder, reference encoder) and the
bundle that carries a clip's conditions into the denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .identity import expand_masks, inject, resample_labels, zero_conv


@dataclass
class ConditioningBundle:
    """Everything the denoiser sees besides the noisy latents.

    ``reference`` maps modality -> ``(B, C, h, w)`` latent of the reference
    frame. ``masks`` ``(B, F, h, w)`` and ``ref_masks`` ``(B, h, w)`` are
    identity labels on the latent grid. ``pose`` ``(B, F, 3, H, W)`` and
    ``plucker`` ``(B, F, 6, H, W)`` stay on the pixel grid. Any of the
    optional entries may be ``None`` to drop that condition.
    """

    reference: dict[str, torch.Tensor]
    frames: int
    masks: torch.Tensor | None = None
    ref_masks: torch.Tensor | None = None
    pose: torch.Tensor | None = None
    plucker: torch.Tensor | None = None
    modalities: tuple[str, ...] | None = None

    @property
    def batch(self) -> int:
        return next(iter(self.reference.values())).shape[0]

    @property
    def latent_size(self) -> tuple[int, int]:
        return tuple(next(iter(self.reference.values())).shape[-2:])

    def without(self, *names: str) -> "ConditioningBundle":
        """Copy with the named optional conditions removed."""
        allowed = {"masks", "ref_masks", "pose", "plucker"}
        unknown = set(names) - allowed
        if unknown:
            raise ValueError(f"cannot drop {sorted(unknown)}")
        return replace(self, **{n: None for n in names})


class StridedEncoder(nn.Module):
    """Four conv stages whose strides multiply to ``factor``; last layer zero-initialised."""

    def __init__(self, in_ch: int, out_ch: int, factor: int = 1, widths=(16, 16, 32, 32)):
        super().__init__()
        if factor & (factor - 1):
            raise ValueError("downsampling factor must be a power of two")
        n_down = int(np.log2(factor))
        if n_down > len(widths) - 1:
            raise ValueError("not enough stages for the requested downsampling")
        layers, prev = [], in_ch
        for i, w in enumerate(widths):
            stride = 2 if 0 < i <= n_down else 1
            layers += [nn.Conv2d(prev, w, 3, stride=stride, padding=1), nn.SiLU()]
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = zero_conv(prev, out_ch, kernel_size=3)
        self.factor = factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


class PoseGuider(StridedEncoder):
    def __init__(self, out_ch: int, factor: int = 1, pose_channels: int = 3, widths=(16, 16, 32, 32)):
        super().__init__(pose_channels, out_ch, factor, widths)


class CameraEncoder(StridedEncoder):
    def __init__(self, out_ch: int, factor: int = 1, widths=(16, 16, 32, 32)):
        super().__init__(6, out_ch, factor, widths)


def _check_video(x: torch.Tensor, frames: int, channels: int, size: tuple[int, int], what: str) -> None:
    if x.ndim != 5 or x.shape[1] != frames or x.shape[2] != channels:
        raise ValueError(f"{what} must be (B, {frames}, {channels}, H, W), got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != size:
        raise ValueError(f"{what} is {tuple(x.shape[-2:])} pixels, expected {size}")


def encode_pose(guider: PoseGuider, pose: torch.Tensor, pixel_size: tuple[int, int]) -> torch.Tensor:
    """``(B, F, 3, H, W)`` skeleton maps to ``(B*F, C, H/s, W/s)`` features."""
    b, f = pose.shape[:2]
    _check_video(pose, f, pose.shape[2], pixel_size, "pose video")
    return guider(pose.reshape(b * f, *pose.shape[2:]))


def encode_camera(encoder: CameraEncoder, plucker: torch.Tensor, pixel_size: tuple[int, int]) -> torch.Tensor:
    b, f = plucker.shape[:2]
    _check_video(plucker, f, 6, pixel_size, "Plücker video")
    return encoder(plucker.reshape(b * f, 6, *plucker.shape[-2:]))


class LocalBlock(nn.Module):
    """Norm-free, bias-free residual block: local and zero-preserving."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.conv2(F.silu(self.conv1(F.silu(x))))


class ReferenceEncoder(nn.Module):
    """Reference pathway with per-modality entry layers and a shared body.

    Entry (``conv_in`` + first block) is replicated per modality, their
    outputs are summed, and the shared body mirrors the denoiser's down path,
    emitting one feature map per resolution level plus one for the middle.
    The ID map of the reference frame is added to each modality's input
    through its own zero-initialised projection.
    """

    def __init__(self, modalities, latent_ch: int, channels: list[int], id_channels: int,
                 zero_conv_kernel: int = 1, zero_init_entry: bool = False):
        super().__init__()
        c0 = channels[0]
        self.id_proj = zero_conv(id_channels, latent_ch, zero_conv_kernel)
        self.conv_in = nn.ModuleDict({m: nn.Conv2d(latent_ch, c0, 3, padding=1, bias=False) for m in modalities})
        self.first = nn.ModuleDict({m: LocalBlock(c0, c0) for m in modalities})
        if zero_init_entry:
            for mod in list(self.conv_in.values()) + list(self.first.values()):
                for p in mod.parameters():
                    nn.init.zeros_(p)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lvl, ch in enumerate(channels):
            prev = channels[lvl - 1] if lvl else c0
            self.levels.append(LocalBlock(prev, ch))
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1, bias=False)
                              if lvl < len(channels) - 1 else nn.Identity())
        self.mid = LocalBlock(channels[-1], channels[-1])

    def forward(self, reference: dict[str, torch.Tensor], emap: torch.Tensor | None = None):
        missing = set(self.conv_in) - set(reference)
        if missing:
            raise ValueError(f"reference is missing enabled modalities {sorted(missing)}")
        h = 0
        for m, conv in self.conv_in.items():
            x = reference[m]
            if emap is not None:
                x = inject(x, emap, self.id_proj)
            h = h + self.first[m](conv(x))
        feats = []
        for block, down in zip(self.levels, self.downs):
            h = block(h)
            feats.append(h)
            h = down(h)
        return {"levels": feats, "mid": self.mid(h)}


def encode_reference(encoder: ReferenceEncoder, reference: dict[str, torch.Tensor],
                     emap_ref: torch.Tensor | None = None):
    return encoder(reference, emap_ref)


def id_maps(cond: ConditioningBundle, table) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Expand frame and reference masks into ID-embedding maps on the latent grid."""
    size = cond.latent_size
    emap = ref_emap = None
    if cond.masks is not None:
        if tuple(cond.masks.shape[-2:]) != size:
            raise ValueError("masks must already be on the latent grid")
        emap = expand_masks(cond.masks, table)
    if cond.ref_masks is not None:
        ref_emap = expand_masks(resample_labels(cond.ref_masks, size), table)
    return emap, ref_emap


@dataclass
class ClipConditions:
    """Pixel-space conditions of a clip before batching (numpy, channel-last)."""

    reference: dict[str, np.ndarray]  # modality -> (H, W, C) in [0, 1]
    masks: np.ndarray  # (F, H, W)
    ref_mask: np.ndarray  # (H, W)
    pose: np.ndarray  # (F, H, W, 3)
    plucker: np.ndarray  # (F, H, W, 6)
    extras: dict = field(default_factory=dict)


def collate_conditions(items: list[ClipConditions], codec, modalities, mask_mode: str = "nearest") -> ConditioningBundle:
    """Stack per-clip conditions into a batched bundle on the codec's latent grid."""
    if not items:
        raise ValueError("nothing to collate")
    frames = items[0].masks.shape[0]
    reference = {m: torch.stack([codec.encode(it.reference[m]) for it in items]) for m in modalities}
    size = tuple(reference[modalities[0]].shape[-2:])
    masks = torch.stack([resample_labels(it.masks, size, mask_mode) for it in items])
    ref_masks = torch.stack([resample_labels(it.ref_mask, size, mask_mode) for it in items])
    pose = torch.stack([torch.from_numpy(it.pose).float().permute(0, 3, 1, 2) for it in items])
    plucker = torch.stack([torch.from_numpy(it.plucker).float().permute(0, 3, 1, 2) for it in items])
    return ConditioningBundle(reference=reference, frames=frames, masks=masks, ref_masks=ref_masks,
                              pose=pose, plucker=plucker, modalities=tuple(modalities))
