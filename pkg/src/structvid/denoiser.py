"""Multi-modality denoiser: per-modality expert entry/exit layers around a
shared U-shaped trunk with reference attention and temporal attention."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from .blocks import Downsample, ResBlock, SpatialAttention, TemporalAttention, Upsample, norm, timestep_embedding
from .conditioning import CameraEncoder, ConditioningBundle, PoseGuider, ReferenceEncoder, id_maps
from .diffusion import MODALITIES, NoiseSchedule, linear_schedule
from .identity import IdEmbeddingTable, inject, zero_conv
from .latent import make_codec

CHECKPOINT_FORMAT = "structvid-checkpoint/1"


@dataclass(frozen=True)
class ModalityConfig:
    enabled: tuple[str, ...] = ("rgb",)

    def __post_init__(self):
        enabled = tuple(self.enabled)
        if "rgb" not in enabled:
            raise ValueError("rgb must always be enabled")
        unknown = set(enabled) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if len(set(enabled)) != len(enabled):
            raise ValueError("duplicate modalities")
        # canonical order, independent of how the user listed them
        object.__setattr__(self, "enabled", tuple(m for m in MODALITIES if m in enabled))

    @classmethod
    def parse(cls, spec: str) -> "ModalityConfig":
        return cls(tuple(s.strip() for s in spec.split(",") if s.strip()))


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (1,)
    heads: int = 4
    max_frames: int = 32
    temporal_positional: bool = True
    num_identities: int = 5
    id_channels: int | None = None
    zero_conv_kernel: int = 1
    pose_channels: int = 3
    guider_widths: tuple[int, ...] = (16, 16, 32, 32)
    codec: str = "identity"
    codec_factor: int = 2
    mask_resample: str = "nearest"
    timesteps: int = 1000

    def __post_init__(self):
        for name in ("channel_mult", "attn_levels", "guider_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.id_channels is None:
            object.__setattr__(self, "id_channels", self.latent_channels)
        if not self.channel_mult:
            raise ValueError("need at least one resolution level")
        if any(l < 0 or l >= len(self.channel_mult) for l in self.attn_levels):
            raise ValueError("attention level out of range")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def pixel_factor(self) -> int:
        return make_codec(self.codec, self.codec_factor).factor

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "DenoiserConfig":
        return cls(**payload)


class StructuralDenoiser(nn.Module):
    """Predicts velocity for every enabled modality at one shared step."""

    def __init__(self, config: DenoiserConfig | None = None, modalities: ModalityConfig | None = None,
                 schedule: NoiseSchedule | None = None):
        super().__init__()
        config = config or DenoiserConfig()
        modalities = modalities or ModalityConfig()
        self.config = config
        self.modality_config = modalities
        self.schedule = schedule or linear_schedule(config.timesteps)
        self.codec = make_codec(config.codec, config.codec_factor)
        cl, chs = config.latent_channels, config.channels
        c0 = chs[0]
        temb_dim = 4 * c0
        mods = modalities.enabled

        self.time_mlp = nn.Sequential(nn.Linear(c0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))

        # conditioning
        self.id_table = IdEmbeddingTable(config.num_identities, config.id_channels)
        self.id_proj = zero_conv(config.id_channels, cl, config.zero_conv_kernel)
        factor = self.codec.factor
        self.pose_guider = PoseGuider(c0, factor, config.pose_channels, config.guider_widths)
        self.camera_encoder = CameraEncoder(c0, factor, config.guider_widths)
        self.reference_encoder = ReferenceEncoder(mods, cl, chs, config.id_channels, config.zero_conv_kernel)

        # replicated expert layers
        self.conv_in = nn.ModuleDict({m: nn.Conv2d(cl, c0, 3, padding=1) for m in mods})
        self.first_down = nn.ModuleDict({m: ResBlock(c0, c0, temb_dim) for m in mods})
        self.last_up = nn.ModuleDict({m: ResBlock(2 * c0, c0, temb_dim) for m in mods})
        self.conv_out = nn.ModuleDict({
            m: nn.Sequential(norm(c0), nn.SiLU(), nn.Conv2d(c0, cl, 3, padding=1)) for m in mods
        })

        # shared trunk
        tkw = dict(heads=config.heads, max_frames=config.max_frames, positional=config.temporal_positional)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.down_temporal = nn.ModuleList()
        self.down_sample = nn.ModuleList()
        for lvl, ch in enumerate(chs):
            if lvl == 0:
                blocks = nn.ModuleList([ResBlock(c0, c0, temb_dim)])
            else:
                blocks = nn.ModuleList([ResBlock(chs[lvl - 1], ch, temb_dim), ResBlock(ch, ch, temb_dim)])
            self.down_res.append(blocks)
            self.down_attn.append(SpatialAttention(ch, config.heads) if lvl in config.attn_levels else nn.Identity())
            self.down_temporal.append(TemporalAttention(ch, **tkw))
            self.down_sample.append(Downsample(ch) if lvl < len(chs) - 1 else nn.Identity())
        cm = chs[-1]
        self.mid_res1 = ResBlock(cm, cm, temb_dim)
        self.mid_attn = SpatialAttention(cm, config.heads)
        self.mid_temporal = TemporalAttention(cm, **tkw)
        self.mid_res2 = ResBlock(cm, cm, temb_dim)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.up_temporal = nn.ModuleList()
        self.up_sample = nn.ModuleList()
        for lvl, ch in enumerate(chs):
            prev = chs[lvl + 1] if lvl < len(chs) - 1 else cm
            self.up_res.append(ResBlock(prev + ch, ch, temb_dim))
            self.up_attn.append(SpatialAttention(ch, config.heads) if lvl in config.attn_levels else nn.Identity())
            self.up_temporal.append(TemporalAttention(ch, **tkw))
            self.up_sample.append(Upsample(ch) if lvl > 0 else nn.Identity())

    # ------------------------------------------------------------------ api
    @property
    def modalities(self) -> tuple[str, ...]:
        return self.modality_config.enabled

    def latent_shape(self, cond: ConditioningBundle) -> tuple[int, ...]:
        h, w = cond.latent_size
        return (cond.batch, cond.frames, self.config.latent_channels, h, w)

    def predict_v(self, noisy: dict[str, torch.Tensor], t: torch.Tensor, cond: ConditioningBundle):
        return self(noisy, t, cond)

    def replicated_modules(self) -> dict[str, list[nn.Module]]:
        """Per-modality copies: entry, first down layer, last up layer, exit, reference entry."""
        r = self.reference_encoder
        return {m: [self.conv_in[m], self.first_down[m], self.last_up[m], self.conv_out[m],
                    r.conv_in[m], r.first[m]] for m in self.modalities}

    # -------------------------------------------------------------- forward
    def _check_inputs(self, noisy, cond):
        if set(noisy) != set(self.modalities):
            raise ValueError(f"model expects modalities {self.modalities}, got {tuple(sorted(noisy))}")
        shapes = {tuple(x.shape) for x in noisy.values()}
        if len(shapes) != 1:
            raise ValueError(f"modalities must share one shape, got {shapes}")
        shape = shapes.pop()
        if len(shape) != 5 or shape[2] != self.config.latent_channels:
            raise ValueError(f"noisy latents must be (B, F, {self.config.latent_channels}, h, w), got {shape}")
        if shape[1] != cond.frames or tuple(shape[-2:]) != tuple(cond.latent_size):
            raise ValueError(f"latents {shape} do not match the conditioning grid")
        return shape

    def forward(self, noisy: dict[str, torch.Tensor], t: torch.Tensor, cond: ConditioningBundle):
        b, f, cl, h, w = self._check_inputs(noisy, cond)
        n = b * f
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = timestep_embedding(t, self.config.base_channels).to(self.time_mlp[0].weight.dtype)
        temb = self.time_mlp(temb)
        temb = temb.repeat_interleave(f, dim=0)

        emap, ref_emap = id_maps(cond, self.id_table)
        pixel_size = (h * self.codec.factor, w * self.codec.factor)
        extra = None
        if cond.pose is not None:
            b_, f_ = cond.pose.shape[:2]
            if (b_, f_) != (b, f) or tuple(cond.pose.shape[-2:]) != pixel_size:
                raise ValueError(f"pose video {tuple(cond.pose.shape)} does not match latents")
            extra = self.pose_guider(cond.pose.reshape(n, *cond.pose.shape[2:]))
        if cond.plucker is not None:
            if cond.plucker.shape[:3] != (b, f, 6) or tuple(cond.plucker.shape[-2:]) != pixel_size:
                raise ValueError(f"Plücker video {tuple(cond.plucker.shape)} does not match latents")
            cam = self.camera_encoder(cond.plucker.reshape(n, 6, *pixel_size))
            extra = cam if extra is None else extra + cam

        ref = self.reference_encoder(cond.reference, ref_emap)

        branch_skips = {}
        h_sum = 0
        for m in self.modalities:
            x = noisy[m]
            if emap is not None:
                x = inject(x, emap, self.id_proj)
            a = self.conv_in[m](x.reshape(n, cl, h, w))
            if extra is not None:
                a = a + extra
            a = self.first_down[m](a, temb)
            branch_skips[m] = a
            h_sum = h_sum + a

        hs = h_sum
        skips = []
        for lvl in range(len(self.down_res)):
            for block in self.down_res[lvl]:
                hs = block(hs, temb)
            hs = self._attend(self.down_attn[lvl], hs, ref["levels"][lvl], f)
            hs = self.down_temporal[lvl](hs, f)
            skips.append(hs)
            hs = self.down_sample[lvl](hs)

        hs = self.mid_res1(hs, temb)
        hs = self.mid_attn(hs, ref["mid"], f)
        hs = self.mid_temporal(hs, f)
        hs = self.mid_res2(hs, temb)

        for lvl in reversed(range(len(self.up_res))):
            hs = self.up_res[lvl](torch.cat([hs, skips[lvl]], dim=1), temb)
            hs = self._attend(self.up_attn[lvl], hs, ref["levels"][lvl], f)
            hs = self.up_temporal[lvl](hs, f)
            hs = self.up_sample[lvl](hs)

        out = {}
        for m in self.modalities:
            o = self.last_up[m](torch.cat([hs, branch_skips[m]], dim=1), temb)
            out[m] = self.conv_out[m](o).reshape(b, f, cl, h, w)
        return out

    @staticmethod
    def _attend(layer, hs, ref_feat, frames):
        if isinstance(layer, SpatialAttention):
            return layer(hs, ref_feat, frames)
        return hs


# ------------------------------------------------------------ accounting
def _numel(modules) -> int:
    return sum(p.numel() for mod in modules for p in mod.parameters())


def count_parameters(config: DenoiserConfig | None = None, modalities: ModalityConfig | None = None,
                     model: StructuralDenoiser | None = None) -> dict[str, int]:
    """Split parameter counts into the shared trunk and per-modality copies."""
    if model is None:
        torch.manual_seed(0)
        model = StructuralDenoiser(config, modalities)
    total = sum(p.numel() for p in model.parameters())
    per_mod = {m: _numel(mods) for m, mods in model.replicated_modules().items()}
    replicated = sum(per_mod.values())
    return {"total": total, "shared": total - replicated, "replicated": replicated,
            "per_modality": per_mod}


# ------------------------------------------------------------ checkpoints
def _header(model: StructuralDenoiser, extra_meta: dict | None) -> dict[str, str]:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "denoiser_config": json.dumps(model.config.to_json(), sort_keys=True),
        "modalities": json.dumps(list(model.modalities)),
    }
    for k, v in (extra_meta or {}).items():
        meta[k] = v if isinstance(v, str) else json.dumps(v, sort_keys=True)
    return meta


def save_checkpoint(path: str | Path, model: StructuralDenoiser, extra_tensors: dict[str, torch.Tensor] | None = None,
                    extra_meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v.detach().contiguous().clone()
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=_header(model, extra_meta))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        meta = dict(fh.metadata() or {})
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a structvid checkpoint")
    return meta, tensors


def load_model(path: str | Path, expected_config: DenoiserConfig | None = None,
               expected_modalities: ModalityConfig | None = None) -> tuple[StructuralDenoiser, dict, dict]:
    """Rebuild a model from a checkpoint; mismatching expectations are rejected."""
    meta, tensors = read_checkpoint(path)
    config = DenoiserConfig.from_json(json.loads(meta["denoiser_config"]))
    modalities = ModalityConfig(tuple(json.loads(meta["modalities"])))
    if expected_config is not None and expected_config != config:
        raise ValueError(f"checkpoint config {config} differs from expected {expected_config}")
    if expected_modalities is not None and expected_modalities != modalities:
        raise ValueError(f"checkpoint modalities {modalities.enabled} differ from {expected_modalities.enabled}")
    model = StructuralDenoiser(config, modalities)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, meta, rest
