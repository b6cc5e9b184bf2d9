"""Reference-based video metrics and the reference-frame evaluation protocol."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .conditioning import collate_conditions
from .dataset import Manifest, clip_conditions, read_manifest
from .diffusion import sample
from .scene import ClipRecord

log = logging.getLogger(__name__)

INF_SENTINEL = "inf"


@dataclass(frozen=True)
class MetricResult:
    per_frame: np.ndarray
    mean: float


def _as_frames(pred, target) -> tuple[np.ndarray, np.ndarray]:
    """Bring ``(H, W)``, ``(H, W, C)`` or ``(F, H, W, C)`` inputs to ``(F, H, W, C)`` float64."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None, ..., None], b[None, ..., None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
    elif a.ndim != 4:
        raise ValueError(f"expected an image or a (F, H, W, C) video, got shape {a.shape}")
    return a, b


def psnr(pred, target, peak: float = 1.0) -> MetricResult:
    """``10 log10(peak^2 / MSE)`` per frame; identical frames give ``inf``."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    a, b = _as_frames(pred, target)
    mse = np.mean((a - b) ** 2, axis=(1, 2, 3))
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(peak**2 / mse)
    return MetricResult(values, float(np.mean(values)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter keeping only windows fully inside the image."""
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(pred, target, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0,
         sigma: float = 1.5) -> MetricResult:
    """Gaussian-window SSIM, computed per channel and averaged, one value per frame."""
    a, b = _as_frames(pred, target)
    if window % 2 == 0:
        raise ValueError("window size must be odd")
    if min(a.shape[1:3]) < window:
        raise ValueError(f"image {a.shape[1:3]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    values = np.empty(a.shape[0])
    for f in range(a.shape[0]):
        per_channel = []
        for c in range(a.shape[3]):
            x, y = a[f, ..., c], b[f, ..., c]
            mx, my = _filter_valid(x, g), _filter_valid(y, g)
            vx = _filter_valid(x * x, g) - mx * mx
            vy = _filter_valid(y * y, g) - my * my
            cov = _filter_valid(x * y, g) - mx * my
            smap = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            per_channel.append(smap.mean())
        values[f] = np.mean(per_channel)
    return MetricResult(values, float(np.mean(values)))


# ---------------------------------------------------------------- protocol
@dataclass(frozen=True)
class EvalProtocol:
    """Frames ``range(start, stop, stride)`` generated from the middle one of them."""

    start: int = 1
    stop: int = 144
    stride: int = 3
    name: str = "default"

    def __post_init__(self):
        if self.stride < 1 or self.start < 0 or self.stop <= self.start:
            raise ValueError("protocol needs 0 <= start < stop and a positive stride")

    @property
    def indices(self) -> list[int]:
        return list(range(self.start, self.stop, self.stride))

    @property
    def ref_position(self) -> int:
        return len(self.indices) // 2

    @property
    def ref_index(self) -> int:
        return self.indices[self.ref_position]

    def fits(self, frames: int) -> bool:
        return self.indices[-1] < frames


PROTOCOLS = {
    "default": EvalProtocol(),
    "desk": EvalProtocol(0, 16, 1, name="desk"),
}


def get_protocol(name: str) -> EvalProtocol:
    if name not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}")
    return PROTOCOLS[name]


# -------------------------------------------------------------- generators
# A generator maps (clip, frame indices, reference index) to videos
# ``{modality: (F, H, W, 3)}`` in [0, 1].
VideoGenerator = Callable[[ClipRecord, list, int], dict]


class OracleGenerator:
    """Returns the ground truth; the upper bound of every metric."""

    def __init__(self, modalities=("rgb",)):
        self.modalities = tuple(modalities)

    def __call__(self, clip, indices, ref_index):
        return {m: clip.modality(m)[indices] for m in self.modalities}


class RepeatReferenceGenerator:
    """Baseline that copies the reference frame into every output frame."""

    def __init__(self, modalities=("rgb",)):
        self.modalities = tuple(modalities)

    def __call__(self, clip, indices, ref_index):
        return {m: np.repeat(clip.modality(m)[ref_index][None], len(indices), axis=0) for m in self.modalities}


class DiffusionGenerator:
    """Samples the model for each clip; long frame lists are split into windows."""

    def __init__(self, model, steps: int = 50, seed: int = 0, window: int | None = None):
        self.model = model
        self.steps = steps
        self.seed = seed
        self.window = window or model.config.max_frames
        self.modalities = tuple(model.modalities)

    def __call__(self, clip, indices, ref_index):
        model = self.model
        model.eval()
        indices = list(indices)
        chunks = {m: [] for m in self.modalities}
        for k, lo in enumerate(range(0, len(indices), self.window)):
            part = indices[lo:lo + self.window]
            cond = collate_conditions([clip_conditions(clip, part, ref_index)], model.codec, self.modalities,
                                      model.config.mask_resample)
            out = sample(model, cond, steps=self.steps, seed=self.seed + k)
            for m in self.modalities:
                video = model.codec.decode(out[m][0]).clamp(0.0, 1.0).numpy()
                if m == "normal":
                    # normals are only defined on people
                    video = video * (clip.mask[part] > 0)[..., None]
                chunks[m].append(video)
        return {m: np.concatenate(v, axis=0) for m, v in chunks.items()}


# -------------------------------------------------------------- reporting
def json_safe(x):
    """Recursively replace non-finite floats with the ``"inf"``/``"-inf"``/``"nan"`` strings."""
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isinf(x):
            return INF_SENTINEL if x > 0 else "-" + INF_SENTINEL
        if math.isnan(x):
            return "nan"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _score(pred: np.ndarray, target: np.ndarray) -> dict:
    p, s = psnr(pred, target), ssim(pred, target)
    return {"psnr": p.mean, "ssim": s.mean, "psnr_frames": p.per_frame.tolist(), "ssim_frames": s.per_frame.tolist()}


def evaluate_model(generator: VideoGenerator, clips: Manifest | Iterable[ClipRecord] | str | Path,
                   protocol: EvalProtocol | str = "default", modalities=None,
                   score_reference: bool = False) -> dict:
    """Score ``generator`` on every clip long enough for ``protocol``.

    All protocol frames are generated, but the reference frame is the
    conditioning input, so it is left out of the scores unless
    ``score_reference`` is set. RGB is the headline metric; depth and normal
    rows are an extension of the protocol and are marked as such. Too-short
    clips are skipped with a warning and listed in the report.
    """
    if isinstance(protocol, str):
        protocol = get_protocol(protocol)
    if isinstance(clips, (str, Path)):
        clips = read_manifest(clips)
    if isinstance(clips, Manifest):
        manifest = clips
        clips = (manifest.load(i) for i in manifest.ids)
    modalities = tuple(modalities or getattr(generator, "modalities", ("rgb",)))
    indices, ref = protocol.indices, protocol.ref_index
    scored = [i for i, f in enumerate(indices) if score_reference or f != ref]
    rows, skipped = [], []
    for clip in clips:
        if not protocol.fits(clip.frames):
            log.warning("skipping %s: %d frames, protocol needs %d", clip.clip_id, clip.frames, indices[-1] + 1)
            skipped.append({"id": clip.clip_id, "frames": clip.frames})
            continue
        videos = generator(clip, indices, ref)
        row = {"id": clip.clip_id}
        for m in modalities:
            target = clip.modality(m)[indices]
            row[m] = _score(videos[m][scored], target[scored])
            if m != "rgb":
                row[m]["extension"] = True
        rows.append(row)
    aggregate = {}
    for m in modalities:
        if rows:
            aggregate[m] = {"psnr": float(np.mean([r[m]["psnr"] for r in rows])),
                            "ssim": float(np.mean([r[m]["ssim"] for r in rows]))}
            if m != "rgb":
                aggregate[m]["extension"] = True
    return {
        "protocol": {"name": protocol.name, "start": protocol.start, "stop": protocol.stop,
                     "stride": protocol.stride, "indices": indices, "reference_index": ref,
                     "scored_indices": [indices[i] for i in scored]},
        "clips": rows,
        "aggregate": aggregate,
        "evaluated": len(rows),
        "skipped": skipped,
        "skipped_count": len(skipped),
        # filled in by external tools when available
        "reserved": {"lpips": None, "fid": None, "fvd": None},
    }


def write_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(report), indent=1))
    return path


def load_report(path: str | Path) -> dict:
    def decode(x):
        if isinstance(x, dict):
            return {k: decode(v) for k, v in x.items()}
        if isinstance(x, list):
            return [decode(v) for v in x]
        if x in (INF_SENTINEL, "-" + INF_SENTINEL, "nan"):
            return float(x)
        return x

    return decode(json.loads(Path(path).read_text()))


@torch.no_grad()
def compare_generators(generators: dict[str, VideoGenerator], clips: list[ClipRecord],
                       protocol: EvalProtocol | str = "desk", modalities=("rgb",)) -> dict[str, dict]:
    return {name: evaluate_model(g, clips, protocol, modalities) for name, g in generators.items()}
