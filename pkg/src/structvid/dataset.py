"""On-disk dataset layout and the bridge from clips to model inputs.

Layout::

    <root>/manifest.json
    <root>/clips/<id>/{rgb,depth,normal,mask,pose}_%06d.png
    <root>/clips/<id>/camera.json
    <root>/clips/<id>/keypoints.json
    <root>/clips/<id>/meta.json      # depth range, landmark tracks, scene spec

Depth frames are 16-bit single-channel PNGs of the normalised inverse depth,
masks are 8-bit label images, the rest are 8-bit RGB.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import CameraPose, plucker_embed
from .conditioning import ClipConditions
from .curation import compute_stats
from .pose import load_keypoints, save_keypoints
from .scene import ClipRecord, random_scene, render_clip

log = logging.getLogger(__name__)

MODALITY_FILES = ("rgb", "depth", "normal", "mask", "pose")
MANIFEST_FORMAT = "structvid-manifest/1"


# ------------------------------------------------------------------ images
def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_png(path: Path, array: np.ndarray) -> None:
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def write_clip(clip_dir: str | Path, clip: ClipRecord) -> Path:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for f in range(clip.frames):
        _write_png(clip_dir / f"rgb_{f:06d}.png", _to_u8(clip.rgb[f]))
        depth16 = np.round(np.clip(clip.depth[f], 0.0, 1.0) * 65535.0).astype(np.uint16)
        _write_png(clip_dir / f"depth_{f:06d}.png", depth16)
        _write_png(clip_dir / f"normal_{f:06d}.png", _to_u8(clip.normal[f]))
        _write_png(clip_dir / f"mask_{f:06d}.png", clip.mask[f].astype(np.uint8))
        _write_png(clip_dir / f"pose_{f:06d}.png", _to_u8(clip.pose[f]))
    clip.camera.save(clip_dir / "camera.json")
    save_keypoints(clip_dir / "keypoints.json", clip.keypoints)
    meta = {"clip_id": clip.clip_id, "frames": clip.frames, "height": clip.size[0], "width": clip.size[1],
            "depth_range": list(clip.depth_range), **clip.meta}
    if clip.tracks is not None:
        meta["tracks"] = {"uv": np.asarray(clip.tracks["uv"]).tolist(),
                          "visible": np.asarray(clip.tracks["visible"]).astype(int).tolist()}
    (clip_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return clip_dir


def _count_frames(clip_dir: Path) -> int:
    return len(sorted(clip_dir.glob("rgb_*.png")))


def read_clip(clip_dir: str | Path) -> ClipRecord:
    clip_dir = Path(clip_dir)
    if not clip_dir.is_dir():
        raise FileNotFoundError(f"clip directory not found: {clip_dir}")
    frames = _count_frames(clip_dir)
    if frames == 0:
        raise ValueError(f"{clip_dir.name}: no frames found")
    stacks = {name: [] for name in MODALITY_FILES}
    for f in range(frames):
        for name in MODALITY_FILES:
            path = clip_dir / f"{name}_{f:06d}.png"
            if not path.is_file():
                raise FileNotFoundError(f"{clip_dir.name}: missing {path.name}")
            stacks[name].append(_read_png(path))
    meta = json.loads((clip_dir / "meta.json").read_text()) if (clip_dir / "meta.json").is_file() else {}
    tracks = None
    if "tracks" in meta:
        raw = meta.pop("tracks")
        tracks = {"uv": np.asarray(raw["uv"], float), "visible": np.asarray(raw["visible"], bool)}
    depth_range = tuple(meta.pop("depth_range", (0.0, 1.0)))
    for key in ("clip_id", "frames", "height", "width"):
        meta.pop(key, None)
    return ClipRecord(
        clip_id=clip_dir.name,
        rgb=np.stack(stacks["rgb"]).astype(np.float32) / 255.0,
        depth=np.stack(stacks["depth"]).astype(np.float32) / 65535.0,
        normal=np.stack(stacks["normal"]).astype(np.float32) / 255.0,
        mask=np.stack(stacks["mask"]).astype(np.uint8),
        pose=np.stack(stacks["pose"]).astype(np.float32) / 255.0,
        keypoints=load_keypoints(clip_dir / "keypoints.json"),
        camera=CameraPose.load(clip_dir / "camera.json"),
        depth_range=depth_range,
        tracks=tracks,
        meta=meta,
    )


# ---------------------------------------------------------------- manifests
@dataclass
class Manifest:
    root: Path
    clips: list[dict]

    @property
    def ids(self) -> list[str]:
        return [c["id"] for c in self.clips]

    def clip_dir(self, clip_id: str) -> Path:
        return self.root / "clips" / clip_id

    def load(self, clip_id: str) -> ClipRecord:
        try:
            return read_clip(self.clip_dir(clip_id))
        except (OSError, ValueError) as exc:
            raise type(exc)(f"clip {clip_id}: {exc}") from exc

    def __len__(self) -> int:
        return len(self.clips)


def manifest_entry(clip: ClipRecord) -> dict:
    stats = compute_stats(clip.keypoints, clip.mask)
    labels = np.unique(clip.mask)
    return {"id": clip.clip_id, "frames": clip.frames, "height": int(clip.size[0]), "width": int(clip.size[1]),
            "n": int(np.count_nonzero(labels)), "stats": stats.to_json()}


def write_manifest(path: str | Path, root: str | Path, clips: list[dict], extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        rel = Path(root).resolve().relative_to(path.parent.resolve())
        root_field = str(rel) if str(rel) != "." else "."
    except ValueError:
        root_field = str(Path(root).resolve())
    payload = {"format": MANIFEST_FORMAT, "root": root_field, "clips": clips, **(extra or {})}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    root = Path(payload.get("root", "."))
    if not root.is_absolute():
        root = path.parent / root
    return Manifest(root=root, clips=list(payload.get("clips", [])))


def generate_dataset(out_dir: str | Path, clips: int, seed: int = 0, frames: int = 16, height: int = 64,
                     width: int = 64, max_entities: int = 3) -> Manifest:
    """Render ``clips`` random scenes; the same arguments always give the same bytes."""
    out_dir = Path(out_dir)
    entries = []
    seeds = np.random.SeedSequence(seed).generate_state(clips)
    for i in range(clips):
        spec = random_scene(int(seeds[i]), frames=frames, height=height, width=width, max_entities=max_entities)
        clip = render_clip(spec, clip_id=f"clip_{i:04d}")
        write_clip(out_dir / "clips" / clip.clip_id, clip)
        entries.append(manifest_entry(clip))
        log.info("rendered %s (%d entities, %s camera)", clip.clip_id, len(spec.entities), spec.camera)
    write_manifest(out_dir / "manifest.json", out_dir, entries, {"seed": seed})
    return read_manifest(out_dir / "manifest.json")


# ------------------------------------------------------------ model inputs
def clip_conditions(clip: ClipRecord, indices, ref_index: int) -> ClipConditions:
    """Conditions for generating ``indices`` of ``clip`` from frame ``ref_index``.

    Cameras are expressed relative to the reference camera so the reference
    view always sits at the origin with identity rotation.
    """
    indices = np.asarray(indices, dtype=int)
    H, W = clip.size
    cams = clip.camera.relative_to(ref_index).frames(indices)
    return ClipConditions(
        reference={m: clip.modality(m)[ref_index] for m in ("rgb", "depth", "normal")},
        masks=clip.mask[indices],
        ref_mask=clip.mask[ref_index],
        pose=clip.pose[indices],
        plucker=plucker_embed(cams, H, W),
        extras={"clip_id": clip.clip_id, "indices": indices.tolist(), "ref_index": int(ref_index)},
    )


def clip_targets(clip: ClipRecord, indices, codec, modalities) -> dict[str, torch.Tensor]:
    """Clean latents ``(F, C, h, w)`` per modality; normals stay zero off the people."""
    indices = np.asarray(indices, dtype=int)
    out = {}
    for m in modalities:
        x = codec.encode(clip.modality(m)[indices])
        if m == "normal":
            person = torch.from_numpy(clip.mask[indices] > 0)
            x = x * _latent_mask(person, x.shape[-2:])[:, None]
        out[m] = x
    return out


def _latent_mask(person: torch.Tensor, size) -> torch.Tensor:
    if tuple(person.shape[-2:]) == tuple(size):
        return person.float()
    pooled = torch.nn.functional.adaptive_max_pool2d(person.float()[:, None], tuple(size))
    return pooled[:, 0]
