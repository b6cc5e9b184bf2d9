"""Clip filtering statistics, keep/reject rules and identity merging."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.cluster.hierarchy import DisjointSet

from .pose import UPPER_BODY, load_keypoints

MIN_CONFIDENCE = 0.5  # c must exceed this
MIN_AREA_RATIO = 0.07  # r must exceed this
MAX_PERSONS = 5.0  # n must not exceed this

MERGE_IOU = 0.5
MERGE_MIN_FRAMES = 3


@dataclass(frozen=True)
class ClipStats:
    c: float  # mean upper-body keypoint confidence
    r: float  # largest single-person share of the frame
    n: float  # mean number of people per frame

    def __post_init__(self):
        for name in ("c", "r", "n"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("r must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


def compute_stats(keypoints: list[list[dict]], masks: np.ndarray) -> ClipStats:
    """Curation triple of a clip.

    ``keypoints`` holds one list of ``{"id", "joints": {name: [u, v, conf]}}``
    per frame. A person counts as present in a frame when at least one of
    its keypoints has positive confidence. Clips without any detection get
    ``c = 0``.
    """
    masks = np.asarray(masks)
    if masks.ndim != 3 or masks.shape[0] == 0 or len(keypoints) == 0:
        raise ValueError("empty clip")
    if len(keypoints) != masks.shape[0]:
        raise ValueError(f"{len(keypoints)} keypoint frames but {masks.shape[0]} mask frames")
    confs = []
    counts = []
    for people in keypoints:
        present = 0
        for person in people:
            joints = person["joints"]
            if any(v[2] > 0 for v in joints.values()):
                present += 1
                confs.extend(joints[j][2] for j in UPPER_BODY if j in joints)
        counts.append(present)
    c = float(np.mean(confs)) if confs else 0.0
    hw = masks.shape[1] * masks.shape[2]
    r = 0.0
    for frame in masks:
        labels, areas = np.unique(frame[frame > 0], return_counts=True)
        if len(labels):
            r = max(r, float(areas.max()) / hw)
    return ClipStats(c=c, r=r, n=float(np.mean(counts)))


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.keep


def filter_clip(stats: ClipStats) -> FilterDecision:
    """Keep iff ``c > 0.5``, ``r > 0.07`` and ``n <= 5``; rejections name the first failing rule."""
    if not stats.c > MIN_CONFIDENCE:
        return FilterDecision(False, "c")
    if not stats.r > MIN_AREA_RATIO:
        return FilterDecision(False, "r")
    if not stats.n <= MAX_PERSONS:
        return FilterDecision(False, "n")
    return FilterDecision(True)


# --------------------------------------------------------------- merging
@dataclass
class MergeResult:
    labels: np.ndarray  # (F, H, W) with dense labels 1..N
    groups: list[list[int]]  # provisional labels per output label, output label = index + 1
    mapping: dict[int, int]  # provisional -> output label

    @property
    def num_identities(self) -> int:
        return len(self.groups)

    @property
    def too_many(self) -> bool:
        return self.num_identities > int(MAX_PERSONS)


def _as_tracks(masks) -> dict[int, np.ndarray]:
    """Accept a dense ``(F, H, W)`` label video or a ``{label: (F, H, W) bool}`` dict."""
    if isinstance(masks, dict):
        tracks = {int(k): np.asarray(v, dtype=bool) for k, v in masks.items()}
        if any(k <= 0 for k in tracks):
            raise ValueError("provisional labels must be positive integers")
        shapes = {v.shape for v in tracks.values()}
        if len(shapes) > 1:
            raise ValueError("all tracks must share one (F, H, W) shape")
        return tracks
    arr = np.asarray(masks)
    if arr.ndim != 3:
        raise ValueError("label video must be (F, H, W)")
    if arr.min(initial=0) < 0:
        raise ValueError("provisional labels must be non-negative")
    return {int(k): arr == k for k in np.unique(arr) if k > 0}


def _iou_frames(a: np.ndarray, b: np.ndarray) -> int:
    """Number of frames where both tracks are present and their IoU exceeds the threshold."""
    inter = np.logical_and(a, b).sum(axis=(1, 2))
    union = np.logical_or(a, b).sum(axis=(1, 2))
    both = a.any(axis=(1, 2)) & b.any(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return int(np.sum(both & (iou > MERGE_IOU)))


def _track_votes(track: list, masks: dict[int, np.ndarray]) -> dict[int, int]:
    """Frames in which a keypoint track's joints mostly fall inside each label."""
    votes: dict[int, int] = {}
    for f, joints in enumerate(track):
        if not joints:
            continue
        tally: dict[int, int] = {}
        for u, v, conf in joints:
            if conf <= MIN_CONFIDENCE:
                continue
            col, row = int(np.floor(u)), int(np.floor(v))
            for lab, m in masks.items():
                if 0 <= row < m.shape[1] and 0 <= col < m.shape[2] and m[f, row, col]:
                    tally[lab] = tally.get(lab, 0) + 1
        if tally:
            best = max(tally.values())
            winners = [lab for lab, cnt in tally.items() if cnt == best]
            if len(winners) == 1:
                votes[winners[0]] = votes.get(winners[0], 0) + 1
    return votes


def _first_seen(m: np.ndarray) -> tuple[int, int]:
    frames = np.flatnonzero(m.any(axis=(1, 2)))
    f = int(frames[0])
    return f, int(np.flatnonzero(m[f].ravel())[0])


def merge_identities(masks, keypoint_tracks: list | None = None) -> MergeResult:
    """Unify fragmented provisional tracks into persistent identities.

    Two provisional tracks are merged when their masks overlap with IoU above
    0.5 on at least 3 frames where both are present. Afterwards a keypoint
    track (per-frame list of ``(u, v, conf)`` joints, only confident joints
    count) links every group it lands inside on at least 3 frames; this step
    repeats on the merged groups until nothing changes. Links are closed
    transitively with union-find.
    Output labels are numbered 1..N by first appearance (frame, then
    raster position); a pixel claimed by several groups goes to the lowest
    output label.
    """
    tracks = _as_tracks(masks)
    if not tracks:
        if isinstance(masks, dict):
            raise ValueError("no provisional tracks given")
        return MergeResult(labels=np.zeros(np.asarray(masks).shape, np.uint8), groups=[], mapping={})
    labels = sorted(tracks)
    ds = DisjointSet(labels)

    def group_masks():
        out: dict[int, np.ndarray] = {}
        for subset in ds.subsets():
            root = min(subset)
            out[root] = np.logical_or.reduce([tracks[k] for k in sorted(subset)])
        return out

    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            if _iou_frames(tracks[a], tracks[b]) >= MERGE_MIN_FRAMES:
                ds.merge(a, b)

    changed = bool(keypoint_tracks)
    while changed:
        changed = False
        gm = group_masks()
        for track in keypoint_tracks:
            votes = _track_votes(track, gm)
            linked = sorted(lab for lab, n in votes.items() if n >= MERGE_MIN_FRAMES)
            for a, b in zip(linked, linked[1:]):
                if not ds.connected(a, b):
                    ds.merge(a, b)
                    changed = True

    gm = group_masks()
    shape = next(iter(tracks.values())).shape
    ordered = sorted(gm, key=lambda root: _first_seen(gm[root]))
    out = np.zeros(shape, dtype=np.uint8 if len(ordered) < 256 else np.int32)
    groups, mapping = [], {}
    for new, root in enumerate(ordered, start=1):
        members = sorted(ds.subset(root))
        groups.append(members)
        for k in members:
            mapping[k] = new
    for new in range(len(ordered), 0, -1):  # lowest label painted last wins
        out[gm[ordered[new - 1]]] = new
    return MergeResult(labels=out, groups=groups, mapping=mapping)


def keypoint_tracks(keypoints: list[list[dict]]) -> list[list[list]]:
    """Regroup per-frame keypoint lists into per-person tracks keyed by person id."""
    ids = sorted({p["id"] for frame in keypoints for p in frame})
    tracks = []
    for pid in ids:
        track = []
        for frame in keypoints:
            person = next((p for p in frame if p["id"] == pid), None)
            track.append([] if person is None else [tuple(v) for v in person["joints"].values()])
        tracks.append(track)
    return tracks


# --------------------------------------------------------------- datasets
def curate_clip(keypoints: list[list[dict]], masks: np.ndarray) -> dict:
    """Stats, merged identity count and keep/reject decision for one clip.

    A clip whose merged identities exceed the table size is rejected with
    reason ``"identities"`` even when its per-frame statistics pass.
    """
    stats = compute_stats(keypoints, masks)
    decision = filter_clip(stats)
    merged = merge_identities(masks, keypoint_tracks(keypoints))
    if decision.keep and merged.too_many:
        decision = FilterDecision(False, "identities")
    return {"stats": stats.to_json(), "identities": merged.num_identities,
            "keep": decision.keep, "reason": decision.reason}


def curate_dataset(data_dir, out_manifest, report_path=None) -> dict:
    """Apply the keep/reject rules to every clip under ``data_dir/clips``."""
    from .dataset import write_manifest  # dataset imports this module

    data_dir = Path(data_dir)
    rows, kept = [], []
    for clip_dir in sorted(p for p in (data_dir / "clips").iterdir() if p.is_dir()):
        mask_files = sorted(clip_dir.glob("mask_*.png"))
        kp_file = clip_dir / "keypoints.json"
        if not mask_files or not kp_file.is_file():
            rows.append({"id": clip_dir.name, "keep": False, "reason": "missing annotations"})
            continue
        masks = np.stack([np.array(Image.open(f)) for f in mask_files])
        keypoints = load_keypoints(kp_file)
        try:
            row = {"id": clip_dir.name, **curate_clip(keypoints, masks)}
        except ValueError as exc:
            row = {"id": clip_dir.name, "keep": False, "reason": f"invalid: {exc}"}
        rows.append(row)
        if row["keep"]:
            with Image.open(mask_files[0]) as im:
                w, h = im.size
            kept.append({"id": clip_dir.name, "frames": len(mask_files), "height": h, "width": w,
                         "n": int(np.count_nonzero(np.unique(masks))), "stats": row["stats"]})
    write_manifest(out_manifest, data_dir, kept, {"curated": True})
    report = {"clips": rows, "kept": len(kept), "rejected": len(rows) - len(kept),
              "thresholds": {"c": f"> {MIN_CONFIDENCE}", "r": f"> {MIN_AREA_RATIO}", "n": f"<= {MAX_PERSONS:g}"}}
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report, indent=1))
    return report
