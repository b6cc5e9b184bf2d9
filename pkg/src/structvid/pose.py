"""2D skeletons: joint layout, keypoint files and the deterministic bone renderer."""

from __future__ import annotations

import colorsys
import json
from pathlib import Path

import numpy as np

JOINTS = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}
UPPER_BODY = ("head", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist")

BONES = (
    ("head", "neck"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("neck", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
)
# one fixed, fully saturated hue per bone
BONE_COLORS = tuple(colorsys.hsv_to_rgb(i / len(BONES), 1.0, 1.0) for i in range(len(BONES)))

MIN_CONFIDENCE = 0.1


def line_width(height: int) -> float:
    """4 px at 512 rows, scaled with the image height, never thinner than 1 px."""
    return max(1.0, 4.0 * height / 512.0)


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(px - a, axis=-1)
    s = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(px - (a + s[..., None] * ab), axis=-1)


def render_skeletons(people: list[dict], height: int, width: int) -> np.ndarray:
    """Draw every person's bones onto a black ``(H, W, 3)`` canvas in [0, 1].

    ``people`` holds ``{"joints": {name: [u, v, conf]}}`` entries. Bones whose
    endpoints fall below ``MIN_CONFIDENCE`` are skipped; later bones overwrite
    earlier ones, people are drawn in list order.
    """
    canvas = np.zeros((height, width, 3), dtype=np.float32)
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    px = np.stack([u, v], axis=-1)
    half = line_width(height) / 2.0
    for person in people:
        joints = person["joints"]
        for (ja, jb), color in zip(BONES, BONE_COLORS):
            if ja not in joints or jb not in joints:
                continue
            a, b = np.asarray(joints[ja], float), np.asarray(joints[jb], float)
            if a[2] < MIN_CONFIDENCE or b[2] < MIN_CONFIDENCE:
                continue
            hit = _segment_distance(px, a[:2], b[:2]) <= half
            canvas[hit] = color
    return canvas


def render_pose_video(keypoints: list[list[dict]], height: int, width: int) -> np.ndarray:
    return np.stack([render_skeletons(frame, height, width) for frame in keypoints])


def save_keypoints(path: str | Path, keypoints: list[list[dict]]) -> None:
    payload = {"joint_names": list(JOINTS), "frames": keypoints}
    Path(path).write_text(json.dumps(payload))


def load_keypoints(path: str | Path) -> list[list[dict]]:
    payload = json.loads(Path(path).read_text())
    return payload["frames"]
