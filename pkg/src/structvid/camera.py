"""Pinhole cameras, projection helpers and Plücker ray maps.

Extrinsics are world-to-camera ``[R | t]`` in the OpenCV convention (x right,
y down, z forward). Pixel ``(u, v)`` has its centre at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class CameraPose:
    extrinsics: np.ndarray  # (F, 3, 4)
    intrinsic: np.ndarray  # (3, 3)

    def __post_init__(self):
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64)
        if self.extrinsics.ndim == 2:
            self.extrinsics = self.extrinsics[None]
        if self.extrinsics.shape[1:] != (3, 4):
            raise ValueError(f"extrinsics must be (F, 3, 4), got {self.extrinsics.shape}")
        if self.intrinsic.shape != (3, 3):
            raise ValueError(f"intrinsic must be 3x3, got {self.intrinsic.shape}")

    def __len__(self) -> int:
        return self.extrinsics.shape[0]

    @property
    def rotations(self) -> np.ndarray:
        return self.extrinsics[:, :, :3]

    @property
    def translations(self) -> np.ndarray:
        return self.extrinsics[:, :, 3]

    @property
    def centers(self) -> np.ndarray:
        """Camera centres in world coordinates, ``-R^T t``."""
        return -np.einsum("fji,fj->fi", self.rotations, self.translations)

    def validate(self, atol: float = 1e-5) -> None:
        R = self.rotations
        eye = np.broadcast_to(np.eye(3), R.shape)
        if not np.allclose(np.einsum("fji,fjk->fik", R, R), eye, atol=atol):
            raise ValueError("rotation blocks are not orthonormal")
        if np.any(np.linalg.det(R) <= 0):
            raise ValueError("rotation blocks must have determinant +1")
        K = self.intrinsic
        if not np.allclose(np.tril(K, -1), 0.0):
            raise ValueError("intrinsic must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsic matrix is singular")

    def frames(self, indices) -> "CameraPose":
        return CameraPose(self.extrinsics[np.asarray(indices)], self.intrinsic)

    def relative_to(self, index: int) -> "CameraPose":
        """Re-express all frames in the coordinate system of camera ``index``."""
        R0, t0 = self.rotations[index], self.translations[index]
        # world' = R0 world + t0 (camera ``index`` becomes identity)
        R = self.rotations @ R0.T
        t = self.translations - np.einsum("fij,j->fi", R, t0)
        return CameraPose(np.concatenate([R, t[..., None]], axis=-1), self.intrinsic)

    def to_json(self) -> dict:
        return {"intrinsic": self.intrinsic.tolist(), "extrinsics": self.extrinsics.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "CameraPose":
        return cls(np.array(payload["extrinsics"]), np.array(payload["intrinsic"]))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_json()
        payload.update(extra or {})
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "CameraPose":
        return cls.from_json(json.loads(Path(path).read_text()))


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera ``[R | t]`` for a camera at ``center`` looking at ``target``."""
    center, target, up = (np.asarray(v, dtype=np.float64) for v in (center, target, up))
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(-up, z)  # y points down, so "up" is -y
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return np.concatenate([R, (-R @ center)[:, None]], axis=1)


def default_intrinsic(height: int, width: int, fov_x_deg: float = 55.0) -> np.ndarray:
    fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
    return np.array([[fx, 0.0, width / 2], [0.0, fx, height / 2], [0.0, 0.0, 1.0]])


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Homogeneous pixel centres, ``(H, W, 3)``."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def ray_directions(cam: CameraPose, height: int, width: int) -> np.ndarray:
    """Unit world-space ray directions, ``(F, H, W, 3)``."""
    K = cam.intrinsic
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("intrinsic matrix is singular")
    cam_dirs = pixel_grid(height, width) @ np.linalg.inv(K).T
    d = np.einsum("fji,hwj->fhwi", cam.rotations, cam_dirs)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def plucker_embed(cam: CameraPose, height: int, width: int) -> np.ndarray:
    """Per-pixel Plücker coordinates ``(o x d, d)``, shape ``(F, H, W, 6)``."""
    cam.validate()
    d = ray_directions(cam, height, width)
    o = np.broadcast_to(cam.centers[:, None, None, :], d.shape)
    return np.concatenate([np.cross(o, d), d], axis=-1).astype(np.float32)


def project(points: np.ndarray, extrinsic: np.ndarray, intrinsic: np.ndarray):
    """World points ``(..., 3)`` to pixel coordinates ``(..., 2)`` and camera depth."""
    pc = points @ extrinsic[:, :3].T + extrinsic[:, 3]
    z = pc[..., 2]
    uvw = pc @ intrinsic.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[..., :2] / uvw[..., 2:3]
    return uv, z


def unproject(uv: np.ndarray, depth: np.ndarray, extrinsic: np.ndarray, intrinsic: np.ndarray) -> np.ndarray:
    """Pixel coordinates ``(..., 2)`` with camera z-depth to world points."""
    homo = np.concatenate([uv, np.ones_like(uv[..., :1])], axis=-1)
    pc = (homo @ np.linalg.inv(intrinsic).T) * depth[..., None]
    R, t = extrinsic[:, :3], extrinsic[:, 3]
    return (pc - t) @ R


def rotation_about(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(angle_deg)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * Kx + (1 - np.cos(a)) * Kx @ Kx
