"""Procedural multi-entity scenes with exact ground truth.

A software ray caster renders a box-shaped room, articulated stick figures
(chains of spheres), flat cards and rigid props. Every frame yields shaded RGB,
z-depth, camera-space normals, identity labels, 2D keypoints and the positions
of static background landmarks. World axes follow the camera convention: x
right, y down, z forward; the floor is the plane ``y = FLOOR_Y``.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .camera import CameraPose, default_intrinsic, look_at, pixel_grid, project, unproject
from .pose import JOINTS, render_pose_video

FLOOR_Y = 1.2
CEIL_Y = -3.0
BACK_Z = 9.0
SIDE_X = 5.0
LIGHT_DIR = np.array([-0.3, -1.0, -0.6]) / np.linalg.norm([-0.3, -1.0, -0.6])
AMBIENT = 0.35
MAX_ENTITIES = 5

# joint layout in units of figure height: (lateral offset, height above floor)
_REST = {
    "head": (0.0, 0.90), "neck": (0.0, 0.78),
    "r_shoulder": (-0.13, 0.76), "r_elbow": (-0.17, 0.60), "r_wrist": (-0.19, 0.45),
    "l_shoulder": (0.13, 0.76), "l_elbow": (0.17, 0.60), "l_wrist": (0.19, 0.45),
    "r_hip": (-0.08, 0.48), "r_knee": (-0.09, 0.26), "r_ankle": (-0.09, 0.04),
    "l_hip": (0.08, 0.48), "l_knee": (0.09, 0.26), "l_ankle": (0.09, 0.04),
}
# (joint a, joint b, radius as a fraction of figure height)
_LIMBS = (
    ("neck", "r_shoulder", 0.05), ("r_shoulder", "r_elbow", 0.05), ("r_elbow", "r_wrist", 0.045),
    ("neck", "l_shoulder", 0.05), ("l_shoulder", "l_elbow", 0.05), ("l_elbow", "l_wrist", 0.045),
    ("r_hip", "r_knee", 0.06), ("r_knee", "r_ankle", 0.055),
    ("l_hip", "l_knee", 0.06), ("l_knee", "l_ankle", 0.055),
)
_HEAD_RADIUS = 0.1
_TORSO_RADIUS = 0.12


@dataclass(frozen=True)
class EntitySpec:
    kind: str = "figure"  # figure | panel
    hue: float = 0.0
    height: float = 1.7
    x: float = 0.0
    z: float = 3.5
    vx: float = 0.0  # displacement per frame
    vz: float = 0.0
    phase: float = 0.0
    width: float = 0.6  # panels only


@dataclass(frozen=True)
class PropSpec:
    shape: str = "sphere"  # sphere | box
    size: float = 0.15
    hue: float = 0.1
    holder: int | None = 0  # entity index holding it; None -> rests at ``position``
    receiver: int | None = None  # entity that takes it over at the clip midpoint
    position: tuple[float, float, float] = (0.0, FLOOR_Y - 0.15, 3.0)


@dataclass(frozen=True)
class SceneSpec:
    entities: tuple[EntitySpec, ...] = ()
    props: tuple[PropSpec, ...] = ()
    motion: str = "walk"  # walk | swap | handoff | idle
    camera: str = "static"  # static | orbit | dolly
    camera_amount: float = 0.0  # degrees for orbit, world units for dolly
    frames: int = 16
    height: int = 64
    width: int = 64
    wall_hue: float = 0.6
    floor_hue: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if len(self.entities) > MAX_ENTITIES:
            raise ValueError(f"at most {MAX_ENTITIES} entities per scene, got {len(self.entities)}")
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise ValueError("scene needs at least one frame and 8x8 pixels")
        if self.motion not in ("walk", "swap", "handoff", "idle"):
            raise ValueError(f"unknown motion script {self.motion!r}")
        if self.motion in ("swap", "handoff") and len(self.entities) < 2:
            raise ValueError(f"{self.motion} needs two entities")
        if self.camera not in ("static", "orbit", "dolly"):
            raise ValueError(f"unknown camera script {self.camera!r}")
        for e in self.entities:
            if e.kind not in ("figure", "panel"):
                raise ValueError(f"unknown entity kind {e.kind!r}")
        for p in self.props:
            if p.shape not in ("sphere", "box"):
                raise ValueError(f"unknown prop shape {p.shape!r}")
            for idx in (p.holder, p.receiver):
                if idx is not None and not 0 <= idx < len(self.entities):
                    raise ValueError("prop refers to a missing entity")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["entities"] = tuple(EntitySpec(**e) for e in d.get("entities", ()))
        d["props"] = tuple(PropSpec(**{**p, "position": tuple(p["position"])}) for p in d.get("props", ()))
        return cls(**d)


@dataclass
class ClipRecord:
    """One rendered (or loaded) clip with all modalities and annotations.

    ``rgb``/``normal``/``pose`` are ``(F, H, W, 3)`` in [0, 1]; ``depth`` is
    ``(F, H, W)`` per-clip normalised inverse depth in [0, 1] with
    ``depth_range = (inv_min, inv_max)`` to recover metric depth; ``mask`` is
    ``(F, H, W)`` uint8 identity labels. ``tracks`` holds static landmark
    observations ``uv (F, L, 2)`` and ``visible (F, L)``.
    """

    clip_id: str
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    pose: np.ndarray
    keypoints: list
    camera: CameraPose
    depth_range: tuple[float, float]
    tracks: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.rgb.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1:3]

    def metric_depth(self) -> np.ndarray:
        lo, hi = self.depth_range
        return 1.0 / (lo + self.depth.astype(np.float64) * (hi - lo))

    def modality(self, name: str) -> np.ndarray:
        """Three-channel ``(F, H, W, 3)`` video in [0, 1] for the diffusion boundary."""
        if name == "rgb":
            return self.rgb
        if name == "depth":
            return np.repeat(self.depth[..., None], 3, axis=-1)
        if name == "normal":
            return self.normal
        raise ValueError(f"unknown modality {name!r}")


# ----------------------------------------------------------------- geometry
def figure_joints(e: EntitySpec, frame: int, origin: tuple[float, float]) -> dict[str, np.ndarray]:
    """World positions of a figure's joints at ``frame``."""
    x0, z0 = origin
    swing = np.sin(e.phase + 0.8 * frame)
    out = {}
    for name, (lat, up) in _REST.items():
        dz = 0.0
        if name in ("r_elbow", "r_wrist", "l_knee", "l_ankle"):
            dz = 0.12 * swing * (1.0 if "wrist" in name or "ankle" in name else 0.5)
        elif name in ("l_elbow", "l_wrist", "r_knee", "r_ankle"):
            dz = -0.12 * swing * (1.0 if "wrist" in name or "ankle" in name else 0.5)
        out[name] = np.array([x0 + lat * e.height, FLOOR_Y - up * e.height, z0 + dz * e.height])
    return out


def figure_spheres(joints: dict[str, np.ndarray], h: float) -> tuple[np.ndarray, np.ndarray]:
    centers, radii = [joints["head"]], [_HEAD_RADIUS * h]
    hip_mid = 0.5 * (joints["r_hip"] + joints["l_hip"])
    bones = [("neck", hip_mid, _TORSO_RADIUS)] + [(a, joints[b], r) for a, b, r in _LIMBS]
    for a, b_pos, r in bones:
        a_pos = joints[a]
        rad = r * h
        n = max(2, int(np.ceil(np.linalg.norm(b_pos - a_pos) / (0.6 * rad))) + 1)
        for s in np.linspace(0.0, 1.0, n):
            centers.append(a_pos + s * (b_pos - a_pos))
            radii.append(rad)
    for side in ("r_hip", "l_hip"):
        centers.append(joints[side])
        radii.append(0.06 * h)
    return np.array(centers), np.array(radii)


def entity_origins(spec: SceneSpec, frame: int) -> list[tuple[float, float]]:
    F = max(spec.frames - 1, 1)
    s = frame / F
    out = []
    for i, e in enumerate(spec.entities):
        if spec.motion == "idle":
            out.append((e.x, e.z))
        elif spec.motion == "swap" and i < 2:
            other = spec.entities[1 - i]
            out.append((e.x + s * (other.x - e.x), e.z))
        elif spec.motion == "handoff" and i < 2:
            other = spec.entities[1 - i]
            side = np.sign(e.x - other.x) or 1.0
            target = 0.5 * (e.x + other.x) + side * 0.3 * e.height
            meet = 1.0 - abs(2.0 * s - 1.0)  # approach, then part again
            out.append((e.x + meet * (target - e.x), e.z))
        else:
            out.append((e.x + e.vx * frame, e.z + e.vz * frame))
    return out


def camera_path(spec: SceneSpec) -> CameraPose:
    H, W, F = spec.height, spec.width, spec.frames
    # level gaze, so the static camera's image plane is parallel to the back wall
    target = np.array([0.0, -0.1, 4.5])
    base = np.array([0.0, -0.1, 0.0])
    ext = []
    for f in range(F):
        s = f / max(F - 1, 1)
        if spec.camera == "orbit":
            ang = np.deg2rad(spec.camera_amount * (s - 0.5))
            off = base - target
            rot = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0], [-np.sin(ang), 0, np.cos(ang)]])
            center = target + rot @ off
            ext.append(look_at(center, target))
        elif spec.camera == "dolly":
            fwd = (target - base) / np.linalg.norm(target - base)
            ext.append(look_at(base + fwd * spec.camera_amount * s, target + fwd * spec.camera_amount * s))
        else:
            ext.append(look_at(base, target))
    return CameraPose(np.stack(ext), default_intrinsic(H, W))


def hue_rgb(hue: float, sat: float = 0.75, val: float = 0.9) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def landmark_points() -> np.ndarray:
    floor = [(x, FLOOR_Y, z) for x in np.arange(-3.0, 3.01, 1.0) for z in np.arange(2.0, 7.01, 1.0)]
    wall = [(x, y, BACK_Z) for x in np.arange(-4.0, 4.01, 1.0) for y in np.arange(-2.0, 0.51, 0.5)]
    return np.array(floor + wall, dtype=np.float64)


# ---------------------------------------------------------------- ray casting
def _intersect_room(o: np.ndarray, d: np.ndarray):
    planes = [  # (axis, value, outward-facing normal seen from inside)
        (1, FLOOR_Y, np.array([0.0, -1.0, 0.0])),
        (1, CEIL_Y, np.array([0.0, 1.0, 0.0])),
        (2, BACK_Z, np.array([0.0, 0.0, -1.0])),
        (0, -SIDE_X, np.array([1.0, 0.0, 0.0])),
        (0, SIDE_X, np.array([-1.0, 0.0, 0.0])),
    ]
    t_best = np.full(d.shape[0], np.inf)
    which = np.full(d.shape[0], -1)
    for k, (axis, val, _) in enumerate(planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (val - o[axis]) / d[:, axis]
        t = np.where(t > 1e-6, t, np.inf)
        better = t < t_best
        t_best[better] = t[better]
        which[better] = k
    normals = np.stack([p[2] for p in planes])[which]
    return t_best, normals, which


def _intersect_spheres(o, d, centers, radii):
    """Nearest hit per ray: returns (t, sphere index)."""
    if len(centers) == 0:
        return np.full(d.shape[0], np.inf), np.zeros(d.shape[0], dtype=int)
    oc = centers - o[None, :]  # (S, 3)
    b = d @ oc.T  # (P, S)
    c = (np.sum(oc**2, axis=-1) - radii**2)[None, :]
    disc = b**2 - c
    with np.errstate(invalid="ignore"):
        t = b - np.sqrt(disc)
    t = np.where((disc >= 0) & (t > 1e-6), t, np.inf)
    idx = np.argmin(t, axis=1)
    return t[np.arange(d.shape[0]), idx], idx


def _intersect_boxes(o, d, lows, highs):
    n = d.shape[0]
    if len(lows) == 0:
        return np.full(n, np.inf), np.zeros((n, 3)), np.zeros(n, dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lows[None] - o[None, None]) * inv[:, None]
        t2 = (highs[None] - o[None, None]) * inv[:, None]
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.nan_to_num(tmin, nan=-np.inf)
    tmax = np.nan_to_num(tmax, nan=np.inf)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    ok = (t_enter <= t_exit) & (t_enter > 1e-6)
    t = np.where(ok, t_enter, np.inf)
    idx = np.argmin(t, axis=1)
    tb = t[np.arange(n), idx]
    axis = np.argmax(tmin[np.arange(n), idx], axis=-1)
    normals = np.zeros((n, 3))
    sign = -np.sign(d[np.arange(n), axis])
    normals[np.arange(n), axis] = sign
    return tb, normals, idx


def _intersect_panels(o, d, panels):
    """Camera-facing rectangles ``(x_c, z, width, height)`` standing on the floor."""
    n = d.shape[0]
    t_best = np.full(n, np.inf)
    idx = np.zeros(n, dtype=int)
    for k, (xc, z, w, h) in enumerate(panels):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z - o[2]) / d[:, 2]
        p = o[None] + t[:, None] * d
        inside = (t > 1e-6) & (np.abs(p[:, 0] - xc) <= w / 2) & (p[:, 1] <= FLOOR_Y) & (p[:, 1] >= FLOOR_Y - h)
        t = np.where(inside, t, np.inf)
        better = t < t_best
        t_best[better] = t[better]
        idx[better] = k
    return t_best, idx


@dataclass
class _FrameGeometry:
    spheres: np.ndarray
    radii: np.ndarray
    sphere_label: np.ndarray  # 1-based entity label, 0 for props
    sphere_albedo: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    box_albedo: np.ndarray
    panels: list
    panel_label: list
    panel_albedo: list
    joints: dict  # entity index -> joint dict


def _frame_geometry(spec: SceneSpec, frame: int, only: set[int] | None = None) -> _FrameGeometry:
    origins = entity_origins(spec, frame)
    S, R, L, A, panels, plabel, palb, joints = [], [], [], [], [], [], [], {}
    for i, (e, org) in enumerate(zip(spec.entities, origins)):
        col = hue_rgb(e.hue)
        if e.kind == "panel":
            if only is None or i in only:
                panels.append((org[0], org[1], e.width, e.height))
                plabel.append(i + 1)
                palb.append(col)
            continue
        j = figure_joints(e, frame, org)
        joints[i] = j
        if only is not None and i not in only:
            continue
        c, r = figure_spheres(j, e.height)
        S.append(c)
        R.append(r)
        L.append(np.full(len(r), i + 1))
        A.append(np.repeat(col[None], len(r), axis=0))
    box_lo, box_hi, box_alb = [], [], []
    half = (spec.frames - 1) / 2.0
    for p in spec.props:
        if only is not None and -1 not in only:
            continue
        holder = p.holder
        if p.receiver is not None and frame > half:
            holder = p.receiver
        if holder is not None and holder in joints:
            hand = "r_wrist" if spec.entities[holder].x <= 0 else "l_wrist"
            pos = joints[holder][hand] + np.array([0.0, p.size, -0.05])
        elif holder is not None:
            org = origins[holder]
            pos = np.array([org[0], FLOOR_Y - 0.5 * spec.entities[holder].height, org[1] - 0.2])
        else:
            pos = np.asarray(p.position, dtype=np.float64)
        col = hue_rgb(p.hue, 0.5, 0.8)
        if p.shape == "sphere":
            S.append(pos[None])
            R.append(np.array([p.size]))
            L.append(np.array([0]))
            A.append(col[None])
        else:
            box_lo.append(pos - p.size)
            box_hi.append(pos + p.size)
            box_alb.append(col)
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return _FrameGeometry(
        spheres=cat(S, (0, 3)), radii=cat(R, (0,)), sphere_label=cat(L, (0,)).astype(int),
        sphere_albedo=cat(A, (0, 3)), box_lo=np.array(box_lo).reshape(-1, 3), box_hi=np.array(box_hi).reshape(-1, 3),
        box_albedo=np.array(box_alb).reshape(-1, 3), panels=panels, panel_label=plabel, panel_albedo=palb,
        joints=joints,
    )


def _room_albedo(spec: SceneSpec, points: np.ndarray, which: np.ndarray) -> np.ndarray:
    wall = hue_rgb(spec.wall_hue, 0.35, 0.85)
    floor = hue_rgb(spec.floor_hue, 0.45, 0.75)
    checker = (np.floor(points[:, 0]) + np.floor(points[:, 2])) % 2
    floor_col = floor[None] * (1.0 - 0.12 * checker[:, None])
    out = np.repeat(wall[None], len(points), axis=0)
    out[which == 0] = floor_col[which == 0]
    out[which == 1] = wall * 0.9
    return out


def render_layers(spec: SceneSpec, cam: CameraPose, frame: int, only: set[int] | None = None, room: bool = True):
    """Ray-cast one frame; returns per-pixel z-depth, world normal, label, albedo, hit kind.

    ``only`` restricts entities (0-based indices; ``-1`` selects props) and
    ``room=False`` drops the background, which the occlusion oracle uses to
    render entities in isolation.
    """
    H, W = spec.height, spec.width
    ext = cam.extrinsics[frame]
    R = ext[:, :3]
    o = cam.centers[frame]
    dirs_cam = pixel_grid(H, W).reshape(-1, 3) @ np.linalg.inv(cam.intrinsic).T
    d = dirs_cam @ R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    n_rays = d.shape[0]
    geo = _frame_geometry(spec, frame, only)

    t_best = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    label = np.zeros(n_rays, dtype=np.int64)
    albedo = np.zeros((n_rays, 3))
    kind = np.zeros(n_rays, dtype=np.int64)  # 0 none, 1 room, 2 entity, 3 prop
    if room:
        t_room, n_room, which = _intersect_room(o, d)
        t_best = t_room
        normal = n_room
        pts = o[None] + t_room[:, None] * d
        albedo = _room_albedo(spec, pts, which)
        kind = np.where(np.isfinite(t_room), 1, 0)

    t_s, i_s = _intersect_spheres(o, d, geo.spheres, geo.radii)
    hit = t_s < t_best
    if hit.any():
        c = geo.spheres[i_s[hit]]
        p = o[None] + t_s[hit, None] * d[hit]
        normal[hit] = (p - c) / geo.radii[i_s[hit], None]
        label[hit] = geo.sphere_label[i_s[hit]]
        albedo[hit] = geo.sphere_albedo[i_s[hit]]
        kind[hit] = np.where(label[hit] > 0, 2, 3)
        t_best = np.where(hit, t_s, t_best)

    t_b, n_b, i_b = _intersect_boxes(o, d, geo.box_lo, geo.box_hi)
    hit = t_b < t_best
    if hit.any():
        normal[hit] = n_b[hit]
        label[hit] = 0
        albedo[hit] = geo.box_albedo[i_b[hit]]
        kind[hit] = 3
        t_best = np.where(hit, t_b, t_best)

    if geo.panels:
        t_p, i_p = _intersect_panels(o, d, geo.panels)
        hit = t_p < t_best
        if hit.any():
            normal[hit] = np.array([0.0, 0.0, -1.0])
            label[hit] = np.asarray(geo.panel_label)[i_p[hit]]
            albedo[hit] = np.asarray(geo.panel_albedo)[i_p[hit]]
            kind[hit] = 2
            t_best = np.where(hit, t_p, t_best)

    zdepth = t_best * (d @ R[2])
    return {
        "depth": zdepth.reshape(H, W), "normal": normal.reshape(H, W, 3), "label": label.reshape(H, W),
        "albedo": albedo.reshape(H, W, 3), "kind": kind.reshape(H, W), "joints": geo.joints,
    }


def _keypoints(spec: SceneSpec, cam: CameraPose, frame: int, joints: dict, label: np.ndarray) -> list[dict]:
    H, W = spec.height, spec.width
    people = []
    for i, jd in sorted(joints.items()):
        entry = {}
        for name in JOINTS:
            uv, z = project(jd[name][None], cam.extrinsics[frame], cam.intrinsic)
            u, v = float(uv[0, 0]), float(uv[0, 1])
            col, row = int(np.floor(u)), int(np.floor(v))
            if z[0] <= 0 or not (0 <= col < W and 0 <= row < H):
                conf = 0.0
            elif label[row, col] == i + 1:
                conf = 1.0
            else:
                conf = 0.5  # occluded
            entry[name] = [u, v, conf]
        people.append({"id": i + 1, "joints": entry})
    return people


def render_clip(spec: SceneSpec, clip_id: str = "clip") -> ClipRecord:
    """Render every frame of ``spec``; pure and deterministic."""
    spec.validate()
    cam = camera_path(spec)
    F, H, W = spec.frames, spec.height, spec.width
    rgb = np.zeros((F, H, W, 3), np.float32)
    zdepth = np.zeros((F, H, W))
    normal = np.zeros((F, H, W, 3), np.float32)
    mask = np.zeros((F, H, W), np.uint8)
    keypoints = []
    landmarks = landmark_points()
    uv_tracks = np.zeros((F, len(landmarks), 2))
    visible = np.zeros((F, len(landmarks)), bool)
    for f in range(F):
        layers = render_layers(spec, cam, f)
        n_world = layers["normal"]
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(-(n_world @ LIGHT_DIR), 0.0, None)
        rgb[f] = np.clip(layers["albedo"] * shade[..., None], 0.0, 1.0)
        zdepth[f] = layers["depth"]
        mask[f] = layers["label"]
        person = layers["kind"] == 2
        # camera-space normal with x right, y up, z towards the viewer
        R = cam.extrinsics[f][:, :3]
        n_cam = n_world @ R.T
        n_view = n_cam * np.array([1.0, -1.0, -1.0])
        normal[f] = np.where(person[..., None], (n_view + 1.0) / 2.0, 0.0)
        keypoints.append(_keypoints(spec, cam, f, layers["joints"], layers["label"]))
        uv, z = project(landmarks, cam.extrinsics[f], cam.intrinsic)
        uv_tracks[f] = uv
        col = np.floor(uv[:, 0]).astype(int)
        row = np.floor(uv[:, 1]).astype(int)
        inside = (z > 0) & (col >= 1) & (col < W - 1) & (row >= 1) & (row < H - 1)
        ok = np.zeros(len(landmarks), bool)
        rr, cc = row[inside], col[inside]
        ok[inside] = (layers["kind"][rr, cc] == 1) & (np.abs(layers["depth"][rr, cc] - z[inside]) < 1e-3 * z[inside] + 1e-2)
        visible[f] = ok
    inv = 1.0 / zdepth
    lo, hi = float(inv.min()), float(inv.max())
    depth = ((inv - lo) / max(hi - lo, 1e-12)).astype(np.float32)
    pose = render_pose_video(keypoints, H, W)
    return ClipRecord(
        clip_id=clip_id, rgb=rgb, depth=depth, normal=normal, mask=mask, pose=pose, keypoints=keypoints,
        camera=cam, depth_range=(lo, hi), tracks={"uv": uv_tracks, "visible": visible},
        meta={"scene": spec.to_json(), "n_entities": len(spec.entities)},
    )


# ------------------------------------------------------------ random scenes
def random_scene(seed: int, frames: int = 16, height: int = 64, width: int = 64,
                 max_entities: int = 3, min_entities: int = 1) -> SceneSpec:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_entities, max_entities + 1))
    motions = ["walk", "idle"] + (["swap", "handoff"] if n >= 2 else [])
    motion = str(rng.choice(motions))
    xs = np.sort(rng.uniform(-1.1, 1.1, size=n)) if n else []
    hues = (rng.uniform() + np.arange(n) / max(n, 1)) % 1.0
    entities = []
    for i in range(n):
        entities.append(EntitySpec(
            kind="figure", hue=float(hues[i]), height=float(rng.uniform(1.5, 1.8)),
            x=float(xs[i]), z=float(rng.uniform(2.6, 3.6)),
            vx=float(rng.uniform(-0.04, 0.04)), vz=float(rng.uniform(-0.02, 0.02)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    if motion == "swap":
        # the pair must actually cross, one in front of the other
        a, b = entities[0], entities[1]
        entities[0] = EntitySpec(**{**asdict(a), "x": -0.7, "z": 2.7})
        entities[1] = EntitySpec(**{**asdict(b), "x": 0.7, "z": 3.5})
    props = []
    if n and (motion == "handoff" or rng.uniform() < 0.3):
        props.append(PropSpec(
            shape=str(rng.choice(["sphere", "box"])), size=float(rng.uniform(0.1, 0.16)),
            hue=float(rng.uniform()), holder=0, receiver=1 if motion == "handoff" else None,
        ))
    camera = str(rng.choice(["static", "orbit", "dolly"]))
    amount = {"static": 0.0, "orbit": float(rng.uniform(-8, 8)), "dolly": float(rng.uniform(-0.4, 0.6))}[camera]
    return SceneSpec(
        entities=tuple(entities), props=tuple(props), motion=motion, camera=camera, camera_amount=amount,
        frames=frames, height=height, width=width, wall_hue=float(rng.uniform()),
        floor_hue=float(rng.uniform()), seed=seed,
    )


# ------------------------------------------------------------ consistency
@dataclass(frozen=True)
class ReprojectionStats:
    median: float
    mean: float
    max: float
    count: int


def reproject_check(clip: ClipRecord, extrinsics: np.ndarray | None = None) -> ReprojectionStats:
    """Carry static landmarks from frame ``f`` to ``f + 1`` through depth and cameras.

    Each landmark visible in both frames is lifted from its pixel in frame
    ``f`` using the clip's depth (bilinear lookup) and camera ``f``, projected
    with camera ``f + 1`` and compared with where it was actually observed.
    ``extrinsics`` overrides the clip's cameras, which is how corrupted poses
    are audited.
    """
    if clip.depth is None or clip.camera is None:
        raise ValueError(f"{clip.clip_id}: reprojection needs depth and cameras")
    if not clip.tracks:
        raise ValueError(f"{clip.clip_id}: no static landmark tracks recorded")
    if clip.frames < 2:
        raise ValueError(f"{clip.clip_id}: reprojection needs at least two frames")
    ext = clip.camera.extrinsics if extrinsics is None else np.asarray(extrinsics, float)
    K = clip.camera.intrinsic
    uv, visible = np.asarray(clip.tracks["uv"]), np.asarray(clip.tracks["visible"], bool)
    z = clip.metric_depth()
    errors = []
    for f in range(clip.frames - 1):
        both = visible[f] & visible[f + 1]
        if not both.any():
            continue
        src = uv[f, both]
        # depth is sampled at pixel centres
        coords = np.stack([src[:, 1] - 0.5, src[:, 0] - 0.5])
        d = map_coordinates(z[f], coords, order=1, mode="nearest")
        world = unproject(src, d, ext[f], K)
        dst, _ = project(world, ext[f + 1], K)
        errors.append(np.linalg.norm(dst - uv[f + 1, both], axis=-1))
    if not errors:
        raise ValueError(f"{clip.clip_id}: no landmark is visible in two consecutive frames")
    err = np.concatenate(errors)
    return ReprojectionStats(float(np.median(err)), float(err.mean()), float(err.max()), int(err.size))
