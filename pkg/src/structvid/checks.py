"""Fast self-checks of the core invariants, run by ``structvid check``."""

from __future__ import annotations

import numpy as np
import torch

from .camera import CameraPose, default_intrinsic, look_at, plucker_embed, rotation_about
from .conditioning import ConditioningBundle
from .curation import ClipStats, filter_clip
from .denoiser import DenoiserConfig, ModalityConfig, StructuralDenoiser
from .diffusion import forward_diffuse, linear_schedule, reconstruct_from_v, v_target
from .evaluation import psnr, ssim
from .identity import IdEmbeddingTable, expand_masks
from .scene import EntitySpec, SceneSpec, render_clip, reproject_check


def check_v_algebra() -> tuple[bool, str]:
    sched = linear_schedule()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x0, eps = rng.standard_normal((2, 64))
        t = int(rng.integers(1, sched.T + 1))
        xt = forward_diffuse(sched, x0, t, eps)
        x0_hat, eps_hat = reconstruct_from_v(sched, xt, v_target(sched, x0, eps, t), t)
        worst = max(worst, np.abs(x0_hat - x0).max(), np.abs(eps_hat - eps).max())
    vp = np.abs(sched.alpha**2 + sched.sigma**2 - 1).max()
    return worst < 1e-5 and vp < 1e-6, f"round-trip error {worst:.2e}, variance error {vp:.2e}"


def _tiny_cond(b=1, f=2, size=16, seed=0) -> ConditioningBundle:
    g = torch.Generator().manual_seed(seed)
    return ConditioningBundle(
        reference={"rgb": torch.randn(b, 3, size, size, generator=g)}, frames=f,
        masks=torch.randint(0, 4, (b, f, size, size), generator=g),
        ref_masks=torch.randint(0, 4, (b, size, size), generator=g),
        pose=torch.rand(b, f, 3, size, size, generator=g),
        plucker=torch.randn(b, f, 6, size, size, generator=g),
        modalities=("rgb",),
    )


def check_zero_init() -> tuple[bool, str]:
    torch.manual_seed(0)
    model = StructuralDenoiser(DenoiserConfig(base_channels=16, channel_mult=(1, 2)), ModalityConfig(("rgb",)))
    model.eval()
    cond = _tiny_cond()
    x = {"rgb": torch.randn(1, 2, 3, 16, 16)}
    t = torch.tensor([500])
    with torch.no_grad():
        a = model(x, t, cond)["rgb"]
        b = model(x, t, cond.without("masks", "ref_masks", "pose", "plucker"))["rgb"]
    same = torch.equal(a, b)
    return same, "bit-identical" if same else f"max diff {float((a - b).abs().max()):.2e}"


def check_id_map() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    for _ in range(10):
        table = IdEmbeddingTable(5, 4)
        masks = rng.integers(0, 6, size=(2, 6, 7))
        out = expand_masks(masks, table).detach().numpy()
        w = table.weight.detach().numpy()
        for idx in np.ndindex(masks.shape):
            want = w[masks[idx] - 1] if masks[idx] else np.zeros(4)
            if not np.array_equal(out[idx], want):
                return False, f"mismatch at {idx}"
    return True, "10 random cases exact"


def check_curation() -> tuple[bool, str]:
    cases = [((0.6, 0.10, 3), (True, None)), ((0.5, 0.10, 3), (False, "c")), ((0.9, 0.30, 6), (False, "n")),
             ((0.9, 0.07, 5), (False, "r")), ((0.51, 0.071, 5), (True, None))]
    for (c, r, n), (keep, reason) in cases:
        d = filter_clip(ClipStats(c, r, n))
        if (d.keep, d.reason) != (keep, reason):
            return False, f"({c}, {r}, {n}) -> {d}"
    return True, f"{len(cases)} boundary cases"


def check_metrics() -> tuple[bool, str]:
    p = psnr(np.full((16, 16), 0.5), np.zeros((16, 16))).mean
    s = ssim(np.full((16, 16, 3), 0.3), np.full((16, 16, 3), 0.3)).mean
    ok = abs(p - 10 * np.log10(4)) < 1e-9 and s == 1.0
    return ok, f"psnr {p:.4f} dB, ssim(identical) {s}"


def check_geometry() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        center = rng.uniform(-3, 3, 3)
        ext = look_at(center, center + rng.standard_normal(3))[None]
        pl = plucker_embed(CameraPose(ext, default_intrinsic(8, 8)), 8, 8).astype(np.float64)
        m, d = pl[..., :3], pl[..., 3:]
        worst = max(worst, np.abs(np.linalg.norm(d, axis=-1) - 1).max(), np.abs((m * d).sum(-1)).max())
    spec = SceneSpec(entities=(EntitySpec(x=0.3, z=3.0),), camera="dolly", camera_amount=0.5, frames=4)
    clip = render_clip(spec)
    err = reproject_check(clip).median
    ext = clip.camera.extrinsics.copy()
    ext[1::2, :, :3] = rotation_about([0, 1, 0], 5.0) @ ext[1::2, :, :3]
    bad = reproject_check(clip, ext).median
    ok = worst < 1e-5 and err < 1.0 and bad > 1.0
    return ok, f"plucker error {worst:.1e}, reprojection {err:.2e} px (corrupted {bad:.2f} px)"


CHECKS = {
    "v-algebra": check_v_algebra,
    "zero-init equivalence": check_zero_init,
    "id-map lookup": check_id_map,
    "curation thresholds": check_curation,
    "metric closed forms": check_metrics,
    "geometry": check_geometry,
}


def run_checks() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
