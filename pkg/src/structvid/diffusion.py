"""Variance-preserving diffusion math.

Conventions: integer steps ``t`` run from 1 (almost clean) to ``T`` (almost
pure noise). Step 0 is accepted everywhere as the clean endpoint with
``alpha_bar = 1``. All functions work on numpy arrays and torch tensors alike;
``t`` may be a Python int or a 1-D array of per-sample steps, in which case the
coefficients broadcast over the leading (batch) axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

MODALITIES = ("rgb", "depth", "normal")


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    loss_weight: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ValueError("alpha_bar must be a non-empty 1-D array")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)
        w = np.ones_like(ab) if self.loss_weight is None else np.asarray(self.loss_weight, dtype=np.float64)
        if w.shape != ab.shape or np.any(w <= 0):
            raise ValueError("loss_weight must be positive with one entry per step")
        object.__setattr__(self, "loss_weight", w)

    @property
    def T(self) -> int:
        return int(self.alpha_bar.size)

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def alpha_bar_at(self, t):
        """alpha_bar for step(s) ``t`` with step 0 mapped to 1."""
        full = np.concatenate([[1.0], self.alpha_bar])
        t_np = _steps_to_numpy(t)
        if np.any(t_np < 0) or np.any(t_np > self.T):
            raise ValueError(f"step out of range [0, {self.T}]: {t}")
        return full[t_np]

    def coefficients(self, t, like=None):
        """Return ``(alpha_t, sigma_t)`` shaped to broadcast against ``like``."""
        ab = self.alpha_bar_at(t)
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        return _broadcastable(a, like), _broadcastable(s, like)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be a positive integer")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(np.cumprod(1.0 - betas))


def _steps_to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if not np.issubdtype(arr.dtype, np.integer):
        if np.any(arr != np.round(arr)):
            raise ValueError(f"diffusion steps must be integers, got {t}")
        arr = arr.astype(np.int64)
    return arr


def _broadcastable(coef: np.ndarray, like):
    if coef.ndim == 0:
        return float(coef)
    if like is None:
        return coef
    shape = (coef.shape[0],) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device).reshape(shape)
    return coef.reshape(shape).astype(np.result_type(like.dtype, np.float32), copy=False)


def _check_same_shape(*arrays) -> None:
    shapes = [tuple(a.shape) for a in arrays]
    if len(set(shapes)) != 1:
        raise ValueError(f"shape mismatch: {shapes}")


def _check_batch(t, x) -> None:
    t_np = np.asarray(_steps_to_numpy(t))
    if t_np.ndim == 1 and t_np.shape[0] != x.shape[0]:
        raise ValueError(f"{t_np.shape[0]} steps given for a batch of {x.shape[0]}")
    if t_np.ndim > 1:
        raise ValueError("steps must be a scalar or a 1-D array")


def forward_diffuse(schedule: NoiseSchedule, x0, t, eps):
    """Closed-form marginal ``x_t = alpha_t * x0 + sigma_t * eps``."""
    _check_same_shape(x0, eps)
    _check_batch(t, x0)
    a, s = schedule.coefficients(t, x0)
    return a * x0 + s * eps


def v_target(schedule: NoiseSchedule, x0, eps, t):
    """Velocity target ``v = alpha_t * eps - sigma_t * x0``."""
    _check_same_shape(x0, eps)
    _check_batch(t, x0)
    a, s = schedule.coefficients(t, x0)
    return a * eps - s * x0


def reconstruct_from_v(schedule: NoiseSchedule, x_t, v, t):
    """Invert the velocity parameterisation, returning ``(x0_hat, eps_hat)``."""
    _check_same_shape(x_t, v)
    _check_batch(t, x_t)
    a, s = schedule.coefficients(t, x_t)
    return a * x_t - s * v, s * x_t + a * v


def ddim_step(schedule: NoiseSchedule, x_t, v_pred, t, t_prev, eta: float = 0.0, noise=None):
    """Move ``x_t`` to ``x_{t_prev}`` through the implied ``(x0_hat, eps_hat)``.

    With ``eta > 0`` a fraction of ``eps_hat`` is replaced by fresh ``noise``
    so that the marginal variance stays that of the schedule.
    """
    t_np, tp_np = _steps_to_numpy(t), _steps_to_numpy(t_prev)
    if np.any(tp_np >= t_np):
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    x0_hat, eps_hat = reconstruct_from_v(schedule, x_t, v_pred, t)
    ab_t, ab_prev = schedule.alpha_bar_at(t_np), schedule.alpha_bar_at(tp_np)
    if eta == 0.0:
        a_prev, s_prev = schedule.coefficients(tp_np, x_t)
        return a_prev * x0_hat + s_prev * eps_hat
    if noise is None:
        raise ValueError("stochastic DDIM (eta > 0) needs a noise array")
    _check_same_shape(x_t, noise)
    var = eta**2 * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    c_eps = np.sqrt(np.clip(1.0 - ab_prev - var, 0.0, None))
    a_prev = _broadcastable(np.sqrt(ab_prev), x_t)
    c_eps = _broadcastable(c_eps, x_t)
    c_noise = _broadcastable(np.sqrt(var), x_t)
    return a_prev * x0_hat + c_eps * eps_hat + c_noise * noise


def sampling_steps(T: int, steps: int) -> list[int]:
    """Descending step list ``[T, ..., 0]`` with ``steps`` transitions."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"cannot take {steps} steps on a {T}-step schedule")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in grid]


StepHook = Callable[[int, int, Mapping[str, int]], None]


@torch.no_grad()
def sample(model, cond, steps: int = 50, seed: int = 0, eta: float = 0.0,
           hook: StepHook | None = None) -> dict[str, torch.Tensor]:
    """Run the reverse process for every modality the model predicts.

    ``model`` must expose ``modalities``, ``latent_shape(cond)`` returning
    ``(B, F, C, h, w)`` and ``predict_v(noisy, t, cond)`` returning a dict of
    velocity predictions. ``cond.modalities`` (when present) must equal the
    model's modalities. One shared step is applied to all modalities; ``hook``
    receives ``(index, t, {modality: t})`` before every model call.
    """
    modalities = tuple(model.modalities)
    requested = getattr(cond, "modalities", None)
    if requested is not None and tuple(requested) != modalities:
        raise ValueError(f"model predicts {modalities} but {tuple(requested)} were requested")
    schedule: NoiseSchedule = model.schedule
    shape = model.latent_shape(cond)
    gen = torch.Generator().manual_seed(int(seed))
    x = {m: torch.randn(shape, generator=gen) for m in modalities}
    grid = sampling_steps(schedule.T, steps)
    for i, (t, t_prev) in enumerate(zip(grid[:-1], grid[1:])):
        if hook is not None:
            hook(i, t, {m: t for m in modalities})
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        v = model.predict_v(x, t_batch, cond)
        if set(v) != set(modalities):
            raise ValueError(f"model returned {sorted(v)} for {modalities}")
        nxt = {}
        for m in modalities:
            noise = torch.randn(shape, generator=gen) if eta > 0 else None
            nxt[m] = ddim_step(schedule, x[m], v[m], t, t_prev, eta=eta, noise=noise)
        x = nxt
    return x
