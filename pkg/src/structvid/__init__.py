"""Multi-person video diffusion with structural outputs, scaled to a desk.

One denoiser produces RGB together with depth and surface normals. Identity
masks, pose skeletons and camera rays condition it, and a reference frame
supplies each person's appearance.
"""

from .denoiser import DenoiserConfig, ModalityConfig, StructuralDenoiser, load_model, save_checkpoint
from .diffusion import NoiseSchedule, linear_schedule, sample

__version__ = "0.1.0"

__all__ = [
    "DenoiserConfig",
    "ModalityConfig",
    "NoiseSchedule",
    "StructuralDenoiser",
    "linear_schedule",
    "load_model",
    "sample",
    "save_checkpoint",
]
