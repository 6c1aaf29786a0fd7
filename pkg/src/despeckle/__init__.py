"""Speckle denoising toolkit.

Submodules:

- :mod:`despeckle.imagecore` -- image I/O, synthetic images, cropping, augmentation
- :mod:`despeckle.speckle` -- multiplicative noise, schedules, forward process, posterior
- :mod:`despeckle.nn` -- numpy convolutional denoiser with hand-written gradients and SGD
- :mod:`despeckle.sddpm` -- training loop, single-step and ancestral denoising, checkpoints
- :mod:`despeckle.baselines` -- SRAD, non-local means, Lee filter
- :mod:`despeckle.metrics` -- PSNR and SSIM
- :mod:`despeckle.cli` -- the ``despeckle`` command line
"""
from .imagecore import DEFAULT_FLOOR, load_image, save_image, synth_image
from .metrics import psnr, ssim
from .sddpm import DenoiserModel, TrainConfig, ancestral_denoise, denoise, train
from .speckle import NoiseSchedule, corrupt_log, corrupt_multiplicative, linear_schedule

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_FLOOR",
    "DenoiserModel",
    "NoiseSchedule",
    "TrainConfig",
    "ancestral_denoise",
    "corrupt_log",
    "corrupt_multiplicative",
    "denoise",
    "linear_schedule",
    "load_image",
    "psnr",
    "save_image",
    "ssim",
    "synth_image",
    "train",
]
