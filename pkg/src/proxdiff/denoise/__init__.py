"""Bilevel filter learning for variational image denoising."""

from .bilevel import (
    DenoiseDual,
    DualSolve,
    TrainConfig,
    TrainResult,
    add_noise,
    bilevel_grad,
    bilevel_loss,
    denoise_dual_apg,
    dual_project,
    init_weights,
    synthetic_patches,
    train,
)
from .filters import FilterBank, conv_adjoint, conv_apply, dct_basis, dct_basis_5x5
from .imageio import PpmFormatError, load_ppm, psnr, save_ppm

__all__ = [
    "DenoiseDual",
    "DualSolve",
    "TrainConfig",
    "TrainResult",
    "add_noise",
    "bilevel_grad",
    "bilevel_loss",
    "denoise_dual_apg",
    "dual_project",
    "init_weights",
    "synthetic_patches",
    "train",
    "FilterBank",
    "conv_adjoint",
    "conv_apply",
    "dct_basis",
    "dct_basis_5x5",
    "PpmFormatError",
    "load_ppm",
    "psnr",
    "save_ppm",
]
