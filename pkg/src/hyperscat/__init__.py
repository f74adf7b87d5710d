"""Multispectral-to-hyperspectral reconstruction through scattering features."""

from .data_io import MsiImage, SpectralCube, gen_synthetic, msi_from_cube, read_cube, write_cube
from .pipeline import (
    ModelBundle,
    PipelineConfig,
    cubic_baseline,
    evaluate,
    infer,
    parity_merge,
    parity_split,
    sam,
    train_all,
)
from .scattering import build_filter_bank, littlewood_paley, scatter2d, scatter_multichannel
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ModelBundle", "MsiImage", "PipelineConfig", "SpectralCube", "Tensor",
    "build_filter_bank", "cubic_baseline", "evaluate", "gen_synthetic", "infer",
    "littlewood_paley", "msi_from_cube", "no_grad", "parity_merge", "parity_split",
    "read_cube", "sam", "scatter2d", "scatter_multichannel", "train_all", "write_cube",
]
