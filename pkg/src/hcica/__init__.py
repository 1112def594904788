"""Hierarchical covariate-adjusted ICA for multi-subject imaging data."""

from .em import FittedModel, em_run, estep, estep_voxel
from .inference import ContrastSpec, ContrastResult, VolumeMap
from .ingest import (
    CovariateTable,
    DesignMatrix,
    MaskVolume,
    Volume4D,
    apply_mask,
    build_design_matrix,
    parse_covariate_table,
    read_mask_volume,
    read_nifti_volume,
)
from .model import EmConfig, EmState, HcicaParams, MoGParams, VoxelPosterior
from .preprocess import WhitenedSubject, reduce_and_whiten

__all__ = [
    "FittedModel",
    "em_run",
    "estep",
    "estep_voxel",
    "ContrastSpec",
    "ContrastResult",
    "VolumeMap",
    "CovariateTable",
    "DesignMatrix",
    "MaskVolume",
    "Volume4D",
    "apply_mask",
    "build_design_matrix",
    "parse_covariate_table",
    "read_mask_volume",
    "read_nifti_volume",
    "EmConfig",
    "EmState",
    "HcicaParams",
    "MoGParams",
    "VoxelPosterior",
    "WhitenedSubject",
    "reduce_and_whiten",
]

__version__ = "0.1.0"
