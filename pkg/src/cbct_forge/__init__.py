"""Paired psCBCT / pCT / label dataset synthesis for CBCT-to-CT translation."""
from .volcore import (
    Grid3, LabelVolume, Volume3, read_labels, read_volume, write_volume,
    normalize_ct, denormalize_ct, hu_to_unit01, unit01_to_hu, encode_labels, decode_labels, relabel, resample,
)
from .artifact import DEFAULT_BANK, ArtifactImage, PlaheParams, extract_artifact, inject_artifact, injection_range, plahe
from .xproj import ConeBeamGeometry, ProjectionStack, add_projection_noise, forward_project
from .osart import OsartConfig, ReconReport, back_project, osart_reconstruct, restore_hu
from .geomaug import DEFAULT_GEOMS, AffineSpec, DatasetManifest, PipelineConfig, apply_affine, compose_dataset
from .metrics import EvalCase, dice, hd95, mae, msd, mssim, psnr, report, rmse
from .ganplan import NetPlan, plan_net, receptive_field

__version__ = "0.1.0"
