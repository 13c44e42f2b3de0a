"""spinewarp: virtual spine straightening and vertebra reconstruction for
osteoplasty planning.

Pipeline: segmented fractured spine CT -> atlas scaling -> per-vertebra
rigid registration -> blended displacement field -> straightened spine ->
shape-prior inpainting of the fractured vertebra -> volume analysis and a
bone-cement upper bound.
"""

from ._backend import BACKEND
from .volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    mip,
    sample_nearest,
    sample_trilinear,
    volume_of_label,
    warp,
)
from .nifti import read_nifti, write_nifti
from .phantom import FractureSpec, PhantomSpec, PhantomTruth, apply_fracture, generate_healthy
from .atlas import Atlas, ScaledAtlas, build_atlas_from_phantom, compute_scale, scale_atlas
from .registration import RigidTransform, SurfaceCloud, extract_surface, icp_rigid, kabsch
from .straighten import (
    DistanceMap,
    StraightenOutput,
    combine_fields,
    distance_map,
    inside_field_exactness_check,
    straighten_spine,
)
from .inpaint import InpaintResult, SoftMask, fuse, inpaint_vertebra, region_of_interest
from .analysis import (
    PipelineReport,
    build_report,
    cement_upper_bound,
    dice,
    fracture_distance,
    iou,
    mre,
    psnr,
    ssim,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "VolumeGeometry", "ScalarVolume", "LabelVolume", "DisplacementField",
    "sample_trilinear", "sample_nearest", "warp", "mip", "volume_of_label",
    "read_nifti", "write_nifti",
    "PhantomSpec", "FractureSpec", "PhantomTruth", "generate_healthy", "apply_fracture",
    "Atlas", "ScaledAtlas", "build_atlas_from_phantom", "compute_scale", "scale_atlas",
    "RigidTransform", "SurfaceCloud", "extract_surface", "kabsch", "icp_rigid",
    "DistanceMap", "distance_map", "combine_fields", "straighten_spine",
    "StraightenOutput", "inside_field_exactness_check",
    "SoftMask", "InpaintResult", "region_of_interest", "fuse", "inpaint_vertebra",
    "dice", "iou", "ssim", "psnr", "mre", "fracture_distance", "cement_upper_bound",
    "PipelineReport", "build_report",
    "__version__",
]
