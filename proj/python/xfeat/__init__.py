"""XFeat local features: extraction, matching and homography estimation."""

from ._xfeat import (
    FeatureMode,
    Features,
    FormatError,
    Matches,
    Model,
    extract_semidense,
    extract_sparse,
    find_homography,
    flops,
    match,
    offset_from_logits,
    read_image,
    refine,
)

__all__ = [
    "FeatureMode",
    "Features",
    "FormatError",
    "Matches",
    "Model",
    "extract_semidense",
    "extract_sparse",
    "find_homography",
    "flops",
    "match",
    "offset_from_logits",
    "read_image",
    "refine",
]
