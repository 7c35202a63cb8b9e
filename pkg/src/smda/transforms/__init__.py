from .augment import COMBINED, ORDER, sample_spec, validate_augment
from .clahe import clahe
from .geometry import bilinear_sample, resize, rotation_coords, sampling_matrix, zoom_coords
from .specs import (
    GEOMETRIC,
    IDENTITY,
    ColorJitter,
    Compose,
    Contrast,
    CutMix,
    CutOut,
    HFlip,
    MixUp,
    Rescale,
    Rotate,
    VFlip,
    apply_image,
    apply_map,
    compose_expected_map,
    flatten,
    forward_validity,
    invert_on_map,
    is_identity,
    label_weights,
    needs_partner,
    partner_indices,
    spec_from_dict,
    spec_to_dict,
    uses_expected_map,
)

__all__ = [
    "COMBINED",
    "ORDER",
    "GEOMETRIC",
    "IDENTITY",
    "ColorJitter",
    "Compose",
    "Contrast",
    "CutMix",
    "CutOut",
    "HFlip",
    "MixUp",
    "Rescale",
    "Rotate",
    "VFlip",
    "apply_image",
    "apply_map",
    "bilinear_sample",
    "clahe",
    "compose_expected_map",
    "flatten",
    "forward_validity",
    "invert_on_map",
    "is_identity",
    "label_weights",
    "needs_partner",
    "partner_indices",
    "resize",
    "rotation_coords",
    "sample_spec",
    "sampling_matrix",
    "spec_from_dict",
    "spec_to_dict",
    "uses_expected_map",
    "validate_augment",
    "zoom_coords",
]
