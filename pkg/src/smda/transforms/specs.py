"""Parameterized augmentations: image application, spatial inversion on
saliency maps, and expected-map composition for multi-image kinds.

A spec carries every sampled parameter, so applying and inverting need no
outside state.  Images are numpy arrays (C, H, W); maps are
:class:`~smda.saliency.SaliencyMap` values whose warps stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, record_op
from .clahe import clahe
from .geometry import rotation_coords, sampling_matrix, zoom_coords

Rect = tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class HFlip:
    kind = "HFlip"


@dataclass(frozen=True)
class VFlip:
    kind = "VFlip"


@dataclass(frozen=True)
class Rotate:
    angle: float  # degrees, positive = counter-clockwise
    kind = "Rotate"


@dataclass(frozen=True)
class Rescale:
    zoom: float  # >= 1 magnifies about the centre
    kind = "Rescale"


@dataclass(frozen=True)
class Contrast:
    tiles: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    kind = "Contrast"


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    kind = "ColorJitter"


@dataclass(frozen=True)
class CutOut:
    rect: Rect
    kind = "CutOut"


@dataclass(frozen=True)
class MixUp:
    lam: float
    partner: int
    kind = "MixUp"


@dataclass(frozen=True)
class CutMix:
    rect: Rect
    partner: int
    kind = "CutMix"


@dataclass(frozen=True)
class Compose:
    specs: tuple = ()
    kind = "Compose"


GEOMETRIC = (HFlip, VFlip, Rotate, Rescale)
PHOTOMETRIC = (Contrast, ColorJitter)
MULTI_IMAGE = (MixUp, CutMix)
MASKING = (CutOut,) + MULTI_IMAGE

IDENTITY = Compose(())


def flatten(spec) -> list:
    if isinstance(spec, Compose):
        return [leaf for s in spec.specs for leaf in flatten(s)]
    return [spec]


def is_identity(spec) -> bool:
    return not flatten(spec)


def needs_partner(spec) -> bool:
    return any(isinstance(s, MULTI_IMAGE) for s in flatten(spec))


def uses_expected_map(spec) -> bool:
    """True when the saliency target is composed forward (CutOut, MixUp, CutMix)."""
    return any(isinstance(s, MASKING) for s in flatten(spec))


def partner_indices(spec) -> list[int]:
    return [s.partner for s in flatten(spec) if isinstance(s, MULTI_IMAGE)]


def label_weights(spec, label: int, partner_labels, num_classes: int, shape) -> np.ndarray:
    """Blended target distribution: MixUp by opacity, CutMix by pasted area fraction."""
    h, w = shape
    out = np.zeros(num_classes)
    out[int(label)] = 1.0
    for s in flatten(spec):
        if isinstance(s, MixUp):
            mix = 1.0 - s.lam
        elif isinstance(s, CutMix):
            mix = s.rect[2] * s.rect[3] / float(h * w)
        else:
            continue
        out *= 1.0 - mix
        out[int(partner_labels[s.partner])] += mix
    return out


def _check_rect(rect: Rect, shape) -> tuple[slice, slice]:
    top, left, h, w = (int(v) for v in rect)
    H, W = shape
    if h < 0 or w < 0 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError(f"rect {rect} out of bounds for frame {tuple(shape)}")
    return slice(top, top + h), slice(left, left + w)


def _rect_mask(rect: Rect, shape) -> np.ndarray:
    m = np.zeros(shape)
    m[_check_rect(rect, shape)] = 1.0
    return m


def _coords(step, shape, inverse: bool):
    if isinstance(step, Rotate):
        return rotation_coords(shape, -step.angle if inverse else step.angle)
    if isinstance(step, Rescale):
        if step.zoom <= 0:
            raise ValueError("zoom must be positive")
        return zoom_coords(shape, 1.0 / step.zoom if inverse else step.zoom)
    raise TypeError(step)


def _partner(partners, idx: int):
    if partners is None:
        raise ValueError("spec needs a partner image but none were supplied")
    try:
        return partners[idx]
    except (IndexError, KeyError):
        raise ValueError(f"partner {idx} missing") from None


# ---------------------------------------------------------------------------
# images


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Brightness, contrast and saturation scaled by ``1 + delta``, clamped to [0, 1]."""
    out = img * (1.0 + brightness)
    mean = _gray(out).mean()
    out = (out - mean) * (1.0 + contrast) + mean
    if out.shape[0] == 3:
        g = _gray(out)[None]
        out = g + (out - g) * (1.0 + saturation)
    return np.clip(out, 0.0, 1.0)


def apply_image(spec, img, partners=None) -> np.ndarray:
    """Apply ``spec`` to a (C, H, W) image.

    ``partners`` is indexable by the partner indices inside ``spec``
    (normally the batch of original images).
    """
    out = np.array(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if out.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got {out.shape}")
    shape = out.shape[1:]
    for step in flatten(spec):
        if isinstance(step, HFlip):
            out = out[:, :, ::-1].copy()
        elif isinstance(step, VFlip):
            out = out[:, ::-1, :].copy()
        elif isinstance(step, (Rotate, Rescale)):
            m, _ = sampling_matrix(*_coords(step, shape, inverse=False), shape)
            out = (m @ out.reshape(out.shape[0], -1).T).T.reshape(out.shape)
        elif isinstance(step, Contrast):
            out = np.stack([clahe(c, step.tiles, step.clip_limit) for c in out])
        elif isinstance(step, ColorJitter):
            out = color_jitter(out, step.brightness, step.contrast, step.saturation)
        elif isinstance(step, CutOut):
            out[(slice(None),) + _check_rect(step.rect, shape)] = 0.0
        elif isinstance(step, MixUp):
            if not 0.0 <= step.lam <= 1.0:
                raise ValueError("MixUp lambda must lie in [0, 1]")
            other = np.asarray(_partner(partners, step.partner), dtype=np.float64)
            out = step.lam * out + (1.0 - step.lam) * other
        elif isinstance(step, CutMix):
            other = np.asarray(_partner(partners, step.partner), dtype=np.float64)
            region = (slice(None),) + _check_rect(step.rect, shape)
            out[region] = other[region]
        else:
            raise TypeError(f"unknown transform {step!r}")
    return out


# ---------------------------------------------------------------------------
# maps


def _propagate(m, inrange: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid iff the sample point is in frame and every support pixel is valid."""
    pattern = m.copy()
    pattern.data = np.ones_like(pattern.data)
    bad = pattern @ (1.0 - valid.reshape(-1))
    return (inrange.reshape(-1) * (bad == 0)).reshape(valid.shape)


def _warp(step, values: Tensor, valid: np.ndarray, inverse: bool):
    shape = values.shape
    if isinstance(step, HFlip):
        return values.flip(1), valid[:, ::-1].copy()
    if isinstance(step, VFlip):
        return values.flip(0), valid[::-1, :].copy()
    m, inrange = sampling_matrix(*_coords(step, shape, inverse), shape)
    out = record_op("sparse_linear", [values], matrix=m, out_shape=shape)
    return out, _propagate(m, inrange, valid)


def forward_validity(spec, shape) -> np.ndarray:
    """Pixels of the transformed image that carry real (in-frame) content."""
    valid = np.ones(shape)
    for step in flatten(spec):
        if isinstance(step, GEOMETRIC):
            if isinstance(step, HFlip):
                valid = valid[:, ::-1].copy()
            elif isinstance(step, VFlip):
                valid = valid[::-1, :].copy()
            else:
                m, inrange = sampling_matrix(*_coords(step, shape, inverse=False), shape)
                valid = _propagate(m, inrange, valid)
        elif isinstance(step, CutOut):
            valid = valid * (1.0 - _rect_mask(step.rect, shape))
    return valid


def invert_on_map(spec, smap):
    """Bring the saliency map of a transformed image back to the original frame.

    Geometric steps are undone in reverse order with differentiable
    sampling; photometric steps are spatial identities; a CutOut rect is
    marked invalid.  Returns ``(map, mask)`` where ``map.valid_mask`` is
    ``mask``.
    """
    from ..saliency import SaliencyMap

    steps = flatten(spec)
    if any(isinstance(s, MULTI_IMAGE) for s in steps):
        raise ValueError("invert_on_map cannot undo MixUp/CutMix; use compose_expected_map")
    shape = smap.values.shape
    valid = forward_validity(spec, shape) * smap.valid_mask
    values = smap.values
    for step in reversed(steps):
        if isinstance(step, GEOMETRIC):
            values, valid = _warp(step, values, valid, inverse=True)
    return SaliencyMap(values, normalized=False, valid_mask=valid), valid


def apply_map(spec, smap):
    """Forward-apply the geometric part of ``spec`` to a map (differentiable)."""
    from ..saliency import SaliencyMap

    values, valid = smap.values, smap.valid_mask
    for step in flatten(spec):
        if isinstance(step, GEOMETRIC):
            values, valid = _warp(step, values, valid, inverse=False)
    return SaliencyMap(values, normalized=False, valid_mask=valid)


def compose_expected_map(spec, own_map, partner_maps=None):
    """Expected saliency map of the augmented image built from source maps.

    Geometric steps warp the running map forward, MixUp blends with the
    partner's map at the same opacity, CutMix pastes the partner's rect and
    CutOut zeroes its rect.  Returns ``(map, mask)``.
    """
    from ..saliency import SaliencyMap

    values, valid = own_map.values, own_map.valid_mask
    shape = values.shape
    for step in flatten(spec):
        if isinstance(step, GEOMETRIC):
            values, valid = _warp(step, values, valid, inverse=False)
        elif isinstance(step, CutOut):
            values = values * Tensor(1.0 - _rect_mask(step.rect, shape))
        elif isinstance(step, MixUp):
            other = _partner_map(partner_maps, step.partner, shape)
            values = values * step.lam + other * (1.0 - step.lam)
        elif isinstance(step, CutMix):
            other = _partner_map(partner_maps, step.partner, shape)
            r = _rect_mask(step.rect, shape)
            values = values * Tensor(1.0 - r) + other * Tensor(r)
    return SaliencyMap(values, normalized=False, valid_mask=valid), valid


def _partner_map(partner_maps, idx, shape) -> Tensor:
    if partner_maps is None:
        raise ValueError("arity mismatch: spec needs a partner map")
    try:
        m = partner_maps[idx]
    except (IndexError, KeyError):
        raise ValueError(f"arity mismatch: partner map {idx} missing") from None
    if m.values.shape != shape:
        raise ValueError("partner map shape mismatch")
    return m.values


# ---------------------------------------------------------------------------
# serialization


_KINDS = {c.kind: c for c in (HFlip, VFlip, Rotate, Rescale, Contrast, ColorJitter, CutOut, MixUp, CutMix, Compose)}


def spec_to_dict(spec) -> dict:
    if isinstance(spec, Compose):
        return {"kind": "Compose", "specs": [spec_to_dict(s) for s in spec.specs]}
    d = {"kind": spec.kind}
    for k, v in spec.__dict__.items():
        d[k] = list(v) if isinstance(v, tuple) else v
    return d


def spec_from_dict(d: dict):
    kind = d["kind"]
    if kind not in _KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    if kind == "Compose":
        return Compose(tuple(spec_from_dict(s) for s in d["specs"]))
    args = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "kind"}
    return _KINDS[kind](**args)
