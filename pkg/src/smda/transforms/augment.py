"""Random augmentation specs drawn from a JSON config block.

Each enabled kind fires independently (default probability 0.5) and all
fired kinds are composed in a fixed order: geometric (hflip, vflip, rotate,
rescale), photometric (contrast, color_jitter), cutout, then the two
multi-image kinds (mixup, cutmix).
"""

from __future__ import annotations

import numpy as np

from ..config import validate
from .specs import (
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
)

ORDER = ("hflip", "vflip", "rotate", "rescale", "contrast", "color_jitter", "cutout", "mixup", "cutmix")

DEFAULT_P = 0.5

COMBINED = {
    "hflip": {"enabled": True, "p": 0.5},
    "vflip": {"enabled": True, "p": 0.5},
    "rotate": {"enabled": True, "p": 0.5, "degrees": [-10, 10]},
    "rescale": {"enabled": True, "p": 0.5, "zoom": [1.0, 1.1]},
    "contrast": {"enabled": True, "p": 0.5, "tiles": [8, 8], "clip_limit": 2.0},
}

_RANGE_DEFAULTS = {
    "rotate": ("degrees", (-10.0, 10.0)),
    "rescale": ("zoom", (1.0, 1.1)),
    "cutout": ("size", (0.25, 0.5)),
    "mixup": ("lam", (0.0, 1.0)),
    "cutmix": ("size", (0.25, 0.5)),
}


def validate_augment(config: dict) -> None:
    validate(config, "augment")
    for kind, (key, _) in _RANGE_DEFAULTS.items():
        lo, hi = config.get(kind, {}).get(key, (0, 0))
        if lo > hi:
            raise ValueError(f"augment.{kind}.{key}: lower bound {lo} exceeds upper bound {hi}")
    if "rescale" in config and min(config["rescale"].get("zoom", (1.0, 1.0))) <= 0:
        raise ValueError("augment.rescale.zoom must be positive")
    for kind in ("cutout", "cutmix"):
        lo, hi = config.get(kind, {}).get("size", (0.25, 0.5))
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"augment.{kind}.size fractions must lie in [0, 1]")
    lo, hi = config.get("mixup", {}).get("lam", (0.0, 1.0))
    if not 0 <= lo <= hi <= 1:
        raise ValueError("augment.mixup.lam must lie in [0, 1]")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed if np.ndim(seed) == 0 else list(seed))


def _rect(rng, shape, frac) -> tuple[int, int, int, int]:
    h, w = shape
    f = rng.uniform(*frac)
    rh, rw = max(int(round(f * h)), 1), max(int(round(f * w)), 1)
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw


def _partner(rng, num_partners, self_index) -> int:
    if num_partners < 1:
        raise ValueError("multi-image augmentation needs at least one partner")
    choices = [i for i in range(num_partners) if i != self_index] or [self_index]
    return int(choices[rng.integers(len(choices))])


def sample_spec(config: dict, seed, shape=(32, 32), num_partners: int = 0, self_index: int | None = None) -> Compose:
    """Draw one composed spec.

    ``seed`` is an integer or a sequence of integers (e.g. ``(run_seed,
    epoch, sample_index)``).  Partners for MixUp/CutMix are indices in
    ``range(num_partners)`` other than ``self_index`` when possible.
    """
    validate_augment(config)
    rng = _rng(seed)
    steps = []
    for kind in ORDER:
        block = config.get(kind)
        if not block or not block.get("enabled", True):
            continue
        if rng.random() >= block.get("p", DEFAULT_P):
            continue
        if kind == "hflip":
            steps.append(HFlip())
        elif kind == "vflip":
            steps.append(VFlip())
        elif kind == "rotate":
            steps.append(Rotate(float(rng.uniform(*block.get("degrees", (-10.0, 10.0))))))
        elif kind == "rescale":
            steps.append(Rescale(float(rng.uniform(*block.get("zoom", (1.0, 1.1))))))
        elif kind == "contrast":
            steps.append(Contrast(tuple(block.get("tiles", (8, 8))), float(block.get("clip_limit", 2.0))))
        elif kind == "color_jitter":
            steps.append(
                ColorJitter(*(float(rng.uniform(-block.get(k, 0.2), block.get(k, 0.2))) for k in ("brightness", "contrast", "saturation")))
            )
        elif kind == "cutout":
            steps.append(CutOut(_rect(rng, shape, block.get("size", (0.25, 0.5)))))
        elif kind == "mixup":
            steps.append(MixUp(float(rng.uniform(*block.get("lam", (0.0, 1.0)))), _partner(rng, num_partners, self_index)))
        elif kind == "cutmix":
            steps.append(CutMix(_rect(rng, shape, block.get("size", (0.25, 0.5))), _partner(rng, num_partners, self_index)))
    return Compose(tuple(steps))
