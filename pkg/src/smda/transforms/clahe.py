"""Contrast Limited Adaptive Histogram Equalization on a single channel.

Follows the usual tile/clip/interpolate scheme: per-tile histograms with a
clip limit relative to the uniform bin height, excess redistributed evenly,
per-tile lookup tables blended bilinearly between tile centres.
"""

from __future__ import annotations

import numpy as np


def _tile_luts(q: np.ndarray, tiles: tuple[int, int], clip_limit: float, bins: int) -> np.ndarray:
    ty, tx = tiles
    h, w = q.shape
    th, tw = h // ty, w // tx
    area = th * tw
    blocks = q.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty * tx, area)
    offsets = np.arange(ty * tx)[:, None] * bins
    hist = np.bincount((blocks + offsets).ravel(), minlength=ty * tx * bins).reshape(ty * tx, bins)

    if clip_limit > 0:
        limit = max(int(clip_limit * area / bins), 1)
        excess = np.maximum(hist - limit, 0).sum(axis=1)
        hist = np.minimum(hist, limit)
        batch = excess // bins
        hist += batch[:, None]
        residual = excess - batch * bins
        for t in np.nonzero(residual)[0]:
            r = int(residual[t])
            step = max(bins // r, 1)
            idx = np.arange(0, bins, step)[:r]
            hist[t, idx] += 1

    scale = (bins - 1) / area
    luts = np.clip(np.rint(np.cumsum(hist, axis=1) * scale), 0, bins - 1)
    return luts.reshape(ty, tx, bins)


def clahe(channel, tiles=(8, 8), clip_limit: float = 2.0, bins: int = 256) -> np.ndarray:
    """Equalize one [0, 1] channel; returns values quantized to ``bins`` levels in [0, 1].

    Images whose sides are not multiples of the tile grid are reflect-padded
    for the histogram stage.
    """
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("clahe expects a 2-d channel")
    ty, tx = int(tiles[0]), int(tiles[1])
    if ty < 1 or tx < 1:
        raise ValueError("tile grid must be positive")
    h, w = x.shape
    q = np.clip(np.rint(x * (bins - 1)), 0, bins - 1).astype(np.int64)

    ph = (-h) % ty
    pw = (-w) % tx
    qp = np.pad(q, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else q
    if qp.shape[0] < ty or qp.shape[1] < tx:
        raise ValueError("image smaller than the tile grid")
    luts = _tile_luts(qp, (ty, tx), clip_limit, bins)
    th, tw = qp.shape[0] // ty, qp.shape[1] // tx

    yf = np.arange(h) / th - 0.5
    xf = np.arange(w) / tw - 0.5
    y1 = np.floor(yf).astype(int)
    x1 = np.floor(xf).astype(int)
    ya = (yf - y1)[:, None]
    xa = (xf - x1)[None, :]
    y2 = np.minimum(y1 + 1, ty - 1)
    x2 = np.minimum(x1 + 1, tx - 1)
    y1 = np.maximum(y1, 0)
    x1 = np.maximum(x1, 0)

    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    Y2, X2 = np.meshgrid(y2, x2, indexing="ij")
    top = luts[Y1, X1, q] * (1 - xa) + luts[Y1, X2, q] * xa
    bottom = luts[Y2, X1, q] * (1 - xa) + luts[Y2, X2, q] * xa
    out = top * (1 - ya) + bottom * ya
    return np.clip(np.rint(out), 0, bins - 1) / (bins - 1)
