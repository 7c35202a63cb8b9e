"""Pixel-grid geometry: source-coordinate fields and differentiable bilinear sampling.

Coordinates are (row, col) in pixel units, pixel centres on the integer
grid, image centre at ((H-1)/2, (W-1)/2).  All warps are destination driven:
for every output pixel we compute where to read in the source.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..autodiff import Tensor, record_op

_SNAP = 1e-9


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.rint(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def sampling_matrix(rows, cols, src_shape) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse bilinear interpolation matrix and validity of each output pixel.

    Output pixel ``k`` reads source location ``(rows.flat[k], cols.flat[k])``.
    Locations outside ``[0, H-1] x [0, W-1]`` get an all-zero row and
    validity 0.  Neighbours with zero weight are dropped, so every valid
    pixel's support lies inside the frame.
    """
    h, w = src_shape
    r = _snap(np.asarray(rows, dtype=np.float64).ravel())
    c = _snap(np.asarray(cols, dtype=np.float64).ravel())
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(c))):
        raise ValueError("sampling coordinates must be finite")
    valid = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    out_idx, in_idx, weights = [], [], []
    k = np.nonzero(valid)[0]
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        wk = wt[k]
        keep = wk != 0
        kk = k[keep]
        out_idx.append(kk)
        in_idx.append((r0[kk] + dr).astype(np.int64) * w + (c0[kk] + dc).astype(np.int64))
        weights.append(wk[keep])
    m = sp.csr_matrix(
        (np.concatenate(weights), (np.concatenate(out_idx), np.concatenate(in_idx))),
        shape=(r.size, h * w),
    )
    return m, valid.reshape(np.shape(rows)).astype(np.float64)


def bilinear_sample(src, rows, cols) -> tuple[Tensor, np.ndarray]:
    """Sample a 2-d map at per-pixel source coordinates.

    Differentiable with respect to ``src``; returns the sampled map (shape
    of ``rows``) and its validity mask.
    """
    src = src if isinstance(src, Tensor) else Tensor(src)
    if src.ndim != 2:
        raise ValueError(f"bilinear_sample expects a 2-d map, got {src.shape}")
    m, valid = sampling_matrix(rows, cols, src.shape)
    return record_op("sparse_linear", [src], matrix=m, out_shape=np.shape(rows)), valid


def grid(shape) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    return np.mgrid[0:h, 0:w].astype(np.float64)


def rotation_coords(shape, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates that rotate the content counter-clockwise (as displayed) by ``angle_deg``."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    i, j = grid(shape)
    x, y = j - cx, cy - i
    t = np.deg2rad(angle_deg)
    xs = np.cos(t) * x + np.sin(t) * y
    ys = -np.sin(t) * x + np.cos(t) * y
    return cy - ys, xs + cx


def zoom_coords(shape, zoom: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates that magnify about the centre by ``zoom`` (frame size kept)."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    i, j = grid(shape)
    return cy + (i - cy) / zoom, cx + (j - cx) / zoom


def resize_coords(src_shape, dst_shape) -> tuple[np.ndarray, np.ndarray]:
    """Half-pixel-centre resize coordinates, clamped to the source frame."""
    sh, sw = src_shape
    i, j = grid(dst_shape)
    r = np.clip((i + 0.5) * sh / dst_shape[0] - 0.5, 0, sh - 1)
    c = np.clip((j + 0.5) * sw / dst_shape[1] - 0.5, 0, sw - 1)
    return r, c


def resize(src, dst_shape) -> Tensor:
    src = src if isinstance(src, Tensor) else Tensor(src)
    rows, cols = resize_coords(src.shape, dst_shape)
    out, _ = bilinear_sample(src, rows, cols)
    return out
