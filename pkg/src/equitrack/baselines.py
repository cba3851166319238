"""Classical localization references: background-subtracted intensity
centroid and the closed-form radial-symmetry-center method.

Both take a 2D crop and return (x, y) in crop pixel coordinates
(x along rows, pixel centers at integers)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


class DegenerateCropError(RuntimeError):
    pass


def border_median(crop):
    """Robust background estimate: median of the one-pixel border ring."""
    crop = np.asarray(crop, dtype=float)
    ring = np.concatenate([crop[0], crop[-1], crop[1:-1, 0], crop[1:-1, -1]])
    return float(np.median(ring))


def _check_crop(crop):
    crop = np.asarray(crop, dtype=float)
    if crop.ndim != 2 or min(crop.shape) < 7:
        raise ValueError("crop must be 2D with side >= 7 px")
    return crop


def centroid_localize(crop, background=None):
    """Intensity centroid of the background-subtracted, zero-clipped crop."""
    crop = _check_crop(crop)
    if background is None:
        background = border_median(crop)
    ipos = np.clip(crop - background, 0.0, None)
    total = ipos.sum()
    if total <= 0:
        raise DegenerateCropError("empty crop: no intensity above background")
    gx, gy = np.mgrid[0 : crop.shape[0], 0 : crop.shape[1]]
    return float((gx * ipos).sum() / total), float((gy * ipos).sum() / total)


def radial_center_localize(crop):
    """Radial-symmetry center: the point minimizing the weighted squared
    distances to the lines through each half-pixel grid midpoint along its
    local intensity gradient. Closed-form 2x2 least squares, no iteration."""
    crop = _check_crop(crop)
    h, w = crop.shape
    # midpoint grid coordinates
    xm = (np.arange(h - 1) + 0.5)[:, None] * np.ones((1, w - 1))
    ym = np.ones((h - 1, 1)) * (np.arange(w - 1) + 0.5)[None, :]
    # diagonal derivatives, then 3x3 smoothing as in the original method
    du = crop[1:, 1:] - crop[:-1, :-1]  # direction (+1, +1)
    dv = crop[1:, :-1] - crop[:-1, 1:]  # direction (+1, -1)
    du = ndimage.uniform_filter(du, size=3, mode="nearest")
    dv = ndimage.uniform_filter(dv, size=3, mode="nearest")
    gx = du + dv
    gy = du - dv
    mag2 = gx * gx + gy * gy
    total = mag2.sum()
    if total <= 0:
        raise DegenerateCropError("degenerate gradients: flat crop")
    xc_w = (mag2 * xm).sum() / total
    yc_w = (mag2 * ym).sum() / total
    dist = np.sqrt((xm - xc_w) ** 2 + (ym - yc_w) ** 2)
    weight = mag2 / np.maximum(dist, 1e-12)
    # unit gradient directions; zero-gradient midpoints get zero weight
    norm = np.sqrt(np.maximum(mag2, 1e-300))
    ux, uy = gx / norm, gy / norm
    weight = np.where(mag2 > 0, weight, 0.0)
    # minimize sum_i w_i (c - p_i)^T (I - u u^T) (c - p_i)
    axx = weight * (1.0 - ux * ux)
    axy = weight * (-ux * uy)
    ayy = weight * (1.0 - uy * uy)
    a11, a12, a22 = axx.sum(), axy.sum(), ayy.sum()
    b1 = (axx * xm + axy * ym).sum()
    b2 = (axy * xm + ayy * ym).sum()
    det = a11 * a22 - a12 * a12
    if abs(det) < 1e-12 * max(a11 * a22, 1e-300):
        raise DegenerateCropError("degenerate gradients: singular normal matrix")
    xc = (a22 * b1 - a12 * b2) / det
    yc = (a11 * b2 - a12 * b1) / det
    return float(xc), float(yc)
