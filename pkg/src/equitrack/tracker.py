"""Inference: single-particle pooling, multi-particle detection, frame
linking, axial correction, polarizability calibration, and diffusion
estimation.

Positions are in absolute input-pixel coordinates (pixel centers at
integers); axial positions in µm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .nn import POOL_STRIDE
from .synth import clausius_mossotti

CLUSTER_EPS = 1e-9
WEIGHT_FLOOR = 1e-6


class NoObjectError(RuntimeError):
    pass


@dataclass
class Detection:
    x: float
    y: float
    score: float
    frame: int = 0
    z: float | None = None
    sigma: float | None = None
    polarizability: float | None = None


@dataclass
class Track:
    id: int
    detections: list = field(default_factory=list)
    gaps: int = 0

    @property
    def frames(self):
        return [d.frame for d in self.detections]


def _single_bundle(model, image):
    bundle, _ = model.forward(np.asarray(image, dtype=float))
    return bundle


def _pool(bundle, w):
    """Weight-averaged prediction in absolute input-pixel coordinates."""
    total = w.sum()
    maps = bundle.feature_maps()[0]
    pooled = (maps * w[..., None]).sum(axis=(0, 1)) / total
    n, m = bundle.input_shape
    # decoded maps are relative to N/2, but rotation/mirror training anchors
    # predictions to the geometric image center (N-1)/2, half a pixel off
    pooled[0] += (n - 1) / 2.0
    pooled[1] += (m - 1) / 2.0
    return pooled, total


def predict_single(model, image, frame=0, symmetrize=False) -> Detection:
    """Pool the whole feature map into one detection (single-object images).

    With ``symmetrize`` the prediction is averaged over the eight square
    symmetries of the input (back-transformed), which cancels any residual
    directional bias of the trained network. Requires a square image."""
    if symmetrize:
        return _predict_single_symmetrized(model, image, frame)
    bundle = _single_bundle(model, image)
    w = bundle.weights()[0]
    if w.sum() < WEIGHT_FLOOR * w.size:
        raise NoObjectError("no object: total weight below floor")
    pooled, total = _pool(bundle, w)
    det = Detection(x=float(pooled[0]), y=float(pooled[1]), score=float(total),
                    frame=frame)
    idx = 2
    if bundle.z is not None:
        det.z = float(pooled[idx])
        idx += 1
    if bundle.sigma is not None:
        det.sigma = float(pooled[idx])
    return det


def _predict_single_symmetrized(model, image, frame=0) -> Detection:
    image = np.asarray(image, dtype=float)
    if image.shape[0] != image.shape[1]:
        raise ValueError("symmetrized prediction requires a square image")
    center = (image.shape[0] - 1) / 2.0
    preds = []
    score = 0.0
    for k in range(4):
        for mirror in (False, True):
            view = np.rot90(image, k)
            if mirror:
                view = view[:, ::-1]
            det = predict_single(model, np.ascontiguousarray(view), frame)
            x, y = det.x - center, det.y - center
            # invert the view transform: undo the mirror (flips the second
            # axis), then undo each quarter turn (u, v) -> (v, -u)
            if mirror:
                y = -y
            for _ in range(k):
                x, y = y, -x
            preds.append((x, y, det.z, det.sigma))
            score += det.score
    xs, ys, zs, sigmas = zip(*preds)
    det = Detection(x=float(np.mean(xs) + center), y=float(np.mean(ys) + center),
                    score=score / 8.0, frame=frame)
    if zs[0] is not None:
        det.z = float(np.mean(zs))
    if sigmas[0] is not None:
        det.sigma = float(np.mean(sigmas))
    return det


def cluster_metric(maps):
    """Inverse summed 3×3 neighborhood variance of the decoded feature maps.

    maps: (H, W, K). High where neighboring position predictions agree."""
    v = np.zeros(maps.shape[:2])
    for k in range(maps.shape[-1]):
        f = maps[..., k].astype(float)
        m1 = ndimage.uniform_filter(f, size=3, mode="reflect")
        m2 = ndimage.uniform_filter(f * f, size=3, mode="reflect")
        v += np.clip(m2 - m1 * m1, 0.0, None)
    return 1.0 / (v + CLUSTER_EPS)


def detection_score(w, c, alpha=0.1):
    """Geometric combination w^alpha * c^(1-alpha) of weight and clustering."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return np.power(w, alpha) * np.power(c, 1.0 - alpha)


def detect(score_map, quantile=0.99, min_distance=5.0, threshold=None):
    """Seed detections: strict 8-neighborhood maxima above the score
    quantile, greedily suppressed within min_distance (input px).

    ``threshold`` overrides the per-map quantile, e.g. with a value pooled
    over a whole frame stack so empty frames stay empty.
    Returns a list of (i, j, score) in score-map (output-grid) pixels."""
    score_map = np.asarray(score_map)
    # strict local max: the pixel beats every 8-neighbor
    footprint = np.ones((3, 3), bool)
    footprint[1, 1] = False
    others = ndimage.maximum_filter(
        score_map, footprint=footprint, mode="constant", cval=-np.inf
    )
    is_peak = score_map > others
    if threshold is None:
        threshold = np.quantile(score_map, quantile)
    is_peak &= score_map > threshold
    ii, jj = np.nonzero(is_peak)
    if ii.size == 0:
        return []
    order = np.argsort(score_map[ii, jj])[::-1]
    ii, jj = ii[order], jj[order]
    r_map = min_distance / POOL_STRIDE
    kept = []
    for i, j in zip(ii, jj):
        if all((i - ki) ** 2 + (j - kj) ** 2 >= r_map**2 for ki, kj, _ in kept):
            kept.append((int(i), int(j), float(score_map[i, j])))
    return kept


def refine(seed, bundle, w, radius=3):
    """Weight-averaged position over a disc of ``radius`` map pixels around
    the seed, in absolute input-pixel coordinates."""
    i0, j0, score = seed
    hm, wm = w.shape
    if radius <= 0:
        sel_i, sel_j = np.array([i0]), np.array([j0])
        wt = np.ones(1)
    else:
        ii, jj = np.mgrid[0:hm, 0:wm]
        disc = (ii - i0) ** 2 + (jj - j0) ** 2 <= radius**2
        sel_i, sel_j = np.nonzero(disc)
        wt = w[sel_i, sel_j]
    maps = bundle.feature_maps()[0]
    vals = maps[sel_i, sel_j, :]
    pooled = (vals * wt[:, None]).sum(axis=0) / wt.sum()
    n, m = bundle.input_shape
    # same half-pixel anchor correction as in _pool
    pooled[0] += (n - 1) / 2.0
    pooled[1] += (m - 1) / 2.0
    det = Detection(x=float(pooled[0]), y=float(pooled[1]), score=score)
    idx = 2
    if bundle.z is not None:
        det.z = float(pooled[idx])
        idx += 1
    if bundle.sigma is not None:
        det.sigma = float(pooled[idx])
    return det


def detect_particles(model, image, alpha=0.1, quantile=0.99, min_distance=5.0,
                     refine_radius=3, frame=0, threshold=None):
    """Full multi-particle pipeline on one image."""
    bundle = _single_bundle(model, image)
    w = bundle.weights()[0]
    c = cluster_metric(bundle.feature_maps()[0])
    score = detection_score(w, c, alpha)
    seeds = detect(score, quantile, min_distance, threshold=threshold)
    dets = []
    for seed in seeds:
        det = refine(seed, bundle, w, refine_radius)
        det.frame = frame
        dets.append(det)
    return dets


def link_tracks(frames, max_dist):
    """Link per-frame detection lists into tracks by optimal assignment
    between consecutive frames; matches farther than max_dist are cut."""
    tracks = []
    open_tracks = {}  # index in previous frame -> Track
    for fi, dets in enumerate(frames):
        new_open = {}
        if open_tracks and dets:
            prev = list(open_tracks.values())
            cost = np.zeros((len(prev), len(dets)))
            for a, tr in enumerate(prev):
                last = tr.detections[-1]
                for b, d in enumerate(dets):
                    cost[a, b] = np.hypot(last.x - d.x, last.y - d.y)
            large = max_dist * 1e6 + 1.0
            rows, cols = linear_sum_assignment(np.where(cost <= max_dist, cost, large))
            matched = set()
            for a, b in zip(rows, cols):
                if cost[a, b] <= max_dist:
                    prev[a].detections.append(dets[b])
                    new_open[b] = prev[a]
                    matched.add(b)
            unmatched = [b for b in range(len(dets)) if b not in matched]
        else:
            unmatched = list(range(len(dets)))
        for b in unmatched:
            tr = Track(id=len(tracks), detections=[dets[b]])
            tracks.append(tr)
            new_open[b] = tr
        open_tracks = new_open
    return tracks


def correct_axial(z_raw, optics):
    """Apparent-depth correction: z = z_raw * n_oil / n_medium."""
    return z_raw * optics.oil_index / optics.medium_index


def calibrate_polarizability(sigmas, radius_um, n_particle, n_medium, sigma_ref):
    """Map log-scale predictions to polarizability (µm³) against a reference
    population of known size and index: alpha = alpha_ref * exp(sigma - sigma_ref)."""
    alpha_ref = clausius_mossotti(radius_um, n_particle, n_medium)
    return alpha_ref * np.exp(np.asarray(sigmas, dtype=float) - sigma_ref)


@dataclass
class DiffusionEstimate:
    per_axis: np.ndarray  # µm²/s, one per trace axis
    xy: float  # pooled estimate over the first two axes
    mean: float  # pooled over all axes
    drift_warning: bool = False


def cve_diffusion(trace, dt) -> DiffusionEstimate:
    """Covariance-based diffusion estimator, unbiased under Gaussian
    localization noise: D = <d²>/(2 dt) + <d_n d_n+1>/dt per axis."""
    trace = np.asarray(trace, dtype=float)
    if trace.ndim == 1:
        trace = trace[:, None]
    if trace.shape[0] < 3:
        raise ValueError("trace must have length >= 3")
    d = np.diff(trace, axis=0)
    msq = (d * d).mean(axis=0)
    cov = (d[:-1] * d[1:]).mean(axis=0)
    per_axis = msq / (2.0 * dt) + cov / dt
    drift = False
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(msq > 0, cov / msq, 0.0)
    if np.any(corr > 0.5):
        drift = True
        warnings.warn("lag-1 displacement correlation > 0.5: drift suspected",
                      UserWarning)
    xy = float(per_axis[: min(2, per_axis.size)].mean())
    return DiffusionEstimate(per_axis, xy, float(per_axis.mean()), drift)


def self_consistency_variance(model, image) -> float:
    """Total weighted variance of the decoded feature maps; low when the
    model agrees with itself on where the object is."""
    bundle = _single_bundle(model, image)
    w = bundle.weights()[0].astype(float)
    wn = w / w.sum()
    maps = bundle.feature_maps()[0].astype(float)
    mean = (maps * wn[..., None]).sum(axis=(0, 1))
    var = (wn[..., None] * (maps - mean) ** 2).sum()
    return float(var)
