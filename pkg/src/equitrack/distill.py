"""Symmetry-group self-distillation training.

A single unlabeled crop is repeatedly transformed by elements of the
augmentation group (translation, rotation, mirror, axial propagation,
signal scaling). The network's pooled predictions on each view are mapped
back to the original frame; disagreement between views plus an internal
per-view consistency term form the training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .nn import ArchDescriptor, ConvNet, decode_positions, sigmoid, sigmoid_grad
from .synth import ComplexField, OpticsConfig, propagate_field


@dataclass
class GroupTransform:
    """One augmentation-group element: 2D affine part plus axial offset and
    log signal scale."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    mirror: bool = False
    dz: float = 0.0  # µm
    log_s: float = 0.0

    def __post_init__(self):
        self.theta = float(np.mod(self.theta, 2 * np.pi))

    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def mirror_matrix(self):
        return np.diag([1.0, -1.0]) if self.mirror else np.eye(2)


@dataclass
class TrainConfig:
    batch_size: int = 8
    n_batches: int = 5000
    learning_rate: float = 0.001
    translation_bound: float | None = None  # px; None -> crop_size / 4
    rotate: bool = True
    mirror: bool = True
    dz_range: tuple[float, float] = (-10.0, 10.0)  # µm
    log_s_range: tuple[float, float] = (math.log(0.5), math.log(2.0))
    dropout_rate: float = 0.01
    eps: float = 1e-6
    lambda_disagree: float = 1.0
    lambda_consist: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries diagnostics."""

    def __init__(self, message, model=None, batch=None):
        super().__init__(message)
        self.model = model
        self.batch = batch


# -- group action on images and predictions ---------------------------------


def apply_transform(image, t: GroupTransform, optics: OpticsConfig | None = None):
    """Resample a view of ``image`` under the group element ``t``.

    ``image`` is (H, W) or (H, W, C). When ``optics`` is given, a 2-channel
    image is treated as Re/Im of a complex field with unit background:
    after the affine part the field is propagated by t.dz and its
    background-subtracted signal is scaled by exp(t.log_s). Intensity
    images are scaled directly (zero background); dz requires optics.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, c = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([t.tx, t.ty])
    gx, gy = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    rel = np.stack([gx.ravel(), gy.ravel()]) - (center + shift)[:, None]
    src = t.mirror_matrix() @ (t.rotation().T @ rel) + center[:, None]
    out = np.empty_like(img)
    for ch in range(c):
        out[..., ch] = ndimage.map_coordinates(
            img[..., ch], src, order=1, mode="reflect"
        ).reshape(h, w)
    is_field = optics is not None and c == 2
    if t.dz != 0.0:
        if not is_field:
            raise ValueError("axial propagation needs a complex field with optics")
        fld = propagate_field(ComplexField(out[..., 0] + 1j * out[..., 1], optics), t.dz)
        out = fld.to_channels(dtype=float)
    if t.log_s != 0.0:
        s = math.exp(t.log_s)
        if is_field:
            bg = np.array([1.0, 0.0])
            out = bg + s * (out - bg)
        else:
            out = s * out
    return out[..., 0] if squeeze else out


def invert_prediction(pred, t: GroupTransform):
    """Map a prediction vector [x, y(, z)(, sigma)] from view coordinates
    (relative to the image center) back to the original frame."""
    pred = np.asarray(pred, dtype=float)
    out = pred.copy()
    xy = pred[..., :2] - np.array([t.tx, t.ty])
    inv = t.mirror_matrix() @ t.rotation().T
    out[..., :2] = xy @ inv.T
    out[..., 2:] = pred[..., 2:]
    return out


def _extra_offsets(t: GroupTransform, desc: ArchDescriptor):
    offs = []
    if desc.has_z:
        offs.append(t.dz)
    if desc.has_sigma:
        offs.append(t.log_s)
    return np.array(offs)


def sample_transform(rng, cfg: TrainConfig, crop_size, desc: ArchDescriptor):
    bound = cfg.translation_bound
    if bound is None:
        bound = min(crop_size) / 4.0
    return GroupTransform(
        tx=rng.uniform(-bound, bound),
        ty=rng.uniform(-bound, bound),
        theta=rng.uniform(0.0, 2 * np.pi) if cfg.rotate else 0.0,
        mirror=bool(rng.random() < 0.5) if cfg.mirror else False,
        dz=rng.uniform(*cfg.dz_range) if desc.has_z else 0.0,
        # sampled for every channel config: with a sigma channel the scale is
        # learned equivariantly, without one it acts as an invariance
        # constraint that makes the confidence head amplitude-robust
        log_s=rng.uniform(*cfg.log_s_range),
    )


# -- training weight normalization ------------------------------------------


def training_weights(rho_logits, rng, dropout_rate=0.01, eps=1e-6):
    """Dropout-regularized, epsilon-smoothed weight normalization.

    w = (D[S(rho)] + eps) / (eps M N + sum D[S(rho)]); sums to exactly 1.
    Returns (w, cache) where cache feeds training_weights_backward."""
    s = sigmoid(rho_logits)
    if dropout_rate > 0:
        mask = (rng.random(rho_logits.shape) >= dropout_rate).astype(s.dtype)
    else:
        mask = np.ones_like(s)
    kept = mask * s
    mn = rho_logits.shape[-2] * rho_logits.shape[-1]
    denom = eps * mn + kept.sum(axis=(-2, -1), keepdims=True)
    w = (kept + eps) / denom
    return w, (s, mask, denom, w)


def training_weights_backward(dw, cache):
    """Gradient of a scalar loss wrt the logits given dL/dw."""
    s, mask, denom, w = cache
    inner = dw - (dw * w).sum(axis=(-2, -1), keepdims=True)
    return mask * sigmoid_grad(s) * inner / denom


# -- losses ------------------------------------------------------------------


def consistency_loss(maps, w, pooled=None):
    """Weighted L1 spread of decoded maps around their weighted mean.

    maps: (..., H, W, K) decoded feature maps; w: (..., H, W) weights.
    Returns (loss per batch element, pooled prediction (..., K))."""
    if pooled is None:
        pooled = (maps * w[..., None]).sum(axis=(-3, -2))
    dev = np.abs(maps - pooled[..., None, None, :])
    loss = (dev * w[..., None]).sum(axis=(-3, -2, -1))
    return loss, pooled


def disagreement_loss(preds):
    """Mean over the batch of the L1 distance to the batch-mean prediction.

    preds: (B, K) back-transformed pooled predictions."""
    preds = np.asarray(preds, dtype=float)
    if preds.shape[0] < 2:
        raise ValueError("need at least two predictions")
    mean = preds.mean(axis=0)
    return np.abs(preds - mean).sum(axis=1).mean()


# -- the trainer -------------------------------------------------------------


@dataclass
class TrainResult:
    model: ConvNet
    loss_curve: np.ndarray  # (n_batches, 3): step, disagreement, consistency


def _loss_and_grads(bundle, wcache, transforms, desc, cfg):
    """Both losses and the gradient on the raw network output maps."""
    maps = bundle.feature_maps()  # (B, Hm, Wm, K)
    w = wcache[3]
    b, hm, wm, k = maps.shape

    per_view_consist, pooled = consistency_loss(maps, w)
    l_consist = per_view_consist.mean()

    inv_mats = np.stack([t.mirror_matrix() @ t.rotation().T for t in transforms])
    shifts = np.stack([[t.tx, t.ty] for t in transforms])
    extras = np.stack([_extra_offsets(t, desc) for t in transforms])
    back = pooled.copy()
    back[:, :2] = np.einsum("bij,bj->bi", inv_mats, pooled[:, :2] - shifts)
    if k > 2:
        back[:, 2:] = pooled[:, 2:] - extras

    mean = back.mean(axis=0)
    sgn_d = np.sign(back - mean)
    l_disagree = np.abs(back - mean).sum(axis=1).mean()
    # d l_disagree / d back
    dback = (sgn_d - sgn_d.mean(axis=0)) / b
    # back through the inverse affine: d/d pooled = inv^T @ dback
    dpooled = dback.copy()
    dpooled[:, :2] = np.einsum("bji,bj->bi", inv_mats, dback[:, :2])
    dpooled *= cfg.lambda_disagree

    # consistency gradients (per-view mean over batch)
    sgn_c = np.sign(maps - pooled[:, None, None, :])
    ws = (w[..., None] * sgn_c).sum(axis=(1, 2))  # (B, K)
    dmaps = (cfg.lambda_consist / b) * w[..., None] * (sgn_c - ws[:, None, None, :])
    dev = np.abs(maps - pooled[:, None, None, :])
    dw = (cfg.lambda_consist / b) * (
        dev.sum(axis=-1) - np.einsum("bhwk,bk->bhw", maps, ws)
    )

    # disagreement gradient through pooled = sum w * maps
    dmaps += w[..., None] * dpooled[:, None, None, :]
    dw += np.einsum("bhwk,bk->bhw", maps, dpooled)

    drho = training_weights_backward(dw, wcache)
    dout = np.concatenate([dmaps, drho[..., None]], axis=-1)
    return float(l_disagree), float(l_consist), dout


def train(crop, cfg: TrainConfig, desc: ArchDescriptor | None = None,
          optics: OpticsConfig | None = None, progress=None,
          model: ConvNet | None = None) -> TrainResult:
    """Train a network on a single crop (fresh unless `model` is given).

    crop: (H, W) or (H, W, C) array; side >= 32 px, one object. For field
    crops pass the optics so dz and scale transforms act physically.
    """
    crop = np.asarray(crop, dtype=float)
    if crop.ndim == 2:
        crop = crop[..., None]
    h, w, c = crop.shape
    if min(h, w) < 32:
        raise ValueError("crop side must be >= 32 px")
    if desc is None:
        desc = model.desc if model is not None else ArchDescriptor(in_channels=c)
    if desc.in_channels != c:
        raise ValueError("descriptor channel count does not match crop")

    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = ConvNet(desc, seed=cfg.seed)
    curve = np.zeros((cfg.n_batches, 3))
    views = np.empty((cfg.batch_size, h, w, c), dtype=model.dtype)
    for step in range(cfg.n_batches):
        transforms = [
            sample_transform(rng, cfg, (h, w), desc) for _ in range(cfg.batch_size)
        ]
        for i, t in enumerate(transforms):
            views[i] = apply_transform(crop, t, optics=optics)
        bundle, cache = model.forward(views, want_cache=True)
        _, wcache = training_weights(
            bundle.rho.astype(float), rng, cfg.dropout_rate, cfg.eps
        )
        l_d, l_c, dout = _loss_and_grads(bundle, wcache, transforms, desc, cfg)
        loss = cfg.lambda_disagree * l_d + cfg.lambda_consist * l_c
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at mini-batch {step}", model=model, batch=views.copy()
            )
        grads = model.backward(cache, dout)
        model.adam_step(grads, lr=cfg.learning_rate)
        curve[step] = (step, l_d, l_c)
        if progress is not None and (step + 1) % 500 == 0:
            progress(step + 1, l_d, l_c)
    return TrainResult(model, curve)
