"""Minimal dense-tensor CNN engine: 3×3 convolutions, ReLU, 2×2 max-pool,
analytic backward passes, Adam, and checkpoint IO.

The only architecture supported is the fixed localization stack:
3 conv(3×3, 32) + ReLU, max-pool 2×2, 8 conv(3×3, 32) + ReLU, and a final
1×1 linear conv producing (dx, dy[, dz][, dsigma], rho) channels.
Arrays are (B, H, W, C) float32 by default; float64 is available for
numerical shadow checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CHANNEL_SETS = ("xy", "xyz", "xys", "xyzs")
POOL_STRIDE = 2
WIDTH = 32


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y):
    """Derivative of sigmoid given its output y."""
    return y * (1.0 - y)


@dataclass
class ArchDescriptor:
    in_channels: int = 1
    channels: str = "xy"
    # mean-centering keeps the absolute signal scale, which the confidence
    # head needs to generalize across noise levels; "standard" trades that
    # for amplitude invariance
    normalize: str = "center"  # "standard" | "center" | "none"

    def __post_init__(self):
        if self.channels not in CHANNEL_SETS:
            raise ValueError(f"channels must be one of {CHANNEL_SETS}")
        if self.normalize not in ("standard", "center", "none"):
            raise ValueError("normalize must be 'standard', 'center' or 'none'")

    @property
    def n_extra(self) -> int:
        return len(self.channels) - 2

    @property
    def has_z(self) -> bool:
        return "z" in self.channels

    @property
    def has_sigma(self) -> bool:
        return "s" in self.channels

    @property
    def out_channels(self) -> int:
        return 3 + self.n_extra

    def layer_shapes(self):
        """(kh, kw, cin, cout) for each conv layer, in order."""
        shapes = [(3, 3, self.in_channels, WIDTH)]
        shapes += [(3, 3, WIDTH, WIDTH)] * 2
        shapes += [(3, 3, WIDTH, WIDTH)] * 8
        shapes += [(1, 1, WIDTH, self.out_channels)]
        return shapes


# index (within the conv-layer list) after which the max-pool sits,
# and the final linear layer index
POOL_AFTER = 2
N_CONV = 12


def normalize_input(x, mode):
    """Per-image input normalization over all pixels and channels."""
    if mode == "none":
        return x
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    if mode == "center":
        return x - mean
    std = x.std(axis=(1, 2, 3), keepdims=True)
    return (x - mean) / (std + 1e-8)


def _im2col(x, kh, kw):
    """Zero same-padded 3×3 (or 1×1) patches, flattened row-major."""
    b, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(b * h * w, c)
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w, :] = x
    cols = np.empty((b, h, w, kh * kw * c), dtype=x.dtype)
    idx = 0
    for di in range(kh):
        for dj in range(kw):
            cols[..., idx : idx + c] = xp[:, di : di + h, dj : dj + w, :]
            idx += c
    return cols.reshape(b * h * w, kh * kw * c)


def _col2im(dcols, x_shape, kh, kw):
    b, h, w, c = x_shape
    if kh == 1 and kw == 1:
        return dcols.reshape(b, h, w, c)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=dcols.dtype)
    dcols = dcols.reshape(b, h, w, kh * kw * c)
    idx = 0
    for di in range(kh):
        for dj in range(kw):
            dxp[:, di : di + h, dj : dj + w, :] += dcols[..., idx : idx + c]
            idx += c
    return dxp[:, ph : ph + h, pw : pw + w, :]


def conv_forward_exact(x, w, bias):
    """Position-independent conv: elementwise multiply-add in a fixed order.

    BLAS GEMM rounds differently depending on a row's position in the matrix,
    which breaks bit-exact translation equivariance; this path trades speed
    for positional determinism and is used by equivariance checks."""
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv layer expects {cin} input channels, got {x.shape[-1]}")
    b, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, h + 2 * ph, wd + 2 * pw, cin), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + wd, :] = x
    out = np.zeros((b, h, wd, cout), dtype=x.dtype) + bias.astype(x.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di : di + h, dj : dj + wd, :]
            for ci in range(cin):
                out += patch[..., ci : ci + 1] * w[di, dj, ci]
    return out


def conv_forward(x, w, bias):
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(
            f"conv layer expects {cin} input channels, got {x.shape[-1]}"
        )
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(kh * kw * cin, cout) + bias
    b, h, wdt, _ = x.shape
    return out.reshape(b, h, wdt, cout), cols


def conv_backward(dout, cols, x_shape, w):
    kh, kw, cin, cout = w.shape
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(kh * kw * cin, cout).T
    dx = _col2im(dcols, x_shape, kh, kw)
    return dx, dw, db


def maxpool_forward(x):
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError("max-pool needs even spatial dims")
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(b, h // 2, w // 2, 4, c)
    # np.argmax takes the first maximum, giving deterministic row-major
    # tie routing in the backward pass
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, arg


def maxpool_backward(dout, arg, x_shape):
    b, h, w, c = x_shape
    dwin = np.zeros((b, h // 2, w // 2, 4, c), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dwin = dwin.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return dwin.reshape(b, h, w, c)


@dataclass
class FeatureBundle:
    """Decoded network output for one batch of images."""

    raw: np.ndarray  # (B, Hm, Wm, 3+E) network output
    x: np.ndarray  # decoded positions, input-px relative to image center
    y: np.ndarray
    z: np.ndarray | None
    sigma: np.ndarray | None
    rho: np.ndarray  # confidence logits
    input_shape: tuple[int, int]

    def weights(self):
        """Inference weights: element-wise sigmoid of the logits."""
        return sigmoid(self.rho)

    def feature_maps(self):
        """Decoded per-channel maps stacked last: x, y[, z][, sigma]."""
        maps = [self.x, self.y]
        if self.z is not None:
            maps.append(self.z)
        if self.sigma is not None:
            maps.append(self.sigma)
        return np.stack(maps, axis=-1)


def decode_positions(out, input_shape, channels="xy"):
    """Map raw output channels to a FeatureBundle.

    x_ij = dx_ij + (i + 1/2) k - N/2 with k = 2: coordinates in input-pixel
    units relative to the image center (analogous for y)."""
    n, m = input_shape
    k = POOL_STRIDE
    hm, wm = out.shape[1], out.shape[2]
    gi = (np.arange(hm, dtype=out.dtype) + 0.5) * k - n / 2.0
    gj = (np.arange(wm, dtype=out.dtype) + 0.5) * k - m / 2.0
    x = out[..., 0] + gi[None, :, None]
    y = out[..., 1] + gj[None, None, :]
    idx = 2
    z = sig = None
    if "z" in channels:
        z = out[..., idx]
        idx += 1
    if "s" in channels:
        sig = out[..., idx]
        idx += 1
    rho = out[..., idx]
    return FeatureBundle(out, x, y, z, sig, rho, (n, m))


class ConvNet:
    """The fixed localization network with its Adam state.

    Weight layout per layer: (kh, kw, cin, cout) kernels plus (cout,) biases.
    """

    def __init__(self, desc: ArchDescriptor | None = None, seed=0, dtype=np.float32):
        self.desc = desc or ArchDescriptor()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.weights = []
        for kh, kw, cin, cout in self.desc.layer_shapes():
            limit = np.sqrt(6.0 / (kh * kw * cin))
            w = rng.uniform(-limit, limit, (kh, kw, cin, cout)).astype(self.dtype)
            b = np.zeros(cout, dtype=self.dtype)
            self.weights.append([w, b])
        self.adam_m = [[np.zeros_like(w), np.zeros_like(b)] for w, b in self.weights]
        self.adam_v = [[np.zeros_like(w), np.zeros_like(b)] for w, b in self.weights]
        self.step = 0

    # -- forward / backward -------------------------------------------------

    def forward(self, x, want_cache=False, exact=False):
        """x: (B, H, W, C) or (H, W, C). Returns (FeatureBundle, cache).

        ``exact=True`` uses the positionally deterministic conv path (no
        backward cache available in this mode)."""
        if exact and want_cache:
            raise ValueError("exact mode does not build a backward cache")
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        x = np.ascontiguousarray(x, dtype=self.dtype)
        b, h, w, c = x.shape
        if h % 2 or w % 2 or h < 16 or w < 16:
            raise ValueError("input spatial dims must be even and >= 16")
        if c != self.desc.in_channels:
            raise ValueError(
                f"first conv layer expects {self.desc.in_channels} channels, got {c}"
            )
        x = normalize_input(x, self.desc.normalize)
        cache = {"input_shape": (h, w), "layers": []} if want_cache else None
        cur = x
        for li, (wgt, bias) in enumerate(self.weights):
            try:
                if exact:
                    out, cols = conv_forward_exact(cur, wgt, bias), None
                else:
                    out, cols = conv_forward(cur, wgt, bias)
            except ValueError as err:
                raise ValueError(f"layer {li}: {err}") from err
            is_last = li == N_CONV - 1
            if not is_last:
                act = np.maximum(out, 0.0)
            else:
                act = out
            entry = None
            if want_cache:
                entry = {"cols": cols, "x_shape": cur.shape, "relu_out": None, "pool": None}
                if not is_last:
                    entry["relu_out"] = act
            pooled = act
            if li == POOL_AFTER:
                pooled, arg = maxpool_forward(act)
                if want_cache:
                    entry["pool"] = (arg, act.shape)
            if want_cache:
                cache["layers"].append(entry)
            cur = pooled
        bundle = decode_positions(cur, (h, w), self.desc.channels)
        if squeeze and want_cache:
            cache["squeezed"] = True
        return bundle, cache

    def backward(self, cache, dout):
        """Gradient of a scalar loss wrt all kernels and biases.

        dout: gradient on the raw output maps (B, Hm, Wm, 3+E)."""
        if cache is None or "layers" not in cache or len(cache["layers"]) != N_CONV:
            raise ValueError("stale or missing forward cache")
        grads = [[None, None] for _ in range(N_CONV)]
        d = np.ascontiguousarray(dout, dtype=self.dtype)
        if d.ndim == 3:
            d = d[None]
        for li in range(N_CONV - 1, -1, -1):
            entry = cache["layers"][li]
            if li == POOL_AFTER:
                arg, pre_shape = entry["pool"]
                d = maxpool_backward(d, arg, pre_shape)
            if entry["relu_out"] is not None:
                d = d * (entry["relu_out"] > 0)
            d, dw, db = conv_backward(d, entry["cols"], entry["x_shape"], self.weights[li][0])
            grads[li] = [dw, db]
        return grads

    # -- optimization -------------------------------------------------------

    def adam_step(self, grads, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        for li, (gw, gb) in enumerate(grads):
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise FloatingPointError(f"non-finite gradient at layer {li}")
        self.step += 1
        t = self.step
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for li, (gw, gb) in enumerate(grads):
            for pi, g in enumerate((gw, gb)):
                g = g.astype(self.dtype)
                m = self.adam_m[li][pi]
                v = self.adam_v[li][pi]
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                self.weights[li][pi] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    # -- serialization ------------------------------------------------------

    MAGIC = b"LSTR1"

    def save(self, path):
        header = {
            "descriptor": {
                "in_channels": self.desc.in_channels,
                "channels": self.desc.channels,
                "normalize": self.desc.normalize,
            },
            "step": self.step,
            "tensors": [],
        }
        blobs = []
        for group, arrs in (("w", self.weights), ("m", self.adam_m), ("v", self.adam_v)):
            for li, (w, b) in enumerate(arrs):
                for name, arr in ((f"{group}{li}.k", w), (f"{group}{li}.b", b)):
                    header["tensors"].append({"name": name, "shape": list(arr.shape)})
                    blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        hdr = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(hdr)))
            fh.write(hdr)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path, expect: ArchDescriptor | None = None, dtype=np.float32):
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 9 or data[:5] != cls.MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack_from("<I", data, 5)
        if len(data) < 9 + hlen:
            raise ValueError(f"{path}: truncated checkpoint header")
        header = json.loads(data[9 : 9 + hlen])
        desc = ArchDescriptor(**header["descriptor"])
        if expect is not None and (
            expect.channels != desc.channels or expect.in_channels != desc.in_channels
        ):
            raise ValueError(
                f"architecture mismatch: checkpoint is {desc.channels}/"
                f"{desc.in_channels}ch, expected {expect.channels}/{expect.in_channels}ch"
            )
        model = cls(desc, dtype=dtype)
        model.step = int(header["step"])
        offset = 9 + hlen
        arrays = []
        for meta in header["tensors"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            end = offset + 4 * count
            if end > len(data):
                raise ValueError(f"{path}: truncated checkpoint payload")
            arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(meta["shape"])
            arrays.append(arr.astype(dtype))
            offset = end
        n = N_CONV * 2
        for group_idx, target in enumerate((model.weights, model.adam_m, model.adam_v)):
            flat = arrays[group_idx * n : (group_idx + 1) * n]
            for li in range(N_CONV):
                if flat[2 * li].shape != target[li][0].shape:
                    raise ValueError(f"{path}: tensor shape mismatch at layer {li}")
                target[li][0] = flat[2 * li].copy()
                target[li][1] = flat[2 * li + 1].copy()
        return model
