"""Synthetic data generation: particle images, scalar-field holograms, Brownian traces.

Coordinate convention used throughout the package: positions are (x, y) where
x runs along axis 0 (rows) and y along axis 1 (columns), in units of pixels
with pixel centers at integer coordinates. Holographic positions are given in
micrometers and converted through the pixel pitch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SHAPES = ("point", "sphere", "annulus", "ellipse", "crescent")

# analytic profile width of the point shape and the PSF-emulating blur, px
POINT_SIGMA = 1.5
PSF_SIGMA = 1.0
SUPERSAMPLE = 8


@dataclass
class ParticleSpec:
    """One particle to render: shape, sub-pixel position, orientation, size, intensity.

    ``radii`` meaning per shape: point (), sphere (r,), annulus (r_in, r_out),
    ellipse (semi_axis_a, semi_axis_b), crescent (r_outer, r_inner, inner_offset).
    """

    shape: str
    position: tuple[float, float]
    orientation: float = 0.0
    radii: tuple[float, ...] = ()
    intensity: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.intensity <= 0:
            raise ValueError("intensity must be > 0")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be > 0")
        self.orientation = float(np.mod(self.orientation, 2 * np.pi))
        n_expected = {"point": 0, "sphere": 1, "annulus": 2, "ellipse": 2, "crescent": 3}
        if len(self.radii) != n_expected[self.shape]:
            raise ValueError(
                f"{self.shape} needs {n_expected[self.shape]} size parameters, got {len(self.radii)}"
            )

    def footprint_radius(self) -> float:
        pad = 4.0 * PSF_SIGMA
        if self.shape == "point":
            return 4.0 * POINT_SIGMA + pad
        if self.shape == "sphere":
            return self.radii[0] + pad
        if self.shape == "annulus":
            return self.radii[1] + pad
        if self.shape == "ellipse":
            return max(self.radii) + pad
        return self.radii[0] + pad  # crescent


def default_spec(shape, position, orientation=0.0, intensity=1.0) -> ParticleSpec:
    """Canonical size parameters for the five benchmark shapes."""
    radii = {
        "point": (),
        "sphere": (5.0,),
        "annulus": (3.0, 6.0),
        "ellipse": (8.0, 3.0),
        "crescent": (6.0, 5.5, 2.0),
    }[shape]
    return ParticleSpec(shape, tuple(position), orientation, radii, intensity)


def _profile(spec: ParticleSpec, dx, dy):
    """Unblurred intensity profile on coordinates relative to spec.position."""
    c, s = np.cos(spec.orientation), np.sin(spec.orientation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if spec.shape == "point":
        return np.exp(-(u * u + v * v) / (2 * POINT_SIGMA**2))
    if spec.shape == "sphere":
        r = spec.radii[0]
        arg = 1.0 - (u * u + v * v) / (r * r)
        return np.sqrt(np.clip(arg, 0.0, None))
    if spec.shape == "annulus":
        r_in, r_out = spec.radii
        rho = np.sqrt(u * u + v * v)
        return ((rho >= r_in) & (rho <= r_out)).astype(float)
    if spec.shape == "ellipse":
        a, b = spec.radii
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(float)
    # crescent: outer disc minus an offset inner disc; symmetry axis along u
    r_out, r_in, off = spec.radii
    outer = u * u + v * v <= r_out * r_out
    inner = (u - off) ** 2 + v * v <= r_in * r_in
    return (outer & ~inner).astype(float)


def render_supersampled(spec: ParticleSpec, canvas, supersample=SUPERSAMPLE):
    """Render on a supersample-times finer grid, PSF blur included."""
    h, w = canvas
    x0, y0 = spec.position
    fp = spec.footprint_radius()
    if x0 - fp < -0.5 or y0 - fp < -0.5 or x0 + fp > h - 0.5 or y0 + fp > w - 0.5:
        raise ValueError("particle out of canvas")
    ss = supersample
    # supersampled pixel centers in original pixel units
    xs = (np.arange(h * ss) + 0.5) / ss - 0.5
    ys = (np.arange(w * ss) + 0.5) / ss - 0.5
    dx = xs[:, None] - x0
    dy = ys[None, :] - y0
    img = spec.intensity * _profile(spec, dx, dy)
    return ndimage.gaussian_filter(img, PSF_SIGMA * ss, mode="constant")


def downsample(img_ss, supersample=SUPERSAMPLE):
    ss = supersample
    h, w = img_ss.shape[0] // ss, img_ss.shape[1] // ss
    return img_ss.reshape(h, ss, w, ss).mean(axis=(1, 3))


def render_particle(spec: ParticleSpec, canvas, supersample=SUPERSAMPLE):
    """Noiseless image of one particle on an (H, W) canvas."""
    return downsample(render_supersampled(spec, canvas, supersample), supersample)


def render_frame(specs, canvas, supersample=SUPERSAMPLE):
    """Sum of several rendered particles."""
    out = np.zeros(canvas)
    for spec in specs:
        out += render_particle(spec, canvas, supersample)
    return out


def add_noise(image, snr, seed, background=0.0):
    """Additive white Gaussian noise at noise std = (peak - background) / snr.

    ``snr = np.inf`` returns the input unchanged. Deterministic per seed.
    """
    if not snr > 0:
        raise ValueError("snr must be > 0")
    image = np.asarray(image, dtype=float)
    if np.isinf(snr):
        return image.copy()
    peak = np.max(np.abs(image - background))
    if peak <= 0:
        raise ValueError("image has no signal above background")
    sigma = peak / snr
    rng = np.random.default_rng(seed)
    return image + rng.normal(0.0, sigma, image.shape)


@dataclass
class OpticsConfig:
    """Scalar-optics parameters for hologram simulation and propagation."""

    wavelength: float = 0.633  # µm
    medium_index: float = 1.33
    pixel_pitch: float = 0.2  # µm/px
    band_limit: float = 1.0  # NA-style limit, refractive-index units
    oil_index: float = 1.5

    def __post_init__(self):
        if self.wavelength <= 0 or self.pixel_pitch <= 0:
            raise ValueError("wavelength and pixel pitch must be > 0")
        if self.medium_index < 1:
            raise ValueError("medium index must be >= 1")
        if not 0 < self.band_limit <= self.medium_index:
            raise ValueError("band limit must lie in (0, medium_index]")


@dataclass
class ComplexField:
    """Complex scalar field sampled on an (H, W) grid, with its optics."""

    data: np.ndarray
    optics: OpticsConfig = field(default_factory=OpticsConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 2 or min(self.data.shape) < 16:
            raise ValueError("field must be 2D with H, W >= 16")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field must be finite")

    def to_channels(self, dtype=np.float32):
        return np.stack([self.data.real, self.data.imag], axis=-1).astype(dtype)

    @classmethod
    def from_channels(cls, channels, optics=None):
        data = channels[..., 0] + 1j * channels[..., 1]
        return cls(data, optics or OpticsConfig())


def clausius_mossotti(radius_um, n_particle, n_medium):
    """Polarizability (µm³) of a small sphere: 3V (n_p² - n_m²) / (n_p² + 2 n_m²)."""
    volume = 4.0 / 3.0 * np.pi * radius_um**3
    return 3.0 * volume * (n_particle**2 - n_medium**2) / (n_particle**2 + 2 * n_medium**2)


def _k_grids(shape, optics):
    h, w = shape
    kx = 2 * np.pi * np.fft.fftfreq(h, d=optics.pixel_pitch)
    ky = 2 * np.pi * np.fft.fftfreq(w, d=optics.pixel_pitch)
    return kx[:, None], ky[None, :]


# amplitude of the scattered point response per unit polarizability; arbitrary
# but fixed so the 228 nm reference particle has a clearly visible signature
SIGNAL_SCALE = 20.0


def simulate_hologram(radius_um, n_particle, position_um, optics, canvas,
                      signal_scale=SIGNAL_SCALE):
    """Weak-scatterer hologram: unit plane reference plus a band-limited
    point response whose amplitude is the Clausius-Mossotti polarizability.

    ``position_um`` is (x, y, z) in µm; x, y measured from the pixel-(0, 0)
    center, z from the focal plane.
    """
    x_um, y_um, z_um = position_um
    if n_particle < optics.medium_index:
        warnings.warn("particle index below medium index: near-zero contrast", UserWarning)
    alpha = clausius_mossotti(radius_um, n_particle, optics.medium_index)
    kx, ky = _k_grids(canvas, optics)
    k_band = 2 * np.pi * optics.band_limit / optics.wavelength
    mask = kx**2 + ky**2 <= k_band**2
    spectrum = np.exp(-1j * (kx * x_um + ky * y_um)) * mask
    h = np.fft.ifft2(spectrum)
    h = h / (mask.sum() / (canvas[0] * canvas[1]))  # peak response 1 at the particle
    field = ComplexField(1.0 + 1j * alpha * signal_scale * h, optics)
    if z_um != 0.0:
        field = propagate_field(field, z_um)
    return field


def propagate_field(fld: ComplexField, dz_um) -> ComplexField:
    """Angular-spectrum propagation by dz (µm), phase-referenced to the
    on-axis plane wave so a unit background stays exactly 1. Evanescent
    components are zeroed."""
    optics = fld.optics
    kx, ky = _k_grids(fld.data.shape, optics)
    k0 = 2 * np.pi * optics.medium_index / optics.wavelength
    arg = k0**2 - kx**2 - ky**2
    propagating = arg > 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    phase = np.where(propagating, np.exp(1j * dz_um * (kz - k0)), 0.0)
    spectrum = np.fft.fft2(fld.data) * phase
    return ComplexField(np.fft.ifft2(spectrum), optics)


@dataclass
class BrownianConfig:
    """Isotropic 3D Brownian motion with optional Gaussian localization noise."""

    diffusion: float = 0.97  # µm²/s
    frame_interval: float = 1.0 / 30.0  # s
    n_frames: int = 100
    n_traces: int = 1
    localization_noise: float = 0.0  # µm, per-axis std
    seed: int = 0

    def __post_init__(self):
        if self.diffusion < 0:
            raise ValueError("diffusion must be >= 0")
        if self.frame_interval <= 0:
            raise ValueError("frame interval must be > 0")
        if self.n_frames < 2 or self.n_traces < 1:
            raise ValueError("need n_frames >= 2 and n_traces >= 1")


def simulate_brownian_traces(cfg: BrownianConfig) -> np.ndarray:
    """(n_traces, n_frames, 3) positions in µm, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    step_std = np.sqrt(2.0 * cfg.diffusion * cfg.frame_interval)
    steps = rng.normal(0.0, step_std, (cfg.n_traces, cfg.n_frames - 1, 3))
    traces = np.concatenate(
        [np.zeros((cfg.n_traces, 1, 3)), np.cumsum(steps, axis=1)], axis=1
    )
    if cfg.localization_noise > 0:
        traces = traces + rng.normal(0.0, cfg.localization_noise, traces.shape)
    return traces
