"""Explicit differentiable B-mode volume rendering.

One frame is an (axial, lateral) grid of medium properties. Rendering walks
each scanline: residual beam energy decays exponentially with attenuation and
is depleted multiplicatively by reflection; the echo image is the sum of the
reflected energy and the backscattered speckle energy, both blurred by a
cosine-modulated Gaussian point spread function; the directional network's
reflection intensity is added per pixel and the result clipped into [0, 1].

Everything accepts ndarrays or autodiff Values so the same code serves the
ground-truth simulator and the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import ScanGeometry


@dataclass
class PropertyGrid:
    """Per-sample medium properties of one frame; axis 0 = axial (depth)."""

    alpha: object   # attenuation >= 0
    beta: object    # reflectivity in [0, 1]
    rho: object     # scattering density in [0, 1]
    phi: object     # scattering amplitude in [0, 1]

    def __post_init__(self):
        shapes = {np.shape(self._arr(f)) for f in ("alpha", "beta", "rho", "phi")}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"property fields must share one (H, W) shape, got {shapes}")

    def _arr(self, name):
        v = getattr(self, name)
        return v.data if isinstance(v, ad.Value) else np.asarray(v)

    @property
    def shape(self):
        return np.shape(self._arr("alpha"))

    def validate(self):
        for name, lo, hi in (("alpha", 0, None), ("beta", 0, 1),
                             ("rho", 0, 1), ("phi", 0, 1)):
            a = self._arr(name)
            if a.min() < lo or (hi is not None and a.max() > hi):
                raise ValueError(f"{name} outside its physical range")
        return self


@dataclass(frozen=True)
class PsfConfig:
    """Cosine-modulated 2D Gaussian point spread function.

    sigma_axial is in axial samples, sigma_lateral in scanlines, frequency in
    cycles per axial sample; the kernel is truncated at `truncation` sigmas.
    """

    sigma_axial: float = 1.5
    sigma_lateral: float = 1.0
    frequency: float = 0.2
    truncation: float = 3.0

    def __post_init__(self):
        if self.sigma_axial <= 0 or self.sigma_lateral <= 0:
            raise ValueError("PSF standard deviations must be positive")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1 sigma")


def psf_kernel(cfg: PsfConfig, dtype=np.float64) -> np.ndarray:
    """kernel[x, y] = exp(-(x^2/sx^2 + y^2/sy^2)/2) * cos(2 pi f x).

    x is the axial offset (rows), y the lateral offset (columns); no
    normalization is applied.
    """
    ax = int(np.ceil(cfg.truncation * cfg.sigma_axial))
    ay = int(np.ceil(cfg.truncation * cfg.sigma_lateral))
    x = np.arange(-ax, ax + 1, dtype=np.float64)[:, None]
    y = np.arange(-ay, ay + 1, dtype=np.float64)[None, :]
    gauss = np.exp(-0.5 * (x ** 2 / cfg.sigma_axial ** 2 + y ** 2 / cfg.sigma_lateral ** 2))
    return (gauss * np.cos(2.0 * np.pi * cfg.frequency * x)).astype(dtype)


# ---------------------------------------------------------------------------
# scanline energy transport

def _exclusive_cumsum(x, w, dtype):
    cs = ad.cumulative_sum(x, axis=0)
    zeros = np.zeros((1, w), dtype=dtype)
    return ad.concat([zeros, cs[:-1]], axis=0)


def _exclusive_cumprod(x, w, dtype):
    cp = ad.cumulative_product(x, axis=0)
    ones = np.ones((1, w), dtype=dtype)
    return ad.concat([ones, cp[:-1]], axis=0)


def residual_energy(grid: PropertyGrid, frequency: float, axial_spacing: float,
                    source_intensity: float = 1.0):
    """Beam energy remaining at each sample.

    I(r, t) = I0 * exp(-sum_{tau<t} alpha*f*dt) * prod_{n<t} (1 - beta(r, n)),
    so I(r, 0) = I0 and energy reflected at a sample is unavailable beyond it.
    """
    if source_intensity <= 0:
        raise ValueError("source intensity must be positive")
    h, w = grid.shape
    dtype = grid._arr("alpha").dtype
    decay = grid.alpha * float(frequency * axial_spacing)
    trans = 1.0 - grid.beta
    att = ad.exp(-_exclusive_cumsum(decay, w, dtype))
    through = _exclusive_cumprod(trans, w, dtype)
    return float(source_intensity) * att * through


def reflected_energy(intensity, beta, kernel):
    """Echo from interfaces: (I * beta) convolved with the PSF."""
    return ad.conv2d(intensity * beta, kernel)


def kumaraswamy_eta(u, rho, concentration):
    """Smooth per-cell scatterer strength in [0, 1].

    Inverse CDF of Kumaraswamy(a, b) with a = max(rho*nu, 1e-4),
    b = max((1-rho)*nu, 1e-4) evaluated at frozen uniforms `u`; behaves like a
    Beta-family draw but stays closed-form and differentiable in rho.
    """
    u = np.asarray(u, dtype=np.float64)
    rho_d = rho.data if isinstance(rho, ad.Value) else np.asarray(rho)
    dtype = rho_d.dtype
    log1mu = np.log1p(-u).astype(dtype)        # < 0, finite since u in (0, 1)
    nu = float(concentration)
    if nu <= 0:
        raise ValueError("concentration must be positive")
    a = ad.clamp(rho * nu, lo=1e-4)
    b = ad.clamp((1.0 - rho) * nu, lo=1e-4)
    w = ad.exp(log1mu / b)                     # (1-u)^(1/b) in (0, 1]
    inner = ad.clamp(1.0 - w, lo=float(np.finfo(dtype).tiny))
    return ad.exp(ad.log(inner) / a)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        x = (x + np.uint64(0x9E3779B97F4A7C15))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def frozen_uniforms(seed: int, shape: tuple) -> np.ndarray:
    """Counter-based uniforms in (0, 1), a pure function of (seed, t, r)."""
    h, w = shape
    t = np.arange(h, dtype=np.uint64)[:, None]
    r = np.arange(w, dtype=np.uint64)[None, :]
    counter = (t << np.uint64(32)) | r
    mixed_seed = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    z = _splitmix64(counter ^ mixed_seed)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54


def scatter_field(rho, phi, seed: int, concentration: float = 4.0):
    """Frozen speckle field S = eta * phi.

    The per-cell uniforms are a counter-based hash of (seed, axial index,
    scanline index): constant across training iterations, bit-identical
    across calls.
    """
    rho_d = rho.data if isinstance(rho, ad.Value) else np.asarray(rho)
    u = frozen_uniforms(seed, rho_d.shape)
    return kumaraswamy_eta(u, rho, concentration) * phi


def backscatter(intensity, scatter, kernel):
    """Speckle echo: (I * S) convolved with the PSF."""
    return ad.conv2d(intensity * scatter, kernel)


def render_bmode(grid: PropertyGrid, psf: PsfConfig, geom: ScanGeometry,
                 seed: int, concentration: float = 4.0,
                 source_intensity: float = 1.0):
    """Reflected plus backscattered energy for one frame (before the
    directional reflection term and final clipping)."""
    dtype = grid._arr("alpha").dtype
    kernel = psf_kernel(psf, dtype=dtype)
    intensity = residual_energy(grid, geom.frequency, geom.axial_spacing,
                                source_intensity)
    reflected = reflected_energy(intensity, grid.beta, kernel)
    scat = scatter_field(grid.rho, grid.phi, seed, concentration)
    back = backscatter(intensity, scat, kernel)
    return reflected + back


def compose_final(c_render, c_ref):
    """Final B-mode image: clip(render + reflection intensity) into [0, 1]."""
    return ad.clamp(c_render + c_ref, 0.0, 1.0)


def validate_bmode(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("B-mode image must be 2D")
    if not np.all(np.isfinite(img)):
        raise ValueError("B-mode image must be finite")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("B-mode image values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------------
# interface physics

def interface_coefficients(z1, z2, mode: str = "energy_conserving"):
    """Reflected/transmitted intensity fractions across an impedance step.

    energy_conserving: R = ((Z2-Z1)/(Z2+Z1))^2, T = 4*Z1*Z2/(Z1+Z2)^2, so
    R + T = 1. paper_exact instead uses T = (4*Z1*Z2/(Z1+Z2))^2, the printed
    form, which is not energy-conserving (documented behavior).
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if np.any(z1 <= 0) or np.any(z2 <= 0):
        raise ValueError("impedances must be positive")
    r = ((z2 - z1) / (z2 + z1)) ** 2
    if mode == "energy_conserving":
        t = 4.0 * z1 * z2 / (z1 + z2) ** 2
    elif mode == "paper_exact":
        t = (4.0 * z1 * z2 / (z1 + z2)) ** 2
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return r, t


# ---------------------------------------------------------------------------
# frame I/O

def write_pgm(img: np.ndarray, path) -> None:
    """8-bit grayscale PGM (P5), rows = axial samples."""
    img = validate_bmode(img)
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by `write_pgm`; returns floats in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise ValueError(f"truncated PGM header in {path}")
        c = blob[i:i + 1]
        if c == b"#":
            i = blob.index(b"\n", i) + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ValueError(f"not a P5 PGM: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval} in {path}")
    i += 1  # single whitespace after maxval
    if len(blob) - i < h * w:
        raise ValueError(f"truncated PGM payload in {path}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=i)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def write_float_raw(img: np.ndarray, path) -> None:
    """Float frame: one-line text header 'ULRIMG v1 H W', then little-endian
    float32 row-major payload."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"ULRIMG v1 {h} {w}\n".encode("ascii"))
        fh.write(img.astype("<f4").tobytes())


def read_float_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 4 or header[0] != "ULRIMG" or header[1] != "v1":
            raise ValueError(f"bad float image header in {path}")
        h, w = int(header[2]), int(header[3])
        data = np.frombuffer(fh.read(), dtype="<f4", count=h * w)
        if data.size != h * w:
            raise ValueError(f"truncated float image payload in {path}")
        return data.reshape(h, w).astype(np.float32)
