"""Input encodings for the implicit field networks.

Three families:

* Fourier positional encoding of normalized 3D positions.
* Reflection-direction parameterization: mirror reflection about a surface
  normal, optionally perturbed toward the outgoing direction by a roughness
  scalar (microfacet correction), for the directional network's input.
* Reflective harmonic encoding (RHE): real spherical harmonics of the
  reflection direction, attenuated per degree by exp(-l(l+1)/(2*kappa)),
  the vMF-concentration weighting with kappa = 1/roughness.

All functions accept plain ndarrays or autodiff Values and are batched over
leading axes, so gradients can flow from the rendered image back into the
predicted normals and roughness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial, pi, sqrt

import numpy as np

from . import autodiff as ad

KAPPA_MIN = 1e-4
KAPPA_MAX = 1e12


# ---------------------------------------------------------------------------
# Fourier positional encoding

@dataclass(frozen=True)
class FourierConfig:
    """Frequency count for sin/cos position features.

    Callers normalize world coordinates into [-1, 1] before encoding.
    """

    n_freq: int = 6
    include_identity: bool = True

    def __post_init__(self):
        if self.n_freq < 0:
            raise ValueError("n_freq must be non-negative")
        if self.n_freq > 16:
            # beyond 2^16*pi the float32 sine argument loses precision
            raise ValueError("n_freq must be <= 16")

    def output_dim(self, in_dim: int = 3) -> int:
        return in_dim * 2 * self.n_freq + (in_dim if self.include_identity else 0)


def fourier_encode(x, cfg: FourierConfig):
    """[x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)].

    `x` has components along the last axis; output concatenates along it.
    """
    parts = []
    if cfg.include_identity:
        parts.append(x)
    for k in range(cfg.n_freq):
        scaled = x * float(2.0 ** k * np.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    if not parts:
        raise ValueError("encoding with n_freq=0 must include the identity")
    if len(parts) == 1:
        return parts[0]
    return ad.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# reflection-direction parameterization

def _dot(a, b):
    return ad.reduce_sum(a * b, axis=-1, keepdims=True)


def normalize(v):
    return v / ad.sqrt(ad.reduce_sum(v * v, axis=-1, keepdims=True))


def reflect(v, n):
    """Mirror direction 2(v.n)n - v; unit for unit inputs."""
    return 2.0 * _dot(v, n) * n - v


def perturb_normal(n, v, delta):
    """Microfacet normal: n + delta*(v - n(n.v)), renormalized to unit length.

    `delta` is the roughness scalar (>= 0), broadcast over the vector axis.
    The tangential offset is orthogonal to n, so the perturbed vector's norm
    is >= 1 and renormalization is always well-defined for unit n.
    """
    tangent = v - n * _dot(n, v)
    m = n + delta * tangent
    md = m.data if isinstance(m, ad.Value) else m
    norms = np.linalg.norm(md, axis=-1)
    assert norms.min() > 1e-12, "perturbed normal degenerated to zero length"
    return normalize(m)


def specular_direction(v, n, delta):
    """Reflection about the roughness-perturbed normal."""
    return reflect(v, perturb_normal(n, v, delta))


@dataclass(frozen=True)
class ReflectionFrame:
    """Per-point reflection geometry: outgoing direction, normal, roughness.

    `kappa` is the vMF concentration used by the harmonic encoding,
    conventionally the reciprocal of the same roughness scalar.
    """

    v: np.ndarray       # unit outgoing direction (toward the transducer)
    n: np.ndarray       # unit surface normal
    delta: float        # roughness >= 0
    kappa: float        # concentration > 0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        for name, vec in (("v", v), ("n", n)):
            if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit vector")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "n", n)

    def specular(self) -> np.ndarray:
        return specular_direction(self.v, self.n, self.delta)


# ---------------------------------------------------------------------------
# real spherical harmonics (Cartesian polynomial form)

def full_basis(max_degree: int) -> tuple[tuple[int, int], ...]:
    return tuple((l, m) for l in range(max_degree + 1) for m in range(-l, l + 1))


@dataclass(frozen=True)
class RheConfig:
    """Spherical-harmonic basis selection for the reflective encoding."""

    max_degree: int = 4
    basis: tuple = field(default=None)

    def __post_init__(self):
        if self.max_degree < 1:
            raise ValueError("max_degree must be a positive integer")
        basis = self.basis if self.basis is not None else full_basis(self.max_degree)
        basis = tuple((int(l), int(m)) for l, m in basis)
        if len(set(basis)) != len(basis):
            raise ValueError("basis pairs must be unique")
        for l, m in basis:
            if not (0 <= l <= self.max_degree and abs(m) <= l):
                raise ValueError(f"invalid basis pair (l={l}, m={m})")
        object.__setattr__(self, "basis", basis)

    @property
    def output_dim(self) -> int:
        return len(self.basis)


def _sh_norm(l: int, m: int) -> float:
    am = abs(m)
    n = sqrt((2 * l + 1) / (4.0 * pi) * factorial(l - am) / factorial(l + am))
    return n * sqrt(2.0) if m != 0 else n


def sph_harm_basis(pairs, dirs):
    """Evaluate real spherical harmonics at unit directions.

    Returns a list of per-pair arrays shaped like dirs[..., 0]. Everything is
    polynomial in (x, y, z): azimuthal factors via C_m = Re[(x+iy)^m],
    S_m = Im[(x+iy)^m], polar factors via the associated Legendre recurrence
    with the (1-z^2)^(m/2) factor folded into C_m/S_m. No Condon-Shortley
    phase; the basis is orthonormal on the sphere.
    """
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    max_l = max(l for l, _ in pairs)
    max_m = max(abs(m) for _, m in pairs)

    # azimuthal polynomials
    cm = {0: None}  # C_0 = 1, treated as identity factor
    sm = {}
    if max_m >= 1:
        cm[1], sm[1] = x, y
        for m in range(2, max_m + 1):
            cm[m] = x * cm[m - 1] - y * sm[m - 1]
            sm[m] = x * sm[m - 1] + y * cm[m - 1]

    # polar polynomials Q_l^m = P_l^m / sin(theta)^m, keyed by (l, m>=0)
    q = {(0, 0): None}  # Q_0^0 = 1
    dfact = 1.0
    for m in range(0, max_l + 1):
        if m > 0:
            dfact *= 2 * m - 1
            q[(m, m)] = dfact
        if m + 1 <= max_l:
            qmm = q[(m, m)]
            q[(m + 1, m)] = float(2 * m + 1) * (z if qmm is None else z * qmm)
        for l in range(m + 2, max_l + 1):
            a = float(2 * l - 1) / (l - m)
            b = float(l + m - 1) / (l - m)
            prev2 = q[(l - 2, m)]
            term = a * (z * q[(l - 1, m)])
            q[(l, m)] = term - b if prev2 is None else term - b * prev2

    ones = np.ones_like(z.data if isinstance(z, ad.Value) else np.asarray(z))
    out = []
    for l, m in pairs:
        am = abs(m)
        qlm = q[(l, am)]
        if m > 0:
            azim = cm[am]
        elif m < 0:
            azim = sm[am]
        else:
            azim = None
        if qlm is None and azim is None:
            val = _sh_norm(l, m) * ones
        elif qlm is None:
            val = _sh_norm(l, m) * azim
        elif azim is None:
            val = _sh_norm(l, m) * qlm if not isinstance(qlm, float) else _sh_norm(l, m) * qlm * ones
        else:
            val = _sh_norm(l, m) * (qlm * azim) if not isinstance(qlm, float) \
                else (_sh_norm(l, m) * qlm) * azim
        out.append(val)
    return out


def real_sph_harm(l: int, m: int, direction):
    """Single real spherical harmonic Y_l^m at a unit direction."""
    if l < 0 or abs(m) > l:
        raise ValueError(f"invalid spherical harmonic indices (l={l}, m={m})")
    direction = np.asarray(direction, dtype=np.float64) \
        if not isinstance(direction, ad.Value) else direction
    return sph_harm_basis([(l, m)], direction)[0]


# ---------------------------------------------------------------------------
# reflective harmonic encoding

def rhe_weights(kappa, cfg: RheConfig):
    """Per-basis-entry attenuations A_l = exp(-l(l+1)/(2*kappa)).

    `kappa` may be a scalar or batched array/Value; it is clamped into
    [1e-4, 1e12] so the exponential never over/underflows. Output gains a
    trailing basis axis.
    """
    kd = np.asarray(kappa.data if isinstance(kappa, ad.Value) else kappa)
    if np.any(kd <= 0):
        raise ValueError("kappa must be > 0")
    coeffs = np.array([l * (l + 1) / 2.0 for l, _ in cfg.basis])
    if isinstance(kappa, ad.Value):
        coeffs = coeffs.astype(kd.dtype)
        k = ad.clamp(kappa, KAPPA_MIN, KAPPA_MAX)
        kinv = 1.0 / k
        if kd.ndim > 0:
            kinv = ad.reshape(kinv, kd.shape + (1,))
        return ad.exp(kinv * (-coeffs))
    k = np.clip(kd, KAPPA_MIN, KAPPA_MAX)
    kinv = 1.0 / k
    if kd.ndim > 0:
        kinv = kinv[..., None]
    return np.exp(-coeffs * kinv)


def rhe_encode(direction, kappa, cfg: RheConfig):
    """Entries A_l(kappa) * Y_l^m(direction) in basis order (trailing axis)."""
    ys = sph_harm_basis(cfg.basis, direction)
    y = ad.stack(ys, axis=-1) if any(isinstance(v, ad.Value) for v in ys) \
        else np.stack(ys, axis=-1)
    return rhe_weights(kappa, cfg) * y
