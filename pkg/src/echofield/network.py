"""Sine-activated MLPs: the spatial property network and the directional
reflection-intensity network.

The spatial network maps encoded positions to physical medium properties
(attenuation, reflectivity, scattering density, amplitude, diffuse intensity,
roughness, unit normal) plus a bottleneck latent.  The directional network
maps the encoded reflection direction, the normal/outgoing-direction cosine
and the bottleneck to a raw view-dependent specular intensity.  Parameters
live in a flat name->array mapping so checkpoints stay format-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

HEAD_NAMES = ("alpha", "beta", "rho", "phi", "cd", "delta", "normal", "bottleneck")


@dataclass(frozen=True)
class MlpConfig:
    """Trunk shape: `layer_widths` lists every layer width, input first.

    `activation` is "sine" or "relu", either one label for all hidden layers
    or one per transition. `w0` scales sine pre-activations (SIREN).
    """

    layer_widths: tuple
    activation: object = "sine"
    w0: float = 30.0
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("need at least 2 layers (input and output)")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if self.w0 <= 0:
            raise ValueError("w0 must be > 0")
        n_layers = len(widths) - 1
        act = self.activation
        acts = tuple([act] * n_layers) if isinstance(act, str) else tuple(act)
        if len(acts) != n_layers:
            raise ValueError(f"need {n_layers} activations, got {len(acts)}")
        if any(a not in ("sine", "relu") for a in acts):
            raise ValueError("activation must be 'sine' or 'relu'")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", acts)


def siren_init(cfg: MlpConfig) -> list:
    """Layer parameters [(W, b), ...], deterministic in cfg.seed.

    First layer ~ U(-1/fan_in, 1/fan_in); deeper sine layers
    ~ U(-sqrt(6/fan_in)/w0, sqrt(6/fan_in)/w0); relu layers use the
    He-uniform bound sqrt(6/fan_in). Biases start at zero.
    """
    rng = np.random.default_rng(cfg.seed)
    layers = []
    widths = cfg.layer_widths
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == 0:
            bound = 1.0 / fan_in
        elif cfg.activation[i] == "sine":
            bound = np.sqrt(6.0 / fan_in) / cfg.w0
        else:
            bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return layers


def mlp_forward(params: list, x, cfg: MlpConfig):
    """Apply the trunk; sine layers compute sin(w0 * (xW + b))."""
    h = x
    for i, (w, b) in enumerate(params):
        pre = h @ w + b
        if cfg.activation[i] == "sine":
            h = ad.sin(cfg.w0 * pre)
        else:
            h = ad.relu(pre)
    return h


@dataclass
class MediumProperties:
    """Physical outputs of the spatial network, batched over points.

    alpha: attenuation >= 0 (per mm*cycle); beta: reflectivity in [0,1];
    rho: scattering density in [0,1]; phi: amplitude in [0,1]; cd: diffuse
    intensity in [0,1]; delta: roughness >= 0; normal: unit 3-vectors;
    bottleneck: latent vectors.
    """

    alpha: object
    beta: object
    rho: object
    phi: object
    cd: object
    delta: object
    normal: object
    bottleneck: object

    def validate(self):
        def arr(v):
            return v.data if isinstance(v, ad.Value) else np.asarray(v)

        for name in ("beta", "rho", "phi", "cd"):
            v = arr(getattr(self, name))
            if v.min() < 0 or v.max() > 1:
                raise ValueError(f"{name} out of [0, 1]")
        for name in ("alpha", "delta"):
            if arr(getattr(self, name)).min() < 0:
                raise ValueError(f"{name} must be >= 0")
        norms = np.linalg.norm(arr(self.normal), axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("normals must have unit norm")
        return self


@dataclass(frozen=True)
class DirectionalInput:
    """Inputs to the directional network, batched over points."""

    rhe: object          # (N, B) encoded reflection direction
    ndotv: object        # (N,) or (N, 1) cosine between perturbed normal and outgoing dir
    bottleneck: object   # (N, K) spatial latent
    extra: object = None  # optional appended features (ablations)


@dataclass(frozen=True)
class SpatialNetConfig:
    in_dim: int
    depth: int = 8
    width: int = 128
    bottleneck: int = 32
    w0: float = 30.0
    activation: str = "sine"

    def trunk_config(self, seed: int) -> MlpConfig:
        return MlpConfig((self.in_dim,) + (self.width,) * self.depth,
                         activation=self.activation, w0=self.w0, seed=seed)


@dataclass(frozen=True)
class DirectionalNetConfig:
    in_dim: int
    depth: int = 4
    width: int = 128
    w0: float = 30.0
    activation: str = "sine"

    def trunk_config(self, seed: int) -> MlpConfig:
        return MlpConfig((self.in_dim,) + (self.width,) * self.depth,
                         activation=self.activation, w0=self.w0, seed=seed)


def _head_init(rng, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / fan_in) / 30.0
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(spatial: SpatialNetConfig, directional: DirectionalNetConfig,
                seed: int) -> dict:
    """Flat checkpointable parameter dict for both networks."""
    params = {}
    s_layers = siren_init(spatial.trunk_config(seed))
    for i, (w, b) in enumerate(s_layers):
        params[f"spatial.layer{i}.weight"] = w
        params[f"spatial.layer{i}.bias"] = b
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    head_dims = dict(alpha=1, beta=1, rho=1, phi=1, cd=1, delta=1,
                     normal=3, bottleneck=spatial.bottleneck)
    for name in HEAD_NAMES:
        w, b = _head_init(rng, spatial.width, head_dims[name])
        params[f"spatial.head.{name}.weight"] = w
        params[f"spatial.head.{name}.bias"] = b
    d_layers = siren_init(directional.trunk_config(seed + 1))
    for i, (w, b) in enumerate(d_layers):
        params[f"directional.layer{i}.weight"] = w
        params[f"directional.layer{i}.bias"] = b
    rng_d = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    w, b = _head_init(rng_d, directional.width, 1)
    params["directional.head.weight"] = w
    params["directional.head.bias"] = b
    return params


def _trunk_params(params, prefix: str) -> list:
    layers = []
    i = 0
    while f"{prefix}.layer{i}.weight" in params:
        layers.append((params[f"{prefix}.layer{i}.weight"],
                       params[f"{prefix}.layer{i}.bias"]))
        i += 1
    if not layers:
        raise KeyError(f"no {prefix} trunk layers in parameter dict")
    return layers


def spatial_forward(params: dict, encoded_pos, cfg: SpatialNetConfig) -> MediumProperties:
    """Medium properties at encoded positions (N, in_dim) -> batched fields.

    Heads: softplus for the nonnegative quantities (alpha, delta), sigmoid for
    the unit-interval ones (beta, rho, phi, cd), safe normalization for the
    normal (falling back to +z when the raw head vanishes, with zero gradient
    through the fallback), raw linear for the bottleneck.
    """
    trunk = _trunk_params(params, "spatial")
    mlp_cfg = cfg.trunk_config(0)
    h = mlp_forward(trunk, encoded_pos, mlp_cfg)

    def head(name):
        return h @ params[f"spatial.head.{name}.weight"] + params[f"spatial.head.{name}.bias"]

    alpha = ad.softplus(head("alpha"))[..., 0]
    delta = ad.softplus(head("delta"))[..., 0]
    beta = ad.sigmoid(head("beta"))[..., 0]
    rho = ad.sigmoid(head("rho"))[..., 0]
    phi = ad.sigmoid(head("phi"))[..., 0]
    cd = ad.sigmoid(head("cd"))[..., 0]

    raw_n = head("normal")
    nd = raw_n.data if isinstance(raw_n, ad.Value) else np.asarray(raw_n)
    norms = np.linalg.norm(nd, axis=-1, keepdims=True)
    degenerate = norms < 1e-12
    fallback = np.zeros_like(nd)
    fallback[..., 2] = 1.0
    safe = ad.where(np.broadcast_to(degenerate, nd.shape), fallback, raw_n)
    denom = ad.sqrt(ad.reduce_sum(safe * safe, axis=-1, keepdims=True))
    normal = safe / denom

    bottleneck = head("bottleneck")
    return MediumProperties(alpha=alpha, beta=beta, rho=rho, phi=phi, cd=cd,
                            delta=delta, normal=normal, bottleneck=bottleneck)


def directional_forward(params: dict, din: DirectionalInput, cfg: DirectionalNetConfig):
    """Raw (unbounded) specular intensity per point."""
    ndotv = din.ndotv
    nd = ndotv.data if isinstance(ndotv, ad.Value) else np.asarray(ndotv)
    if nd.ndim == 1:
        ndotv = ad.reshape(ndotv, (nd.shape[0], 1))
    parts = [din.rhe, ndotv, din.bottleneck]
    if din.extra is not None:
        parts.append(din.extra)
    x = ad.concat(parts, axis=-1)
    trunk = _trunk_params(params, "directional")
    h = mlp_forward(trunk, x, cfg.trunk_config(0))
    out = h @ params["directional.head.weight"] + params["directional.head.bias"]
    return out[..., 0]


def reflection_intensity(cd, cs):
    """Bounded reflection intensity: logistic squash of diffuse + specular."""
    return ad.sigmoid(cd + cs)
