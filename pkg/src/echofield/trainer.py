"""End-to-end optimization: render training frames, compare against targets,
update the networks with Adam, checkpoint.

Frames are the atomic training unit (the PSF convolution couples pixels
within a frame), sampled in a seeded shuffled order. Every run is fully
deterministic in (dataset, config): the loss trajectory, the loss log bytes
and the checkpoint bytes all reproduce exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .encodings import FourierConfig, RheConfig, fourier_encode, perturb_normal, \
    reflect, rhe_encode
from .errors import FormatError
from .geometry import RigidPose, ScanGeometry, scanline_grid
from .network import (
    DirectionalInput, DirectionalNetConfig, SpatialNetConfig,
    directional_forward, init_params, reflection_intensity, spatial_forward,
)
from .phantom import Dataset, frame_seed, normalize_points
from .renderer import PropertyGrid, PsfConfig, compose_final, render_bmode

REFLECTION_MODES = ("reflection", "viewdir", "none")
ENCODING_MODES = ("rhe", "pe")
ACTIVATIONS = ("sine", "relu")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_frames: int = 1
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_ssim: float = 0.0
    seed: int = 0
    precision: str = "f32"
    rhe_degree: int = 4
    fourier_freqs: int = 6
    psf_sigma_axial: float = 1.5
    psf_sigma_lateral: float = 1.0
    psf_truncation: float = 3.0
    scatter_concentration: float = 4.0
    activation: str = "sine"
    encoding: str = "rhe"
    reflection: str = "reflection"
    spatial_depth: int = 8
    directional_depth: int = 4
    hidden_width: int = 128
    bottleneck_width: int = 32
    w0: float = 30.0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_frames < 1:
            raise ValueError("iterations must be >= 0 and batch_frames >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lambda_ssim < 0:
            raise ValueError("lambda_ssim must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.encoding not in ENCODING_MODES:
            raise ValueError(f"encoding must be one of {ENCODING_MODES}")
        if self.reflection not in REFLECTION_MODES:
            raise ValueError(f"reflection must be one of {REFLECTION_MODES}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


_CONFIG_ALIASES = {"no_reflection": "none"}


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Key=value config file; explicit `overrides` win over file values."""
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    fields_by_name = {f.name: f for f in TrainConfig.__dataclass_fields__.values()}
    kwargs = {}
    for key, val in values.items():
        if key not in fields_by_name:
            raise FormatError(f"unknown training config key {key!r}")
        ftype = fields_by_name[key].type
        if isinstance(val, str):
            val = _CONFIG_ALIASES.get(val, val)
            try:
                if ftype == "int":
                    val = int(val)
                elif ftype == "float":
                    val = float(val)
            except ValueError as exc:
                raise FormatError(f"bad value for {key!r}: {val!r}") from exc
        kwargs[key] = val
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# model assembly

@dataclass(frozen=True)
class ModelSetup:
    """Derived sub-configs binding a TrainConfig to one scan geometry."""

    cfg: TrainConfig
    geom: ScanGeometry
    fourier: FourierConfig
    rhe: RheConfig
    spatial: SpatialNetConfig
    directional: DirectionalNetConfig
    psf: PsfConfig

    @staticmethod
    def create(cfg: TrainConfig, geom: ScanGeometry) -> "ModelSetup":
        fourier = FourierConfig(n_freq=cfg.fourier_freqs, include_identity=True)
        rhe = RheConfig(max_degree=cfg.rhe_degree)
        dir_enc_dim = rhe.output_dim if cfg.encoding == "rhe" \
            else fourier.output_dim(3)
        dir_in = dir_enc_dim + 1 + cfg.bottleneck_width
        if cfg.reflection == "viewdir":
            dir_in += 3
        spatial = SpatialNetConfig(in_dim=fourier.output_dim(3),
                                   depth=cfg.spatial_depth, width=cfg.hidden_width,
                                   bottleneck=cfg.bottleneck_width, w0=cfg.w0,
                                   activation=cfg.activation)
        directional = DirectionalNetConfig(in_dim=dir_in,
                                           depth=cfg.directional_depth,
                                           width=cfg.hidden_width, w0=cfg.w0,
                                           activation=cfg.activation)
        psf = PsfConfig(sigma_axial=cfg.psf_sigma_axial,
                        sigma_lateral=cfg.psf_sigma_lateral,
                        frequency=geom.frequency,
                        truncation=cfg.psf_truncation)
        return ModelSetup(cfg=cfg, geom=geom, fourier=fourier, rhe=rhe,
                          spatial=spatial, directional=directional, psf=psf)

    def init_tensors(self) -> dict:
        raw = init_params(self.spatial, self.directional, seed=self.cfg.seed)
        return {k: v.astype(self.cfg.dtype) for k, v in raw.items()}


def scene_bounds(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box of all sample points across the dataset's poses."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for pose in ds.poses:
        pts = scanline_grid(pose, ds.geom).points
        lo = np.minimum(lo, pts.reshape(-1, 3).min(axis=0))
        hi = np.maximum(hi, pts.reshape(-1, 3).max(axis=0))
    return lo, hi


def render_frame(params: dict, pose: RigidPose, setup: ModelSetup,
                 bounds, scatter_seed: int):
    """Differentiable forward pass for one frame at `pose`.

    Returns the final H x W image (a Value when a tape is active and params
    are watched, a plain array otherwise).
    """
    cfg = setup.cfg
    geom = setup.geom
    h, w = geom.shape
    dtype = cfg.dtype
    grid = scanline_grid(pose, geom)

    encoded = fourier_encode(normalize_points(grid.points, *bounds).reshape(-1, 3),
                             setup.fourier).astype(dtype)
    props = spatial_forward(params, encoded, setup.spatial)

    vdir = np.ascontiguousarray(
        np.broadcast_to(-grid.directions[None, :, :], (h, w, 3))
    ).reshape(-1, 3).astype(dtype)

    n_prime = perturb_normal(props.normal, vdir, ad.reshape(props.delta, (h * w, 1)))
    ndotv = ad.reduce_sum(n_prime * vdir, axis=-1)
    if cfg.reflection == "none":
        direction = vdir
    else:
        direction = reflect(vdir, n_prime)

    if cfg.encoding == "rhe":
        kappa = 1.0 / props.delta
        dir_enc = rhe_encode(direction, kappa, setup.rhe)
    else:
        dir_enc = fourier_encode(direction, setup.fourier)

    din = DirectionalInput(rhe=dir_enc, ndotv=ndotv, bottleneck=props.bottleneck,
                           extra=vdir if cfg.reflection == "viewdir" else None)
    c_s = directional_forward(params, din, setup.directional)
    c_ref = ad.reshape(reflection_intensity(props.cd, c_s), (h, w))

    grid_props = PropertyGrid(alpha=ad.reshape(props.alpha, (h, w)),
                              beta=ad.reshape(props.beta, (h, w)),
                              rho=ad.reshape(props.rho, (h, w)),
                              phi=ad.reshape(props.phi, (h, w)))
    rendered = render_bmode(grid_props, setup.psf, geom, scatter_seed,
                            concentration=cfg.scatter_concentration)
    return compose_final(rendered, c_ref)


def loss(pred, target, lambda_ssim: float = 0.0):
    """MSE plus an optional structural term lambda * (1 - SSIM)."""
    total = metrics.mse(pred, target)
    if lambda_ssim > 0:
        total = total + lambda_ssim * (1.0 - metrics.ssim(pred, target))
    return total


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @staticmethod
    def zeros_like(tensors: dict) -> "AdamState":
        return AdamState(step=0,
                         m={k: np.zeros_like(v) for k, v in tensors.items()},
                         v={k: np.zeros_like(v) for k, v in tensors.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update over name-keyed arrays."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(params):
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = params[name] - update
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# the training loop

class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_finite_loss: float):
        super().__init__(
            f"non-finite loss at iteration {iteration}; "
            f"last finite loss was {last_finite_loss:.17g}")
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss


LOG_HEADER = "iteration,loss,mse,ssim"


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def train(ds: Dataset, cfg: TrainConfig, log_streams=(), callback=None,
          resume: "Checkpoint | None" = None) -> "Checkpoint":
    """Optimize the networks on a dataset; returns the final checkpoint.

    `log_streams` receive one CSV line per iteration. `callback(iteration,
    record)` is invoked with the scalar stats and per-tensor gradients.
    Passing `resume` continues a previous run bit-exactly, as if it had never
    stopped.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    setup = ModelSetup.create(cfg, ds.geom)
    dtype = cfg.dtype

    if resume is not None:
        tensors = {k: v.copy() for k, v in resume.tensors.items()}
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_iter = resume.iteration
        bounds = resume.bounds
        queue = list(resume.frame_queue)
    else:
        tensors = setup.init_tensors()
        rng = np.random.default_rng(cfg.seed)
        start_iter = 0
        bounds = scene_bounds(ds)
        queue = []

    params = {k: ad.Value(v, requires_grad=True) for k, v in tensors.items()}
    names = sorted(params)
    if resume is None:
        state = AdamState.zeros_like(tensors)
    else:
        state = AdamState(
            step=resume.adam_step,
            m={k: resume.adam_m.get(k, np.zeros_like(v)).copy()
               for k, v in tensors.items()},
            v={k: resume.adam_v.get(k, np.zeros_like(v)).copy()
               for k, v in tensors.items()})

    targets = [np.asarray(f, dtype=dtype) for f in ds.frames]

    def emit(line: str):
        for stream in log_streams:
            stream.write(line + "\n")

    if start_iter == 0:
        emit(LOG_HEADER)

    last_finite = float("nan")
    for it in range(start_iter, cfg.iterations):
        while len(queue) < cfg.batch_frames:
            queue.extend(int(i) for i in rng.permutation(len(ds)))
        batch, queue = queue[:cfg.batch_frames], queue[cfg.batch_frames:]

        with ad.Tape() as tape:
            total = None
            mse_sum = 0.0
            ssim_sum = 0.0
            for fi in batch:
                pred = render_frame(params, ds.poses[fi], setup, bounds,
                                    frame_seed(cfg.seed, fi))
                frame_loss = loss(pred, targets[fi], cfg.lambda_ssim)
                total = frame_loss if total is None else total + frame_loss
                mse_sum += float(metrics.mse(pred.data, targets[fi]))
                if min(ds.geom.shape) >= metrics.SSIM_WIN:
                    ssim_sum += float(metrics.ssim(pred.data, targets[fi]))
                else:
                    ssim_sum = float("nan")
            total = total * (1.0 / len(batch))
            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(it, last_finite)
            last_finite = loss_val
            grad_list = tape.grad(total, [params[n] for n in names])

        grads = dict(zip(names, grad_list))
        tensors = {n: params[n].data for n in names}
        new_tensors, state = adam_step(tensors, grads, state, cfg.learning_rate,
                                       cfg.beta1, cfg.beta2, cfg.eps)
        for n in names:
            params[n].data = new_tensors[n]

        mse_val = mse_sum / len(batch)
        ssim_val = ssim_sum / len(batch)
        emit(f"{it},{_fmt(loss_val)},{_fmt(mse_val)},{_fmt(ssim_val)}")
        if callback is not None:
            callback(it, {"loss": loss_val, "mse": mse_val, "ssim": ssim_val,
                          "grads": grads})

    return Checkpoint(tensors={n: params[n].data.copy() for n in names},
                      config=cfg, geom=ds.geom, iteration=cfg.iterations,
                      rng_state=rng.bit_generator.state, bounds=bounds,
                      frame_queue=tuple(queue),
                      adam_step=state.step,
                      adam_m={k: v.copy() for k, v in state.m.items()},
                      adam_v={k: v.copy() for k, v in state.v.items()})


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"ULRE"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"),
                2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.uint8): 2, np.dtype(np.int64): 3}


@dataclass
class Checkpoint:
    """Named tensors plus everything needed to resume bit-exactly."""

    tensors: dict
    config: TrainConfig
    geom: ScanGeometry
    iteration: int
    rng_state: dict
    bounds: tuple
    frame_queue: tuple = ()
    adam_step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)


def _named_tensor_blobs(ck: Checkpoint) -> dict:
    meta = {
        "train": asdict(ck.config),
        "geometry": {
            "n_scanlines": ck.geom.n_scanlines, "n_samples": ck.geom.n_samples,
            "lateral_spacing": ck.geom.lateral_spacing,
            "axial_spacing": ck.geom.axial_spacing,
            "frequency": ck.geom.frequency,
        },
        "frame_queue": list(ck.frame_queue),
    }
    out = dict(ck.tensors)
    out["meta.config"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()
    out["meta.iteration"] = np.array(ck.iteration, dtype=np.int64)
    out["meta.adam_step"] = np.array(ck.adam_step, dtype=np.int64)
    out["meta.rng_state"] = np.frombuffer(
        json.dumps(ck.rng_state, sort_keys=True).encode("utf-8"),
        dtype=np.uint8).copy()
    out["scene.bounds"] = np.stack(
        [np.asarray(ck.bounds[0]), np.asarray(ck.bounds[1])]).astype(np.float64)
    for k, v in ck.adam_m.items():
        out[f"adam.m.{k}"] = v
    for k, v in ck.adam_v.items():
        out[f"adam.v.{k}"] = v
    return out


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Binary layout: magic 'ULRE', version u32 LE, tensor count u32 LE, then
    per tensor: name length u16 LE, UTF-8 name, dtype byte, rank u8, dims as
    u64 LE, row-major little-endian payload."""
    blobs = _named_tensor_blobs(ck)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name])
            code = _CODE_FOR_KIND.get(arr.dtype.newbyteorder("="))
            if code is None:
                raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("B", code))
            fh.write(struct.pack("B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        blobs = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (code,) = struct.unpack("B", _read_exact(fh, 1, f"dtype of {name!r}"))
            if code not in _DTYPE_CODES:
                raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
            (rank,) = struct.unpack("B", _read_exact(fh, 1, f"rank of {name!r}"))
            dims = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"dims of {name!r}"))[0]
                for _ in range(rank))
            dtype = _DTYPE_CODES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank \
                else dtype.itemsize
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise FormatError(f"truncated tensor payload for {name!r}")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
            blobs[name] = arr.astype(arr.dtype.newbyteorder("="))

    for required in ("meta.config", "meta.iteration", "meta.rng_state", "scene.bounds"):
        if required not in blobs:
            raise FormatError(f"checkpoint is missing tensor {required!r}")
    meta = json.loads(blobs.pop("meta.config").tobytes().decode("utf-8"))
    cfg = TrainConfig(**meta["train"])
    geom = ScanGeometry(**meta["geometry"])
    iteration = int(blobs.pop("meta.iteration"))
    adam_step_n = int(blobs.pop("meta.adam_step", np.array(0)))
    rng_state = json.loads(blobs.pop("meta.rng_state").tobytes().decode("utf-8"))
    bounds_arr = blobs.pop("scene.bounds")
    adam_m = {k[len("adam.m."):]: v for k, v in blobs.items() if k.startswith("adam.m.")}
    adam_v = {k[len("adam.v."):]: v for k, v in blobs.items() if k.startswith("adam.v.")}
    tensors = {k: v for k, v in blobs.items()
               if not k.startswith(("adam.m.", "adam.v."))}
    return Checkpoint(tensors=tensors, config=cfg, geom=geom, iteration=iteration,
                      rng_state=rng_state, bounds=(bounds_arr[0], bounds_arr[1]),
                      frame_queue=tuple(meta.get("frame_queue", ())),
                      adam_step=adam_step_n, adam_m=adam_m, adam_v=adam_v)


# ---------------------------------------------------------------------------
# inference

def render_from_checkpoint(ck: Checkpoint, poses, frame_indices=None) -> list:
    """Render frames at the given poses with trained parameters (no tape)."""
    setup = ModelSetup.create(ck.config, ck.geom)
    if frame_indices is None:
        frame_indices = range(len(poses))
    out = []
    for idx, pose in zip(frame_indices, poses):
        img = render_frame(ck.tensors, pose, setup, ck.bounds,
                           frame_seed(ck.config.seed, idx))
        out.append(np.asarray(img, dtype=np.float64))
    return out
