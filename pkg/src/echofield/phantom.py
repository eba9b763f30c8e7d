"""Synthetic tissue volumes, the ground-truth B-mode simulator, and dataset
serialization.

The simulator is the oracle side of the pipeline: reflectivity comes from
impedance steps between consecutive axial samples (the classical intensity
reflection coefficient), normals from the impedance gradient, and a Phong
factor makes interface brightness pose-dependent so there is genuine
view-dependent signal to learn. It shares the renderer's energy transport,
PSF and speckle machinery, with the learned reflection-intensity term held
at zero.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .errors import FormatError
from .geometry import RigidPose, ScanGeometry, rotation_about_x, scanline_grid
from .renderer import (
    PsfConfig, PropertyGrid, compose_final, interface_coefficients,
    read_pgm, render_bmode, validate_bmode, write_pgm,
)


@dataclass(frozen=True)
class TissueProps:
    """Constant acoustic properties of one tissue type.

    Impedance is in arbitrary MRayl-like units (only ratios matter),
    attenuation in 1/(mm*cycle). ambient/diffuse/specular/phong_exp are the
    Phong coefficients shaping the view dependence of interface echoes.
    """

    impedance: float = 1.0
    attenuation: float = 0.0
    scatter_density: float = 0.0
    amplitude: float = 0.0
    roughness: float = 0.0
    ambient: float = 0.0
    diffuse: float = 0.6
    specular: float = 0.4
    phong_exp: float = 10.0

    def __post_init__(self):
        if self.impedance <= 0:
            raise ValueError("impedance must be > 0")
        if self.attenuation < 0 or self.roughness < 0:
            raise ValueError("attenuation and roughness must be >= 0")
        for name in ("scatter_density", "amplitude"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.ambient, self.diffuse, self.specular) < 0:
            raise ValueError("Phong coefficients must be >= 0")
        if self.phong_exp < 1:
            raise ValueError("phong_exp must be >= 1")


WATER = TissueProps()

FIELD_NAMES = tuple(f.name for f in dc_fields(TissueProps))


@dataclass
class TissueVolume:
    """Voxel grids of acoustic properties.

    Arrays are indexed [iz, iy, ix] (depth first); the voxel (iz, iy, ix) is
    centered at origin + ((ix+0.5), (iy+0.5), (iz+0.5)) * voxel_size in world
    (x, y, z) millimeters.
    """

    fields: dict
    voxel_size: float
    origin: np.ndarray = None

    def __post_init__(self):
        if set(self.fields) != set(FIELD_NAMES):
            raise ValueError(f"volume needs exactly the fields {FIELD_NAMES}")
        shapes = {v.shape for v in self.fields.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3:
            raise ValueError("all fields must share one (D, H, W) voxel shape")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")
        self.origin = np.zeros(3) if self.origin is None else \
            np.asarray(self.origin, dtype=np.float64).reshape(3)

    @property
    def shape(self):
        return next(iter(self.fields.values())).shape

    @property
    def extent(self) -> np.ndarray:
        """Physical size (x, y, z) in mm."""
        d, h, w = self.shape
        return np.array([w, h, d], dtype=np.float64) * self.voxel_size

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.extent

    def translated(self, offset) -> "TissueVolume":
        return TissueVolume(self.fields, self.voxel_size,
                            self.origin + np.asarray(offset, dtype=np.float64))

    def sample(self, points: np.ndarray, names=None) -> dict:
        """Trilinear lookup of fields at world points (..., 3).

        Points outside the volume box read as water (impedance 1, lossless,
        scatter-free). `names` restricts the lookup to a subset of fields.
        """
        pts = np.asarray(points, dtype=np.float64)
        local = pts - self.origin
        d, h, w = self.shape
        sizes = np.array([w, h, d], dtype=np.float64) * self.voxel_size
        inside = np.all((local >= 0) & (local <= sizes), axis=-1)

        # fractional voxel-center coordinates, edge-clamped
        g = local / self.voxel_size - 0.5
        gx = np.clip(g[..., 0], 0, w - 1)
        gy = np.clip(g[..., 1], 0, h - 1)
        gz = np.clip(g[..., 2], 0, d - 1)
        ix = np.clip(np.floor(gx).astype(int), 0, max(w - 2, 0))
        iy = np.clip(np.floor(gy).astype(int), 0, max(h - 2, 0))
        iz = np.clip(np.floor(gz).astype(int), 0, max(d - 2, 0))
        fx, fy, fz = gx - ix, gy - iy, gz - iz

        ix1 = np.minimum(ix + 1, w - 1)
        iy1 = np.minimum(iy + 1, h - 1)
        iz1 = np.minimum(iz + 1, d - 1)

        out = {}
        for name in (names if names is not None else FIELD_NAMES):
            arr = self.fields[name]
            c000 = arr[iz, iy, ix]
            c001 = arr[iz, iy, ix1]
            c010 = arr[iz, iy1, ix]
            c011 = arr[iz, iy1, ix1]
            c100 = arr[iz1, iy, ix]
            c101 = arr[iz1, iy, ix1]
            c110 = arr[iz1, iy1, ix]
            c111 = arr[iz1, iy1, ix1]
            c00 = c000 * (1 - fx) + c001 * fx
            c01 = c010 * (1 - fx) + c011 * fx
            c10 = c100 * (1 - fx) + c101 * fx
            c11 = c110 * (1 - fx) + c111 * fx
            c0 = c00 * (1 - fy) + c01 * fy
            c1 = c10 * (1 - fy) + c11 * fy
            val = c0 * (1 - fz) + c1 * fz
            out[name] = np.where(inside, val, getattr(WATER, name))
        return out


def make_layered_phantom(layers, dims, voxel_size: float,
                         inclusion=None) -> TissueVolume:
    """Axially stacked constant-property layers with an optional spherical
    inclusion.

    `layers` is a list of (thickness_mm, TissueProps), stacked along depth
    (z); thicknesses must cover the whole volume depth. `inclusion`, when
    given, is (center_xyz_mm, radius_mm, TissueProps) and must lie inside the
    volume box.
    """
    d, h, w = (int(n) for n in dims)
    if min(d, h, w) < 1:
        raise ValueError("volume dims must be positive")
    thicknesses = [t for t, _ in layers]
    if not layers or min(thicknesses) <= 0:
        raise ValueError("layer thicknesses must be positive")
    depth_mm = d * voxel_size
    if sum(thicknesses) < depth_mm - 1e-9:
        raise ValueError(
            f"layers cover {sum(thicknesses)} mm but the volume is {depth_mm} mm deep")

    z_centers = (np.arange(d) + 0.5) * voxel_size
    boundaries = np.cumsum(thicknesses)
    layer_idx = np.searchsorted(boundaries, z_centers, side="right")
    layer_idx = np.minimum(layer_idx, len(layers) - 1)

    grids = {}
    for name in FIELD_NAMES:
        per_layer = np.array([getattr(props, name) for _, props in layers])
        column = per_layer[layer_idx]                       # (D,)
        grids[name] = np.broadcast_to(column[:, None, None], (d, h, w)).copy()

    if inclusion is not None:
        center, radius, props = inclusion
        center = np.asarray(center, dtype=np.float64).reshape(3)
        extent = np.array([w, h, d], dtype=np.float64) * voxel_size
        if radius <= 0:
            raise ValueError("inclusion radius must be positive")
        if np.any(center - radius < 0) or np.any(center + radius > extent):
            raise ValueError("inclusion sphere must lie inside the volume")
        zc = (np.arange(d) + 0.5)[:, None, None] * voxel_size
        yc = (np.arange(h) + 0.5)[None, :, None] * voxel_size
        xc = (np.arange(w) + 0.5)[None, None, :] * voxel_size
        mask = ((xc - center[0]) ** 2 + (yc - center[1]) ** 2
                + (zc - center[2]) ** 2) <= radius ** 2
        for name in FIELD_NAMES:
            grids[name][mask] = getattr(props, name)

    return TissueVolume(grids, voxel_size)


# ---------------------------------------------------------------------------
# oracle renderer

def _impedance_gradient(vol: TissueVolume, points: np.ndarray) -> np.ndarray:
    """Central-difference gradient of impedance at world points (..., 3)."""
    h = vol.voxel_size
    grad = np.empty(points.shape)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        zp = vol.sample(points + step, names=("impedance",))["impedance"]
        zm = vol.sample(points - step, names=("impedance",))["impedance"]
        grad[..., axis] = (zp - zm) / (2.0 * h)
    return grad


def oracle_render(vol: TissueVolume, pose: RigidPose, geom: ScanGeometry,
                  psf: PsfConfig, seed: int, concentration: float = 4.0,
                  source_intensity: float = 1.0,
                  mode: str = "energy_conserving") -> np.ndarray:
    """Ground-truth B-mode frame from known tissue maps.

    Reflectivity at sample t is the intensity reflection coefficient across
    the impedance step from sample t-1 (zero in homogeneous regions), scaled
    by a Phong factor k_a + k_d (L.n) + k_s (R.V)^n with the light and view
    directions both along -beam and the normal taken from the impedance
    gradient, flipped to face the transducer. Samples with a degenerate
    gradient skip the Phong modulation. Deterministic in `seed`.
    """
    grid = scanline_grid(pose, geom)
    sampled = vol.sample(grid.points)
    z = sampled["impedance"]
    hh, ww = z.shape

    beta = np.zeros_like(z)
    r_coef, _ = interface_coefficients(z[:-1], z[1:], mode=mode)
    beta[1:] = r_coef

    view = -grid.directions                       # (W, 3), toward transducer
    view = np.broadcast_to(view[None, :, :], grid.points.shape)

    grad = _impedance_gradient(vol, grid.points)
    norms = np.linalg.norm(grad, axis=-1)
    degenerate = norms < 1e-9
    safe = np.where(degenerate[..., None], 1.0, norms[..., None])
    normal = grad / safe
    # face the transducer so the diffuse cosine is nonnegative
    facing = np.sum(normal * view, axis=-1, keepdims=True)
    normal = np.where(facing < 0, -normal, normal)

    ldotn = np.sum(view * normal, axis=-1)
    refl = 2.0 * ldotn[..., None] * normal - view
    rdotv = np.clip(np.sum(refl * view, axis=-1), 0.0, None)
    phong = sampled["ambient"] + sampled["diffuse"] * ldotn \
        + sampled["specular"] * np.power(rdotv, sampled["phong_exp"])
    beta_eff = np.where(degenerate, beta, np.clip(beta * phong, 0.0, 1.0))

    grid_props = PropertyGrid(alpha=sampled["attenuation"], beta=beta_eff,
                              rho=sampled["scatter_density"],
                              phi=sampled["amplitude"]).validate()
    rendered = render_bmode(grid_props, psf, geom, seed,
                            concentration=concentration,
                            source_intensity=source_intensity)
    return validate_bmode(compose_final(rendered, np.zeros_like(rendered)))


# ---------------------------------------------------------------------------
# coordinate normalization for the encoders

def normalize_points(points, lo, hi):
    """Map world points into [-1, 1]^3 using an axis-aligned bounding box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (np.asarray(points) - lo) / span - 1.0


# ---------------------------------------------------------------------------
# dataset container and serialization

@dataclass
class Dataset:
    """Frames with tracked poses and their shared scan geometry."""

    frames: list
    poses: list
    geom: ScanGeometry

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.poses)} poses")
        for i, frame in enumerate(self.frames):
            if np.shape(frame) != self.geom.shape:
                raise ValueError(
                    f"frame {i} has shape {np.shape(frame)}, geometry says {self.geom.shape}")

    def __len__(self):
        return len(self.frames)


_GEOM_KEYS = ("W", "H", "lateral_spacing", "axial_spacing", "frequency")


def write_dataset(ds: Dataset, directory) -> None:
    """Layout: geometry.txt (key=value), poses.csv (frame_index + 3x4 [R|t]
    row-major), frames/frame_%04d.pgm."""
    os.makedirs(directory, exist_ok=True)
    frames_dir = os.path.join(directory, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    geom = ds.geom
    with open(os.path.join(directory, "geometry.txt"), "w") as fh:
        fh.write(f"W={geom.n_scanlines}\n")
        fh.write(f"H={geom.n_samples}\n")
        fh.write(f"lateral_spacing={geom.lateral_spacing:.17g}\n")
        fh.write(f"axial_spacing={geom.axial_spacing:.17g}\n")
        fh.write(f"frequency={geom.frequency:.17g}\n")
    with open(os.path.join(directory, "poses.csv"), "w") as fh:
        fh.write("# frame_index, r00,r01,r02,t0, r10,r11,r12,t1, r20,r21,r22,t2\n")
        for i, pose in enumerate(ds.poses):
            vals = ",".join(f"{v:.17g}" for v in pose.as_matrix().reshape(-1))
            fh.write(f"{i},{vals}\n")
    for i, frame in enumerate(ds.frames):
        write_pgm(np.asarray(frame), os.path.join(frames_dir, f"frame_{i:04d}.pgm"))


def _parse_geometry(path) -> ScanGeometry:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    missing = [k for k in _GEOM_KEYS if k not in values]
    if missing:
        raise FormatError(f"{path}: missing geometry keys {missing}")
    try:
        return ScanGeometry(n_scanlines=int(values["W"]), n_samples=int(values["H"]),
                            lateral_spacing=float(values["lateral_spacing"]),
                            axial_spacing=float(values["axial_spacing"]),
                            frequency=float(values["frequency"]))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _parse_poses(path) -> list:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 13:
                raise FormatError(
                    f"{path}:{lineno}: pose row needs frame_index + 12 values, got {len(parts)}")
            try:
                idx = int(parts[0])
                vals = np.array([float(p) for p in parts[1:]]).reshape(3, 4)
                pose = RigidPose(vals[:, :3], vals[:, 3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if idx != len(poses):
                raise FormatError(
                    f"{path}:{lineno}: frame_index {idx}, expected {len(poses)}")
            poses.append(pose)
    return poses


def read_dataset(directory) -> Dataset:
    geom = _parse_geometry(os.path.join(directory, "geometry.txt"))
    poses = _parse_poses(os.path.join(directory, "poses.csv"))
    frames_dir = os.path.join(directory, "frames")
    if not os.path.isdir(frames_dir):
        raise FormatError(f"missing frames directory {frames_dir}")
    names = sorted(n for n in os.listdir(frames_dir)
                   if re.fullmatch(r"frame_\d{4}\.pgm", n))
    frames = [read_pgm(os.path.join(frames_dir, n)) for n in names]
    if len(frames) != len(poses):
        raise FormatError(
            f"{len(frames)} frames but {len(poses)} pose rows in {directory}")
    try:
        return Dataset(frames=frames, poses=poses, geom=geom)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# phantom specs: declarative volume + sweep descriptions

@dataclass
class PhantomSpec:
    """Parsed phantom-generation description (see `parse_phantom_spec`)."""

    dims: tuple
    voxel_size: float
    layers: list
    inclusion: object
    n_frames: int
    sweep_start: float
    sweep_stop: float
    tilt_start_deg: float
    tilt_stop_deg: float
    geom: ScanGeometry
    psf: PsfConfig
    seed: int


_PROP_KEYS = {
    "z": "impedance", "alpha": "attenuation", "rho": "scatter_density",
    "phi": "amplitude", "delta": "roughness", "ka": "ambient",
    "kd": "diffuse", "ks": "specular", "n": "phong_exp",
}


def _parse_props(tokens, path, lineno) -> dict:
    props = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {tok!r}")
        key, _, val = tok.partition("=")
        key = key.strip().lower()
        if key not in _PROP_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown tissue property {key!r}")
        props[_PROP_KEYS[key]] = float(val)
    return props


def parse_phantom_spec(path) -> PhantomSpec:
    """Key=value phantom description.

    Layer lines: `layer = thickness=20 z=1.0 alpha=0.001 rho=0.3 phi=0.6`.
    Inclusion: `inclusion = center=24,24,32 radius=8 z=2.2 ...`. Remaining
    keys are scalars (dims, voxel_size, frames, sweep_start/stop,
    tilt_start/stop, width, height, lateral_spacing, axial_spacing,
    frequency, psf_sigma_axial, psf_sigma_lateral, psf_truncation, seed).
    """
    scalars = {}
    layers = []
    inclusion = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, rest = line.partition("=")
            key = key.strip().lower()
            rest = rest.strip()
            if key == "layer":
                tokens = rest.split()
                props = {}
                thickness = None
                for tok in tokens:
                    k = tok.partition("=")[0].strip().lower()
                    if k == "thickness":
                        thickness = float(tok.partition("=")[2])
                    else:
                        props.update(_parse_props([tok], path, lineno))
                if thickness is None:
                    raise FormatError(f"{path}:{lineno}: layer needs thickness=")
                layers.append((thickness, TissueProps(**props)))
            elif key == "inclusion":
                tokens = rest.split()
                center = radius = None
                props = {}
                for tok in tokens:
                    k = tok.partition("=")[0].strip().lower()
                    v = tok.partition("=")[2]
                    if k == "center":
                        center = tuple(float(c) for c in v.split(","))
                    elif k == "radius":
                        radius = float(v)
                    else:
                        props.update(_parse_props([tok], path, lineno))
                if center is None or radius is None:
                    raise FormatError(f"{path}:{lineno}: inclusion needs center= and radius=")
                inclusion = (center, radius, TissueProps(**props))
            else:
                scalars[key] = rest

    def need(key, cast=float, default=None):
        if key not in scalars:
            if default is not None:
                return default
            raise FormatError(f"{path}: missing required key {key!r}")
        try:
            return cast(scalars[key])
        except ValueError as exc:
            raise FormatError(f"{path}: bad value for {key!r}: {scalars[key]!r}") from exc

    dims = tuple(int(t) for t in str(need("dims", str)).split())
    if len(dims) != 3:
        raise FormatError(f"{path}: dims needs three integers (depth height width)")
    geom = ScanGeometry(n_scanlines=need("width", int), n_samples=need("height", int),
                        lateral_spacing=need("lateral_spacing"),
                        axial_spacing=need("axial_spacing"),
                        frequency=need("frequency"))
    psf = PsfConfig(sigma_axial=need("psf_sigma_axial", float, 1.5),
                    sigma_lateral=need("psf_sigma_lateral", float, 1.0),
                    frequency=geom.frequency,
                    truncation=need("psf_truncation", float, 3.0))
    if not layers:
        raise FormatError(f"{path}: at least one layer line is required")
    return PhantomSpec(
        dims=dims, voxel_size=need("voxel_size"), layers=layers,
        inclusion=inclusion, n_frames=need("frames", int),
        sweep_start=need("sweep_start"), sweep_stop=need("sweep_stop"),
        tilt_start_deg=need("tilt_start", float, 0.0),
        tilt_stop_deg=need("tilt_stop", float, 0.0),
        geom=geom, psf=psf, seed=need("seed", int, 0))


def sweep_poses(spec: PhantomSpec) -> list:
    """Linear probe sweep: translate along y across the volume, with an
    optionally varying tilt about the x axis; beams start on the z=0 face."""
    d, h, w = spec.dims
    center_x = w * spec.voxel_size / 2.0
    ys = np.linspace(spec.sweep_start, spec.sweep_stop, spec.n_frames)
    tilts = np.deg2rad(np.linspace(spec.tilt_start_deg, spec.tilt_stop_deg,
                                   spec.n_frames))
    return [RigidPose(rotation_about_x(t), np.array([center_x, y, 0.0]))
            for y, t in zip(ys, tilts)]


def frame_seed(base_seed: int, frame_index: int) -> int:
    """Per-frame speckle seed; shared by the simulator and the trainer so a
    matching training seed reproduces the dataset's frozen speckle."""
    return (int(base_seed) * 1_000_003 + 7919 * int(frame_index)) & 0x7FFFFFFFFFFFFFFF


def generate_dataset(spec: PhantomSpec) -> Dataset:
    vol = make_layered_phantom(spec.layers, spec.dims, spec.voxel_size,
                               spec.inclusion)
    poses = sweep_poses(spec)
    frames = [oracle_render(vol, pose, spec.geom, spec.psf,
                            seed=frame_seed(spec.seed, i))
              for i, pose in enumerate(poses)]
    return Dataset(frames=frames, poses=poses, geom=spec.geom)
