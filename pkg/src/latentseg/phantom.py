"""Analytic lateralized "brain-like" phantom, volume files and dataset manifests.

Labels are evaluated analytically at voxel centers, so any pose and voxel
size can be rendered without resampling a label map.  World coordinates are
in mm, centered on the volume; arrays are indexed ``[z, y, x]``.  Left is
``x < 0``, anterior is ``y > 0``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .geometry import _exact_cos_sin
from .labels import DEFAULT_TABLE, LabelTable

__all__ = [
    "FOV_MM",
    "INTENSITY_MAPS",
    "Manifest",
    "ManifestEntry",
    "PhantomScene",
    "Pose",
    "Shape",
    "VolumeFile",
    "default_scene",
    "extent_for",
    "generate_split",
    "read_volume",
    "render",
    "slice_iter",
    "write_volume",
]

Plane = Literal["axial", "coronal", "sagittal"]
PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}
FOV_MM = 24.0

# T2-like: CSF bright, WM brighter than cortex; T1-like inverts the contrast.
INTENSITY_MAPS = {
    "t2": {0: 0.0, 1: 0.95, 2: 0.45, 3: 0.45, 4: 0.65, 5: 0.65, 6: 0.3, 7: 0.3, 8: 0.38, 9: 0.38},
    "t1": {0: 0.0, 1: 0.15, 2: 0.5, 3: 0.5, 4: 0.3, 5: 0.3, 6: 0.62, 7: 0.62, 8: 0.55, 9: 0.55},
}


@dataclass(frozen=True)
class Pose:
    """Rotation about the z (axial slicing) axis in degrees plus a 3D shift in mm."""

    theta_deg: float = 0.0
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_scene(self, x, y, z):
        """Map world points to scene coordinates (inverse pose)."""
        c, s = _exact_cos_sin(math.radians(self.theta_deg))
        xs, ys, zs = x - self.t[0], y - self.t[1], z - self.t[2]
        return c * xs + s * ys, -s * xs + c * ys, zs


@dataclass(frozen=True)
class Shape:
    """One analytic primitive.

    ``kind`` is ``ellipsoid`` (normalized radius <= ``level``), ``folded``
    (ellipsoid whose radius is modulated by a mirror-symmetric gyral pattern)
    or ``slab`` (``|x| < half_width``, clipped to an outer ellipsoid).
    ``label`` is a tissue name; lateralized tissues are split by the sign of
    ``x`` (after ``mirror`` duplication for paired blobs).
    """

    kind: str
    label: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axes: tuple[float, float, float] = (1.0, 1.0, 1.0)
    level: float = 1.0
    fold_amp: float = 0.0
    fold_freq: tuple[float, float] = (5.0, 4.0)
    anterior_stretch: float = 0.0
    half_width: float = 0.0
    z_min: float = -math.inf
    mirror: bool = False


@dataclass(frozen=True)
class PhantomScene:
    primitives: tuple[Shape, ...]
    table: LabelTable = DEFAULT_TABLE
    intensity_map: dict[int, float] = field(default_factory=lambda: dict(INTENSITY_MAPS["t2"]))
    seed: int = 0

    def _rho(self, shape: Shape, x, y, z, cx):
        ax, ay, az = shape.axes
        ay_eff = np.where(y - shape.center[1] > 0, ay * (1.0 + shape.anterior_stretch), ay)
        return np.sqrt(((x - cx) / ax) ** 2 + ((y - shape.center[1]) / ay_eff) ** 2 + ((z - shape.center[2]) / az) ** 2)

    def _inside(self, shape: Shape, x, y, z):
        if shape.kind == "slab":
            outer = self._rho(shape, x, y, z, 0.0) <= shape.level
            return outer & (np.abs(x) < shape.half_width) & (z >= shape.z_min)
        centers = [shape.center[0]]
        if shape.mirror:
            centers.append(-shape.center[0])
        hit = np.zeros(np.broadcast(x, y, z).shape, dtype=bool)
        for cx in centers:
            rho = self._rho(shape, x, y, z, cx)
            level = shape.level
            if shape.kind == "folded":
                ax, ay, az = shape.axes
                nx = np.abs(x - cx) / ax
                ny = (y - shape.center[1]) / ay
                nz = (z - shape.center[2]) / az
                phi = np.arctan2(ny, nx)
                psi = np.arctan2(nz, np.hypot(nx, ny))
                level = level + shape.fold_amp * np.sin(shape.fold_freq[0] * phi) * np.cos(shape.fold_freq[1] * psi)
            hit |= rho <= level
        return hit

    def label_at(self, x, y, z) -> np.ndarray:
        """Label ids at scene points; later primitives overwrite earlier ones."""
        x, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, z)))
        out = np.zeros(x.shape, dtype=np.uint16)
        left = x < 0
        for shape in self.primitives:
            inside = self._inside(shape, x, y, z)
            if shape.label in ("background", "csf"):
                out[inside] = self.table.by_name(shape.label).id
            else:
                lid = self.table.by_name(f"{shape.label}_L").id
                rid = self.table.by_name(f"{shape.label}_R").id
                out[inside & left] = lid
                out[inside & ~left] = rid
        return out


def default_scene(seed: int = 0, modality: str = "t2") -> PhantomScene:
    """Egg-shaped two-hemisphere phantom with per-seed anatomical jitter.

    The brain is wider anteriorly, so in-plane orientation (and therefore
    left/right) stays identifiable under rotation.
    """
    rng = np.random.default_rng([int(seed), 7919])
    g = 1.0 + rng.uniform(-0.05, 0.05)
    axes = (7.8 * g, 9.0 * g, 7.2 * g)
    stretch = 0.12 + rng.uniform(-0.03, 0.03)
    fold = 0.07 + rng.uniform(-0.015, 0.015)
    freq = (5.0 + rng.integers(0, 2), 4.0)
    csf_pad = 1.0
    thal_c = (3.1 * g, -1.8 * g + rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3))
    caud_c = (3.3 * g, 3.8 * g + rng.uniform(-0.3, 0.3), 1.4 * g)
    prims = (
        Shape("ellipsoid", "csf", axes=tuple(a + csf_pad for a in axes), anterior_stretch=stretch),
        Shape("ellipsoid", "cortex", axes=axes, anterior_stretch=stretch),
        Shape("slab", "csf", axes=axes, anterior_stretch=stretch, half_width=0.45, z_min=-0.5 * axes[2]),
        Shape("folded", "wm", axes=axes, level=0.78, fold_amp=fold, fold_freq=freq, anterior_stretch=stretch),
        Shape("ellipsoid", "thalamus", center=thal_c, axes=(2.4 * g, 3.0 * g, 2.4 * g), mirror=True),
        Shape("ellipsoid", "caudate", center=caud_c, axes=(1.8 * g, 2.6 * g, 1.9 * g), mirror=True),
    )
    return PhantomScene(prims, DEFAULT_TABLE, dict(INTENSITY_MAPS[modality]), int(seed))


def extent_for(res: float, fov: float = FOV_MM) -> int:
    """Cubic extent covering the field of view, rounded to an even count."""
    n = int(round(fov / res))
    return n + (n % 2)


def _centers(n: int, res: float) -> np.ndarray:
    return (np.arange(n) + 0.5 - n / 2) * res


def render(
    scene: PhantomScene,
    pose: Pose = Pose(),
    res: float = 1.0,
    extent: int | tuple[int, int, int] | None = None,
    noise_sigma: float = 0.02,
    bias: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Intensity (float32, [0, 1]) and label (uint16) volumes, shape ``(nz, ny, nx)``."""
    if res <= 0:
        raise ValueError("res must be > 0")
    if extent is None:
        extent = extent_for(res)
    nz, ny, nx = (extent,) * 3 if isinstance(extent, int) else extent
    z = _centers(nz, res)[:, None, None]
    y = _centers(ny, res)[None, :, None]
    x = _centers(nx, res)[None, None, :]
    sx, sy, sz = pose.to_scene(*np.broadcast_arrays(x, y, z))
    labels = scene.label_at(sx, sy, sz)

    lut = np.array([scene.intensity_map.get(i, 0.0) for i in range(scene.table.num_classes)])
    img = lut[labels]
    rng = np.random.default_rng([scene.seed, 104729])
    if bias:
        c = rng.uniform(-bias, bias, size=3)
        half = FOV_MM / 2
        img = img * (1.0 + c[0] * sx / half + c[1] * sy / half + c[2] * sz / half)
    if noise_sigma:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


# -- slicing -------------------------------------------------------------------


def slice_iter(
    volume: np.ndarray,
    plane: Plane,
    labels: np.ndarray | None = None,
    drop_empty: bool = False,
    table: LabelTable = DEFAULT_TABLE,
    thickness: int = 1,
) -> Iterator[tuple[int, np.ndarray, np.ndarray | None]]:
    """Yield ``(index, image_slice, label_slice)`` along ``plane``.

    ``thickness > 1`` stacks neighbouring slices as channels (edge-padded).
    Sagittal label slices are reduced to the non-lateralized scheme.
    """
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}")
    axis = PLANE_AXIS[plane]
    vol = np.moveaxis(np.asarray(volume), axis, 0)
    lab = None if labels is None else np.moveaxis(np.asarray(labels), axis, 0)
    half = thickness // 2
    n = vol.shape[0]
    for i in range(n):
        ls = None if lab is None else lab[i]
        if drop_empty and ls is not None and not ls.any():
            continue
        if ls is not None and plane == "sagittal":
            ls = table.to_sagittal(ls)
        if thickness == 1:
            img = vol[i]
        else:
            idx = np.clip(np.arange(i - half, i + half + 1), 0, n - 1)
            img = vol[idx]
        yield i, img, ls


# -- volume files --------------------------------------------------------------

VOLUME_MAGIC = b"LSEGVOL1"
_HEADER = struct.Struct("<8sB3IdQ4d")
KIND_INTENSITY, KIND_LABELS = 0, 1


@dataclass(frozen=True)
class VolumeFile:
    data: np.ndarray
    voxel_size: float
    seed: int = 0
    pose: Pose = Pose()

    @property
    def kind(self) -> int:
        return KIND_LABELS if self.data.dtype == np.uint16 else KIND_INTENSITY


def write_volume(path: str | Path, vf: VolumeFile) -> None:
    """Header ``<8sB3IdQ4d``: magic, kind (0 = f32 intensity, 1 = u16 labels),
    extent (nz, ny, nx), voxel size mm, scene seed, pose (theta_deg, tx, ty, tz);
    then the row-major little-endian payload."""
    data = vf.data
    if data.ndim != 3:
        raise ValueError("volumes are 3D")
    kind = vf.kind
    dtype = "<u2" if kind == KIND_LABELS else "<f4"
    header = _HEADER.pack(
        VOLUME_MAGIC, kind, *data.shape, float(vf.voxel_size), int(vf.seed),
        float(vf.pose.theta_deg), *map(float, vf.pose.t),
    )
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype=dtype).tobytes())


def read_volume(path: str | Path) -> VolumeFile:
    raw = Path(path).read_bytes()
    magic, kind, nz, ny, nx, vs, seed, th, tx, ty, tz = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume file")
    dtype = np.dtype("<u2") if kind == KIND_LABELS else np.dtype("<f4")
    payload = raw[_HEADER.size :]
    if len(payload) != nz * ny * nx * dtype.itemsize:
        raise ValueError(f"{path}: payload length does not match header")
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    data = data.astype(np.uint16 if kind == KIND_LABELS else np.float32)
    return VolumeFile(data, vs, seed, Pose(th, (tx, ty, tz)))


# -- dataset manifests ---------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    subject: str
    seed: int
    res: float
    pose: Pose
    modality: str = "t2"


@dataclass(frozen=True)
class PosePolicy:
    """Rotation ranges (degrees, sign drawn at random) and max |shift| (mm) per split."""

    train_rot: tuple[float, float] = (0.0, 20.0)
    test_rot: tuple[float, float] = (60.0, 120.0)
    max_shift: float = 1.0

    def rot_for(self, split: str) -> tuple[float, float]:
        return self.test_rot if split == "test" else self.train_rot


@dataclass
class Manifest:
    """Tab-separated text: a versioned header line, a column line, one row per volume."""

    entries: list[ManifestEntry]
    HEADER = "# latentseg-manifest v1"
    COLUMNS = ("split", "subject", "seed", "res_mm", "theta_deg", "tx_mm", "ty_mm", "tz_mm", "modality")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def dumps(self) -> str:
        lines = [self.HEADER, "\t".join(self.COLUMNS)]
        for e in self.entries:
            vals = [e.split, e.subject, str(e.seed), repr(e.res), repr(e.pose.theta_deg),
                    *(repr(v) for v in e.pose.t), e.modality]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Manifest:
        lines = text.splitlines()
        if not lines or lines[0] != cls.HEADER:
            raise ValueError("unrecognized manifest header")
        if tuple(lines[1].split("\t")) != cls.COLUMNS:
            raise ValueError("unexpected manifest columns")
        entries = []
        for line in lines[2:]:
            if not line.strip():
                continue
            split, subject, seed, res, th, tx, ty, tz, modality = line.split("\t")
            entries.append(ManifestEntry(split, subject, int(seed), float(res),
                                         Pose(float(th), (float(tx), float(ty), float(tz))), modality))
        return cls(entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path: str | Path) -> Manifest:
        return cls.loads(Path(path).read_text())


def generate_split(
    n_train: int,
    n_val: int,
    n_test: int,
    pose_policy: PosePolicy = PosePolicy(),
    res_set: tuple[float, ...] = (0.5, 0.8, 1.0),
    seed: int = 0,
    modality: str = "t2",
) -> Manifest:
    """Deterministic manifest; resolutions cycle round-robin within each split."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one volume")
    rng = np.random.default_rng([int(seed), 31337])
    seeds = rng.choice(2**31 - 1, size=n_train + n_val + n_test, replace=False)
    entries = []
    k = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        lo, hi = pose_policy.rot_for(split)
        for i in range(n):
            mag = float(rng.uniform(lo, hi))
            theta = mag if rng.random() < 0.5 else -mag
            shift = tuple(float(v) for v in rng.uniform(-pose_policy.max_shift, pose_policy.max_shift, size=3))
            entries.append(ManifestEntry(split, f"{split}{i:03d}", int(seeds[k]), float(res_set[i % len(res_set)]),
                                         Pose(round(theta, 6), tuple(round(v, 6) for v in shift)), modality))
            k += 1
    return Manifest(entries)


def render_entry(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    return render(default_scene(entry.seed, entry.modality), entry.pose, entry.res)


def manifest_digest(manifest: Manifest) -> str:
    return hashlib.sha256(manifest.dumps().encode()).hexdigest()
