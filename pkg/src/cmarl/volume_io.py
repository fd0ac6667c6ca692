"""Volume loading, generation, annotation, and dataset splitting.

Real scans enter through a minimal NIfTI-1 header parser; synthetic and
cached volumes use the RAW3D container defined here. Both paths produce
the same in-memory Volume3D so everything downstream is format-agnostic.

Conventions:
  - voxel arrays are indexed ``vol[x, y, z]`` and serialized x-fastest
    (x varies quickest) little-endian;
  - intensities are float32 in [0, 1] after loading (min-max rescale,
    constant volumes map to all-zero);
  - landmark annotations live in a sidecar JSON file:
    ``{"volume_id": str, "landmarks": {"<name>": [x, y, z]}}`` with
    real-valued voxel coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidDims,
    IoFailure,
    MalformedHeader,
    TooFewVolumes,
    TooManyLandmarks,
    TruncatedFile,
    UnsupportedDatatype,
    UnsupportedDimensionality,
)
from .rng import Rng, derive_seed

NIFTI_HEADER_SIZE = 348

# NIfTI-1 datatype codes we accept.
_DTYPE_BY_CODE = {2: "uint8", 4: "int16", 16: "float32"}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}
_NP_DTYPE = {"uint8": "u1", "int16": "i2", "float32": "f4"}

RAW3D_MAGIC = b"CMRLRAW3D" + b"\x00" * 7  # 16 bytes
RAW3D_HEADER_SIZE = 52  # magic + 3*u32 dims + 3*f32 spacing + u32 code + u64 offset

# Synthetic volumes with seeds in the same 4096-wide block share one
# landmark offset/appearance pattern (a "seed family").
SEED_FAMILY_BLOCK = 4096


@dataclass
class VolumeMeta:
    """Geometry and storage layout of one volume."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    scalar_type: str  # "uint8" | "int16" | "float32"
    data_offset_bytes: int
    byte_order: str = "<"  # "<" little, ">" big; set by the header parser

    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


@dataclass
class Volume3D:
    """Dense isotropic voxel grid plus named landmark annotations.

    Immutable by convention after load; safe to share across episode
    workers read-only.
    """

    meta: VolumeMeta
    voxels: np.ndarray  # float32, shape = dims, indexed [x, y, z]
    landmarks: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        if self.voxels.shape != self.meta.dims:
            raise InvalidDims(
                f"voxel shape {self.voxels.shape} != meta dims {self.meta.dims}")
        for name, pos in self.landmarks.items():
            for axis in range(3):
                if not 0.0 <= float(pos[axis]) <= self.meta.dims[axis] - 1:
                    raise InvalidDims(
                        f"landmark {name!r} outside volume on axis {axis}")


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int


# ---------------------------------------------------------------------------
# NIfTI-1 header
# ---------------------------------------------------------------------------

def parse_nifti_header(buf: bytes) -> VolumeMeta:
    """Parse the fixed 348-byte NIfTI-1 header.

    Only the fields needed to locate and type the voxel payload are read:
    sizeof_hdr (offset 0), dim (40), datatype (70), pixdim (76),
    vox_offset (108). Endianness is detected from sizeof_hdr. Total over
    arbitrary inputs: returns a VolumeMeta or raises a declared error.
    """
    if len(buf) < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"need {NIFTI_HEADER_SIZE} bytes, got {len(buf)}")

    if struct.unpack_from("<i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        bo = ">"
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either endianness")

    dim = struct.unpack_from(bo + "8h", buf, 40)
    if dim[0] != 3:
        raise UnsupportedDimensionality(f"dim[0]={dim[0]}, only 3-D supported")
    dims = dim[1:4]
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"non-positive dims {dims}")

    datatype = struct.unpack_from(bo + "h", buf, 70)[0]
    if datatype not in _DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"datatype code {datatype}")

    pixdim = struct.unpack_from(bo + "8f", buf, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0.0 for s in spacing):
        raise MalformedHeader(f"invalid pixdim {spacing}")

    vox_offset = struct.unpack_from(bo + "f", buf, 108)[0]
    if not np.isfinite(vox_offset) or vox_offset < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"vox_offset {vox_offset} < {NIFTI_HEADER_SIZE}")

    return VolumeMeta(
        dims=(int(dims[0]), int(dims[1]), int(dims[2])),
        spacing_mm=(float(spacing[0]), float(spacing[1]), float(spacing[2])),
        scalar_type=_DTYPE_BY_CODE[datatype],
        data_offset_bytes=int(vox_offset),
        byte_order=bo,
    )


def make_nifti_header(meta: VolumeMeta) -> bytes:
    """Build a minimal 348-byte NIfTI-1 header (test/fixture helper)."""
    buf = bytearray(NIFTI_HEADER_SIZE)
    bo = meta.byte_order
    struct.pack_into(bo + "i", buf, 0, NIFTI_HEADER_SIZE)
    struct.pack_into(bo + "8h", buf, 40, 3, *meta.dims, 1, 1, 1, 1)
    struct.pack_into(bo + "h", buf, 70, _CODE_BY_DTYPE[meta.scalar_type])
    struct.pack_into(bo + "8f", buf, 76, 1.0, *meta.spacing_mm, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(bo + "f", buf, 108, float(meta.data_offset_bytes))
    struct.pack_into(bo + "4s", buf, 344, b"n+1\x00")
    return bytes(buf)


# ---------------------------------------------------------------------------
# Voxel payload
# ---------------------------------------------------------------------------

def _normalize(vox: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant volume maps to all-zero."""
    lo = float(vox.min())
    hi = float(vox.max())
    if hi <= lo:
        return np.zeros_like(vox, dtype=np.float32)
    return ((vox - lo) / (hi - lo)).astype(np.float32)


def load_volume(path, meta: VolumeMeta,
                landmarks: dict[str, np.ndarray] | None = None) -> Volume3D:
    """Read the voxel payload described by ``meta`` from ``path``.

    Voxels are converted to float32 and min-max rescaled to [0, 1].
    Raises TruncatedFile if the file is shorter than
    offset + voxel_count * itemsize, IoFailure on OS errors.
    """
    dtype = np.dtype(meta.byte_order + _NP_DTYPE[meta.scalar_type])
    count = meta.voxel_count()
    need = meta.data_offset_bytes + count * dtype.itemsize
    try:
        with open(path, "rb") as fh:
            fh.seek(meta.data_offset_bytes)
            raw = fh.read(count * dtype.itemsize)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < count * dtype.itemsize:
        raise TruncatedFile(
            f"{path}: need {need} bytes, payload short by "
            f"{count * dtype.itemsize - len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=count)
    vox = flat.reshape(meta.dims, order="F").astype(np.float32)
    vol = Volume3D(meta=meta, voxels=_normalize(vox),
                   landmarks=dict(landmarks or {}))
    vol.validate()
    return vol


def write_raw3d(path, volume: Volume3D) -> None:
    """Serialize a volume in the RAW3D container.

    Layout: 16-byte magic, dims as 3 x u32, spacing as 3 x f32, scalar
    type code as u32 (always float32 on write), data offset as u64, then
    float32 voxels x-fastest. All fields little-endian.
    """
    header = RAW3D_MAGIC + struct.pack(
        "<3I3fIQ",
        *volume.meta.dims,
        *volume.meta.spacing_mm,
        _CODE_BY_DTYPE["float32"],
        RAW3D_HEADER_SIZE,
    )
    payload = np.ascontiguousarray(
        volume.voxels.astype("<f4", copy=False).ravel(order="F"))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_raw3d_meta(path) -> VolumeMeta:
    try:
        with open(path, "rb") as fh:
            header = fh.read(RAW3D_HEADER_SIZE)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(header) < RAW3D_HEADER_SIZE or header[:16] != RAW3D_MAGIC:
        raise MalformedHeader(f"{path}: not a RAW3D file")
    dx, dy, dz, sx, sy, sz, code, offset = struct.unpack_from(
        "<3I3fIQ", header, 16)
    if code not in _DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"scalar type code {code}")
    return VolumeMeta(dims=(dx, dy, dz), spacing_mm=(sx, sy, sz),
                      scalar_type=_DTYPE_BY_CODE[code],
                      data_offset_bytes=offset, byte_order="<")


def read_raw3d(path, landmarks: dict[str, np.ndarray] | None = None) -> Volume3D:
    """Read a RAW3D file bit-exactly (no rescaling)."""
    meta = read_raw3d_meta(path)
    dtype = np.dtype("<" + _NP_DTYPE[meta.scalar_type])
    count = meta.voxel_count()
    try:
        with open(path, "rb") as fh:
            fh.seek(meta.data_offset_bytes)
            raw = fh.read(count * dtype.itemsize)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < count * dtype.itemsize:
        raise TruncatedFile(f"{path}: voxel payload truncated")
    vox = np.frombuffer(raw, dtype=dtype, count=count).reshape(
        meta.dims, order="F").astype(np.float32)
    vol = Volume3D(meta=meta, voxels=vox, landmarks=dict(landmarks or {}))
    vol.validate()
    return vol


# ---------------------------------------------------------------------------
# Landmark sidecar JSON
# ---------------------------------------------------------------------------

def write_landmarks(path, volume_id: str,
                    landmarks: dict[str, np.ndarray]) -> None:
    doc = {
        "volume_id": volume_id,
        "landmarks": {name: [float(c) for c in pos]
                      for name, pos in sorted(landmarks.items())},
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_landmarks(path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    marks = {name: np.asarray(pos, dtype=np.float64)
             for name, pos in doc["landmarks"].items()}
    return doc["volume_id"], marks


# ---------------------------------------------------------------------------
# Synthetic volumes
# ---------------------------------------------------------------------------

def _unit_vector(rng: Rng) -> np.ndarray:
    v = rng.normals(3)
    n = float(np.sqrt((v * v).sum()))
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


def generate_synthetic_volume(
        seed: int,
        dims: tuple[int, int, int],
        landmark_spec: list[tuple[str, float]]) -> Volume3D:
    """Deterministic synthetic volume with landmark-marking structures.

    Landmark placement: a fixed offset pattern (drawn once per seed
    family, see SEED_FAMILY_BLOCK) is anchored at a per-volume random
    point and jittered by up to 2 voxels per landmark, keeping every
    landmark inside the inner 60% of the volume. Landmarks in one family
    therefore move together from volume to volume, i.e. they are
    spatially correlated.

    Each landmark is marked by an anisotropic Gaussian blob (sigma from
    ``landmark_spec``) plus a ridge along a per-landmark orientation;
    blob orientation and amplitude are family-fixed so a landmark looks
    alike across volumes. The background is band-limited noise. Output
    intensities are min-max normalized to [0, 1].
    """
    if any(d < 32 for d in dims) or len(dims) != 3:
        raise InvalidDims(f"dims must each be >= 32, got {dims}")
    if not 1 <= len(landmark_spec) <= 8:
        raise TooManyLandmarks(
            f"need 1..8 landmarks, got {len(landmark_spec)}")

    family = seed // SEED_FAMILY_BLOCK
    fam_rng = Rng(derive_seed(0x0FA1, family))
    vol_rng = Rng(derive_seed(0x0B07, seed))

    d = np.asarray(dims, dtype=np.float64)
    box_lo = 0.2 * (d - 1.0)
    box_hi = 0.8 * (d - 1.0)

    # Family-fixed appearance and rigid offsets.
    offsets = []
    looks = []
    for _name, sigma in landmark_spec:
        offsets.append(np.array([
            fam_rng.uniform(-0.15 * (d[a] - 1.0), 0.15 * (d[a] - 1.0))
            for a in range(3)]))
        looks.append({
            "blob_dir": _unit_vector(fam_rng),
            "blob_amp": fam_rng.uniform(0.75, 1.0),
            "ridge_dir": _unit_vector(fam_rng),
            "ridge_amp": fam_rng.uniform(0.25, 0.45),
        })

    # Per-volume anchor and jitter; anchor range keeps all landmarks in box.
    jitters = [np.array([vol_rng.uniform(-2.0, 2.0) for _ in range(3)])
               for _ in landmark_spec]
    totals = np.stack([o + j for o, j in zip(offsets, jitters)])
    anchor = np.array([
        vol_rng.uniform(box_lo[a] - totals[:, a].min(),
                        box_hi[a] - totals[:, a].max())
        for a in range(3)])
    positions = anchor[None, :] + totals

    # Band-limited background noise: a handful of low-frequency cosines.
    xs = np.arange(dims[0], dtype=np.float64)
    ys = np.arange(dims[1], dtype=np.float64)
    zs = np.arange(dims[2], dtype=np.float64)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vox = np.zeros(dims, dtype=np.float64)
    for _ in range(5):
        k = _unit_vector(vol_rng) * vol_rng.uniform(0.05, 0.25)
        phase = vol_rng.uniform(0.0, 2.0 * np.pi)
        amp = vol_rng.uniform(0.02, 0.06)
        vox += amp * np.cos(k[0] * X + k[1] * Y + k[2] * Z + phase)
    vox += 0.15  # keep background positive-ish before normalization

    for (_, sigma), look, pos in zip(landmark_spec, looks, positions):
        dx = X - pos[0]
        dy = Y - pos[1]
        dz = Z - pos[2]
        r2 = dx * dx + dy * dy + dz * dz

        u = look["blob_dir"]
        t = dx * u[0] + dy * u[1] + dz * u[2]
        perp2 = np.maximum(r2 - t * t, 0.0)
        s_par = 1.6 * sigma
        s_perp = 0.7 * sigma
        vox += look["blob_amp"] * np.exp(
            -(t * t) / (2.0 * s_par * s_par) - perp2 / (2.0 * s_perp * s_perp))

        v = look["ridge_dir"]
        tr = dx * v[0] + dy * v[1] + dz * v[2]
        perp2r = np.maximum(r2 - tr * tr, 0.0)
        r_l = 2.2 * sigma
        r_p = 0.35 * sigma
        vox += look["ridge_amp"] * np.exp(
            -(tr * tr) / (2.0 * r_l * r_l) - perp2r / (2.0 * r_p * r_p))

    meta = VolumeMeta(dims=tuple(int(x) for x in dims),
                      spacing_mm=(1.0, 1.0, 1.0),
                      scalar_type="float32",
                      data_offset_bytes=RAW3D_HEADER_SIZE)
    landmarks = {name: positions[i].copy()
                 for i, (name, _) in enumerate(landmark_spec)}
    vol = Volume3D(meta=meta, voxels=_normalize(vox.astype(np.float32)),
                   landmarks=landmarks)
    vol.validate()
    return vol


def inner_box(dims: tuple[int, int, int], fraction: float = 0.6
              ) -> tuple[np.ndarray, np.ndarray]:
    """Real-valued bounds of the central ``fraction`` box (per axis)."""
    d = np.asarray(dims, dtype=np.float64)
    margin = (1.0 - fraction) / 2.0
    return margin * (d - 1.0), (1.0 - margin) * (d - 1.0)


# ---------------------------------------------------------------------------
# Dataset split
# ---------------------------------------------------------------------------

def split_dataset(ids: list, seed: int) -> DatasetSplit:
    """70/15/15 split: deterministic shuffle, sizes floor(.7n), floor(.15n),
    remainder to test."""
    if len(ids) < 3:
        raise TooFewVolumes(f"need at least 3 ids, got {len(ids)}")
    order = list(ids)
    Rng(derive_seed(0x5B11, seed)).shuffle(order)
    n = len(order)
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    return DatasetSplit(
        train=order[:n_train],
        validation=order[n_train:n_train + n_val],
        test=order[n_train + n_val:],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Resampling (for anisotropic NIfTI inputs)
# ---------------------------------------------------------------------------

def resample_to_isotropic(volume: Volume3D) -> Volume3D:
    """Nearest-neighbor resample to 1 mm spacing.

    No-op (same object) when the volume is already 1 mm isotropic.
    """
    spacing = volume.meta.spacing_mm
    if all(abs(s - 1.0) < 1e-9 for s in spacing):
        return volume
    dims = volume.meta.dims
    new_dims = tuple(int(np.floor((dims[a] - 1) * spacing[a])) + 1
                     for a in range(3))
    idx = [np.clip(np.round(np.arange(new_dims[a]) / spacing[a]).astype(int),
                   0, dims[a] - 1) for a in range(3)]
    vox = volume.voxels[np.ix_(idx[0], idx[1], idx[2])]
    landmarks = {
        name: np.minimum(pos * np.asarray(spacing),
                         np.asarray(new_dims, dtype=np.float64) - 1.0)
        for name, pos in volume.landmarks.items()
    }
    meta = VolumeMeta(dims=new_dims, spacing_mm=(1.0, 1.0, 1.0),
                      scalar_type=volume.meta.scalar_type,
                      data_offset_bytes=volume.meta.data_offset_bytes,
                      byte_order=volume.meta.byte_order)
    out = Volume3D(meta=meta, voxels=np.ascontiguousarray(vox),
                   landmarks=landmarks)
    out.validate()
    return out
