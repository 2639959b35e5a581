"""3D volume handling: preprocessing, slicing, reassembly, smoothing, I/O.

Volumes are axial-slice-major float32 grids of shape (D, H, W): index 0 is
the slice axis.  A masked case bundles an optional ground truth, a binary
mask, and the voided baseline (ground truth with the mask region zeroed).

Two file formats are supported: a native "VVOL" binary, and a minimal
single-file NIfTI-1 subset (float32, uncompressed, header preserved
verbatim for round-trips).
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import ConfigError, DomainError, ShapeError

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
NIFTI_HEADER_SIZE = 348
NIFTI_DTYPE_FLOAT32 = 16


class VolumeIOError(IOError):
    """Malformed or truncated volume file."""


@dataclass
class Volume:
    """Axial-slice-major scalar grid."""

    data: np.ndarray
    nifti_header: bytes | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"volume must be 3-d, got shape {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise DomainError("volume contains non-finite voxels")
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def binarize_mask(v: Volume) -> Volume:
    """Threshold at 0.5; ingested masks may be interpolated."""
    return Volume((v.data >= 0.5).astype(np.float32))


@dataclass
class MaskedCase:
    """Ground truth (optional), binary mask, and voided baseline."""

    mask: Volume
    baseline: Volume
    ground_truth: Volume | None = None

    def __post_init__(self) -> None:
        dims = self.mask.dims
        if self.baseline.dims != dims:
            raise ShapeError(f"baseline dims {self.baseline.dims} != mask dims {dims}")
        if not np.all(np.isin(np.unique(self.mask.data), (0.0, 1.0))):
            raise DomainError("mask must be binary (exact 0/1)")
        if self.ground_truth is not None:
            if self.ground_truth.dims != dims:
                raise ShapeError(f"ground truth dims {self.ground_truth.dims} != mask dims {dims}")
            expected = self.ground_truth.data * (1.0 - self.mask.data)
            if not np.array_equal(self.baseline.data, expected):
                raise DomainError("baseline must equal ground truth with the mask voided")


# --------------------------------------------------------------------------
# Preprocessing


def preprocess(v: Volume) -> Volume:
    """Clamp to the [0.1, 99.9] percentile window, then rescale to [0, 1].

    Percentiles use linear interpolation between order statistics.  A
    degenerate (constant) volume maps to all zeros.
    """
    lo, hi = np.percentile(v.data, [0.1, 99.9], method="linear")
    clipped = np.clip(v.data, lo, hi)
    span = float(clipped.max() - clipped.min())
    if span == 0.0:
        return Volume(np.zeros_like(v.data))
    return Volume(((clipped - clipped.min()) / span).astype(np.float32))


@dataclass(frozen=True)
class CropPlan:
    """How each in-plane axis was cropped (positive offset) or padded."""

    orig_h: int
    orig_w: int
    size: int
    h_off: int  # crop start when orig >= size, pad start otherwise
    w_off: int


def center_crop_slices(v: Volume, size: int) -> tuple[Volume, CropPlan]:
    """Center-crop each axial slice to size x size, zero-padding if smaller."""
    d, h, w = v.dims
    plan = CropPlan(orig_h=h, orig_w=w, size=size,
                    h_off=abs(h - size) // 2, w_off=abs(w - size) // 2)
    out = np.zeros((d, size, size), dtype=np.float32)
    hs, hd = _axis_windows(h, size, plan.h_off)
    ws, wd = _axis_windows(w, size, plan.w_off)
    out[:, hd, wd] = v.data[:, hs, ws]
    return Volume(out), plan


def re_embed(v: Volume, plan: CropPlan) -> Volume:
    """Invert center_crop_slices, restoring the original in-plane dims."""
    d = v.dims[0]
    if v.dims[1] != plan.size or v.dims[2] != plan.size:
        raise ShapeError(f"volume dims {v.dims} do not match crop size {plan.size}")
    out = np.zeros((d, plan.orig_h, plan.orig_w), dtype=np.float32)
    hs, hd = _axis_windows(plan.orig_h, plan.size, plan.h_off)
    ws, wd = _axis_windows(plan.orig_w, plan.size, plan.w_off)
    out[:, hs, ws] = v.data[:, hd, wd]
    return Volume(out)


def _axis_windows(orig: int, size: int, off: int) -> tuple[slice, slice]:
    """(source window in the original, destination window in the crop)."""
    if orig >= size:
        return slice(off, off + size), slice(0, size)
    return slice(0, orig), slice(off, off + orig)


# --------------------------------------------------------------------------
# Slicing / reassembly


@dataclass(frozen=True)
class SliceRecord:
    index: int
    baseline: np.ndarray
    mask: np.ndarray
    ground_truth: np.ndarray | None = None


def select_slices(case: MaskedCase) -> list[SliceRecord]:
    """Axial indices whose mask slice contains at least one nonzero voxel."""
    out = []
    for i in range(case.mask.dims[0]):
        ms = case.mask.data[i]
        if ms.any():
            gt = case.ground_truth.data[i] if case.ground_truth is not None else None
            out.append(SliceRecord(index=i, baseline=case.baseline.data[i], mask=ms, ground_truth=gt))
    return out


def reassemble(baseline: Volume, sampled: list[tuple[int, np.ndarray]]) -> Volume:
    """Copy of the baseline with the listed axial slices replaced wholesale."""
    d, h, w = baseline.dims
    seen = set()
    out = baseline.data.copy()
    for idx, sl in sampled:
        if idx in seen:
            raise DomainError(f"slice index {idx} listed twice")
        seen.add(idx)
        if not 0 <= idx < d:
            raise DomainError(f"slice index {idx} outside 0..{d - 1}")
        sl = np.asarray(sl, dtype=np.float32)
        if sl.shape != (h, w):
            raise ShapeError(f"slice {idx} has shape {sl.shape}, expected {(h, w)}")
        out[idx] = sl
    return Volume(out)


# --------------------------------------------------------------------------
# Smoothing / renormalization


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(4*sigma), normalized to sum 1."""
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume, sigma: float) -> Volume:
    """Separable 3D Gaussian with renormalized truncation at the borders.

    Kernel mass falling outside the volume is redistributed by dividing by
    the in-bounds mass, so a constant volume stays constant.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel_1d(sigma)
    out = v.data.astype(np.float64)
    for axis, length in enumerate(v.dims):
        out = correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
        mass = correlate1d(np.ones(length), k, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = length
        out /= mass.reshape(shape)
    return Volume(out.astype(np.float32))


def renormalize_output(output: Volume, input_ref: Volume) -> Volume:
    """Map the output's own range onto the reference's clipped range.

    The target interval is the [0.5, 99.5] percentile window of the
    reference; a degenerate output collapses to the interval midpoint.
    """
    lo, hi = np.percentile(input_ref.data, [0.5, 99.5], method="linear")
    omin = float(output.data.min())
    omax = float(output.data.max())
    if omax == omin:
        return Volume(np.full_like(output.data, (lo + hi) / 2.0))
    scaled = (output.data.astype(np.float64) - omin) / (omax - omin)
    return Volume((lo + scaled * (hi - lo)).astype(np.float32))


# --------------------------------------------------------------------------
# Synthetic phantom


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    dims: tuple[int, int, int] = (16, 32, 32)
    structures: int = 4
    mask_count: int = 2
    mask_radius: tuple[float, float] = (2.5, 5.0)


def generate_phantom(spec: PhantomSpec) -> MaskedCase:
    """Deterministic synthetic case: ellipsoidal body with smooth internal
    structure, spherical masks strictly inside the body, voided baseline.

    Intensities are already normalized to [0, 1] (preprocessed space).
    """
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims
    zz = (np.arange(d) - (d - 1) / 2.0)[:, None, None]
    yy = (np.arange(h) - (h - 1) / 2.0)[None, :, None]
    xx = (np.arange(w) - (w - 1) / 2.0)[None, None, :]
    semi = np.array([d, h, w], dtype=np.float64) * 0.42
    rho2 = (zz / semi[0]) ** 2 + (yy / semi[1]) ** 2 + (xx / semi[2]) ** 2
    body = rho2 <= 1.0
    if not body.any():
        raise ConfigError(f"dims {spec.dims} too small to contain a phantom body")

    # strong regional contrast so intensity levels vary across the body;
    # a local region is predictable from its surroundings but not from any
    # single global statistic
    intensity = np.where(body, 0.5, 0.0)
    for _ in range(spec.structures):
        center = rng.uniform(-0.5, 0.5, size=3) * semi
        axes = rng.uniform(0.2, 0.55, size=3) * semi
        delta = rng.uniform(0.18, 0.42) * rng.choice([-1.0, 1.0])
        r2 = (
            ((zz - center[0]) / axes[0]) ** 2
            + ((yy - center[1]) / axes[1]) ** 2
            + ((xx - center[2]) / axes[2]) ** 2
        )
        falloff = np.clip(1.0 - r2, 0.0, 1.0)  # smooth-edged blob
        intensity = intensity + delta * falloff * body

    freq = rng.uniform(0.5, 1.5, size=3)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    texture = (
        np.sin(2 * np.pi * freq[0] * zz / d + phase[0])
        * np.sin(2 * np.pi * freq[1] * yy / h + phase[1])
        * np.sin(2 * np.pi * freq[2] * xx / w + phase[2])
    )
    intensity = intensity + 0.06 * texture * body
    intensity = intensity + rng.normal(0.0, 0.004, size=(d, h, w)) * body
    intensity = np.where(body, np.clip(intensity, 0.05, None), 0.0)
    gt = preprocess(Volume(intensity.astype(np.float32)))

    mask = np.zeros(spec.dims, dtype=np.float32)
    zc = np.arange(d)[:, None, None]
    yc = np.arange(h)[None, :, None]
    xc = np.arange(w)[None, None, :]
    min_semi = float(semi.min())
    lo_r, hi_r = spec.mask_radius
    max_fit = 0.90 * min_semi  # largest sphere the body can host with margin
    if lo_r > max_fit:
        raise ConfigError(
            f"cannot place a mask sphere of radius >= {lo_r:.2f} inside the body "
            f"for dims {spec.dims} (max {max_fit:.2f})"
        )
    for _ in range(spec.mask_count):
        radius = rng.uniform(lo_r, min(hi_r, max_fit))
        # center drawn directly inside the shrunken ellipsoid that keeps the
        # whole sphere within the body
        max_rho = 0.95 - radius / min_semi
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        rho = max_rho * rng.uniform() ** (1.0 / 3.0)
        cand = direction * rho * semi
        cz = cand[0] + (d - 1) / 2.0
        cy = cand[1] + (h - 1) / 2.0
        cx = cand[2] + (w - 1) / 2.0
        sphere = (zc - cz) ** 2 + (yc - cy) ** 2 + (xc - cx) ** 2 <= radius**2
        mask[sphere] = 1.0
    if not mask.any():
        raise ConfigError("generated mask is empty; increase the radius range")

    baseline = gt.data * (1.0 - mask)
    return MaskedCase(
        ground_truth=gt,
        mask=Volume(mask),
        baseline=Volume(baseline.astype(np.float32)),
    )


# --------------------------------------------------------------------------
# File I/O


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_vvol(path: str, v: Volume) -> None:
    d, h, w = v.dims
    header = VVOL_MAGIC + struct.pack("<IIII", VVOL_VERSION, d, h, w)
    _atomic_write(path, header + np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_vvol(path: str) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VVOL_MAGIC:
        raise VolumeIOError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, d, h, w = struct.unpack_from("<IIII", raw, 4)
    if version != VVOL_VERSION:
        raise VolumeIOError(f"{path}: unsupported version {version}")
    need = 20 + d * h * w * 4
    if len(raw) < need:
        raise VolumeIOError(f"{path}: truncated voxel data (need {need} bytes, have {len(raw)})")
    vox = np.frombuffer(raw, dtype="<f4", count=d * h * w, offset=20).reshape(d, h, w)
    return Volume(vox.copy())


def write_nifti(path: str, v: Volume) -> None:
    """Write the minimal single-file NIfTI-1 subset (float32, magic n+1).

    If the volume carries a header captured at read time, it is written back
    verbatim; otherwise a fresh minimal header is synthesized.
    """
    d, h, w = v.dims
    if v.nifti_header is not None:
        header = v.nifti_header
    else:
        buf = bytearray(352)
        struct.pack_into("<i", buf, 0, NIFTI_HEADER_SIZE)
        struct.pack_into("<8h", buf, 40, 3, w, h, d, 1, 1, 1, 1)
        struct.pack_into("<h", buf, 70, NIFTI_DTYPE_FLOAT32)
        struct.pack_into("<h", buf, 72, 32)  # bitpix
        struct.pack_into("<8f", buf, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)  # pixdim
        struct.pack_into("<f", buf, 108, 352.0)  # vox_offset
        buf[344:348] = b"n+1\x00"
        header = bytes(buf)
    _atomic_write(path, header + np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_nifti(path: str) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeIOError(f"{path}: file shorter than the {NIFTI_HEADER_SIZE}-byte header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise VolumeIOError(
            f"{path}: sizeof_hdr={sizeof_hdr} at offset 0; only little-endian "
            f"NIfTI-1 ({NIFTI_HEADER_SIZE}) is supported"
        )
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError(f"{path}: bad magic {magic!r} at offset 344")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3 or any(x != 1 for x in dim[4 : dim[0] + 1]):
        raise VolumeIOError(f"{path}: unsupported dim field {dim}; need a single 3-d volume")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype != NIFTI_DTYPE_FLOAT32:
        raise VolumeIOError(
            f"{path}: unsupported datatype code {datatype} at offset 70; only float32 (16)"
        )
    (vox_offset_f,) = struct.unpack_from("<f", raw, 108)
    vox_offset = int(vox_offset_f)
    if vox_offset < NIFTI_HEADER_SIZE:
        vox_offset = 352
    w, h, d = dim[1], dim[2], dim[3]
    need = vox_offset + d * h * w * 4
    if len(raw) < need:
        raise VolumeIOError(
            f"{path}: truncated voxel data (need {need} bytes, have {len(raw)}, "
            f"vox_offset {vox_offset})"
        )
    vox = np.frombuffer(raw, dtype="<f4", count=d * h * w, offset=vox_offset).reshape(d, h, w)
    return Volume(vox.copy(), nifti_header=raw[:vox_offset])


def write_volume(path: str, v: Volume) -> None:
    """Dispatch on extension: .vvol native, .nii NIfTI subset."""
    if path.endswith(".nii"):
        write_nifti(path, v)
    else:
        write_vvol(path, v)


def read_volume(path: str) -> Volume:
    if path.endswith(".nii"):
        return read_nifti(path)
    return read_vvol(path)
