"""Volumes on disk and in memory: RVOL/NIfTI codecs, intensity scaling, resampling, patching.

Arrays are stored as (D, H, W) in C order, so the flat index of voxel (w, h, d)
is (d*H + h)*W + w, i.e. x varies fastest.
"""

import itertools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console
from skimage.transform import resize

from trisr.config import RVOL_DTYPE_FLOAT32, RVOL_MAGIC, RVOL_VERSION, settings
from trisr.exceptions import (DegenerateRange, FormatError, GridMismatch, IoError,
                              OddDimension, ShapeError, TruncatedFile, UnsupportedDtype)
from trisr.file_utils import atomic_write_bytes, read_bytes
from trisr.schemas import VolumeFormat

console = Console(stderr=True)

Triple = Tuple[int, int, int]

# magic, version, W, H, D, dtype, sx, sy, sz
_RVOL_HEADER = struct.Struct("<4sIIIII3f")


@dataclass(frozen=True, eq=False)
class Volume:
    """A dense 3-D scalar field with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Range the data had before normalize(), used by denormalize()
    source_range: Optional[Tuple[float, float]] = None
    intensity_range: Tuple[float, float] = field(init=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"Volume data must be 3-D (D, H, W), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"Volume dims must all be >= 1, got {data.shape[::-1]}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "intensity_range", (float(data.min()), float(data.max())))

    @property
    def dims(self) -> Triple:
        """(W, H, D)."""
        d, h, w = self.data.shape
        return (w, h, d)

    def value_at(self, w: int, h: int, d: int) -> float:
        return float(self.data[d, h, w])

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.reshape(-1)

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)


def volume_from_flat(
    values: Sequence[float],
    dims: Triple,
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    dtype=np.float32,
) -> Volume:
    """Build a Volume from x-fastest values and (W, H, D) dims."""
    w, h, d = dims
    if min(dims) < 1:
        raise ShapeError(f"Volume dims must all be >= 1, got {dims}")
    values = np.asarray(values, dtype=dtype)
    if values.size != w * h * d:
        raise ShapeError(f"Expected {w * h * d} values for dims {dims}, got {values.size}")
    return Volume(values.reshape(d, h, w), spacing)


# ---------------------------------------------------------------- file formats

def _guess_format(path: Path) -> VolumeFormat:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".hdr"):
        return VolumeFormat.NIFTI
    return VolumeFormat.RVOL


def read_volume(path: Union[str, Path], format: Optional[Union[str, VolumeFormat]] = None) -> Volume:
    """Read an RVOL or NIfTI-1 file. The format is guessed from the suffix when not given."""
    path = Path(path)
    fmt = VolumeFormat(format) if format else _guess_format(path)
    if fmt is VolumeFormat.NIFTI:
        from trisr.nifti import read_nifti
        return read_nifti(path)
    return decode_rvol(read_bytes(path), path)


def write_volume(v: Volume, path: Union[str, Path], format: Optional[Union[str, VolumeFormat]] = None) -> Path:
    """Write a volume. NIfTI output is always float32 with unit slope."""
    path = Path(path)
    fmt = VolumeFormat(format) if format else _guess_format(path)
    if fmt is VolumeFormat.NIFTI:
        from trisr.nifti import encode_nifti
        payload = encode_nifti(v)
    else:
        payload = encode_rvol(v)
    try:
        return atomic_write_bytes(path, payload)
    except IoError:
        console.print(f"[red]Failed to write {path}[/red]")
        raise


def encode_rvol(v: Volume) -> bytes:
    w, h, d = v.dims
    sx, sy, sz = v.spacing
    header = _RVOL_HEADER.pack(RVOL_MAGIC, RVOL_VERSION, w, h, d, RVOL_DTYPE_FLOAT32, sx, sy, sz)
    return header + np.ascontiguousarray(v.data, dtype="<f4").tobytes()


def decode_rvol(raw: bytes, source: Union[str, Path] = "<bytes>") -> Volume:
    if len(raw) < 4 or raw[:4] != RVOL_MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {RVOL_MAGIC!r}")
    if len(raw) < _RVOL_HEADER.size:
        raise TruncatedFile(f"{source}: header truncated ({len(raw)} bytes)")

    _, version, w, h, d, dtype, sx, sy, sz = _RVOL_HEADER.unpack_from(raw)
    if version != RVOL_VERSION:
        raise FormatError(f"{source}: unsupported RVOL version {version}")
    if dtype != RVOL_DTYPE_FLOAT32:
        raise UnsupportedDtype(f"{source}: unsupported RVOL dtype code {dtype}")
    if min(w, h, d) < 1:
        raise FormatError(f"{source}: invalid dims {(w, h, d)}")

    count = w * h * d
    expected = _RVOL_HEADER.size + 4 * count
    if len(raw) < expected:
        raise TruncatedFile(f"{source}: expected {expected} bytes, found {len(raw)}")

    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_RVOL_HEADER.size)
    return Volume(data.astype(np.float32).reshape(d, h, w), (sx, sy, sz))


# ---------------------------------------------------------------- intensities

def normalize(v: Volume) -> Volume:
    """Min-max map onto [0, 1], remembering the original range."""
    lo, hi = v.intensity_range
    if not hi > lo:
        raise DegenerateRange(f"Cannot normalize a constant volume (value {lo})")
    scaled = (v.data.astype(np.float64) - lo) / (hi - lo)
    return v.with_data(scaled.astype(v.data.dtype), source_range=(lo, hi))


def denormalize(v: Volume, source_range: Optional[Tuple[float, float]] = None) -> Volume:
    source_range = source_range or v.source_range
    if source_range is None:
        return v
    lo, hi = source_range
    restored = v.data.astype(np.float64) * (hi - lo) + lo
    return v.with_data(restored.astype(v.data.dtype), source_range=None)


# ---------------------------------------------------------------- resampling

def downsample_half_array(a: np.ndarray) -> np.ndarray:
    """Halve the last three axes.

    Output voxel v sits at input coordinate 2v + 0.5, halfway between voxels 2v and
    2v + 1, so trilinear interpolation there is the mean of each 2x2x2 block.
    """
    *lead, d, h, w = a.shape
    for n in (d, h, w):
        if n < 2 or n % 2:
            raise OddDimension(f"Axis lengths must be even and >= 2, got {(w, h, d)}")
    blocks = a.reshape(*lead, d // 2, 2, h // 2, 2, w // 2, 2)
    k = len(lead)
    return blocks.mean(axis=(k + 1, k + 3, k + 5)).astype(a.dtype, copy=False)


def downsample_half(v: Volume) -> Volume:
    sx, sy, sz = v.spacing
    return v.with_data(downsample_half_array(v.data), spacing=(2 * sx, 2 * sy, 2 * sz))


def upsample_trilinear_array(a: np.ndarray, scale: int = 2) -> np.ndarray:
    """Trilinear upsampling of the last three axes (voxel-center aligned, edge clamped).

    Output voxel u samples input coordinate (u + 0.5) / scale - 0.5, clamped to the
    first and last voxel.
    """
    shape = a.shape[:-3] + tuple(scale * n for n in a.shape[-3:])
    out = resize(
        a.astype(np.float64),
        shape,
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return out.astype(a.dtype, copy=False)


def upsample_trilinear(v: Volume, scale: int = 2) -> Volume:
    sx, sy, sz = v.spacing
    return v.with_data(
        upsample_trilinear_array(v.data, scale), spacing=(sx / scale, sy / scale, sz / scale)
    )


# ---------------------------------------------------------------- patches

def origins_along(axis_len: int, window: int, stride: int) -> List[int]:
    """Stride-aligned window starts; the last is the first multiple of stride whose
    window reaches the end of the axis."""
    if not window >= stride >= 1:
        raise ValueError(f"Need window >= stride >= 1, got window={window}, stride={stride}")
    last = 0
    while last + window < axis_len:
        last += stride
    return list(range(0, last + 1, stride))


@dataclass(frozen=True)
class PatchGrid:
    window: int
    stride: int
    # (w, h, d) start coordinates in lexicographic order
    origins: List[Triple]
    source_dims: Triple
    source_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def build(
        cls,
        dims: Triple,
        window: int,
        stride: int,
        spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "PatchGrid":
        per_axis = [origins_along(n, window, stride) for n in dims]
        origins = [tuple(o) for o in itertools.product(*per_axis)]
        return cls(window, stride, origins, tuple(dims), tuple(spacing))

    @staticmethod
    def origins_along(axis_len: int, window: int, stride: int) -> List[int]:
        return origins_along(axis_len, window, stride)

    @property
    def padded_dims(self) -> Triple:
        return tuple(
            max(o[axis] for o in self.origins) + self.window for axis in range(3)
        )

    def __len__(self) -> int:
        return len(self.origins)


def _pad_to(data: np.ndarray, padded_dims: Triple) -> np.ndarray:
    pw, ph, pd = padded_dims
    d, h, w = data.shape
    return np.pad(data, ((0, pd - d), (0, ph - h), (0, pw - w)))


def extract_patch_array(data: np.ndarray, grid: PatchGrid, threads: Optional[int] = None) -> np.ndarray:
    """Stack of patches (P, window, window, window) in origin order, zero filled."""
    padded = _pad_to(data, grid.padded_dims)
    k = grid.window

    def cut(origin: Triple) -> np.ndarray:
        w0, h0, d0 = origin
        return padded[d0:d0 + k, h0:h0 + k, w0:w0 + k]

    threads = threads or settings.THREADS
    if threads > 1:
        # map() keeps origin order whatever the scheduling
        with ThreadPoolExecutor(max_workers=threads) as pool:
            patches = list(pool.map(cut, grid.origins))
    else:
        patches = [cut(o) for o in grid.origins]
    return np.stack(patches).astype(data.dtype, copy=False)


def extract_patches(v: Volume, window: int, stride: int) -> Tuple[PatchGrid, List[Volume]]:
    grid = PatchGrid.build(v.dims, window, stride, v.spacing)
    stack = extract_patch_array(v.data, grid)
    return grid, [Volume(p, v.spacing, v.source_range) for p in stack]


def stitch_patch_array(grid: PatchGrid, patches: Sequence[np.ndarray], scale: int = 1) -> np.ndarray:
    if len(patches) != len(grid.origins):
        raise GridMismatch(f"Grid has {len(grid.origins)} origins but {len(patches)} patches were given")

    edge = grid.window * scale
    pw, ph, pd = (n * scale for n in grid.padded_dims)
    total = np.zeros((pd, ph, pw), dtype=np.float64)
    weight = np.zeros((pd, ph, pw), dtype=np.float64)

    for (w0, h0, d0), patch in zip(grid.origins, patches):
        patch = np.asarray(patch)
        if patch.shape != (edge, edge, edge):
            raise GridMismatch(f"Patch shape {patch.shape} does not match edge {edge}")
        sl = (
            slice(d0 * scale, d0 * scale + edge),
            slice(h0 * scale, h0 * scale + edge),
            slice(w0 * scale, w0 * scale + edge),
        )
        total[sl] += patch
        weight[sl] += 1.0

    w, h, d = (n * scale for n in grid.source_dims)
    # every source voxel is covered, so weights in the kept region are >= 1
    return (total[:d, :h, :w] / weight[:d, :h, :w])


def stitch_patches(grid: PatchGrid, patches: Sequence[Union[Volume, np.ndarray]], scale: int = 1) -> Volume:
    """Average overlapping patches back into one volume of dims source_dims * scale."""
    arrays = [p.data if isinstance(p, Volume) else p for p in patches]
    dtype = arrays[0].dtype if arrays else np.float32
    stitched = stitch_patch_array(grid, arrays, scale).astype(dtype)
    sx, sy, sz = grid.source_spacing
    source_range = patches[0].source_range if patches and isinstance(patches[0], Volume) else None
    return Volume(stitched, (sx / scale, sy / scale, sz / scale), source_range)
