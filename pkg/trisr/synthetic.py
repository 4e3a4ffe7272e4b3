"""Seeded textured phantoms for desk-scale training and evaluation."""

from typing import Tuple

import numpy as np

from trisr.exceptions import DegenerateRange
from trisr.volume_io import Volume

Triple = Tuple[int, int, int]


def band_limited_noise(shape: Tuple[int, int, int], rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    """White noise low-passed with a Gaussian of ``sigma`` voxels in the Fourier domain."""
    white = rng.standard_normal(shape)
    freqs = np.meshgrid(
        *[np.fft.fftfreq(n) for n in shape[:-1]], np.fft.rfftfreq(shape[-1]), indexing="ij"
    )
    k2 = sum(f * f for f in freqs)
    spectrum = np.fft.rfftn(white, axes=(0, 1, 2)) * np.exp(-2.0 * (np.pi * sigma) ** 2 * k2)
    return np.fft.irfftn(spectrum, s=shape, axes=(0, 1, 2))


def _grid(shape: Tuple[int, int, int]):
    d, h, w = shape
    return np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")


def make_phantom(
    dims: Triple,
    seed: int = 0,
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    num_spheres: int = 4,
    num_shells: int = 2,
    num_tubes: int = 3,
) -> Volume:
    """Band-limited background texture plus spheres, ellipsoid shells and tubes, in [0, 1].

    Args:
        dims: (W, H, D)
        seed: Fully determines the volume
        spacing: Voxel spacing recorded on the result

    Returns:
        A float32 Volume with intensity range exactly [0, 1]
    """
    w, h, d = dims
    shape = (d, h, w)
    rng = np.random.default_rng(seed)
    zz, yy, xx = _grid(shape)
    extent = np.array(shape, dtype=np.float64)

    noise = band_limited_noise(shape, rng)
    vol = 0.3 * noise / (np.abs(noise).max() or 1.0)

    for _ in range(num_spheres):
        center = rng.uniform(0.2, 0.8, 3) * extent
        radius = rng.uniform(0.08, 0.2) * extent.min()
        r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
        vol += rng.uniform(0.4, 1.0) * (r2 <= radius ** 2)

    for _ in range(num_shells):
        center = rng.uniform(0.3, 0.7, 3) * extent
        axes = rng.uniform(0.15, 0.35, 3) * extent
        thickness = rng.uniform(0.08, 0.15)
        rho = np.sqrt(
            ((zz - center[0]) / axes[0]) ** 2
            + ((yy - center[1]) / axes[1]) ** 2
            + ((xx - center[2]) / axes[2]) ** 2
        )
        vol += rng.uniform(0.3, 0.8) * (np.abs(rho - 1.0) <= thickness)

    coords = (zz, yy, xx)
    for _ in range(num_tubes):
        axis = int(rng.integers(3))
        a, b = [i for i in range(3) if i != axis]
        ca, cb = rng.uniform(0.2, 0.8) * extent[a], rng.uniform(0.2, 0.8) * extent[b]
        radius = rng.uniform(0.04, 0.1) * extent.min()
        mask = (coords[a] - ca) ** 2 + (coords[b] - cb) ** 2 <= radius ** 2
        vol += rng.uniform(0.3, 0.9) * mask

    lo, hi = vol.min(), vol.max()
    vol = (vol - lo) / (hi - lo)
    return Volume(vol.astype(np.float32), spacing)


def contrast_shift(v: Volume, gamma: float = 1.0, invert: bool = False) -> Volume:
    """Out-of-distribution analog: gamma curve on the [0, 1]-scaled volume, optionally inverted."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    lo, hi = v.intensity_range
    if not hi > lo:
        raise DegenerateRange("Cannot contrast-shift a constant volume")
    scaled = (v.data.astype(np.float64) - lo) / (hi - lo)
    shifted = scaled ** gamma
    if invert:
        shifted = 1.0 - shifted
    return v.with_data(shifted.astype(v.data.dtype), source_range=None)
