"""Volume quality metrics: PSNR, 3-D SSIM, NRMSE, and the FE feature distance."""

from typing import Callable, List, Optional, Union

import numpy as np
from skimage.metrics import (mean_squared_error, normalized_root_mse,
                             peak_signal_noise_ratio, structural_similarity)

from trisr.config import settings
from trisr.exceptions import DegenerateRange, ShapeError
from trisr.schemas import MetricReport
from trisr.tensor import Tensor
from trisr.tensor import l1 as _l1
from trisr.volume_io import Volume

VolumeLike = Union[Volume, np.ndarray]

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(ref: VolumeLike, test: VolumeLike):
    a = np.asarray(ref.data if isinstance(ref, Volume) else ref, dtype=np.float64)
    b = np.asarray(test.data if isinstance(test, Volume) else test, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Volume dims differ: {a.shape[::-1]} vs {b.shape[::-1]}")
    return a, b


def _range_of(a: np.ndarray) -> float:
    return float(a.max() - a.min())


def _resolve_range(a: np.ndarray, data_range: Optional[float]) -> float:
    data_range = _range_of(a) if data_range is None else float(data_range)
    if not data_range > 0:
        raise DegenerateRange(f"data_range must be > 0, got {data_range}")
    return data_range


def psnr(ref: VolumeLike, test: VolumeLike, data_range: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give settings.PSNR_CAP."""
    a, b = _pair(ref, test)
    data_range = _resolve_range(a, data_range)
    if mean_squared_error(a, b) == 0.0:
        return settings.PSNR_CAP
    return float(peak_signal_noise_ratio(a, b, data_range=data_range))


def ssim3d(
    ref: VolumeLike,
    test: VolumeLike,
    data_range: Optional[float] = None,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> float:
    """Mean SSIM over all valid uniform window^3 boxes, sample (N-1) covariances.

    Border positions whose box would leave the volume are excluded from the mean.
    """
    a, b = _pair(ref, test)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"SSIM window must be odd and >= 3, got {window}")
    if min(a.shape) < window:
        raise ShapeError(f"Volume dims {a.shape[::-1]} smaller than SSIM window {window}")
    data_range = _resolve_range(a, data_range)

    score = structural_similarity(
        a,
        b,
        win_size=window,
        gaussian_weights=False,
        use_sample_covariance=True,
        data_range=data_range,
        K1=k1,
        K2=k2,
    )
    return float(score)


def nrmse(ref: VolumeLike, test: VolumeLike) -> float:
    """RMSE divided by the reference intensity range (max - min)."""
    a, b = _pair(ref, test)
    if _range_of(a) == 0:
        raise DegenerateRange("NRMSE is undefined for a constant reference")
    return float(normalized_root_mse(a, b, normalization="min-max"))


def fe_distance(fe_forward: Callable[[Tensor], Tensor], ref: VolumeLike, test: VolumeLike) -> float:
    """Feature-space l1 under a trained feature extractor.

    Both volumes are scaled by the reference range first. Not LPIPS and not
    comparable with published LPIPS numbers.
    """
    a, b = _pair(ref, test)
    lo, spread = float(a.min()), _range_of(a) or 1.0
    dtype = np.float32

    def as_input(arr: np.ndarray) -> Tensor:
        return Tensor._wrap(((arr - lo) / spread).astype(dtype)[None, None])

    return _l1(fe_forward(as_input(a)), fe_forward(as_input(b))).item()


def evaluate(
    ref: VolumeLike,
    test: VolumeLike,
    data_range: Optional[float] = None,
    window: int = SSIM_WINDOW,
    fe_forward: Optional[Callable[[Tensor], Tensor]] = None,
) -> MetricReport:
    a, _ = _pair(ref, test)
    data_range = _resolve_range(a, data_range)
    return MetricReport(
        psnr=psnr(ref, test, data_range),
        ssim=ssim3d(ref, test, data_range, window),
        nrmse=nrmse(ref, test),
        data_range=data_range,
        ssim_window=window,
        k1=SSIM_K1,
        k2=SSIM_K2,
        fe_distance=fe_distance(fe_forward, ref, test) if fe_forward is not None else None,
    )


def metric_row(ref_name: str, test_name: str, report: MetricReport) -> List[str]:
    """One eval CSV row in METRIC_CSV_COLUMNS order."""
    return [
        ref_name,
        test_name,
        repr(report.psnr),
        repr(report.ssim),
        repr(report.nrmse),
        repr(report.data_range),
        str(report.ssim_window),
        repr(report.k1),
        repr(report.k2),
        report.nrmse_norm,
    ]
