"""
TAC/TDC 仿真：两路点击流的时间差直方图、峰宽拟合与去卷积。

直方图记录窗口内所有 (start, stop) 组合（而不是第一个 stop），
与并行记录全部到达时间差的 TDC 一致。
"""

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.special import ndtr

from .constants import FWHM_PER_SIGMA
from .errors import DomainError, FitError

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH_PS = 45.5
DEFAULT_RANGE_PS = (-10000.0, 10000.0)
# 每批处理的 start 点击数，限制成对数组的内存
START_BLOCK = 1_000_000


@dataclass(frozen=True)
class CoincidenceHistogram:
    bin_width_ps: float
    range_ps: tuple
    counts: np.ndarray
    total_events: int

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def bin_edges(self) -> np.ndarray:
        return self.range_ps[0] + self.bin_width_ps * np.arange(self.n_bins + 1)

    @property
    def bin_centers(self) -> np.ndarray:
        return self.range_ps[0] + self.bin_width_ps * (np.arange(self.n_bins) + 0.5)

    def __add__(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if other.bin_width_ps != self.bin_width_ps or tuple(other.range_ps) != tuple(self.range_ps):
            raise DomainError("histograms with different binning cannot be merged")
        return CoincidenceHistogram(
            self.bin_width_ps, self.range_ps, self.counts + other.counts, self.total_events + other.total_events,
        )

    def rebin(self, factor: int) -> "CoincidenceHistogram":
        """按整数倍合并相邻 bin，末尾不足的部分补零，总数严格守恒。"""
        if factor < 1 or int(factor) != factor:
            raise DomainError(f"rebin factor must be a positive integer, got {factor}")
        factor = int(factor)
        padded = int(math.ceil(self.n_bins / factor)) * factor
        counts = np.zeros(padded, dtype=np.int64)
        counts[: self.n_bins] = self.counts
        merged = counts.reshape(-1, factor).sum(axis=1)
        lo = self.range_ps[0]
        hi = lo + padded * self.bin_width_ps
        return CoincidenceHistogram(self.bin_width_ps * factor, (lo, hi), merged, self.total_events)

    def stats(self) -> dict:
        counts = self.counts
        return {
            "n_bins": int(self.n_bins),
            "sum": int(counts.sum()),
            "max": int(counts.max()) if counts.size else 0,
            "median": float(np.median(counts)) if counts.size else 0.0,
            "total_events": int(self.total_events),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(("bin_center_ps", "counts"))
        for center, count in zip(self.bin_centers, self.counts):
            writer.writerow((repr(float(center)), int(count)))
        return buf.getvalue()


def _times(stream) -> np.ndarray:
    return np.asarray(getattr(stream, "timestamps_ps", stream), dtype=float)


def coincidence_pairs(start_times, stop_times, lo_ps: float, hi_ps: float):
    """
    所有满足 lo ≤ stop − start < hi 的 (start 下标, stop 下标, 时间差)。
    两路时间都须已排序。
    """
    start_times = np.asarray(start_times, dtype=float)
    stop_times = np.asarray(stop_times, dtype=float)
    lower = np.searchsorted(stop_times, start_times + lo_ps, side="left")
    upper = np.searchsorted(stop_times, start_times + hi_ps, side="left")
    per_start = upper - lower
    total = int(per_start.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    start_idx = np.repeat(np.arange(len(start_times)), per_start)
    first = np.repeat(np.cumsum(per_start) - per_start, per_start)
    stop_idx = np.arange(total) - first + np.repeat(lower, per_start)
    return start_idx, stop_idx, stop_times[stop_idx] - start_times[start_idx]


def bin_time_differences(dt, bin_width_ps: float, range_ps) -> CoincidenceHistogram:
    lo, hi = float(range_ps[0]), float(range_ps[1])
    n_bins = int(math.ceil((hi - lo) / bin_width_ps))
    dt = np.asarray(dt, dtype=float)
    dt = dt[(dt >= lo) & (dt < hi)]
    index = np.minimum(np.floor((dt - lo) / bin_width_ps).astype(np.int64), n_bins - 1)
    counts = np.bincount(index, minlength=n_bins).astype(np.int64)
    return CoincidenceHistogram(bin_width_ps, (lo, hi), counts, int(len(dt)))


def histogram(
    start_stream,
    stop_stream,
    bin_width_ps: float = DEFAULT_BIN_WIDTH_PS,
    range_ps=DEFAULT_RANGE_PS,
) -> CoincidenceHistogram:
    """stop − start 时间差直方图；bin 下标 = floor((Δt − min)/bin_width)。"""
    lo, hi = float(range_ps[0]), float(range_ps[1])
    if not bin_width_ps > 0:
        raise DomainError(f"bin width must be positive, got {bin_width_ps}")
    if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
        raise DomainError(f"histogram range must be finite and increasing, got {range_ps}")
    starts = _times(start_stream)
    stops = _times(stop_stream)
    result = bin_time_differences(np.empty(0), bin_width_ps, (lo, hi))
    for begin in range(0, len(starts), START_BLOCK):
        block = starts[begin:begin + START_BLOCK]
        _, _, dt = coincidence_pairs(block, stops, lo, hi)
        result = result + bin_time_differences(dt, bin_width_ps, (lo, hi))
    return result


@dataclass(frozen=True)
class PeakFit:
    center_ps: float
    fwhm_ps: float
    fwhm_stderr_ps: float
    amplitude: float
    baseline: float

    def to_dict(self) -> dict:
        return {
            "center_ps": self.center_ps,
            "fwhm_ps": self.fwhm_ps,
            "fwhm_stderr_ps": self.fwhm_stderr_ps,
            "amplitude": self.amplitude,
            "baseline": self.baseline,
        }


def _binned_gaussian(bin_width_ps: float):
    """
    常数基线 + 按 bin 积分的高斯。amplitude 为高斯峰高（计数）；
    峰宽只有一两个 bin 时，直接在 bin 中心取值会把 FWHM 估宽。
    """
    half = bin_width_ps / 2.0

    def model(t, amplitude, center, sigma, baseline):
        sigma = np.abs(sigma) + 1e-9
        mass = ndtr((t + half - center) / sigma) - ndtr((t - half - center) / sigma)
        return baseline + amplitude * math.sqrt(2.0 * math.pi) * sigma / bin_width_ps * mass

    return model


def fit_peak(hist: CoincidenceHistogram, dominance: float = 5.0) -> PeakFit:
    """常数基线 + 高斯（按 bin 积分）的最小二乘拟合，返回中心、FWHM（含标准误）、幅度与基线。"""
    counts = hist.counts.astype(float)
    stats = hist.stats()
    if not counts.size or counts.max() <= 0 or counts.max() < dominance * np.median(counts):
        raise FitError("no dominant coincidence peak above the baseline", counts=stats)

    x = hist.bin_centers
    peak = int(np.argmax(counts))
    baseline0 = float(np.median(counts))
    amplitude0 = counts[peak] - baseline0
    above = np.count_nonzero(counts - baseline0 >= amplitude0 / 2.0)
    sigma0 = max(above, 1) * hist.bin_width_ps / FWHM_PER_SIGMA

    with warnings.catch_warnings():
        warnings.simplefilter("error", OptimizeWarning)
        try:
            params, cov = curve_fit(
                _binned_gaussian(hist.bin_width_ps),
                x,
                counts,
                p0=(amplitude0, x[peak], sigma0, baseline0),
                sigma=np.sqrt(np.maximum(counts, 1.0)),
                maxfev=10000,
            )
        except (RuntimeError, ValueError, OptimizeWarning) as e:
            raise FitError(f"peak fit did not converge: {e}", counts=stats) from e

    amplitude, center, sigma, baseline = params
    sigma_err = math.sqrt(cov[2, 2]) if np.isfinite(cov[2, 2]) and cov[2, 2] >= 0 else math.inf
    if not math.isfinite(sigma_err) or amplitude < 0:
        raise FitError("peak fit is degenerate", counts=stats)

    fit = PeakFit(
        center_ps=float(center),
        fwhm_ps=float(abs(sigma) * FWHM_PER_SIGMA),
        fwhm_stderr_ps=float(sigma_err * FWHM_PER_SIGMA),
        amplitude=float(amplitude),
        baseline=float(baseline),
    )
    logger.debug("peak fit: center %.1f ps, FWHM %.1f ± %.1f ps", fit.center_ps, fit.fwhm_ps, fit.fwhm_stderr_ps)
    return fit


def deconvolve_photon_width(measured_fwhm_ps: float, jitter_fwhm_ps: float) -> float:
    """
    高斯正交扣除两探测器的合成抖动，再平均分给两个光子的波包：
    sqrt((measured² − jitter²)/2)。
    """
    if not measured_fwhm_ps > jitter_fwhm_ps:
        raise DomainError(
            f"measured width {measured_fwhm_ps} ps does not exceed the jitter {jitter_fwhm_ps} ps"
        )
    return math.sqrt((measured_fwhm_ps ** 2 - jitter_fwhm_ps ** 2) / 2.0)
