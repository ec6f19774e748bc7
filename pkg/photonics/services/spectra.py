"""
谱线形状、滤波器级联传递函数，以及满足能量守恒的光子对联合谱抽样。

波长单位 nm，滤波器带宽单位 pm。反射型 FBG 在光路中按带通处理
（环形器路由视为透明），插入损耗折算进该级。
"""

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import FWHM_PER_SIGMA, LIGHT_SPEED, NM, PS
from .errors import DomainError
from .radiometry import SourceConfig, frequency_bandwidth, idler_wavelength

logger = logging.getLogger(__name__)

GRID_POINTS = 2001
GRID_SPAN_FWHM = 5.0
# 联合谱峰值（归一化）低于此值视为信号/闲频通带无重叠
OVERLAP_FLOOR = 1e-3


class Shape(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LORENTZIAN = "lorentzian"
    RECTANGULAR = "rectangular"


class StageMode(str, enum.Enum):
    TRANSMIT_BAND = "transmit_band"
    REFLECT_BAND = "reflect_band"


def shape_response(shape: Shape, x):
    """峰值为 1 的线形，x 为相对中心的偏移除以 FWHM。"""
    x = np.asarray(x, dtype=float)
    if shape is Shape.GAUSSIAN:
        return np.exp(-4.0 * math.log(2.0) * x * x)
    if shape is Shape.LORENTZIAN:
        return 1.0 / (1.0 + 4.0 * x * x)
    return (np.abs(x) <= 0.5).astype(float)


@dataclass(frozen=True)
class SpectralProfile:
    center_nm: float
    fwhm_pm: float
    shape: Shape = Shape.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        if not self.center_nm > 0:
            raise DomainError(f"profile center must be positive, got {self.center_nm}")
        if not self.fwhm_pm > 0:
            raise DomainError(f"profile FWHM must be positive, got {self.fwhm_pm}")

    @property
    def fwhm_nm(self) -> float:
        return self.fwhm_pm * 1e-3

    @property
    def center_hz(self) -> float:
        return LIGHT_SPEED / (self.center_nm * NM)

    @property
    def bandwidth_hz(self) -> float:
        return frequency_bandwidth(self.center_nm, self.fwhm_nm)

    def response(self, wavelength_nm):
        return shape_response(self.shape, (np.asarray(wavelength_nm, dtype=float) - self.center_nm) / self.fwhm_nm)

    def frequency_response(self, frequency_hz):
        """
        频域线形：中心 c/λ0，FWHM Δν = cΔλ/λ0²，形状族不变。
        对 Δλ ≪ λ 的窄带线形，这一线性化与精确映射的差异可以忽略。
        """
        x = (np.asarray(frequency_hz, dtype=float) - self.center_hz) / self.bandwidth_hz
        return shape_response(self.shape, x)


@dataclass(frozen=True)
class FilterStage:
    profile: SpectralProfile
    mode: StageMode = StageMode.TRANSMIT_BAND
    rejection_db: float = 45.0
    insertion_loss_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", StageMode(self.mode))
        if self.rejection_db < 0:
            raise DomainError(f"rejection_db must be non-negative, got {self.rejection_db}")
        if self.insertion_loss_db < 0:
            raise DomainError(f"insertion_loss_db must be non-negative, got {self.insertion_loss_db}")

    @property
    def peak_transmission(self) -> float:
        return 10.0 ** (-self.insertion_loss_db / 10.0)

    @property
    def floor(self) -> float:
        """带外（相对峰值）透过率 10^(-rejection/10)。"""
        return 10.0 ** (-self.rejection_db / 10.0)

    def transmission(self, wavelength_nm):
        floor = self.floor
        return self.peak_transmission * (floor + (1.0 - floor) * self.profile.response(wavelength_nm))


@dataclass(frozen=True)
class FilterChain:
    stages: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def __len__(self):
        return len(self.stages)

    @property
    def is_identity(self) -> bool:
        return not self.stages

    @property
    def peak_transmission(self) -> float:
        total_db = sum(stage.insertion_loss_db for stage in self.stages)
        return 10.0 ** (-total_db / 10.0)

    @property
    def narrowest(self) -> SpectralProfile | None:
        """决定通带宽度的那一级（FWHM 最小）。"""
        if not self.stages:
            return None
        return min((stage.profile for stage in self.stages), key=lambda p: p.fwhm_pm)

    def transmission(self, wavelength_nm):
        wavelength_nm = np.asarray(wavelength_nm, dtype=float)
        result = np.ones_like(wavelength_nm)
        for stage in self.stages:
            result = result * stage.transmission(wavelength_nm)
        return result

    def normalized(self, wavelength_nm):
        """以链峰值插入损耗归一化的透过率（谱选择部分，不含平坦损耗）。"""
        return self.transmission(wavelength_nm) / self.peak_transmission


def transmission(chain: FilterChain, wavelength_nm):
    """级联透过率 = 各级透过率之积；空链为恒等（透过率 1）。"""
    if np.any(np.asarray(wavelength_nm) <= 0):
        raise DomainError("wavelength must be positive")
    value = chain.transmission(wavelength_nm)
    return float(value) if np.ndim(value) == 0 else value


def wavelength_grid(profile: SpectralProfile, points: int = GRID_POINTS, span_fwhm: float = GRID_SPAN_FWHM):
    half = span_fwhm * profile.fwhm_nm
    return np.linspace(profile.center_nm - half, profile.center_nm + half, points)


@dataclass(frozen=True)
class PairWavelengths:
    signal_nm: np.ndarray
    idler_nm: np.ndarray
    acceptance: np.ndarray


class PairSpectrum:
    """
    一个源 + 信号/闲频滤波链的联合谱，预先算好抽样用的网格与累积分布。

    只在信号滤波通带内生成光子（重要性抽样），速率由 r = Δλ_f/Δλ_0 预先缩放；
    信号链为空时退化为整个 SPDC 带宽内的矩形谱。
    """

    def __init__(
        self,
        source: SourceConfig,
        signal_chain: FilterChain,
        idler_chain: FilterChain,
        points: int = GRID_POINTS,
        span_fwhm: float = GRID_SPAN_FWHM,
    ):
        self.source = source
        self.signal_chain = signal_chain
        self.idler_chain = idler_chain
        self.pump_nm = source.pump.wavelength_nm

        band_lo = source.spdc_center_nm - source.spdc_bandwidth_nm / 2.0
        band_hi = source.spdc_center_nm + source.spdc_bandwidth_nm / 2.0
        profile = signal_chain.narrowest
        if profile is None:
            self.passband_nm = source.spdc_bandwidth_nm
            self.shape = Shape.RECTANGULAR
            grid = np.linspace(band_lo, band_hi, points)
            weights = np.ones_like(grid)
        else:
            if not band_lo <= profile.center_nm <= band_hi:
                raise DomainError(
                    f"signal filter at {profile.center_nm} nm lies outside the SPDC band [{band_lo}, {band_hi}] nm"
                )
            self.passband_nm = min(profile.fwhm_nm, source.spdc_bandwidth_nm)
            self.shape = profile.shape
            grid = wavelength_grid(profile, points, span_fwhm)
            grid = grid[(grid >= band_lo) & (grid <= band_hi)]
            weights = signal_chain.normalized(grid)

        idler_profile = idler_chain.narrowest
        if idler_profile is not None and not band_lo <= idler_profile.center_nm <= band_hi:
            raise DomainError(f"idler filter at {idler_profile.center_nm} nm lies outside the SPDC band")

        self.grid = grid
        self.weights = weights
        cdf = np.concatenate(([0.0], np.cumsum(0.5 * (weights[1:] + weights[:-1]) * np.diff(grid))))
        if not cdf[-1] > 0:
            raise DomainError("signal filter chain has no transmission inside the SPDC band")
        self.cdf = cdf / cdf[-1]

    def acceptance(self, idler_nm):
        if self.idler_chain.is_identity:
            return np.ones_like(np.asarray(idler_nm, dtype=float))
        return self.idler_chain.normalized(idler_nm)

    def sample(self, rng: np.random.Generator, size: int) -> PairWavelengths:
        signal = np.interp(rng.random(size), self.cdf, self.grid)
        idler = 1.0 / (1.0 / self.pump_nm - 1.0 / signal)
        return PairWavelengths(signal_nm=signal, idler_nm=idler, acceptance=self.acceptance(idler))

    def marginal_density(self):
        """信号臂在联合滤波后的谱密度（网格上，峰值归一化）。"""
        idler = 1.0 / (1.0 / self.pump_nm - 1.0 / self.grid)
        density = self.weights * self.acceptance(idler)
        peak = density.max() if density.size else 0.0
        return self.grid, (density / peak if peak > 0 else density), peak


def sample_pair_wavelengths(
    rng: np.random.Generator,
    source: SourceConfig,
    signal_chain: FilterChain,
    idler_chain: FilterChain,
    size: int = 1,
) -> PairWavelengths:
    """抽取信号波长；闲频波长由能量守恒精确给出；接受概率为闲频链的归一化透过率。"""
    return PairSpectrum(source, signal_chain, idler_chain).sample(rng, size)


def _half_max_width(grid, density) -> float:
    above = np.flatnonzero(density >= 0.5)
    lo, hi = above[0], above[-1]

    def crossing(i_out, i_in):
        y0, y1 = density[i_out], density[i_in]
        if y1 == y0:
            return grid[i_in]
        return grid[i_out] + (0.5 - y0) / (y1 - y0) * (grid[i_in] - grid[i_out])

    left = crossing(lo - 1, lo) if lo > 0 else grid[lo]
    right = crossing(hi + 1, hi) if hi < len(grid) - 1 else grid[hi]
    return right - left


def effective_pair_bandwidth(
    signal_chain: FilterChain,
    idler_chain: FilterChain,
    pump_nm: float,
    points: int = GRID_POINTS,
    span_fwhm: float = GRID_SPAN_FWHM,
) -> float:
    """联合滤波后信号臂边缘谱的 FWHM（pm），在波长网格上数值求得。"""
    profile = signal_chain.narrowest
    if profile is None:
        raise DomainError("signal chain has no stages; the pair bandwidth is the SPDC band")
    grid = wavelength_grid(profile, points, span_fwhm)
    density = signal_chain.normalized(grid)
    if not idler_chain.is_identity:
        # 网格两端都必须有物理的闲频光
        idler_wavelength(pump_nm, grid[0])
        density = density * idler_chain.normalized(1.0 / (1.0 / pump_nm - 1.0 / grid))
    peak = density.max()
    if peak < OVERLAP_FLOOR:
        raise DomainError("signal and idler passbands do not overlap under energy conservation")
    return _half_max_width(grid, density / peak) * 1e3


class WavePacket:
    """
    单光子时间波包：点击时间上叠加的随机偏移。

    高斯线形直接用 FWHM = 相干时间的正态分布；其他线形对 |FT √S(ν)|²
    建表，按逆累积分布抽样。
    """

    TABLE_POINTS = 2 ** 14
    TABLE_SPAN_FWHM = 40.0

    def __init__(self, shape: Shape, bandwidth_hz: float, coherence_fwhm_ps: float):
        self.shape = Shape(shape)
        self.bandwidth_hz = bandwidth_hz
        self.coherence_fwhm_ps = coherence_fwhm_ps
        self._times_ps = None
        self._cdf = None
        if self.shape is not Shape.GAUSSIAN:
            self._build_table()

    def _build_table(self):
        n = self.TABLE_POINTS
        dnu = 2.0 * self.TABLE_SPAN_FWHM * self.bandwidth_hz / n
        nu = (np.arange(n) - n // 2) * dnu
        amplitude = np.sqrt(shape_response(self.shape, nu / self.bandwidth_hz))
        envelope = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(amplitude)))
        intensity = np.abs(envelope) ** 2
        dt = 1.0 / (n * dnu)
        self._times_ps = (np.arange(n) - n // 2) * dt / PS
        cdf = np.cumsum(intensity)
        self._cdf = cdf / cdf[-1]

    def intensity_fwhm_ps(self) -> float:
        if self.shape is Shape.GAUSSIAN:
            return self.coherence_fwhm_ps
        density = np.gradient(self._cdf)
        return _half_max_width(self._times_ps, density / density.max())

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.coherence_fwhm_ps <= 0:
            return np.zeros(size)
        if self.shape is Shape.GAUSSIAN:
            return rng.normal(0.0, self.coherence_fwhm_ps / FWHM_PER_SIGMA, size)
        return np.interp(rng.random(size), self._cdf, self._times_ps)
