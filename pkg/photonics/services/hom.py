"""
双源 Hong-Ou-Mandel 实验：分束器上的双光子干涉、多对背景、
预报四重符合后选择、凹陷直方图与可见度提取。

干涉按半量子方式处理：分束器前相邻的一对 A/B 光子按波包重叠决定出射端口，
同一相干窗口内有多对的试验按可区分光子处理（重叠置 0）。
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import OptimizeWarning, curve_fit

from .coincidence import (
    DEFAULT_BIN_WIDTH_PS,
    START_BLOCK,
    CoincidenceHistogram,
    bin_time_differences,
    coincidence_pairs,
)
from .constants import GAUSSIAN_TIME_BANDWIDTH, PS
from .engine import (
    SECOND_PS,
    PhotonBatch,
    RandomStream,
    Role,
    SourceSetup,
    chunks,
    dark_counts,
    dead_time_mask,
    generate_pairs,
    iter_chunks,
    photon_clicks,
)
from .errors import DomainError, FitError, StatisticsError
from .spectra import GRID_POINTS, SpectralProfile

logger = logging.getLogger(__name__)

HOUR_PS = 3600.0 * SECOND_PS
DEFAULT_RANGE_PS = 10000.0
DEFAULT_HERALD_WINDOW_PS = 2400.0
DEFAULT_CHUNK_PS = 0.1 * SECOND_PS
# 重叠积分的频率网格覆盖两条线形中心各 ±8 FWHM
OVERLAP_SPAN_FWHM = 8.0
# 每个相位振荡周期至少取的采样点数
SAMPLES_PER_PERIOD = 8
OVERLAP_TABLE_POINTS = 2001
OVERLAP_TABLE_SPAN = 40.0
OVERLAP_CUTOFF = 1e-9

PORT_TRANSMITTED = 0
PORT_REFLECTED = 1


@dataclass(frozen=True)
class HomConfig:
    """
    两个独立源的 HOM 装置。signal_detectors[k] 位于分束器第 k 个输出端口，
    herald_detectors[0/1] 分别预报源 A/B 的闲频光子。
    """
    source_a: SourceSetup
    source_b: SourceSetup
    signal_detectors: tuple
    herald_detectors: tuple
    bs_reflectivity: float = 0.5
    coincidence_range_ps: float = DEFAULT_RANGE_PS
    herald_window_ps: float = DEFAULT_HERALD_WINDOW_PS
    efficiency_boost: float = 1.0
    bin_width_ps: float = DEFAULT_BIN_WIDTH_PS
    wing_start_ps: float | None = None
    min_wing_events: int = 50
    fit_dip: bool = True
    multipair: bool = True

    def __post_init__(self):
        object.__setattr__(self, "signal_detectors", tuple(self.signal_detectors))
        object.__setattr__(self, "herald_detectors", tuple(self.herald_detectors))
        if len(self.signal_detectors) != 2 or len(self.herald_detectors) != 2:
            raise DomainError("HOM needs exactly two signal detectors and two herald detectors")
        if not 0.0 <= self.bs_reflectivity <= 1.0:
            raise DomainError(f"beamsplitter reflectivity must lie in [0, 1], got {self.bs_reflectivity}")
        if not self.herald_window_ps > 0:
            raise DomainError(f"herald window must be positive, got {self.herald_window_ps}")
        if not self.coincidence_range_ps > 0:
            raise DomainError(f"coincidence range must be positive, got {self.coincidence_range_ps}")
        if not self.efficiency_boost > 0:
            raise DomainError(f"efficiency boost must be positive, got {self.efficiency_boost}")
        if not self.bin_width_ps > 0:
            raise DomainError(f"bin width must be positive, got {self.bin_width_ps}")
        if self.wing_start_ps is not None and not 0 < self.wing_start_ps < self.coincidence_range_ps:
            raise DomainError("wing start must lie inside the coincidence range")

    def with_boost(self, boost: float) -> "HomConfig":
        return replace(self, efficiency_boost=boost)


@dataclass(frozen=True)
class DipFit:
    center_ps: float
    visibility: float
    width_ps: float
    baseline: float
    visibility_stderr: float
    width_stderr_ps: float
    chi2_per_dof: float

    def model(self, tau_ps):
        return _dip_model(np.asarray(tau_ps, dtype=float), self.baseline, self.visibility, self.width_ps, self.center_ps)

    def to_dict(self) -> dict:
        return {
            "center_ps": self.center_ps,
            "visibility": self.visibility,
            "visibility_stderr": self.visibility_stderr,
            "width_ps": self.width_ps,
            "width_stderr_ps": self.width_stderr_ps,
            "baseline": self.baseline,
            "chi2_per_dof": self.chi2_per_dof,
        }


@dataclass(frozen=True)
class DipResult:
    """
    一次 HOM 运行的结果。v_max/v_min 为每 bin 每小时的四重符合数；
    不拟合凹陷时可见度相关字段为 None。
    """
    histogram: CoincidenceHistogram
    twofold: CoincidenceHistogram
    duration_ps: float
    fourfold_rate: float
    visibility: float | None = None
    v_max: float | None = None
    v_min: float | None = None
    dip_width_fwhm_ps: float | None = None
    intrinsic_visibility: float | None = None
    fit: DipFit | None = None
    efficiency_boost: float = 1.0
    singles_hz: tuple = ()
    multipair_probability: tuple = ()
    trials: dict = field(default_factory=dict)

    def to_summary(self) -> dict:
        return {
            "visibility": self.visibility,
            "intrinsic_visibility": self.intrinsic_visibility,
            "v_max_per_bin_hour": self.v_max,
            "v_min_per_bin_hour": self.v_min,
            "dip_width_fwhm_ps": self.dip_width_fwhm_ps,
            "fourfold_rate_per_hour": self.fourfold_rate,
            "fourfold_events": int(self.histogram.total_events),
            "twofold_events": int(self.twofold.total_events),
            "duration_s": self.duration_ps / SECOND_PS,
            "efficiency_boost": self.efficiency_boost,
            "singles_hz": list(self.singles_hz),
            "multipair_probability": list(self.multipair_probability),
            "trials": dict(self.trials),
            "fit": self.fit.to_dict() if self.fit is not None else None,
        }


# ---------- 波包重叠 ----------
def _shared_frequency_grid(profile_a: SpectralProfile, profile_b: SpectralProfile, max_delay_ps: float, points: int):
    lo = min(p.center_hz - OVERLAP_SPAN_FWHM * p.bandwidth_hz for p in (profile_a, profile_b))
    hi = max(p.center_hz + OVERLAP_SPAN_FWHM * p.bandwidth_hz for p in (profile_a, profile_b))
    n = max(points, int(math.ceil(SAMPLES_PER_PERIOD * (hi - lo) * max_delay_ps * PS)) + 1)
    return np.linspace(lo, hi, n)


def _unit_amplitude(profile: SpectralProfile, nu):
    power = profile.frequency_response(nu)
    norm = trapezoid(power, nu)
    if norm <= 0:
        return None
    return np.sqrt(power / norm)


def wavepacket_overlap(profile_a: SpectralProfile, profile_b: SpectralProfile, delay_ps, points: int = GRID_POINTS):
    """
    |∫ A(ν)·B(ν)·exp(i2πνδt) dν|²，A、B 为单位归一的谱振幅 √S，
    在共享频率网格上做梯形积分。delay_ps 可为数组；结果在 [0, 1]。
    """
    scalar = np.ndim(delay_ps) == 0
    delays = np.abs(np.atleast_1d(np.asarray(delay_ps, dtype=float)))
    if not np.all(np.isfinite(delays)):
        raise DomainError("delay must be finite")
    values = np.zeros(len(delays))
    if len(delays):
        nu = _shared_frequency_grid(profile_a, profile_b, float(delays.max()), points)
        amp_a = _unit_amplitude(profile_a, nu)
        amp_b = _unit_amplitude(profile_b, nu)
        if amp_a is not None and amp_b is not None:
            product = amp_a * amp_b
            if np.any(product > 0):
                # 相位以网格起点为参考，全局相位不影响模方
                phase = 2.0 * math.pi * (nu - nu[0]) * PS
                for i, delay in enumerate(delays):
                    values[i] = abs(trapezoid(product * np.exp(1j * phase * delay), nu)) ** 2
    values = np.clip(values, 0.0, 1.0)
    return float(values[0]) if scalar else values


class OverlapTable:
    """|δt| → 重叠的插值表，超出表范围取 0；cutoff_ps 之外重叠低于 OVERLAP_CUTOFF。"""

    def __init__(self, profile_a: SpectralProfile, profile_b: SpectralProfile):
        tau_ps = GAUSSIAN_TIME_BANDWIDTH / min(profile_a.bandwidth_hz, profile_b.bandwidth_hz) / PS
        self.delays_ps = np.linspace(0.0, OVERLAP_TABLE_SPAN * tau_ps, OVERLAP_TABLE_POINTS)
        self.values = wavepacket_overlap(profile_a, profile_b, self.delays_ps)
        above = np.flatnonzero(self.values > OVERLAP_CUTOFF)
        if not len(above):
            self.cutoff_ps = 0.0
        else:
            self.cutoff_ps = float(self.delays_ps[min(above[-1] + 1, len(self.delays_ps) - 1)])

    def __call__(self, delay_ps):
        return np.interp(np.abs(delay_ps), self.delays_ps, self.values, right=0.0)


# ---------- 分束器 ----------
def coincidence_probability(overlap, reflectivity: float = 0.5):
    """两光子从不同端口出射的概率 R² + T² − 2RT·overlap；平衡分束器为 ½(1 − overlap)。"""
    transmissivity = 1.0 - reflectivity
    return reflectivity ** 2 + transmissivity ** 2 - 2.0 * reflectivity * transmissivity * np.asarray(overlap)


def beamsplit(rng: np.random.Generator, overlap, reflectivity: float = 0.5) -> np.ndarray:
    """每个双光子试验抽取是否分在不同端口（True）。"""
    overlap = np.asarray(overlap, dtype=float)
    if np.any((overlap < 0.0) | (overlap > 1.0)):
        raise DomainError("overlap must lie in [0, 1]")
    if not 0.0 <= reflectivity <= 1.0:
        raise DomainError(f"beamsplitter reflectivity must lie in [0, 1], got {reflectivity}")
    return rng.random(overlap.shape) < coincidence_probability(overlap, reflectivity)


def route_single(rng: np.random.Generator, size: int, reflectivity: float = 0.5) -> np.ndarray:
    """单光子入射：以概率 R 反射。"""
    return np.where(rng.random(size) < reflectivity, PORT_REFLECTED, PORT_TRANSMITTED).astype(np.int8)


def multipair_probability(pair_rate_hz: float, coherence_ps: float) -> float:
    """同一源在光子相干窗口内再产生一对的概率 1 − exp(−2·R·τ_c)。"""
    return 1.0 - math.exp(-2.0 * pair_rate_hz * coherence_ps * PS)


def interfere(
    rng: np.random.Generator,
    photons: PhotonBatch,
    table: OverlapTable,
    contamination=(0.0, 0.0),
    reflectivity: float = 0.5,
):
    """
    为按时间排序的信号光子分配输出端口。

    相邻且来自不同源、时间差在 cutoff 之内的一对光子进行双光子干涉；
    连续成链时只取链首一对。被多对污染的试验重叠置 0。其余光子单独随机出射。
    返回 (端口数组, 统计)。
    """
    n = len(photons)
    ports = route_single(rng, n, reflectivity)
    stats = {"pairs": 0, "contaminated": 0}
    if n < 2:
        return ports, stats

    t = photons.emission_time_ps
    sid = photons.source_id
    candidate = (sid[1:] != sid[:-1]) & (np.diff(t) < table.cutoff_ps)
    previous = np.concatenate(([False], candidate[:-1]))
    first = np.flatnonzero(candidate & ~previous)
    if not len(first):
        return ports, stats

    overlap = table(t[first + 1] - t[first])
    p_a = np.asarray(contamination, dtype=float)[sid[first]]
    p_b = np.asarray(contamination, dtype=float)[sid[first + 1]]
    contaminated = rng.random(len(first)) < 1.0 - (1.0 - p_a) * (1.0 - p_b)
    overlap[contaminated] = 0.0

    different = beamsplit(rng, overlap, reflectivity)
    lead = ports[first]
    ports[first + 1] = np.where(different, 1 - lead, lead)
    stats["pairs"] = int(len(first))
    stats["contaminated"] = int(contaminated.sum())
    return ports, stats


# ---------- 后选择 ----------
def _near(sorted_times, t, half_window):
    return np.searchsorted(sorted_times, t + half_window, side="right") > np.searchsorted(
        sorted_times, t - half_window, side="left"
    )


def _joined(parts):
    parts = [p for p in parts if p is not None and len(p)]
    if not parts:
        return np.empty(0)
    return np.sort(np.concatenate(parts))


class PostSelection:
    """
    按块顺序消费四个探测器的点击：施加死时间（状态跨块延续），
    记录 SSPD 双重符合与带预报的四重符合。

    探测器顺序为 (D0, D1, H_A, H_B)；τ = t(D1) − t(D0)。
    块 k 的 start 点击在块 k+1 到达后才检索，保证窗口跨块时不遗漏。
    """

    def __init__(self, config: HomConfig, dead_times_ps):
        self.range_ps = float(config.coincidence_range_ps)
        self.half_window_ps = config.herald_window_ps / 2.0
        self.bin_width_ps = config.bin_width_ps
        self.dead_times_ps = tuple(dead_times_ps)
        self.last_accepted = [-np.inf] * 4
        self.singles = np.zeros(4, dtype=np.int64)
        span = (-self.range_ps, self.range_ps)
        self.twofold = bin_time_differences(np.empty(0), self.bin_width_ps, span)
        self.fourfold = bin_time_differences(np.empty(0), self.bin_width_ps, span)
        self._before = None
        self._current = None

    def push(self, times) -> None:
        accepted = []
        for d, raw in enumerate(times):
            t = np.sort(np.asarray(raw, dtype=float))
            t = t[dead_time_mask(t, self.dead_times_ps[d], self.last_accepted[d])]
            if len(t):
                self.last_accepted[d] = float(t[-1])
            self.singles[d] += len(t)
            accepted.append(t)
        if self._current is not None:
            self._search(self._current[0], (self._before, self._current, accepted))
        self._before, self._current = self._current, accepted

    def finish(self) -> None:
        if self._current is not None:
            self._search(self._current[0], (self._before, self._current, None))
        self._before = self._current = None

    def _search(self, starts, context) -> None:
        stops = _joined([c[1] if c is not None else None for c in context])
        herald_a = _joined([c[2] if c is not None else None for c in context])
        herald_b = _joined([c[3] if c is not None else None for c in context])
        lo, hi = -self.range_ps, self.range_ps
        for begin in range(0, len(starts), START_BLOCK):
            block = starts[begin:begin + START_BLOCK]
            i, j, dt = coincidence_pairs(block, stops, lo, hi)
            if not len(dt):
                continue
            t1 = block[i]
            t2 = stops[j]
            w = self.half_window_ps
            heralded = (_near(herald_a, t1, w) & _near(herald_b, t2, w)) | (
                _near(herald_a, t2, w) & _near(herald_b, t1, w)
            )
            self.twofold = self.twofold + bin_time_differences(dt, self.bin_width_ps, (lo, hi))
            self.fourfold = self.fourfold + bin_time_differences(dt[heralded], self.bin_width_ps, (lo, hi))


# ---------- 主流程 ----------
def expected_dip_width_ps(config: HomConfig) -> float:
    """预期凹陷 FWHM：重叠函数宽度 √2·τ_c 与两 SSPD 抖动的正交和。"""
    tau = max(config.source_a.build(0).coherence_fwhm_ps, config.source_b.build(1).coherence_fwhm_ps)
    jitter_sq = sum(d.jitter_fwhm_ps ** 2 for d in config.signal_detectors)
    return math.sqrt(2.0 * tau ** 2 + jitter_sq)


def survival_probabilities(config: HomConfig) -> tuple:
    """
    每个源的 (信号, 闲频) 存活概率，折算进光子对生成。
    信号端折算两只 SSPD 中较高的效率，余下部分在端口上再稀疏化。
    """
    boost = config.efficiency_boost
    eta_max = max(d.scaled(boost).efficiency for d in config.signal_detectors)
    result = []
    for setup, herald in zip((config.source_a, config.source_b), config.herald_detectors):
        t = setup.boosted_transmission(boost)
        result.append((t * eta_max, t * herald.scaled(boost).efficiency))
    return tuple(result)


def _pair_profile(source) -> SpectralProfile:
    return SpectralProfile(source.center_nm, source.bandwidth_nm * 1e3, source.spectrum.shape)


def run_hom(
    stream: RandomStream,
    config: HomConfig,
    duration_ps: float,
    chunk_ps: float = DEFAULT_CHUNK_PS,
    threads: int | None = None,
) -> DipResult:
    """
    生成两个源的事件流，信号光子经分束器干涉后到 SSPD，闲频光子到预报探测器；
    统计 SSPD 双重符合中两个预报探测器都在各自信号 herald_window 内响应的四重符合，
    并从凹陷直方图提取可见度。

    efficiency_boost 同时放大逐光子传输率与各探测器效率（上限 1），物理过程不变。
    """
    if not duration_ps > 0:
        raise DomainError(f"duration must be positive, got {duration_ps}")
    if chunk_ps < config.coincidence_range_ps + config.herald_window_ps:
        raise DomainError("chunk window must exceed the coincidence range plus the herald window")

    boost = config.efficiency_boost
    sources = (config.source_a.build(0), config.source_b.build(1))
    signal_dets = tuple(d.scaled(boost) for d in config.signal_detectors)
    herald_dets = tuple(d.scaled(boost) for d in config.herald_detectors)

    survival = survival_probabilities(config)
    eta_max = max(d.efficiency for d in signal_dets)
    port_dets = tuple(
        d.with_efficiency(d.efficiency / eta_max if eta_max > 0 else 0.0) for d in signal_dets
    )
    folded_heralds = tuple(h.with_efficiency(1.0) for h in herald_dets)

    table = OverlapTable(_pair_profile(sources[0]), _pair_profile(sources[1]))
    contamination = (
        tuple(multipair_probability(s.rate_hz, s.coherence_fwhm_ps) for s in sources)
        if config.multipair else (0.0, 0.0)
    )
    logger.info(
        "HOM run: %.4g s, boost %.3g, overlap cutoff %.1f ps, multipair probability %.3g / %.3g",
        duration_ps / SECOND_PS, boost, table.cutoff_ps, *contamination,
    )

    def worker(chunk):
        def rng(*labels):
            return chunk.stream.derive(*labels).generator()

        batches = [
            generate_pairs(rng("pairs", k), src, chunk.duration_ps, chunk.start_ps, survival=survival[k])
            for k, src in enumerate(sources)
        ]
        signals = PhotonBatch.concatenate([b.photons(Role.SIGNAL) for b in batches])
        ports, stats = interfere(rng("beamsplitter"), signals, table, contamination, config.bs_reflectivity)

        times = []
        for port, det in enumerate(port_dets):
            clicks = photon_clicks(rng("signal", port), signals.select(ports == port), det, include_wavepacket=False)
            darks = dark_counts(rng("signal-dark", port), det, chunk.duration_ps, chunk.start_ps)
            times.append(np.concatenate([clicks.timestamps_ps, darks.timestamps_ps]))
        for k, (batch, det) in enumerate(zip(batches, folded_heralds)):
            clicks = photon_clicks(rng("herald", k), batch.photons(Role.IDLER), det, include_wavepacket=False)
            darks = dark_counts(rng("herald-dark", k), herald_dets[k], chunk.duration_ps, chunk.start_ps)
            times.append(np.concatenate([clicks.timestamps_ps, darks.timestamps_ps]))
        return times, stats

    selection = PostSelection(config, [d.dead_time_ps for d in signal_dets + herald_dets])
    trials = {"pairs": 0, "contaminated": 0}
    for times, stats in iter_chunks(worker, chunks(stream, duration_ps, chunk_ps), threads):
        selection.push(times)
        for key in trials:
            trials[key] += stats[key]
    selection.finish()

    duration_h = duration_ps / HOUR_PS
    fourfold = selection.fourfold
    result = DipResult(
        histogram=fourfold,
        twofold=selection.twofold,
        duration_ps=duration_ps,
        fourfold_rate=fourfold.total_events / duration_h,
        efficiency_boost=boost,
        singles_hz=tuple(float(s) * SECOND_PS / duration_ps for s in selection.singles),
        multipair_probability=contamination,
        trials=trials,
    )
    logger.info(
        "HOM run finished: %d four-folds (%.4g /h), %d two-folds",
        fourfold.total_events, result.fourfold_rate, selection.twofold.total_events,
    )
    if not config.fit_dip:
        return result
    return _with_visibility(result, config)


def _with_visibility(result: DipResult, config: HomConfig) -> DipResult:
    hist = result.histogram
    wing_start = config.wing_start_ps
    if wing_start is None:
        wing_start = min(3.0 * expected_dip_width_ps(config), 0.75 * config.coincidence_range_ps)
    wing = np.abs(hist.bin_centers) >= wing_start
    wing_events = int(hist.counts[wing].sum())
    if wing_events < config.min_wing_events:
        raise StatisticsError(
            f"only {wing_events} four-fold events in the wings (minimum {config.min_wing_events})",
            counts={"wing_events": wing_events, **hist.stats()},
            suggestion="increase the duration or efficiency_boost",
        )

    fit = dip_profile(hist, wing_start)
    duration_h = result.duration_ps / HOUR_PS
    v_max = float(hist.counts[wing].mean()) / duration_h
    v_min = float(fit.model(0.0)) / duration_h
    v_min = min(max(v_min, 0.0), v_max)
    visibility = (v_max - v_min) / v_max if v_max > 0 else 0.0
    visibility = float(np.clip(visibility, 0.0, 1.0))

    jitter = math.sqrt(sum(d.jitter_fwhm_ps ** 2 for d in config.signal_detectors))
    intrinsic = visibility
    if fit.width_ps > jitter > 0:
        intrinsic = min(1.0, visibility * fit.width_ps / math.sqrt(fit.width_ps ** 2 - jitter ** 2))

    logger.info("HOM visibility %.3f (intrinsic %.3f), dip FWHM %.1f ps", visibility, intrinsic, fit.width_ps)
    return replace(
        result,
        visibility=visibility,
        v_max=v_max,
        v_min=v_min,
        dip_width_fwhm_ps=fit.width_ps,
        intrinsic_visibility=intrinsic,
        fit=fit,
    )


# ---------- 凹陷拟合 ----------
def _dip_model(t, baseline, visibility, width, center):
    return baseline * (1.0 - visibility * np.exp(-4.0 * math.log(2.0) * (t - center) ** 2 / width ** 2))


def _residual_diagnostics(x, counts, sigma, params) -> dict:
    residual = (counts - _dip_model(x, *params)) / sigma
    dof = max(len(counts) - 4, 1)
    return {
        "residual_rms": float(np.sqrt(np.mean(residual ** 2))),
        "chi2_per_dof": float(np.sum(residual ** 2) / dof),
        "max_abs_residual": float(np.max(np.abs(residual))),
    }


def dip_profile(data, wing_start_ps: float | None = None) -> DipFit:
    """
    拟合 R(τ) = R0·(1 − V·exp(−4ln2·(τ − τ0)²/w²))。

    data 可以是 DipResult 或四重符合直方图；wing_start_ps 以外的 bin 用于基线初值，
    凹陷中心限制在 ±wing_start_ps/2 以内。
    """
    hist = data.histogram if isinstance(data, DipResult) else data
    counts = hist.counts.astype(float)
    x = hist.bin_centers
    stats = hist.stats()
    if not counts.size or counts.sum() <= 0:
        raise FitError("dip histogram is empty", counts=stats)

    half_range = 0.5 * (hist.range_ps[1] - hist.range_ps[0])
    if wing_start_ps is None:
        wing_start_ps = 0.5 * half_range
    wing = np.abs(x) >= wing_start_ps
    baseline0 = float(counts[wing].mean()) if wing.any() else float(np.median(counts))
    if baseline0 <= 0:
        raise FitError("no counts in the dip wings", counts=stats)

    smooth = np.convolve(counts, np.ones(5) / 5.0, mode="same")
    inner = ~wing
    floor = float(smooth[inner].min()) if inner.any() else baseline0
    visibility0 = float(np.clip(1.0 - floor / baseline0, 0.05, 0.95))
    width0 = max(4.0 * hist.bin_width_ps, wing_start_ps / 3.0)
    p0 = (baseline0, visibility0, width0, 0.0)
    lower = (0.0, -1.0, 2.0 * hist.bin_width_ps, -wing_start_ps / 2.0)
    upper = (np.inf, 1.0, 2.0 * half_range, wing_start_ps / 2.0)
    sigma = np.sqrt(np.maximum(counts, 1.0))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        try:
            params, cov = curve_fit(
                _dip_model, x, counts, p0=p0, sigma=sigma, bounds=(lower, upper), maxfev=20000,
            )
        except (RuntimeError, ValueError) as e:
            diagnostics = _residual_diagnostics(x, counts, sigma, p0)
            raise FitError(f"dip fit did not converge: {e}", counts={**stats, **diagnostics}) from e

    diagnostics = _residual_diagnostics(x, counts, sigma, params)
    errors = np.sqrt(np.abs(np.diag(cov)))
    baseline, visibility, width, center = (float(p) for p in params)
    fit = DipFit(
        center_ps=center,
        visibility=visibility,
        width_ps=abs(width),
        baseline=baseline,
        visibility_stderr=float(errors[1]),
        width_stderr_ps=float(errors[2]),
        chi2_per_dof=diagnostics["chi2_per_dof"],
    )
    logger.debug("dip fit: V %.4f ± %.4f, FWHM %.1f ps, chi2/dof %.2f",
                 fit.visibility, fit.visibility_stderr, fit.width_ps, fit.chi2_per_dof)
    return fit
