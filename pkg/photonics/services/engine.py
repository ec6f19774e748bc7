"""
连续时间蒙特卡洛：光子对发射、逐光子损耗与探测器响应
（点击时间、波包展宽、抖动、暗计数、死时间）。

时间用 float64 皮秒表示（从模拟原点算起）；事件以列式 numpy 数组存放，
需要逐条处理时再展开成 PhotonEvent / DetectionRecord。
"""

import csv
import enum
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import FWHM_PER_SIGMA
from .errors import DomainError
from .radiometry import SourceConfig, coherence_time, frequency_bandwidth, in_band_pair_rate
from .spectra import GRID_POINTS, GRID_SPAN_FWHM, FilterChain, PairSpectrum, WavePacket, effective_pair_bandwidth

logger = logging.getLogger(__name__)

SECOND_PS = 1e12
MAX_SEED = 2 ** 64


class Role(enum.IntEnum):
    SIGNAL = 0
    IDLER = 1


class DetectorKind(str, enum.Enum):
    UPCONVERSION = "upconversion"
    SSPD = "sspd"
    INGAAS_GATED = "ingaas_gated"
    TES = "tes"


# ---------- 随机流 ----------
def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RandomStream:
    """
    (seed, stream_id) 唯一决定一条随机序列；derive() 派生出统计独立的子流。
    """
    seed: int
    stream_id: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < MAX_SEED:
            raise DomainError(f"seed must be a 64-bit unsigned value, got {self.seed}")
        object.__setattr__(self, "stream_id", tuple(_label_key(k) for k in self.stream_id))

    def derive(self, *labels) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id + tuple(_label_key(k) for k in labels))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(sequence))


# ---------- 探测器 ----------
@dataclass(frozen=True)
class DetectorConfig:
    kind: DetectorKind
    efficiency: float
    dark_rate_hz: float = 0.0
    jitter_fwhm_ps: float = 0.0
    dead_time_ns: float = 0.0
    gated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", DetectorKind(self.kind))
        if not 0.0 <= self.efficiency <= 1.0:
            raise DomainError(f"detector efficiency must lie in [0, 1], got {self.efficiency}")
        if self.dark_rate_hz < 0 or self.jitter_fwhm_ps < 0 or self.dead_time_ns < 0:
            raise DomainError("dark rate, jitter and dead time must be non-negative")

    @property
    def dead_time_ps(self) -> float:
        return self.dead_time_ns * 1e3

    def with_efficiency(self, efficiency: float) -> "DetectorConfig":
        return replace(self, efficiency=min(1.0, efficiency))

    def scaled(self, boost: float) -> "DetectorConfig":
        """统计加速：效率乘以 boost（上限 1），其余参数不变。"""
        return self.with_efficiency(self.efficiency * boost)


# 门控 InGaAs 按自由运行处理；其效率、抖动、死时间均为假设值
DETECTOR_PRESETS = {
    "upconversion": DetectorConfig(DetectorKind.UPCONVERSION, 0.03, 30e3, 80.0 / math.sqrt(2.0), 50.0),
    "sspd_a": DetectorConfig(DetectorKind.SSPD, 0.05, 100.0, 70.0, 10.0),
    "sspd_b": DetectorConfig(DetectorKind.SSPD, 0.055, 1e3, 70.0, 10.0),
    "sspd_matched": DetectorConfig(DetectorKind.SSPD, 0.05, 100.0, 80.0 / math.sqrt(2.0), 10.0),
    "tes": DetectorConfig(DetectorKind.TES, 0.8, 1.0, 100e3, 100e3),
    "ingaas_herald": DetectorConfig(DetectorKind.INGAAS_GATED, 0.15, 1e3, 300.0, 10.0, gated=True),
}


# ---------- 事件 ----------
@dataclass(frozen=True)
class PhotonEvent:
    source_id: int
    pair_id: int
    role: Role
    emission_time_ps: float
    wavelength_nm: float
    coherence_fwhm_ps: float


@dataclass(frozen=True)
class PhotonBatch:
    """同一批光子的列式表示。"""
    source_id: np.ndarray
    pair_id: np.ndarray
    role: np.ndarray
    emission_time_ps: np.ndarray
    wavelength_nm: np.ndarray
    coherence_fwhm_ps: np.ndarray

    def __len__(self):
        return len(self.emission_time_ps)

    def __iter__(self):
        for i in range(len(self)):
            yield PhotonEvent(
                int(self.source_id[i]), int(self.pair_id[i]), Role(int(self.role[i])),
                float(self.emission_time_ps[i]), float(self.wavelength_nm[i]), float(self.coherence_fwhm_ps[i]),
            )

    def select(self, mask) -> "PhotonBatch":
        return PhotonBatch(*(getattr(self, f)[mask] for f in PHOTON_FIELDS))

    @classmethod
    def empty(cls) -> "PhotonBatch":
        return cls(
            np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int8),
            np.empty(0), np.empty(0), np.empty(0),
        )

    @classmethod
    def concatenate(cls, batches) -> "PhotonBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        merged = cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in PHOTON_FIELDS))
        order = np.argsort(merged.emission_time_ps, kind="stable")
        return merged.select(order)


PHOTON_FIELDS = ("source_id", "pair_id", "role", "emission_time_ps", "wavelength_nm", "coherence_fwhm_ps")


@dataclass(frozen=True)
class PairBatch:
    """
    一批光子对。信号与闲频同一时刻产生；两者的存活情况分别记录，
    只有两者都存活时对关联才保留（预报统计因此正确）。
    """
    source_id: int
    pair_id: np.ndarray
    emission_time_ps: np.ndarray
    signal_nm: np.ndarray
    idler_nm: np.ndarray
    coherence_fwhm_ps: float
    signal_alive: np.ndarray
    idler_alive: np.ndarray

    def __len__(self):
        return len(self.emission_time_ps)

    def photons(self, role: Role) -> PhotonBatch:
        alive = self.signal_alive if role is Role.SIGNAL else self.idler_alive
        wavelength = self.signal_nm if role is Role.SIGNAL else self.idler_nm
        n = int(alive.sum())
        return PhotonBatch(
            source_id=np.full(n, self.source_id, dtype=np.int64),
            pair_id=self.pair_id[alive],
            role=np.full(n, int(role), dtype=np.int8),
            emission_time_ps=self.emission_time_ps[alive],
            wavelength_nm=wavelength[alive],
            coherence_fwhm_ps=np.full(n, self.coherence_fwhm_ps),
        )

    def iter_events(self):
        """按时间顺序逐对展开为 (signal, idler) PhotonEvent。"""
        for i in range(len(self)):
            common = (self.source_id, int(self.pair_id[i]))
            t = float(self.emission_time_ps[i])
            yield (
                PhotonEvent(*common, Role.SIGNAL, t, float(self.signal_nm[i]), self.coherence_fwhm_ps),
                PhotonEvent(*common, Role.IDLER, t, float(self.idler_nm[i]), self.coherence_fwhm_ps),
            )

    @property
    def both_alive(self) -> np.ndarray:
        return self.signal_alive & self.idler_alive


class PairSource:
    """
    一个光子对源的全部预计算量：联合谱抽样表、带内产生速率、
    对的相干时间与时间波包。
    """

    def __init__(
        self,
        source_id: int,
        source: SourceConfig,
        signal_chain: FilterChain,
        idler_chain: FilterChain,
        grid_points: int = GRID_POINTS,
        grid_span_fwhm: float = GRID_SPAN_FWHM,
    ):
        self.source_id = int(source_id)
        self.source = source
        self.signal_chain = signal_chain
        self.idler_chain = idler_chain
        self.spectrum = PairSpectrum(source, signal_chain, idler_chain, grid_points, grid_span_fwhm)
        self.rate_hz = in_band_pair_rate(source, self.spectrum.passband_nm)

        profile = signal_chain.narrowest
        if profile is None:
            center = source.spdc_center_nm
            bandwidth_nm = source.spdc_bandwidth_nm
        else:
            center = profile.center_nm
            bandwidth_nm = effective_pair_bandwidth(
                signal_chain, idler_chain, source.pump.wavelength_nm, grid_points, grid_span_fwhm,
            ) * 1e-3
        self.center_nm = center
        self.bandwidth_nm = bandwidth_nm
        self.coherence_fwhm_ps = coherence_time(center, bandwidth_nm)
        self.wavepacket = WavePacket(
            self.spectrum.shape, frequency_bandwidth(center, bandwidth_nm), self.coherence_fwhm_ps,
        )
        logger.debug(
            "source %d: in-band rate %.4g /s, pair bandwidth %.4g pm, coherence %.4g ps",
            self.source_id, self.rate_hz, bandwidth_nm * 1e3, self.coherence_fwhm_ps,
        )

    def expected_pairs(self, duration_ps: float) -> float:
        return self.rate_hz * duration_ps / SECOND_PS


@dataclass(frozen=True)
class SourceSetup:
    """配置层给出的一个源：晶体参数、两臂滤波链与逐光子传输率。"""
    source: SourceConfig
    signal_chain: FilterChain
    idler_chain: FilterChain
    per_photon_transmission: float = 1.0
    grid_points: int = GRID_POINTS
    grid_span_fwhm: float = GRID_SPAN_FWHM

    def __post_init__(self):
        if not 0.0 <= self.per_photon_transmission <= 1.0:
            raise DomainError(f"transmission must lie in [0, 1], got {self.per_photon_transmission}")
        if self.grid_points < 3 or not self.grid_span_fwhm > 0:
            raise DomainError("spectral grid needs at least 3 points and a positive span")

    def build(self, source_id: int) -> PairSource:
        return PairSource(
            source_id, self.source, self.signal_chain, self.idler_chain, self.grid_points, self.grid_span_fwhm,
        )

    def boosted_transmission(self, boost: float) -> float:
        return min(1.0, self.per_photon_transmission * boost)


def _survival_marks(rng: np.random.Generator, n: int, p_signal: float, p_idler: float):
    """
    在“至少一个光子存活”的条件下抽取 (信号, 闲频) 存活标记。
    两者都不存活的对对任何观测量都不可见，因此不生成。
    """
    q = 1.0 - (1.0 - p_signal) * (1.0 - p_idler)
    u = rng.random(n) * q
    only_signal = p_signal * (1.0 - p_idler)
    only_idler = (1.0 - p_signal) * p_idler
    signal = (u < only_signal) | (u >= only_signal + only_idler)
    idler = u >= only_signal
    return signal, idler


def generate_pairs(
    rng: np.random.Generator,
    source: PairSource,
    duration_ps: float,
    start_ps: float = 0.0,
    pair_id_offset: int = 0,
    survival: tuple | None = None,
) -> PairBatch:
    """
    齐次泊松过程生成光子对：速率为带内产生速率，波长由联合谱抽样，
    闲频光按闲频滤波链的接受概率存活。

    survival=(p_s, p_i) 时把逐光子存活概率折算进生成过程（泊松稀疏化），
    只生成至少一个光子存活的对。
    """
    if duration_ps < 0:
        raise DomainError(f"duration must be non-negative, got {duration_ps}")
    keep = 1.0
    if survival is not None:
        p_signal, p_idler = survival
        keep = 1.0 - (1.0 - p_signal) * (1.0 - p_idler)
    mean = source.expected_pairs(duration_ps) * keep
    n = int(rng.poisson(mean)) if mean > 0 else 0

    times = start_ps + np.sort(rng.uniform(0.0, duration_ps, n))
    wavelengths = source.spectrum.sample(rng, n)
    idler_alive = rng.random(n) < wavelengths.acceptance
    signal_alive = np.ones(n, dtype=bool)
    if survival is not None:
        signal_mark, idler_mark = _survival_marks(rng, n, *survival)
        signal_alive &= signal_mark
        idler_alive &= idler_mark

    return PairBatch(
        source_id=source.source_id,
        pair_id=pair_id_offset + np.arange(n, dtype=np.int64),
        emission_time_ps=times,
        signal_nm=wavelengths.signal_nm,
        idler_nm=wavelengths.idler_nm,
        coherence_fwhm_ps=source.coherence_fwhm_ps,
        signal_alive=signal_alive,
        idler_alive=idler_alive,
    )


def apply_loss(
    rng: np.random.Generator,
    pairs: PairBatch,
    transmission: float,
    idler_transmission: float | None = None,
) -> PairBatch:
    """每个光子以概率 T 独立存活；两臂的结果都保留在批次里。"""
    if idler_transmission is None:
        idler_transmission = transmission
    for value in (transmission, idler_transmission):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"transmission must lie in [0, 1], got {value}")
    n = len(pairs)
    signal = pairs.signal_alive & (rng.random(n) < transmission)
    idler = pairs.idler_alive & (rng.random(n) < idler_transmission)
    return replace(pairs, signal_alive=signal, idler_alive=idler)


# ---------- 探测记录 ----------
@dataclass(frozen=True)
class PhotonOrigin:
    pair_id: int
    source_id: int
    role: Role


@dataclass(frozen=True)
class DetectionRecord:
    detector_id: str
    timestamp_ps: float
    origin: PhotonOrigin | None = None

    @property
    def is_dark(self) -> bool:
        return self.origin is None

    @property
    def origin_tag(self) -> str:
        if self.origin is None:
            return "dark"
        return f"{self.origin.source_id}:{self.origin.pair_id}:{self.origin.role.name.lower()}"


@dataclass(frozen=True)
class DetectionStream:
    """单个探测器的点击流（列式）；暗计数的 pair/source/role 均为 -1。"""
    detector_id: str
    timestamps_ps: np.ndarray
    pair_id: np.ndarray = field(default=None)
    source_id: np.ndarray = field(default=None)
    role: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.timestamps_ps)
        for name, dtype in (("pair_id", np.int64), ("source_id", np.int64), ("role", np.int8)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.full(n, -1, dtype=dtype))

    def __len__(self):
        return len(self.timestamps_ps)

    @property
    def is_dark(self) -> np.ndarray:
        return self.pair_id < 0

    def select(self, mask) -> "DetectionStream":
        return DetectionStream(
            self.detector_id, self.timestamps_ps[mask], self.pair_id[mask], self.source_id[mask], self.role[mask],
        )

    def records(self):
        for i in range(len(self)):
            origin = None
            if self.pair_id[i] >= 0:
                origin = PhotonOrigin(int(self.pair_id[i]), int(self.source_id[i]), Role(int(self.role[i])))
            yield DetectionRecord(self.detector_id, float(self.timestamps_ps[i]), origin)

    @classmethod
    def merge(cls, detector_id: str, parts) -> "DetectionStream":
        """合并若干片段并按时间排序（稳定排序，保证确定性）。"""
        parts = list(parts)
        if not parts:
            return cls(detector_id, np.empty(0))
        times = np.concatenate([p.timestamps_ps for p in parts])
        order = np.argsort(times, kind="stable")
        return cls(
            detector_id,
            times[order],
            np.concatenate([p.pair_id for p in parts])[order],
            np.concatenate([p.source_id for p in parts])[order],
            np.concatenate([p.role for p in parts])[order],
        )


def wavepacket_offsets(rng: np.random.Generator, photons: PhotonBatch, wavepackets: dict | None = None):
    """每个光子点击时间上的波包偏移；未给出波包表时按逐光子相干时间取高斯。"""
    n = len(photons)
    if wavepackets is None:
        sigma = photons.coherence_fwhm_ps / FWHM_PER_SIGMA
        return rng.normal(0.0, 1.0, n) * sigma
    offsets = np.zeros(n)
    for source_id in np.unique(photons.source_id):
        mask = photons.source_id == source_id
        offsets[mask] = wavepackets[int(source_id)].sample(rng, int(mask.sum()))
    return offsets


def photon_clicks(
    rng: np.random.Generator,
    photons: PhotonBatch,
    detector: DetectorConfig,
    detector_id: str = "",
    wavepackets: dict | None = None,
    include_wavepacket: bool = True,
) -> DetectionStream:
    """
    光子以探测效率产生点击；点击时间 = 发射时间 + 波包偏移 + 抖动。未排序、未加死时间。

    include_wavepacket=False 时不抽波包偏移（HOM 中波包宽度已体现在重叠积分里）。
    """
    clicked = photons.select(rng.random(len(photons)) < detector.efficiency)
    n = len(clicked)
    times = clicked.emission_time_ps
    if include_wavepacket:
        times = times + wavepacket_offsets(rng, clicked, wavepackets)
    if detector.jitter_fwhm_ps > 0:
        times = times + rng.normal(0.0, detector.jitter_fwhm_ps / FWHM_PER_SIGMA, n)
    return DetectionStream(detector_id, times, clicked.pair_id, clicked.source_id, clicked.role)


def dark_counts(
    rng: np.random.Generator,
    detector: DetectorConfig,
    duration_ps: float,
    start_ps: float = 0.0,
    detector_id: str = "",
) -> DetectionStream:
    """暗计数：速率 dark_rate 的独立泊松过程。"""
    mean = detector.dark_rate_hz * duration_ps / SECOND_PS
    n = int(rng.poisson(mean)) if mean > 0 else 0
    return DetectionStream(detector_id, start_ps + np.sort(rng.uniform(0.0, duration_ps, n)))


def dead_time_mask(timestamps_ps: np.ndarray, dead_time_ps: float, last_accepted_ps: float = -np.inf) -> np.ndarray:
    """
    非瘫痪型死时间：距上一个被接受点击不足 dead_time 的点击被丢弃。

    last_accepted_ps 是上一段最后一个被接受点击的时间，用于分段顺序处理。
    与前一点击间隔足够的点击一定被接受，只需顺序处理间隔过短的那些。
    """
    times = np.concatenate(([last_accepted_ps], np.asarray(timestamps_ps, dtype=float)))
    keep = np.ones(len(times), dtype=bool)
    if len(times) < 2:
        return keep[1:]
    gaps = np.diff(times)
    short = np.flatnonzero((gaps < dead_time_ps) | (gaps <= 0)) + 1
    last_time = -np.inf
    previous = -2
    for i in short:
        if i - 1 != previous:
            last_time = times[i - 1]
        t = times[i]
        if t - last_time >= dead_time_ps and t > last_time:
            last_time = t
        else:
            keep[i] = False
        previous = i
    return keep[1:]


def enforce_dead_time(stream: DetectionStream, dead_time_ps: float) -> DetectionStream:
    return stream.select(dead_time_mask(stream.timestamps_ps, dead_time_ps))


def detect(
    rng: np.random.Generator,
    photons: PhotonBatch,
    detector: DetectorConfig,
    duration_ps: float,
    detector_id: str = "",
    wavepackets: dict | None = None,
    start_ps: float = 0.0,
) -> DetectionStream:
    """光子点击与暗计数合并后按时间排序，再施加死时间。"""
    clicks = photon_clicks(rng, photons, detector, detector_id, wavepackets)
    darks = dark_counts(rng, detector, duration_ps, start_ps, detector_id)
    merged = DetectionStream.merge(detector_id, [clicks, darks])
    return enforce_dead_time(merged, detector.dead_time_ps)


# ---------- 分块并行 ----------
@dataclass(frozen=True)
class Chunk:
    index: int
    start_ps: float
    duration_ps: float
    stream: RandomStream


def chunks(stream: RandomStream, duration_ps: float, chunk_ps: float):
    """把总时长切成固定窗口，每块带一个派生随机流。"""
    if duration_ps <= 0:
        return []
    if not chunk_ps > 0:
        raise DomainError(f"chunk window must be positive, got {chunk_ps}")
    count = int(math.ceil(duration_ps / chunk_ps))
    result = []
    for k in range(count):
        start = k * chunk_ps
        result.append(Chunk(k, start, min(chunk_ps, duration_ps - start), stream.derive("chunk", k)))
    return result


def map_chunks(worker, chunk_list, threads: int | None = None):
    """按块并行执行 worker，结果保持块顺序；线程数不影响结果。"""
    if (threads is not None and threads <= 1) or len(chunk_list) <= 1:
        return [worker(c) for c in chunk_list]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, chunk_list))


def iter_chunks(worker, chunk_list, threads: int | None = None):
    """
    与 map_chunks 相同，但按批（每批 threads 块）产出结果，
    同一时刻只保留一批块的事件在内存里。
    """
    batch = 1 if threads is None or threads <= 1 else int(threads)
    for begin in range(0, len(chunk_list), batch):
        yield from map_chunks(worker, chunk_list[begin:begin + batch], threads)


def write_event_dump(path, streams) -> None:
    """原始事件转储：每行 detector_id,timestamp_ps,origin_tag，按时间排序。"""
    rows = []
    for stream in streams:
        for record in stream.records():
            rows.append((record.timestamp_ps, record.detector_id, record.origin_tag))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("detector_id", "timestamp_ps", "origin_tag"))
        for timestamp, detector_id, tag in rows:
            writer.writerow((detector_id, repr(timestamp), tag))
