"""
各命令的实验流水线：

radiometry ：源的辐射度预算报告
coincidence：生成 → 损耗 → 探测 → 直方图 → 拟合，每个 run 一组文件
hom        ：双源 HOM 运行与凹陷可见度
table      ：对比表

数值服务只接收显式参数；分块窗口等框架设置在这一层从 django.conf.settings 读取。
"""

import logging
import math
import os
from dataclasses import dataclass, field

from django.conf import settings

from .coincidence import (
    DEFAULT_BIN_WIDTH_PS,
    DEFAULT_RANGE_PS,
    CoincidenceHistogram,
    PeakFit,
    deconvolve_photon_width,
    fit_peak,
    histogram,
)
from .engine import (
    SECOND_PS,
    DetectionStream,
    DetectorConfig,
    RandomStream,
    Role,
    SourceSetup,
    chunks,
    dark_counts,
    enforce_dead_time,
    generate_pairs,
    map_chunks,
    photon_clicks,
    write_event_dump,
)
from .errors import DomainError, FitError, StatisticsError
from .hom import DipResult, HomConfig, run_hom, survival_probabilities
from .radiometry import RadiometryReport, SourceConfig, comparison_table, radiometry_report

logger = logging.getLogger(__name__)

# 每块的 pair_id 起点间隔，保证跨块唯一
PAIR_ID_STRIDE = 2 ** 40


def chunk_window_ps() -> float:
    return float(getattr(settings, "PAIRSIM_CHUNK_MS", 100.0)) * 1e9


def default_threads() -> int:
    return os.cpu_count() or 1


# ========== radiometry ==========
@dataclass(frozen=True)
class RadiometryJob:
    source: SourceConfig
    filter_fwhm_nm: float
    per_photon_transmission: float
    pair_transmission_mode: str = "heralded"
    component_transmission: float | None = None
    reference_mean_photons_per_mode: float | None = None
    reference_brightness: float | None = None

    def run(self) -> RadiometryReport:
        return radiometry_report(
            self.source,
            self.filter_fwhm_nm,
            self.per_photon_transmission,
            pair_transmission_mode=self.pair_transmission_mode,
            component_transmission=self.component_transmission,
            reference_mean_photons_per_mode=self.reference_mean_photons_per_mode,
            reference_brightness=self.reference_brightness,
        )


def _g(value) -> str:
    return "n/a" if value is None else f"{value:.4g}"


def format_radiometry(report: RadiometryReport) -> str:
    """人读的预算表；两种模式时间约定与参考值并排列出。"""
    rows = [
        ("pump photon flux [1/s]", _g(report.pump_photon_flux)),
        ("created pair rate, full band [1/s]", _g(report.created_pair_rate)),
        ("bandwidth reduction r", _g(report.bandwidth_reduction)),
        ("created pair rate, in band [1/s]", _g(report.created_pair_rate_in_band)),
        ("filter FWHM [pm] / [GHz]", f"{_g(report.filter_fwhm_nm * 1e3)} / {_g(report.filter_bandwidth_ghz)}"),
        ("coherence time tau_c = 0.44*lambda^2/(c*dlambda) [ps]", _g(report.coherence_time_ps)),
        ("mode time 1/dnu [ps]", _g(report.inverse_bandwidth_time_ps)),
        ("modes per second [1/s]", _g(report.modes_per_second)),
        ("<n> per tau_c (computed | quoted)",
         f"{_g(report.mean_photons_per_mode)} | {_g(report.reference_mean_photons_per_mode)}"),
        ("<n> per 1/dnu (computed)", _g(report.mean_photons_per_mode_inverse_bandwidth)),
        ("spectral radiance L_lambda [W/(m^2 sr m)]", _g(report.spectral_radiance)),
        ("transmission T (quoted | component budget)",
         f"{_g(report.overall_transmission)} | {_g(report.component_transmission)}"),
        (f"E_lambda, {report.pair_transmission_mode} [1/(s pm)] (computed | quoted)",
         f"{_g(report.emitted_spectral_brightness)} | {_g(report.reference_brightness)}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "".join(f"{label.ljust(width)}  {value}\n" for label, value in rows)


def run_radiometry(config, writer) -> RadiometryReport:
    report = config.radiometry_job().run()
    writer.write_json("radiometry.json", {"config_hash": writer.config_hash, "report": report})
    writer.write_text("radiometry.txt", format_radiometry(report))
    return report


# ========== coincidence ==========
@dataclass(frozen=True)
class CoincidenceRun:
    """一次双探测器符合测量：一个源、两臂滤波、start/stop 探测器。"""
    name: str
    setup: SourceSetup
    start_detector: DetectorConfig
    stop_detector: DetectorConfig
    duration_ps: float
    bin_width_ps: float = DEFAULT_BIN_WIDTH_PS
    range_ps: tuple = DEFAULT_RANGE_PS
    efficiency_boost: float = 1.0
    detector_ids: tuple = ("start", "stop")

    @property
    def filtered(self) -> bool:
        return not self.setup.signal_chain.is_identity

    def detectors(self) -> tuple:
        return self.start_detector.scaled(self.efficiency_boost), self.stop_detector.scaled(self.efficiency_boost)

    def survival(self) -> tuple:
        """(信号, 闲频) 存活概率 = 传输率 × 探测效率，折算进生成过程。"""
        t = self.setup.boosted_transmission(self.efficiency_boost)
        start, stop = self.detectors()
        return t * start.efficiency, t * stop.efficiency

    def expected_events(self) -> float:
        p_signal, p_idler = self.survival()
        keep = 1.0 - (1.0 - p_signal) * (1.0 - p_idler)
        return self.setup.build(0).expected_pairs(self.duration_ps) * keep


@dataclass
class CoincidenceOutcome:
    run: CoincidenceRun
    histogram: CoincidenceHistogram
    fit: PeakFit | None
    error: FitError | None
    singles_hz: tuple
    pairs_generated: int
    coherence_fwhm_ps: float
    streams: list = field(default_factory=list)

    @property
    def expected_fwhm_ps(self) -> float:
        """抖动与两个波包的正交和。"""
        jitter_sq = self.run.start_detector.jitter_fwhm_ps ** 2 + self.run.stop_detector.jitter_fwhm_ps ** 2
        return math.sqrt(jitter_sq + 2.0 * self.coherence_fwhm_ps ** 2)

    def summary(self) -> dict:
        return {
            "name": self.run.name,
            "filtered": self.run.filtered,
            "duration_s": self.run.duration_ps / SECOND_PS,
            "efficiency_boost": self.run.efficiency_boost,
            "pairs_generated": self.pairs_generated,
            "singles_hz": list(self.singles_hz),
            "coincidences": self.histogram.stats(),
            "coherence_fwhm_ps": self.coherence_fwhm_ps,
            "expected_fwhm_ps": self.expected_fwhm_ps,
            "fit": self.fit.to_dict() if self.fit is not None else None,
            "fit_error": str(self.error) if self.error is not None else None,
        }


def simulate_coincidence(
    stream: RandomStream,
    run: CoincidenceRun,
    chunk_ps: float,
    threads: int | None = None,
    keep_streams: bool = False,
) -> CoincidenceOutcome:
    """
    分块生成光子对（逐块派生随机流、pair_id 偏移保证唯一），两臂分别探测；
    合并后按探测器整体排序并施加死时间，再做 start/stop 直方图与峰拟合。
    """
    source = run.setup.build(0)
    start_det, stop_det = run.detectors()
    survival = run.survival()
    # 探测效率已折算进存活概率
    arms = (
        (Role.SIGNAL, start_det.with_efficiency(1.0), start_det),
        (Role.IDLER, stop_det.with_efficiency(1.0), stop_det),
    )
    wavepackets = {source.source_id: source.wavepacket}

    def worker(chunk):
        def rng(*labels):
            return chunk.stream.derive(*labels).generator()

        pairs = generate_pairs(
            rng("pairs"), source, chunk.duration_ps, chunk.start_ps,
            pair_id_offset=chunk.index * PAIR_ID_STRIDE, survival=survival,
        )
        parts = []
        for k, (role, clicking, detector) in enumerate(arms):
            detector_id = run.detector_ids[k]
            clicks = photon_clicks(rng("detect", k), pairs.photons(role), clicking, detector_id, wavepackets)
            darks = dark_counts(rng("dark", k), detector, chunk.duration_ps, chunk.start_ps, detector_id)
            parts.append((clicks, darks))
        return parts, len(pairs)

    results = map_chunks(worker, chunks(stream, run.duration_ps, chunk_ps), threads)

    streams = []
    for k, (_, _, detector) in enumerate(arms):
        pieces = [piece for parts, _ in results for piece in parts[k]]
        merged = DetectionStream.merge(run.detector_ids[k], pieces)
        streams.append(enforce_dead_time(merged, detector.dead_time_ps))
    pairs_generated = sum(n for _, n in results)
    del results

    hist = histogram(streams[0], streams[1], run.bin_width_ps, run.range_ps)
    fit, error = None, None
    try:
        fit = fit_peak(hist)
    except FitError as e:
        error = e
        logger.warning("run %s: %s", run.name, e)

    duration_s = run.duration_ps / SECOND_PS
    outcome = CoincidenceOutcome(
        run=run,
        histogram=hist,
        fit=fit,
        error=error,
        singles_hz=tuple(len(s) / duration_s for s in streams),
        pairs_generated=pairs_generated,
        coherence_fwhm_ps=source.coherence_fwhm_ps,
        streams=streams if keep_streams else [],
    )
    logger.info(
        "run %s: %d coincidences in range, FWHM %s ps (expected %.1f ps)",
        run.name, hist.total_events, f"{fit.fwhm_ps:.1f}" if fit else "n/a", outcome.expected_fwhm_ps,
    )
    return outcome


def deconvolution_summary(outcomes) -> dict | None:
    """
    滤波/未滤波两次测量的组合：未滤波峰宽即系统抖动，
    从滤波峰宽中正交扣除后得到单光子相干时间。
    """
    filtered = [o for o in outcomes if o.run.filtered and o.fit is not None]
    unfiltered = [o for o in outcomes if not o.run.filtered and o.fit is not None]
    if len(filtered) != 1 or len(unfiltered) != 1:
        return None
    measured = filtered[0].fit.fwhm_ps
    jitter = unfiltered[0].fit.fwhm_ps
    try:
        photon = deconvolve_photon_width(measured, jitter)
    except DomainError as e:
        logger.warning("deconvolution skipped: %s", e)
        return None
    return {
        "filtered_run": filtered[0].run.name,
        "unfiltered_run": unfiltered[0].run.name,
        "measured_fwhm_ps": measured,
        "jitter_fwhm_ps": jitter,
        "photon_coherence_fwhm_ps": photon,
        "configured_coherence_fwhm_ps": filtered[0].coherence_fwhm_ps,
    }


def run_coincidence(config, writer, threads: int | None = None) -> list:
    root = RandomStream(config.seed)
    dump = bool(config.coincidence and config.coincidence.dump_events)
    outcomes = []
    for run in config.coincidence_runs():
        outcome = simulate_coincidence(
            root.derive("coincidence", run.name), run, chunk_window_ps(), threads, keep_streams=dump,
        )
        writer.write_text(f"coincidence_{run.name}.csv", outcome.histogram.to_csv())
        if outcome.fit is not None:
            writer.write_json(f"coincidence_{run.name}_fit.json", outcome.fit.to_dict())
        if dump:
            name = f"coincidence_{run.name}_events.csv"
            write_event_dump(writer.path(name), outcome.streams)
            writer.register(name)
            outcome.streams = []
        outcomes.append(outcome)

    writer.write_json("coincidence_summary.json", {
        "config_hash": writer.config_hash,
        "runs": [o.summary() for o in outcomes],
        "deconvolution": deconvolution_summary(outcomes),
    })

    failed = [o for o in outcomes if o.error is not None]
    if failed:
        first = failed[0]
        raise StatisticsError(
            f"peak fit failed for run {first.run.name}: {first.error}",
            counts=first.error.counts,
            suggestion="increase duration_s or efficiency_boost",
        )
    return outcomes


# ========== hom ==========
@dataclass(frozen=True)
class HomRun:
    name: str
    config: HomConfig
    duration_ps: float

    def expected_events(self) -> float:
        total = 0.0
        for setup, (p_signal, p_idler) in zip(
            (self.config.source_a, self.config.source_b), survival_probabilities(self.config)
        ):
            keep = 1.0 - (1.0 - p_signal) * (1.0 - p_idler)
            total += setup.build(0).expected_pairs(self.duration_ps) * keep
        return total


def simulate_hom(stream: RandomStream, run: HomRun, chunk_ps: float, threads: int | None = None) -> DipResult:
    return run_hom(stream.derive("hom", run.name), run.config, run.duration_ps, chunk_ps, threads)


def run_hom_runs(config, writer, threads: int | None = None) -> list:
    root = RandomStream(config.seed)
    results = []
    for run in config.hom_runs():
        result = simulate_hom(root, run, chunk_window_ps(), threads)
        writer.write_text(f"hom_{run.name}.csv", result.histogram.to_csv())
        writer.write_text(f"hom_{run.name}_twofold.csv", result.twofold.to_csv())
        writer.write_json(f"hom_{run.name}.json", {
            "config_hash": writer.config_hash,
            "name": run.name,
            **result.to_summary(),
        })
        results.append((run, result))
    return results


# ========== table ==========
def run_table(config, writer):
    table = comparison_table(config.table_entries())
    writer.write_text("table.csv", table.to_csv())
    writer.write_text("table.json", table.to_json())
    writer.write_text("table.txt", table.to_text())
    return table


def estimate_events(config, command: str) -> float:
    """命令将要生成的光子对（稀疏化之后）数量估计。"""
    if command == "coincidence":
        return sum(run.expected_events() for run in config.coincidence_runs())
    if command == "hom":
        return sum(run.expected_events() for run in config.hom_runs())
    return 0.0
