"""
辐射度学闭式关系：能量守恒、相干时间、模式计数、每模式平均光子数、
光谱辐亮度以及出射光谱亮度，外加 Table 1 式的对比表。

全部为纯函数，可在任意线程并发调用。
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .constants import COHERENCE_FACTOR, LIGHT_SPEED, MW, NM, PLANCK, PS
from .errors import DomainError

PAIR_TRANSMISSION_MODES = ("heralded", "pair")


@dataclass(frozen=True)
class PumpConfig:
    wavelength_nm: float
    power_mw: float

    def __post_init__(self):
        if not self.wavelength_nm > 0:
            raise DomainError(f"pump wavelength must be positive, got {self.wavelength_nm}")
        if self.power_mw < 0:
            raise DomainError(f"pump power must be non-negative, got {self.power_mw}")


@dataclass(frozen=True)
class SourceConfig:
    """一个 CW SPDC 光子对源：泵浦 + 转换效率 + 原始谱宽 + 耦合损耗。"""
    pump: PumpConfig
    conversion_efficiency: float
    spdc_center_nm: float
    spdc_bandwidth_nm: float
    coupling_efficiency: float = 1.0
    si_filter_transmission: float = 1.0

    def __post_init__(self):
        for name in ("conversion_efficiency", "coupling_efficiency", "si_filter_transmission"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")
        if not self.spdc_bandwidth_nm > 0:
            raise DomainError(f"spdc_bandwidth_nm must be positive, got {self.spdc_bandwidth_nm}")
        if not self.spdc_center_nm > self.pump.wavelength_nm:
            raise DomainError("spdc_center_nm must be longer than the pump wavelength")

    def scaled_pump(self, factor: float) -> "SourceConfig":
        """泵浦功率乘以 factor 的副本（⟨n⟩ 与泵浦功率成正比）。"""
        pump = PumpConfig(self.pump.wavelength_nm, self.pump.power_mw * factor)
        return SourceConfig(
            pump=pump,
            conversion_efficiency=self.conversion_efficiency,
            spdc_center_nm=self.spdc_center_nm,
            spdc_bandwidth_nm=self.spdc_bandwidth_nm,
            coupling_efficiency=self.coupling_efficiency,
            si_filter_transmission=self.si_filter_transmission,
        )


@dataclass(frozen=True)
class RadiometryReport:
    pump_photon_flux: float                  # photons/s
    created_pair_rate: float                 # pairs/s over the full SPDC band
    bandwidth_reduction: float               # r = Δλ_f / Δλ_0
    created_pair_rate_in_band: float         # pairs/s
    coherence_time_ps: float                 # 0.44 λ²/(cΔλ)
    inverse_bandwidth_time_ps: float         # 1/Δν
    modes_per_second: float                  # 1/τ_c
    mean_photons_per_mode: float             # N·τ_c
    mean_photons_per_mode_inverse_bandwidth: float  # N/Δν
    spectral_radiance: float                 # W m⁻² sr⁻¹ m⁻¹
    emitted_spectral_brightness: float       # pairs s⁻¹ pm⁻¹
    overall_transmission: float
    pair_transmission_mode: str = "heralded"
    filter_fwhm_nm: float = 0.0
    filter_bandwidth_ghz: float = 0.0
    component_transmission: float | None = None
    reference_mean_photons_per_mode: float | None = None
    reference_brightness: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def idler_wavelength(pump_nm: float, signal_nm: float) -> float:
    """由 1/λp = 1/λs + 1/λi 求闲频光波长。"""
    if not pump_nm > 0:
        raise DomainError(f"pump wavelength must be positive, got {pump_nm}")
    if not signal_nm > pump_nm:
        raise DomainError(
            f"signal {signal_nm} nm must be longer than pump {pump_nm} nm (no physical idler)"
        )
    return 1.0 / (1.0 / pump_nm - 1.0 / signal_nm)


def coherence_time(center_nm: float, fwhm_nm: float) -> float:
    """
    τ_c = 0.44·λ²/(c·Δλ)，返回 ps。

    印刷版公式缺少 c，量纲上必须补上，补上后 80 nm -> 44.6 fs、10 pm -> 357 ps。
    """
    if not center_nm > 0 or not fwhm_nm > 0:
        raise DomainError("center and bandwidth must be positive")
    seconds = COHERENCE_FACTOR * (center_nm * NM) ** 2 / (LIGHT_SPEED * fwhm_nm * NM)
    return seconds / PS


def frequency_bandwidth(center_nm: float, fwhm_nm: float) -> float:
    """Δν = c·Δλ/λ²，返回 Hz（10 pm @ 1560 nm ≈ 1.23 GHz）。"""
    if not center_nm > 0 or not fwhm_nm > 0:
        raise DomainError("center and bandwidth must be positive")
    return LIGHT_SPEED * fwhm_nm * NM / (center_nm * NM) ** 2


def inverse_bandwidth_time(center_nm: float, fwhm_nm: float) -> float:
    """另一种模式时间约定 1/Δν，返回 ps。"""
    return 1.0 / frequency_bandwidth(center_nm, fwhm_nm) / PS


def mean_photons_per_mode(created_rate_in_band: float, coherence_time_ps: float) -> float:
    """⟨n⟩ = N/M，M = 1/τ_c，即 N·τ_c。"""
    if created_rate_in_band < 0 or coherence_time_ps < 0:
        raise DomainError("rate and coherence time must be non-negative")
    return created_rate_in_band * (coherence_time_ps * PS)


def spectral_radiance(mean_photons: float, wavelength_nm: float) -> float:
    """L_λ = h·c²·⟨n⟩/λ⁵（SI：W m⁻² sr⁻¹ m⁻¹）。"""
    if not wavelength_nm > 0:
        raise DomainError(f"wavelength must be positive, got {wavelength_nm}")
    if mean_photons < 0:
        raise DomainError(f"mean photon number must be non-negative, got {mean_photons}")
    return PLANCK * LIGHT_SPEED ** 2 * mean_photons / (wavelength_nm * NM) ** 5


def pump_photon_flux(pump: PumpConfig) -> float:
    """泵浦光子通量（photons/s）。"""
    photon_energy = PLANCK * LIGHT_SPEED / (pump.wavelength_nm * NM)
    return pump.power_mw * MW / photon_energy


def in_band_pair_rate(source: SourceConfig, filter_fwhm_nm: float) -> float:
    """滤波后带内产生的光子对速率：全带速率乘以 r = Δλ_f/Δλ_0。"""
    if not filter_fwhm_nm > 0:
        raise DomainError(f"filter bandwidth must be positive, got {filter_fwhm_nm}")
    if filter_fwhm_nm > source.spdc_bandwidth_nm:
        raise DomainError(
            f"filter ({filter_fwhm_nm} nm) is wider than the SPDC band ({source.spdc_bandwidth_nm} nm)"
        )
    full = pump_photon_flux(source.pump) * source.conversion_efficiency
    return full * (filter_fwhm_nm / source.spdc_bandwidth_nm)


def radiometry_report(
    source: SourceConfig,
    filter_fwhm_nm: float,
    per_photon_transmission: float,
    pair_transmission_mode: str = "heralded",
    component_transmission: float | None = None,
    reference_mean_photons_per_mode: float | None = None,
    reference_brightness: float | None = None,
) -> RadiometryReport:
    """
    源的辐射度预算。

    E_λ 默认只乘一次单光子透过率 T（heralded），只有这样才能由原始输入
    得到 3.9e5；pair 模式使用 T² 表示一对光子都存活。
    """
    if not 0.0 <= per_photon_transmission <= 1.0:
        raise DomainError(f"per_photon_transmission must lie in [0, 1], got {per_photon_transmission}")
    if pair_transmission_mode not in PAIR_TRANSMISSION_MODES:
        raise DomainError(f"unknown pair_transmission_mode {pair_transmission_mode!r}")

    flux = pump_photon_flux(source.pump)
    created = flux * source.conversion_efficiency
    in_band = in_band_pair_rate(source, filter_fwhm_nm)
    center = source.spdc_center_nm

    tau_c = coherence_time(center, filter_fwhm_nm)
    tau_nu = inverse_bandwidth_time(center, filter_fwhm_nm)
    n_mode = mean_photons_per_mode(in_band, tau_c)

    survival = per_photon_transmission
    if pair_transmission_mode == "pair":
        survival = per_photon_transmission ** 2
    brightness = in_band * survival / (filter_fwhm_nm * 1e3)

    return RadiometryReport(
        pump_photon_flux=flux,
        created_pair_rate=created,
        bandwidth_reduction=filter_fwhm_nm / source.spdc_bandwidth_nm,
        created_pair_rate_in_band=in_band,
        coherence_time_ps=tau_c,
        inverse_bandwidth_time_ps=tau_nu,
        modes_per_second=1.0 / (tau_c * PS),
        mean_photons_per_mode=n_mode,
        mean_photons_per_mode_inverse_bandwidth=mean_photons_per_mode(in_band, tau_nu),
        spectral_radiance=spectral_radiance(n_mode, center),
        emitted_spectral_brightness=brightness,
        overall_transmission=per_photon_transmission,
        pair_transmission_mode=pair_transmission_mode,
        filter_fwhm_nm=filter_fwhm_nm,
        filter_bandwidth_ghz=frequency_bandwidth(center, filter_fwhm_nm) / 1e9,
        component_transmission=component_transmission,
        reference_mean_photons_per_mode=reference_mean_photons_per_mode,
        reference_brightness=reference_brightness,
    )


# ---------- Table 1 对比表 ----------
TABLE_COLUMNS = ("process", "mean_photons_per_mode", "bandwidth_pm", "transmission_percent", "brightness", "note")
TABLE_HEADERS = ("Process", "<n> [1/tau_c]", "dlambda [pm]", "T [%]", "E_lambda [1/(s pm)]", "Note")


@dataclass(frozen=True)
class TableEntry:
    """对比表中的一行；数值按原样透传，不做任何物理计算。"""
    process: str
    mean_photons_per_mode: str
    bandwidth_pm: str
    transmission_percent: str
    brightness: str
    note: str = ""

    def __post_init__(self):
        if not str(self.process).strip():
            raise DomainError("table entry needs a non-empty process label")

    def cells(self) -> tuple:
        return tuple(str(getattr(self, name)) for name in TABLE_COLUMNS)


@dataclass(frozen=True)
class ComparisonTable:
    entries: tuple = field(default_factory=tuple)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(TABLE_COLUMNS)
        for entry in self.entries:
            writer.writerow(entry.cells())
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [dict(zip(TABLE_COLUMNS, entry.cells())) for entry in self.entries]
        return json.dumps({"rows": rows}, ensure_ascii=False, indent=2) + "\n"

    def to_text(self) -> str:
        rows = [TABLE_HEADERS] + [entry.cells() for entry in self.entries]
        widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_HEADERS))]
        lines = []
        for n, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
            if n == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def format_cell(value) -> str:
    """数值转为最短可往返的十进制字符串，字符串原样保留。"""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)


def comparison_table(entries) -> ComparisonTable:
    """
    由 (label, ⟨n⟩, Δλ, T, E_λ[, note]) 组成的条目生成对比表。
    条目可以是 TableEntry，也可以是元组/列表。
    """
    rows = []
    for item in entries or ():
        if isinstance(item, TableEntry):
            rows.append(item)
            continue
        values = [format_cell(v) for v in item]
        rows.append(TableEntry(*values))
    if not rows:
        raise DomainError("comparison table needs at least one entry")
    return ComparisonTable(entries=tuple(rows))
