"""
实验配置文档定义（使用 mongoengine）。

只用 mongoengine 的字段类型做校验，不连接 MongoDB。load_config() 从 JSON
（或 YAML）构建文档树，拒绝未知字段，错误信息带点分字段路径；
各 to_domain 方法把文档转成服务层使用的不可变数据类。
"""

from contextlib import contextmanager
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import mongoengine as me
import yaml
from django.conf import settings

from .services.engine import DETECTOR_PRESETS, DetectorConfig, DetectorKind, SourceSetup
from .services.errors import ConfigError, DomainError
from .services.hom import DEFAULT_HERALD_WINDOW_PS, DEFAULT_RANGE_PS, HomConfig
from .services.pipeline import CoincidenceRun, HomRun, RadiometryJob
from .services.radiometry import PAIR_TRANSMISSION_MODES, PumpConfig, SourceConfig, TableEntry, format_cell
from .services.reporting import config_digest
from .services.spectra import GRID_POINTS, GRID_SPAN_FWHM, FilterChain, FilterStage, Shape, SpectralProfile, StageMode

SECOND_PS = 1e12
MAX_SEED = 2 ** 64 - 1
NAME_REGEX = r"^[A-Za-z0-9_.-]+$"


class PumpDoc(me.EmbeddedDocument):
    wavelength_nm = me.FloatField(required=True, min_value=0)
    power_mw = me.FloatField(required=True, min_value=0)

    def to_domain(self) -> PumpConfig:
        return PumpConfig(self.wavelength_nm, self.power_mw)


class SourceDoc(me.EmbeddedDocument):
    """SPDC 源：泵浦、转换效率、原始谱（中心/宽度）与耦合损耗。"""
    pump = me.EmbeddedDocumentField(PumpDoc, required=True)
    conversion_efficiency = me.FloatField(required=True, min_value=0, max_value=1)
    spdc_center_nm = me.FloatField(required=True, min_value=0)
    spdc_bandwidth_nm = me.FloatField(required=True, min_value=0)
    coupling_efficiency = me.FloatField(default=1.0, min_value=0, max_value=1)
    si_filter_transmission = me.FloatField(default=1.0, min_value=0, max_value=1)

    def to_domain(self) -> SourceConfig:
        return SourceConfig(
            pump=self.pump.to_domain(),
            conversion_efficiency=self.conversion_efficiency,
            spdc_center_nm=self.spdc_center_nm,
            spdc_bandwidth_nm=self.spdc_bandwidth_nm,
            coupling_efficiency=self.coupling_efficiency,
            si_filter_transmission=self.si_filter_transmission,
        )


class FilterDoc(me.EmbeddedDocument):
    """一级滤波器；反射型 FBG 用 reflect_band。"""
    center_nm = me.FloatField(required=True, min_value=0)
    fwhm_pm = me.FloatField(required=True, min_value=0)
    shape = me.StringField(default=Shape.GAUSSIAN.value, choices=tuple(s.value for s in Shape))
    mode = me.StringField(default=StageMode.TRANSMIT_BAND.value, choices=tuple(m.value for m in StageMode))
    rejection_db = me.FloatField(default=45.0, min_value=0)
    insertion_loss_db = me.FloatField(default=0.0, min_value=0)

    def to_domain(self) -> FilterStage:
        return FilterStage(
            SpectralProfile(self.center_nm, self.fwhm_pm, Shape(self.shape)),
            StageMode(self.mode),
            self.rejection_db,
            self.insertion_loss_db,
        )


class DetectorDoc(me.EmbeddedDocument):
    """
    探测器。给出 preset 时以预设为底，其余字段逐项覆盖；
    不给 preset 时 kind 与 efficiency 必填。
    """
    preset = me.StringField(choices=tuple(DETECTOR_PRESETS))
    kind = me.StringField(choices=tuple(k.value for k in DetectorKind))
    efficiency = me.FloatField(min_value=0, max_value=1)
    dark_rate_hz = me.FloatField(min_value=0)
    jitter_fwhm_ps = me.FloatField(min_value=0)
    dead_time_ns = me.FloatField(min_value=0)
    gated = me.BooleanField()

    def to_domain(self, path: str = "") -> DetectorConfig:
        overrides = {
            f.name: getattr(self, f.name)
            for f in dataclass_fields(DetectorConfig)
            if getattr(self, f.name, None) is not None
        }
        if self.preset:
            return replace(DETECTOR_PRESETS[self.preset], **overrides)
        for name in ("kind", "efficiency"):
            if name not in overrides:
                raise ConfigError("required without a preset", f"{path}.{name}" if path else name)
        return DetectorConfig(**overrides)


class HistogramDoc(me.EmbeddedDocument):
    bin_width_ps = me.FloatField(default=45.5, min_value=0)
    range_ps = me.ListField(me.FloatField(), default=lambda: [-10000.0, 10000.0])

    def validate(self, clean=True):
        super().validate(clean)
        if len(self.range_ps) != 2 or not self.range_ps[1] > self.range_ps[0]:
            raise me.ValidationError("expected [min, max] with max > min", field_name="range_ps",
                                     errors={"range_ps": "expected [min, max] with max > min"})
        if not self.bin_width_ps > 0:
            raise me.ValidationError("must be positive", field_name="bin_width_ps",
                                     errors={"bin_width_ps": "must be positive"})


class ArmDoc(me.EmbeddedDocument):
    """一个源连同它的信号/闲频滤波链（按 filters 中的 id 引用）与逐光子传输率。"""
    source = me.StringField(required=True)
    signal_filters = me.ListField(me.StringField(), default=list)
    idler_filters = me.ListField(me.StringField(), default=list)
    per_photon_transmission = me.FloatField(default=1.0, min_value=0, max_value=1)
    pump_scale = me.FloatField(default=1.0, min_value=0)


class RadiometryDoc(me.EmbeddedDocument):
    source = me.StringField(required=True)
    # 滤波带宽：引用一个滤波器，或直接给出 FWHM
    filter = me.StringField()
    filter_fwhm_pm = me.FloatField(min_value=0)
    per_photon_transmission = me.FloatField(required=True, min_value=0, max_value=1)
    pair_transmission_mode = me.StringField(default="heralded", choices=PAIR_TRANSMISSION_MODES)
    # 逐项透过率预算中计入的滤波链（取链峰值透过率）
    component_filters = me.ListField(me.StringField(), default=list)
    reference_mean_photons_per_mode = me.FloatField()
    reference_brightness = me.FloatField()


class CoincidenceRunDoc(me.EmbeddedDocument):
    name = me.StringField(required=True, regex=NAME_REGEX)
    arm = me.EmbeddedDocumentField(ArmDoc, required=True)
    start_detector = me.StringField(required=True)
    stop_detector = me.StringField(required=True)
    duration_s = me.FloatField(required=True, min_value=0)
    efficiency_boost = me.FloatField(default=1.0, min_value=0)
    histogram = me.EmbeddedDocumentField(HistogramDoc)


class CoincidenceDoc(me.EmbeddedDocument):
    runs = me.EmbeddedDocumentListField(CoincidenceRunDoc, default=list)
    # 额外输出原始事件转储（detector_id,timestamp_ps,origin_tag）
    dump_events = me.BooleanField(default=False)


class HomRunDoc(me.EmbeddedDocument):
    name = me.StringField(required=True, regex=NAME_REGEX)
    duration_s = me.FloatField(required=True, min_value=0)
    efficiency_boost = me.FloatField(default=1.0, min_value=0)
    coincidence_range_ps = me.FloatField(default=DEFAULT_RANGE_PS, min_value=0)
    fit_dip = me.BooleanField(default=True)
    pump_scale = me.FloatField(default=1.0, min_value=0)


class HomDoc(me.EmbeddedDocument):
    source_a = me.EmbeddedDocumentField(ArmDoc, required=True)
    source_b = me.EmbeddedDocumentField(ArmDoc, required=True)
    bs_reflectivity = me.FloatField(default=0.5, min_value=0, max_value=1)
    signal_detectors = me.ListField(me.StringField(), required=True)
    herald_detectors = me.ListField(me.StringField(), required=True)
    herald_window_ps = me.FloatField(default=DEFAULT_HERALD_WINDOW_PS, min_value=0)
    bin_width_ps = me.FloatField(min_value=0)
    wing_start_ps = me.FloatField(min_value=0)
    min_wing_events = me.IntField(default=50, min_value=1)
    multipair = me.BooleanField(default=True)
    runs = me.EmbeddedDocumentListField(HomRunDoc, default=list)


class TableEntryDoc(me.EmbeddedDocument):
    """对比表的一行；数值以字符串原样保存（如 "3.9*10^5"、"<1"、"N.A."）。"""
    process = me.StringField(required=True)
    mean_photons_per_mode = me.StringField(default="")
    bandwidth_pm = me.StringField(default="")
    transmission_percent = me.StringField(default="")
    brightness = me.StringField(default="")
    note = me.StringField(default="")

    def to_domain(self) -> TableEntry:
        return TableEntry(
            self.process, self.mean_photons_per_mode, self.bandwidth_pm,
            self.transmission_percent, self.brightness, self.note,
        )


class TableDoc(me.EmbeddedDocument):
    entries = me.EmbeddedDocumentListField(TableEntryDoc, default=list)


class ExperimentConfig(me.EmbeddedDocument):
    """一个实验配置文件的根文档。"""
    schema_version = me.IntField(required=True)
    seed = me.IntField(required=True, min_value=0, max_value=MAX_SEED)
    description = me.StringField(default="")
    output_dir = me.StringField()
    threads = me.IntField(min_value=1)
    sources = me.MapField(me.EmbeddedDocumentField(SourceDoc), default=dict)
    filters = me.MapField(me.EmbeddedDocumentField(FilterDoc), default=dict)
    detectors = me.MapField(me.EmbeddedDocumentField(DetectorDoc), default=dict)
    histogram = me.EmbeddedDocumentField(HistogramDoc, default=HistogramDoc)
    radiometry = me.EmbeddedDocumentField(RadiometryDoc)
    coincidence = me.EmbeddedDocumentField(CoincidenceDoc)
    hom = me.EmbeddedDocumentField(HomDoc)
    table = me.EmbeddedDocumentField(TableDoc)

    # ---------- 引用解析 ----------
    def get_source(self, name: str, path: str) -> SourceConfig:
        if name not in self.sources:
            raise ConfigError(f"unknown source {name!r}", path)
        with _domain_errors(path):
            return self.sources[name].to_domain()

    def get_chain(self, names, path: str) -> FilterChain:
        stages = []
        for i, name in enumerate(names or ()):
            if name not in self.filters:
                raise ConfigError(f"unknown filter {name!r}", f"{path}[{i}]")
            with _domain_errors(f"filters.{name}"):
                stages.append(self.filters[name].to_domain())
        return FilterChain(tuple(stages))

    def get_detector(self, name: str, path: str) -> DetectorConfig:
        if name not in self.detectors:
            raise ConfigError(f"unknown detector {name!r}", path)
        with _domain_errors(f"detectors.{name}"):
            return self.detectors[name].to_domain(f"detectors.{name}")

    def arm_setup(self, arm: ArmDoc, path: str, pump_scale: float = 1.0) -> SourceSetup:
        source = self.get_source(arm.source, f"{path}.source")
        scale = arm.pump_scale * pump_scale
        if scale != 1.0:
            source = source.scaled_pump(scale)
        return SourceSetup(
            source=source,
            signal_chain=self.get_chain(arm.signal_filters, f"{path}.signal_filters"),
            idler_chain=self.get_chain(arm.idler_filters, f"{path}.idler_filters"),
            per_photon_transmission=arm.per_photon_transmission,
            grid_points=int(getattr(settings, "PAIRSIM_GRID_POINTS", GRID_POINTS)),
            grid_span_fwhm=float(getattr(settings, "PAIRSIM_GRID_SPAN_FWHM", GRID_SPAN_FWHM)),
        )

    def check_references(self) -> None:
        """所有引用的 source/filter/detector id 都必须存在，且能构成合法的领域对象。"""
        for name, doc in self.detectors.items():
            doc.to_domain(f"detectors.{name}")
        if self.radiometry is not None:
            self.radiometry_job()
        if self.coincidence is not None:
            self.coincidence_runs()
        if self.hom is not None:
            self.hom_runs()

    def digest(self) -> str:
        return config_digest(self.to_mongo().to_dict())

    # ---------- 领域对象 ----------
    def radiometry_job(self) -> RadiometryJob:
        doc = self.radiometry
        if doc is None:
            raise ConfigError("section is required for this command", "radiometry")
        source = self.get_source(doc.source, "radiometry.source")
        if doc.filter is not None:
            fwhm_pm = self.get_chain([doc.filter], "radiometry.filter").narrowest.fwhm_pm
        elif doc.filter_fwhm_pm is not None:
            fwhm_pm = doc.filter_fwhm_pm
        else:
            raise ConfigError("either filter or filter_fwhm_pm is required", "radiometry.filter")
        if fwhm_pm <= 0:
            raise ConfigError("filter FWHM must be positive", "radiometry.filter_fwhm_pm")
        if fwhm_pm * 1e-3 > source.spdc_bandwidth_nm:
            raise ConfigError(
                f"filter FWHM {fwhm_pm} pm exceeds the SPDC bandwidth {source.spdc_bandwidth_nm} nm",
                "radiometry.filter_fwhm_pm" if doc.filter is None else "radiometry.filter",
            )

        component = None
        if doc.component_filters:
            chain = self.get_chain(doc.component_filters, "radiometry.component_filters")
            component = source.coupling_efficiency * source.si_filter_transmission * chain.peak_transmission
        return RadiometryJob(
            source=source,
            filter_fwhm_nm=fwhm_pm * 1e-3,
            per_photon_transmission=doc.per_photon_transmission,
            pair_transmission_mode=doc.pair_transmission_mode,
            component_transmission=component,
            reference_mean_photons_per_mode=doc.reference_mean_photons_per_mode,
            reference_brightness=doc.reference_brightness,
        )

    def coincidence_runs(self) -> list:
        doc = self.coincidence
        if doc is None or not doc.runs:
            raise ConfigError("at least one run is required", "coincidence.runs")
        runs = []
        for i, run in enumerate(doc.runs):
            path = f"coincidence.runs[{i}]"
            if not run.efficiency_boost > 0:
                raise ConfigError("must be positive", f"{path}.efficiency_boost")
            histogram = run.histogram or self.histogram
            runs.append(CoincidenceRun(
                name=run.name,
                setup=self.arm_setup(run.arm, f"{path}.arm"),
                start_detector=self.get_detector(run.start_detector, f"{path}.start_detector"),
                stop_detector=self.get_detector(run.stop_detector, f"{path}.stop_detector"),
                duration_ps=run.duration_s * SECOND_PS,
                bin_width_ps=histogram.bin_width_ps,
                range_ps=tuple(histogram.range_ps),
                efficiency_boost=run.efficiency_boost,
                detector_ids=(run.start_detector, run.stop_detector),
            ))
        _check_unique([r.name for r in runs], "coincidence.runs")
        return runs

    def hom_runs(self) -> list:
        doc = self.hom
        if doc is None or not doc.runs:
            raise ConfigError("at least one run is required", "hom.runs")
        for name in ("signal_detectors", "herald_detectors"):
            if len(getattr(doc, name)) != 2:
                raise ConfigError("exactly two detector ids are required", f"hom.{name}")
        signal = tuple(self.get_detector(d, f"hom.signal_detectors[{i}]") for i, d in enumerate(doc.signal_detectors))
        herald = tuple(self.get_detector(d, f"hom.herald_detectors[{i}]") for i, d in enumerate(doc.herald_detectors))
        if not doc.herald_window_ps > 0:
            raise ConfigError("must be positive", "hom.herald_window_ps")

        runs = []
        for i, run in enumerate(doc.runs):
            path = f"hom.runs[{i}]"
            for name in ("efficiency_boost", "coincidence_range_ps"):
                if not getattr(run, name) > 0:
                    raise ConfigError("must be positive", f"{path}.{name}")
            if doc.wing_start_ps is not None and not doc.wing_start_ps < run.coincidence_range_ps:
                raise ConfigError("wing start must lie inside the coincidence range", "hom.wing_start_ps")
            with _domain_errors(path):
                config = HomConfig(
                    source_a=self.arm_setup(doc.source_a, "hom.source_a", run.pump_scale),
                    source_b=self.arm_setup(doc.source_b, "hom.source_b", run.pump_scale),
                    signal_detectors=signal,
                    herald_detectors=herald,
                    bs_reflectivity=doc.bs_reflectivity,
                    coincidence_range_ps=run.coincidence_range_ps,
                    herald_window_ps=doc.herald_window_ps,
                    efficiency_boost=run.efficiency_boost,
                    bin_width_ps=doc.bin_width_ps or self.histogram.bin_width_ps,
                    wing_start_ps=doc.wing_start_ps,
                    min_wing_events=doc.min_wing_events,
                    fit_dip=run.fit_dip,
                    multipair=doc.multipair,
                )
            runs.append(HomRun(name=run.name, config=config, duration_ps=run.duration_s * SECOND_PS))
        _check_unique([r.name for r in runs], "hom.runs")
        return runs

    def table_entries(self) -> list:
        if self.table is None or not self.table.entries:
            raise ConfigError("at least one entry is required", "table.entries")
        entries = []
        for i, entry in enumerate(self.table.entries):
            with _domain_errors(f"table.entries[{i}]"):
                entries.append(entry.to_domain())
        return entries


@contextmanager
def _domain_errors(path: str):
    """把领域对象构造时的 DomainError 转成带字段路径的 ConfigError。"""
    try:
        yield
    except DomainError as e:
        raise ConfigError(str(e), path) from e


def _check_unique(names, path: str) -> None:
    seen = set()
    for i, name in enumerate(names):
        if name in seen:
            raise ConfigError(f"duplicate run name {name!r}", f"{path}[{i}].name")
        seen.add(name)


# ---------- 加载与校验 ----------
def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _first_error(error, prefix: str = ""):
    """沿 ValidationError.errors 下钻到第一个叶子，返回 (字段路径, 信息)。"""
    errors = getattr(error, "errors", None) or {}
    if not errors:
        return prefix, getattr(error, "message", None) or str(error)
    key = sorted(errors, key=str)[0]
    child = errors[key]
    key = int(key) if isinstance(key, str) and key.isdigit() else key
    if isinstance(child, me.ValidationError):
        return _first_error(child, _join(prefix, key))
    return _join(prefix, key), str(child)


def _convert(field, raw, path: str):
    if raw is None:
        return None
    if isinstance(field, me.EmbeddedDocumentField):
        return _build(field.document_type, raw, path)
    if isinstance(field, me.MapField):
        if not isinstance(raw, dict):
            raise ConfigError("expected an object", path)
        return {str(k): _convert(field.field, v, _join(path, str(k))) for k, v in raw.items()}
    if isinstance(field, me.ListField):
        if not isinstance(raw, list):
            raise ConfigError("expected a list", path)
        return [_convert(field.field, v, _join(path, i)) for i, v in enumerate(raw)]
    if isinstance(field, me.BooleanField) and not isinstance(raw, bool):
        raise ConfigError("expected true or false", path)
    # IntField.to_python 会把 1.5 截断成 1、把 "42" 转成 42
    if isinstance(field, me.IntField) and (isinstance(raw, bool) or not isinstance(raw, int)):
        raise ConfigError(f"expected an integer, got {raw!r}", path)
    if isinstance(field, me.StringField) and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return format_cell(raw)
    if isinstance(field, me.FloatField) and isinstance(raw, str):
        # YAML 1.1 把 1e-5 这类不带小数点的指数写法读成字符串
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}", path) from None
    return raw


def _build(doc_cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path)
    unknown = sorted(str(k) for k in data if k not in doc_cls._fields)
    if unknown:
        raise ConfigError("unknown field", _join(path, unknown[0]))
    values = {name: _convert(doc_cls._fields[name], raw, _join(path, name)) for name, raw in data.items()}
    values = {k: v for k, v in values.items() if v is not None}
    doc = doc_cls(**values)
    try:
        doc.validate()
    except me.ValidationError as e:
        field, message = _first_error(e)
        raise ConfigError(message, _join(path, field) if field else path) from e
    return doc


def parse_config(data) -> ExperimentConfig:
    """校验一个已解析的配置字典。"""
    config = _build(ExperimentConfig, data, "")
    supported = tuple(getattr(settings, "PAIRSIM_SCHEMA_VERSIONS", (1,)))
    if config.schema_version not in supported:
        raise ConfigError(f"unsupported schema version {config.schema_version} (supported: {supported})",
                          "schema_version")
    config.check_references()
    return config


def load_config(path) -> ExperimentConfig:
    """读取并校验配置文件（JSON；YAML 亦可）。"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid JSON/YAML: {e}") from e
    return parse_config(data)


def resolve_preset(name_or_path) -> Path:
    """--config 既可以是文件路径，也可以是内置预设名（paper / ideal / lowrate）。"""
    path = Path(name_or_path)
    if path.exists():
        return path
    presets = Path(getattr(settings, "PAIRSIM_PRESETS_DIR", Path(__file__).resolve().parent / "presets"))
    for candidate in (presets / str(name_or_path), presets / f"{name_or_path}.json"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"config file {name_or_path} not found")
