"""Throughput, power and area model for accelerator configurations.

Throughput is MAC-bound. The only structural hazard modeled is adder
contention: each log-domain MAC needs three adder operations, so with fewer
than three 4-bit adders the pipeline cannot accept a new MAC every cycle.
Pipeline fill, activation and softmax cycles are left out (well under 0.1% of
the ~34M MAC cycles per inference). Bus power is treated as always-on.
"""

from __future__ import annotations

import configparser
import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .eegnet import LayerKind, NetSpec

PIPELINE_DEPTH = 9
ADDER_OPS_PER_LOG_MAC = 3  # Log2-unit sum, exponent sum, accumulate


class ConfigError(ValueError):
    pass


class ComponentClass(str, enum.Enum):
    ADDER16 = "adder16"
    ADDER4 = "adder4"
    SHIFTER16 = "shifter16"
    BSHIFTER = "bshifter"
    EDRAM = "edram"
    BUS = "bus"
    EACTIVATION = "eActivation"
    ECLIP = "eClip"
    EROUND = "eRound"


class ArithmeticMode(str, enum.Enum):
    P2QNN16 = "P2QNN16"
    ULQ4 = "ULQ4"


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    cls: ComponentClass
    count: int = 1
    frequency_ghz: float = 0.0
    unit_power_mw: float = 0.0
    unit_area_mm2: float = 0.0
    note: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "cls", ComponentClass(self.cls))
        except ValueError:
            raise ConfigError(f"component {self.name!r}: unknown class {self.cls!r}") from None
        for k in ("count", "frequency_ghz", "unit_power_mw", "unit_area_mm2"):
            v = getattr(self, k)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"component {self.name!r}: {k} must be a finite value >= 0, got {v!r}")
        if int(self.count) != self.count:
            raise ConfigError(f"component {self.name!r}: count must be an integer")
        object.__setattr__(self, "count", int(self.count))

    @property
    def power_mw(self) -> float:
        return self.count * self.unit_power_mw

    @property
    def area_mm2(self) -> float:
        return self.count * self.unit_area_mm2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls").value
        if not d["note"]:
            del d["note"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentSpec":
        d = dict(d)
        if "class" not in d:
            raise ConfigError(f"component {d.get('name', '?')!r} has no class")
        d["cls"] = d.pop("class")
        unknown = set(d) - {"name", "cls", "count", "frequency_ghz", "unit_power_mw", "unit_area_mm2", "note"}
        if unknown:
            raise ConfigError(f"component {d.get('name', '?')!r}: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class HardwareConfig:
    name: str
    components: tuple[ComponentSpec, ...]
    clock_ghz: float = 4.3
    arithmetic_mode: ArithmeticMode = ArithmeticMode.ULQ4
    # a published total that disagrees with the component sum is kept for display only
    published_power_mw: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        try:
            object.__setattr__(self, "arithmetic_mode", ArithmeticMode(self.arithmetic_mode))
        except ValueError:
            raise ConfigError(f"{self.name}: unknown arithmetic mode {self.arithmetic_mode!r}") from None
        if not (isinstance(self.clock_ghz, (int, float)) and self.clock_ghz > 0):
            raise ConfigError(f"{self.name}: clock must be a positive frequency")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.name}: duplicate component names")

    def count(self, cls: ComponentClass) -> int:
        return sum(c.count for c in self.components if c.cls is cls)

    def with_count(self, name: str, count: int) -> "HardwareConfig":
        comps = []
        for c in self.components:
            if c.name == name:
                c = replace(c, count=count)
            comps.append(c)
        return replace(self, components=tuple(comps))

    def to_dict(self) -> dict:
        d = {"name": self.name, "clock_ghz": self.clock_ghz, "arithmetic_mode": self.arithmetic_mode.value,
             "components": [c.to_dict() for c in self.components]}
        if self.published_power_mw is not None:
            d["published_power_mw"] = self.published_power_mw
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareConfig":
        if not isinstance(d, dict) or "components" not in d:
            raise ConfigError("config must be an object with a 'components' list")
        return cls(d.get("name", "custom"), tuple(ComponentSpec.from_dict(c) for c in d["components"]),
                   d.get("clock_ghz", 4.3), d.get("arithmetic_mode", "ULQ4"), d.get("published_power_mw"))


def _c(name, cls, count, power, area, freq=0.0, note="") -> ComponentSpec:
    return ComponentSpec(name, cls, count, freq, power, area, note)


def _holylight() -> HardwareConfig:
    return HardwareConfig("holylight-a-custom", (
        _c("16-bit adder", "adder16", 1, 4.24, 0.00788, 4.3),
        _c("16-bit shifter", "shifter16", 1, 3.51, 0.02796, 4.3),
        _c("eDRAM", "edram", 1, 41.4, 0.166, note="256KB"),
        _c("bus", "bus", 1, 7.0, 0.009, note="384-wire"),
        _c("eActivation", "eActivation", 4, 0.26, 0.0003),
        _c("eClip", "eClip", 1, 0.26, 0.0003),
        _c("eRound", "eRound", 1, 0.26, 0.0003),
    ), 4.3, ArithmeticMode.P2QNN16)


def _mindreading() -> HardwareConfig:
    return HardwareConfig("mindreading", (
        _c("Bshifter", "bshifter", 1, 0.87, 0.00024, 4.3),
        _c("16-bit shifter", "shifter16", 1, 3.51, 0.02796, 4.3, note="Log2-unit normalization"),
        _c("4-bit adder", "adder4", 3, 2.93 / 3, 0.00591 / 3, 4.3),
        _c("eDRAM", "edram", 1, 10.4, 0.0415, note="64KB"),
        _c("bus", "bus", 1, 2.33, 0.003, note="128-wire"),
        _c("eActivation", "eActivation", 4, 0.26, 0.0003),
        _c("eClip", "eClip", 1, 0.26, 0.0003),
        _c("eRound", "eRound", 1, 0.26, 0.0003),
    ), 4.3, ArithmeticMode.ULQ4, published_power_mw=21.55)


def _mindreading_b() -> HardwareConfig:
    cfg = _mindreading().with_count("4-bit adder", 1)
    return replace(cfg, name="mindreading-b", published_power_mw=None)


BUILTINS = {"holylight-a-custom": _holylight, "mindreading": _mindreading, "mindreading-b": _mindreading_b}


def builtin(name: str) -> HardwareConfig:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ConfigError(f"unknown built-in config {name!r}; choose from {sorted(BUILTINS)}") from None


# -- config files ----------------------------------------------------------------

def config_from_ini(text: str) -> HardwareConfig:
    """INI layout: a ``[config]`` section plus one ``[component:<name>]`` section per row."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad INI config: {exc}") from None
    head = cp["config"] if cp.has_section("config") else {}
    comps = []
    for sec in cp.sections():
        if sec == "config":
            continue
        if not sec.startswith("component:"):
            raise ConfigError(f"unexpected section [{sec}]")
        s = cp[sec]
        d = {"name": sec.split(":", 1)[1].strip()}
        for k, v in s.items():
            if k in ("class", "note"):
                d[k] = v
            elif k == "count":
                d[k] = _num(v, sec, k, int)
            else:
                d[k] = _num(v, sec, k, float)
        comps.append(ComponentSpec.from_dict(d))
    pub = head.get("published_power_mw")
    return HardwareConfig(head.get("name", "custom"), tuple(comps),
                          _num(head.get("clock_ghz", "4.3"), "config", "clock_ghz", float),
                          head.get("arithmetic_mode", "ULQ4"),
                          None if pub is None else _num(pub, "config", "published_power_mw", float))


def _num(v: str, sec: str, key: str, typ):
    try:
        return typ(v)
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: not a number: {v!r}") from None


def config_to_ini(cfg: HardwareConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["config"] = {"name": cfg.name, "clock_ghz": repr(cfg.clock_ghz), "arithmetic_mode": cfg.arithmetic_mode.value}
    if cfg.published_power_mw is not None:
        cp["config"]["published_power_mw"] = repr(cfg.published_power_mw)
    for c in cfg.components:
        d = c.to_dict()
        name = d.pop("name")
        cp[f"component:{name}"] = {k: v if isinstance(v, str) else repr(v) for k, v in d.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(ref: str) -> HardwareConfig:
    """Resolve a built-in name, or read a ``.json`` / ``.ini`` file."""
    if ref in BUILTINS:
        return builtin(ref)
    p = Path(ref)
    if not p.exists():
        raise ConfigError(f"no built-in config or file named {ref!r}")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        try:
            return HardwareConfig.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{ref}: bad JSON: {exc}") from None
    return config_from_ini(text)


# -- models ----------------------------------------------------------------------

def layer_macs(layer) -> int:
    if layer.kind is LayerKind.CONV:
        return layer.out_height * layer.out_width * layer.out_channels * layer.in_channels * layer.kernel ** 2
    if layer.kind in (LayerKind.FC, LayerKind.SOFTMAX):
        return layer.in_dim * layer.out_dim
    if layer.kind is LayerKind.LSTM:
        return 4 * (layer.input_dim + layer.hidden_dim) * layer.hidden_dim * layer.time_steps
    raise ConfigError(f"unknown layer kind {layer.kind}")


def mac_count(net: NetSpec) -> dict:
    """Per-layer MAC counts plus ``total``.

    With a single shared frame stage (the default) the conv and first FC
    layers run once per inference; with a per-step frame stage they run once
    per LSTM time step.
    """
    per = {}
    front = set(net.stages()[0]) if net.layers else set()
    reps = net.time_steps if net.per_step_conv else 1
    for i, layer in enumerate(net.layers):
        per[layer.name] = layer_macs(layer) * (reps if i in front else 1)
    return {"layers": per, "total": sum(per.values())}


def initiation_interval(cfg: HardwareConfig) -> int:
    if cfg.arithmetic_mode is ArithmeticMode.ULQ4:
        adders = cfg.count(ComponentClass.ADDER4)
        if adders < 1:
            raise ConfigError(f"{cfg.name}: ULQ4 mode needs at least one adder4")
        if cfg.count(ComponentClass.BSHIFTER) < 1:
            raise ConfigError(f"{cfg.name}: ULQ4 mode needs a bshifter")
        return math.ceil(ADDER_OPS_PER_LOG_MAC / adders)
    if cfg.count(ComponentClass.ADDER16) < 1 or cfg.count(ComponentClass.SHIFTER16) < 1:
        raise ConfigError(f"{cfg.name}: P2QNN16 mode needs an adder16 and a shifter16")
    return 1


def throughput(cfg: HardwareConfig, net: NetSpec) -> float:
    macs = mac_count(net)["total"]
    if macs == 0:
        return math.inf
    return cfg.clock_ghz * 1e9 / (macs * initiation_interval(cfg))


_PREC = 9  # drops float noise from count x unit products


@dataclass
class PowerReport:
    power_mw: float
    area_mm2: float
    breakdown: list[dict]


def power_report(cfg: HardwareConfig) -> PowerReport:
    """Exact component sums, with each row's share of the total power."""
    total = round(math.fsum(c.power_mw for c in cfg.components), _PREC)
    area = round(math.fsum(c.area_mm2 for c in cfg.components), _PREC)
    rows = []
    for c in cfg.components:
        p = round(c.power_mw, _PREC)
        rows.append({"name": c.name, "class": c.cls.value, "count": c.count, "power_mw": p,
                     "area_mm2": round(c.area_mm2, _PREC),
                     "share_pct": 100.0 * p / total if total else 0.0})
    return PowerReport(total, area, rows)


FOOTER = ("throughput = clock / (MACs x II); pipeline fill, activation and softmax cycles excluded; "
          "bus power always-on")


@dataclass
class SimReport:
    config: str
    arithmetic_mode: str
    clock_ghz: float
    macs_per_inference: int
    layer_macs: dict
    initiation_interval: int
    pipeline_depth: int
    cycles_per_inference: int
    ips: float
    power_mw: float
    area_mm2: float
    ips_per_watt: float
    breakdown: list[dict]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    CSV_FIELDS = ("config", "arithmetic_mode", "clock_ghz", "macs_per_inference", "initiation_interval",
                  "cycles_per_inference", "ips", "power_mw", "area_mm2", "ips_per_watt")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"config          {self.config} ({self.arithmetic_mode} @ {self.clock_ghz} GHz)",
                 f"MACs/inference  {self.macs_per_inference:,}",
                 f"II / depth      {self.initiation_interval} / {self.pipeline_depth} cycles",
                 f"cycles/infer    {self.cycles_per_inference:,}",
                 f"IPS             {self.ips:.2f}",
                 f"power           {self.power_mw:.2f} mW",
                 f"area            {self.area_mm2:.5f} mm2",
                 f"IPS/W           {self.ips_per_watt:.1f}",
                 "",
                 f"{'component':<16} {'class':<12} {'n':>3} {'mW':>9} {'mm2':>9} {'%':>7}"]
        for r in self.breakdown:
            lines.append(f"{r['name']:<16} {r['class']:<12} {r['count']:>3} {r['power_mw']:>9.4f} "
                         f"{r['area_mm2']:>9.5f} {r['share_pct']:>7.2f}")
        lines.append("")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def simulate(cfg: HardwareConfig, net: NetSpec) -> SimReport:
    mc = mac_count(net)
    ii = initiation_interval(cfg)
    ips = throughput(cfg, net)
    pr = power_report(cfg)
    notes = [FOOTER]
    if cfg.published_power_mw is not None and round(cfg.published_power_mw, 6) != round(pr.power_mw, 6):
        notes.append(f"published total {cfg.published_power_mw} mW differs from the component sum "
                     f"{pr.power_mw:.2f} mW")
    return SimReport(cfg.name, cfg.arithmetic_mode.value, cfg.clock_ghz, mc["total"], mc["layers"], ii,
                     PIPELINE_DEPTH, mc["total"] * ii, ips, pr.power_mw, pr.area_mm2,
                     ips / (pr.power_mw / 1000.0) if pr.power_mw else math.inf, pr.breakdown, notes)


# Published results for non-photonic baselines. Data only, never computed.
BASELINES = [
    {"name": "CPU", "description": "ARM Cortex-A15", "accuracy_pct": 98.3, "ips_per_watt_below": 5},
    {"name": "GPU", "description": "Nvidia Tegra 4", "accuracy_pct": 98.3, "ips_per_watt_below": 5,
     "power_w": 223.2},
    {"name": "FPGA", "description": "Zynq-7030", "accuracy_pct": 98.3, "ips_per_watt_below": 5},
    {"name": "ShiDianNao", "description": "ASIC", "accuracy_pct": 98.3, "ips_per_watt_below": 70},
    {"name": "ISAAC", "description": "ReRAM PIM", "accuracy_pct": 98.3, "ips_per_watt_below": 70},
    {"name": "MXBCNN", "description": "Binary CNN", "accuracy_pct": 96.1, "ips_per_watt_below": 70},
]
PUBLISHED_ACCURACY = {"holylight-a-custom": 97.9, "mindreading": 97.6}
# the two published perf/W improvements disagree (1.68x vs +168%); the computed ratio is reported as is
PERF_PER_WATT_NOTE = "published perf/W gain is quoted both as 1.68x and as +168%; the ratio shown is computed"


@dataclass
class Comparison:
    reports: list[SimReport]
    deltas: list[dict]
    baselines: list[dict]
    notes: list[str]

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports], "deltas": self.deltas,
                "baselines": self.baselines, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        fields = ["name", "source", "ips", "power_mw", "area_mm2", "ips_per_watt", "power_reduction_pct",
                  "perf_per_watt_ratio", "accuracy_pct", "ips_per_watt_below", "power_w"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for b in self.baselines:
            w.writerow({**b, "source": "published"})
        for r, d in zip(self.reports, self.deltas):
            w.writerow({"name": r.config, "source": "simulated", "ips": r.ips, "power_mw": r.power_mw,
                        "area_mm2": r.area_mm2, "ips_per_watt": r.ips_per_watt,
                        "power_reduction_pct": d["power_reduction_pct"],
                        "perf_per_watt_ratio": d["perf_per_watt_ratio"],
                        "accuracy_pct": PUBLISHED_ACCURACY.get(r.config, "")})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'config':<20} {'IPS':>8} {'mW':>8} {'mm2':>9} {'IPS/W':>9} {'power -%':>9} {'perf/W x':>9}"]
        for r, d in zip(self.reports, self.deltas):
            lines.append(f"{r.config:<20} {r.ips:>8.2f} {r.power_mw:>8.2f} {r.area_mm2:>9.5f} "
                         f"{r.ips_per_watt:>9.1f} {d['power_reduction_pct']:>9.2f} {d['perf_per_watt_ratio']:>9.3f}")
        lines.append("")
        lines.append("published baselines (not simulated):")
        for b in self.baselines:
            extra = f", {b['power_w']} W" if "power_w" in b else ""
            lines.append(f"  {b['name']:<11} {b['description']:<15} acc {b['accuracy_pct']}%  "
                         f"IPS/W < {b['ips_per_watt_below']}{extra}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def compare(configs: list[HardwareConfig], net: NetSpec) -> Comparison:
    """Simulate each config; deltas are relative to the first one."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    reports = [simulate(c, net) for c in configs]
    base = reports[0]
    deltas = []
    for r in reports:
        deltas.append({
            "config": r.config,
            "baseline": base.config,
            "power_reduction_pct": 100.0 * (1.0 - r.power_mw / base.power_mw) if base.power_mw else 0.0,
            "perf_per_watt_ratio": r.ips_per_watt / base.ips_per_watt,
            "perf_per_watt_gain_pct": 100.0 * (r.ips_per_watt / base.ips_per_watt - 1.0),
        })
    baselines = [{**b, "source": "published"} for b in BASELINES]
    return Comparison(reports, deltas, baselines, [FOOTER, PERF_PER_WATT_NOTE])
