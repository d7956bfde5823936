"""Synthetic LOCA-like transients: 38 monitoring channels sampled at 2 Hz for 100 s.

Every channel follows a saturating-exponential departure from its baseline::

    value(t) = baseline + A(location) * (1 - exp(-max(t - delay(location), 0) / tau))
    tau      = tau_ref * 35.5 / size_cm

so a larger break drives every channel toward its asymptote faster, and the
cold/hot-leg break location changes amplitudes and onset delays. A channel
whose delay is ``inf`` for one location does not respond to that location.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ParameterError

N_CHANNELS = 38
N_SAMPLES = 200
SAMPLE_RATE_HZ = 2.0
SIZE_MIN_CM = 0.1
SIZE_MAX_CM = 35.5
TEMPLATE_VERSION = "surrogate-loca-v1"
SCHEMA_VERSION = 1
# one transient per location keeps both classes present
MIN_COUNT = 2
STD_FLOOR = 1e-8
TRAIN_FRACTION = 0.8

INF = math.inf


class BreakLocation(str, Enum):
    COLD = "ColdLeg"
    HOT = "HotLeg"

    @property
    def index(self) -> int:
        return 0 if self is BreakLocation.COLD else 1

    @classmethod
    def from_index(cls, i: int) -> "BreakLocation":
        return cls.COLD if int(i) == 0 else cls.HOT


@dataclass(frozen=True)
class ChannelTemplate:
    name: str
    baseline: float
    amplitude_cold: float
    amplitude_hot: float
    delay_cold: float
    delay_hot: float
    time_constant_ref: float
    noise_floor: float

    def __post_init__(self):
        if not self.time_constant_ref > 0:
            raise ParameterError(f"{self.name}: time_constant_ref must be positive")

    def amplitude(self, location: BreakLocation) -> float:
        return self.amplitude_cold if location is BreakLocation.COLD else self.amplitude_hot

    def delay(self, location: BreakLocation) -> float:
        return self.delay_cold if location is BreakLocation.COLD else self.delay_hot


def _t(name, baseline, a_cold, a_hot, d_cold, d_hot, tau_ref):
    # generator noise is 0.2% of the larger amplitude
    floor = 0.002 * max(abs(a_cold), abs(a_hot))
    return ChannelTemplate(name, baseline, a_cold, a_hot, d_cold, d_hot, tau_ref, floor)


# Placeholder channel names; units in comments. Fixed table, see TEMPLATE_VERSION.
TEMPLATES: tuple[ChannelTemplate, ...] = (
    _t("pzr_pressure", 15.5, -12.5, -11.0, 0.0, 0.0, 2.5),  # MPa
    _t("pzr_level", 55.0, -52.0, -40.0, 0.5, 1.5, 2.0),  # %
    _t("pzr_temperature", 345.0, -75.0, -60.0, 1.0, 2.0, 4.0),  # degC
    _t("pv_water_level", 100.0, -62.0, -38.0, 2.0, 5.0, 6.0),  # %
    _t("hot_leg_level", 100.0, -25.0, -78.0, 8.0, 1.0, 5.0),  # %
    _t("cold_leg_level", 100.0, -80.0, -20.0, 1.0, 9.0, 5.0),  # %
    _t("hot_leg_temperature", 327.0, -55.0, -85.0, 4.0, 1.0, 7.0),  # degC
    _t("cold_leg_temperature", 292.0, -45.0, -28.0, 1.0, 4.0, 7.0),  # degC
    _t("hot_leg_pressure", 15.4, -12.0, -12.8, 0.5, 0.0, 2.5),  # MPa
    _t("cold_leg_pressure", 15.6, -13.0, -11.5, 0.0, 0.5, 2.5),  # MPa
    _t("core_outlet_temperature", 330.0, -50.0, -70.0, 3.0, 1.5, 8.0),  # degC
    _t("core_inlet_temperature", 291.0, -40.0, -30.0, 1.5, 3.0, 8.0),  # degC
    _t("core_flow", 18000.0, -9000.0, -14000.0, 2.0, 1.0, 4.0),  # kg/s
    _t("rcp_speed", 1485.0, -300.0, -250.0, 10.0, 12.0, 10.0),  # rpm
    _t("rcp_current", 650.0, -180.0, -120.0, 10.0, 12.0, 9.0),  # A
    _t("loop_flow", 6000.0, -4500.0, -2500.0, 1.0, 3.0, 4.0),  # kg/s
    _t("break_flow_cold", 0.0, 3500.0, 0.0, 0.0, INF, 1.5),  # kg/s
    _t("break_flow_hot", 0.0, 0.0, 2800.0, INF, 0.0, 1.5),  # kg/s
    _t("containment_pressure", 0.1, 0.35, 0.28, 1.0, 1.0, 12.0),  # MPa
    _t("containment_temperature", 45.0, 80.0, 95.0, 2.0, 1.0, 15.0),  # degC
    _t("containment_humidity", 40.0, 55.0, 50.0, 2.0, 2.0, 10.0),  # %
    _t("sump_level", 0.2, 2.5, 1.6, 5.0, 7.0, 20.0),  # m
    _t("sg_pressure", 7.6, 0.4, -0.9, 6.0, 4.0, 10.0),  # MPa
    _t("sg_level", 50.0, 9.0, -7.0, 8.0, 10.0, 12.0),  # %
    _t("sg_steam_flow", 550.0, -380.0, -450.0, 3.0, 2.0, 6.0),  # kg/s
    _t("sg_feed_flow", 550.0, -420.0, -350.0, 4.0, 5.0, 6.0),  # kg/s
    _t("sg_outlet_temperature", 292.0, -30.0, -52.0, 5.0, 2.0, 9.0),  # degC
    _t("hhsi_flow", 0.0, 38.0, 31.0, 12.0, 15.0, 10.0),  # kg/s
    _t("lhsi_flow", 0.0, 160.0, 0.0, 25.0, INF, 14.0),  # kg/s
    _t("accumulator_level", 80.0, -60.0, -45.0, 15.0, 22.0, 8.0),  # %
    _t("accumulator_pressure", 4.5, -2.5, -1.6, 15.0, 22.0, 8.0),  # MPa
    _t("surge_line_flow", 0.0, 45.0, -35.0, 0.5, 0.5, 3.0),  # kg/s
    _t("upper_plenum_void", 0.0, 0.45, 0.85, 6.0, 2.0, 6.0),  # fraction
    _t("downcomer_void", 0.0, 0.80, 0.30, 2.0, 8.0, 6.0),  # fraction
    _t("fuel_cladding_temperature", 340.0, 180.0, 90.0, 20.0, 30.0, 10.0),  # degC
    _t("neutron_flux", 100.0, -96.0, -95.0, 1.0, 1.0, 1.0),  # % FP
    _t("core_power", 100.0, -93.0, -92.0, 1.0, 1.0, 1.2),  # % FP
    _t("hot_leg_subcooling", 20.0, -8.0, -19.0, 6.0, 1.0, 5.0),  # degC
)

CHANNEL_NAMES: tuple[str, ...] = tuple(t.name for t in TEMPLATES)

assert len(TEMPLATES) == N_CHANNELS


@dataclass
class Transient:
    id: str
    channels: np.ndarray  # [38, 200]
    break_location: BreakLocation
    break_size_cm: float


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    transients: list[Transient]
    channel_stats: ChannelStats
    split: list[str]
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.transients)

    def indices(self, which: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == which], dtype=int)

    def channels(self, idx=None) -> np.ndarray:
        """Raw channel matrices stacked to ``[n, 38, 200]``."""
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.transients[i].channels for i in idx])

    def normalized(self, idx=None) -> np.ndarray:
        return normalize(self.channels(idx), self.channel_stats)

    def locations(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.array([self.transients[i].break_location.index for i in idx], dtype=int)

    def sizes(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.array([self.transients[i].break_size_cm for i in idx], dtype=np.float64)

    def ids(self, idx=None) -> list[str]:
        idx = range(len(self)) if idx is None else idx
        return [self.transients[i].id for i in idx]


def time_axis(n_samples: int = N_SAMPLES) -> np.ndarray:
    return np.arange(n_samples) / SAMPLE_RATE_HZ


def time_constant(template: ChannelTemplate, size_cm: float) -> float:
    return template.time_constant_ref * (SIZE_MAX_CM / size_cm)


def channel_response(
    template: ChannelTemplate, location: BreakLocation, size_cm: float, t: np.ndarray
) -> np.ndarray:
    """Noise-free channel trajectory at times ``t`` (seconds)."""
    delay = template.delay(location)
    t = np.asarray(t, dtype=np.float64)
    if math.isinf(delay):
        return np.full(t.shape, template.baseline)
    shifted = np.maximum(t - delay, 0.0)
    g = -np.expm1(-shifted / time_constant(template, size_cm))
    return template.baseline + template.amplitude(location) * g


def _check_size(size_cm: float) -> None:
    if not SIZE_MIN_CM <= size_cm <= SIZE_MAX_CM:
        raise ParameterError(
            f"break size {size_cm} cm outside [{SIZE_MIN_CM}, {SIZE_MAX_CM}]"
        )


def generate_transient(
    location: BreakLocation | str,
    size_cm: float,
    seed: int,
    templates: tuple[ChannelTemplate, ...] = TEMPLATES,
    transient_id: str | None = None,
) -> Transient:
    location = BreakLocation(location)
    size_cm = float(size_cm)
    _check_size(size_cm)
    rng = np.random.default_rng(seed)
    t = time_axis()
    channels = np.empty((len(templates), t.size))
    for i, tpl in enumerate(templates):
        channels[i] = channel_response(tpl, location, size_cm, t)
    noise = rng.standard_normal(channels.shape)
    channels += np.array([tpl.noise_floor for tpl in templates])[:, None] * noise
    if transient_id is None:
        transient_id = f"{location.value}-{size_cm:.4f}-{seed}"
    return Transient(transient_id, channels, location, size_cm)


def stratified_split(locations: np.ndarray, seed: int, train_fraction: float = TRAIN_FRACTION) -> list[str]:
    rng = np.random.default_rng([seed, 0x5917])
    split = ["test"] * len(locations)
    for cls in np.unique(locations):
        members = np.flatnonzero(locations == cls)
        rng.shuffle(members)
        n_train = int(math.floor(train_fraction * members.size + 0.5))
        for i in members[:n_train]:
            split[i] = "train"
    return split


def compute_channel_stats(channels: np.ndarray) -> ChannelStats:
    """Per-channel mean/std over all transients and samples of ``[n, C, T]``."""
    mean = channels.mean(axis=(0, 2))
    std = channels.std(axis=(0, 2))
    return ChannelStats(mean, np.maximum(std, STD_FLOOR))


def generate_dataset(count: int = 346, seed: int = 7) -> Dataset:
    if count < MIN_COUNT:
        raise ParameterError(f"dataset count must be at least {MIN_COUNT}, got {count}")
    rng = np.random.default_rng(seed)
    log_sizes = rng.uniform(np.log(SIZE_MIN_CM), np.log(SIZE_MAX_CM), size=count)
    sizes = np.clip(np.exp(log_sizes), SIZE_MIN_CM, SIZE_MAX_CM)
    transients = []
    for i in range(count):
        location = BreakLocation.COLD if i % 2 == 0 else BreakLocation.HOT
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        transients.append(
            generate_transient(location, sizes[i], sub_seed, transient_id=f"T{i:04d}")
        )
    locations = np.array([tr.break_location.index for tr in transients])
    split = stratified_split(locations, seed)
    train = [tr.channels for tr, s in zip(transients, split) if s == "train"]
    stats = compute_channel_stats(np.stack(train))
    return Dataset(transients, stats, split, seed=seed)


def normalize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel z-score of ``[..., C, T]`` arrays."""
    std = np.maximum(stats.std, STD_FLOOR)
    return (np.asarray(x) - stats.mean[:, None]) / std[:, None]


def denormalize(z: np.ndarray, stats: ChannelStats) -> np.ndarray:
    std = np.maximum(stats.std, STD_FLOOR)
    return np.asarray(z) * std[:, None] + stats.mean[:, None]


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + one CSV per transient


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_dataset(ds: Dataset, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    records = []
    for tr, split in zip(ds.transients, ds.split):
        fname = f"{tr.id}.csv"
        path = out_dir / fname
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CHANNEL_NAMES[: tr.channels.shape[0]])
            for row in tr.channels.T:
                writer.writerow([_fmt(v) for v in row])
        written.append(path)
        records.append(
            {
                "id": tr.id,
                "break_location": tr.break_location.value,
                "break_size_cm": tr.break_size_cm,
                "split": split,
                "file": fname,
            }
        )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "template_version": TEMPLATE_VERSION,
        "seed": ds.seed,
        "count": len(ds),
        "channel_names": list(CHANNEL_NAMES),
        "channel_stats": ds.channel_stats.to_dict(),
        "transients": records,
    }
    mpath = out_dir / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    written.append(mpath)
    return written


def read_dataset(data_dir: str | Path) -> Dataset:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    transients, split = [], []
    for rec in manifest["transients"]:
        values = np.loadtxt(data_dir / rec["file"], delimiter=",", skiprows=1, ndmin=2)
        transients.append(
            Transient(
                rec["id"],
                np.ascontiguousarray(values.T),
                BreakLocation(rec["break_location"]),
                float(rec["break_size_cm"]),
            )
        )
        split.append(rec["split"])
    stats = ChannelStats.from_dict(manifest["channel_stats"])
    return Dataset(transients, stats, split, seed=manifest.get("seed"))
