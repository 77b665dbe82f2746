"""Cycle records, the canonical CSV layout, batching, and a synthetic ECM cell.

CSV layout (UTF-8, one file per cell)::

    cycle,step,time_s,current_a,voltage_v

rows grouped by cycle with ``step`` ascending from 1. Positive current is
discharge. A ``manifest.json`` next to the CSVs names a preset or lists
``C_rated, C_EOL, V0, V_EOD, n`` explicitly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import BatteryConfig

log = logging.getLogger(__name__)

COLUMNS = ("cycle", "step", "time_s", "current_a", "voltage_v")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class CycleRecord:
    cycle_index: int
    dt: float
    current: np.ndarray
    voltage: np.ndarray
    time: np.ndarray | None = None
    cell: str = ""

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=np.float64)
        self.voltage = np.asarray(self.voltage, dtype=np.float64)
        if self.current.shape != self.voltage.shape:
            raise ValueError("current and voltage lengths differ")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.time is None:
            self.time = np.arange(self.t_eod, dtype=np.float64) * self.dt
        else:
            self.time = np.asarray(self.time, dtype=np.float64)

    @property
    def t_eod(self):
        return len(self.current)

    def window(self, n):
        return np.stack([self.current[:n], self.voltage[:n]], axis=1)


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    C_rated: float
    C_EOL: float
    V0: float
    V_EOD: float
    n: int

    def battery(self, dt=1.0, **kw):
        return BatteryConfig(C_rated=self.C_rated, C_EOL=self.C_EOL, V0=self.V0,
                             V_EOD=self.V_EOD, n=self.n, dt=dt, **kw)


PRESETS = {
    "tri": DatasetPreset("tri", 1.1, 0.88, 3.6, 2.0, 80),
    "rt-batt": DatasetPreset("rt-batt", 1.1, 0.88, 3.6, 2.0, 80),
    "nasa": DatasetPreset("nasa", 2.22, 1.33, 4.2, 3.2, 30),
    # desk-scale synthetic cells: TRI constants, short window
    "synthetic": DatasetPreset("synthetic", 1.1, 0.88, 3.6, 2.0, 30),
}


def get_preset(name_or_path):
    """Resolve a preset name, a JSON manifest file, or a directory holding ``manifest.json``."""
    key = str(name_or_path)
    if key.lower() in PRESETS:
        return PRESETS[key.lower()]
    p = Path(key)
    if p.is_dir():
        p = p / "manifest.json"
    if p.is_file():
        return load_manifest(p)
    raise KeyError(f"unknown preset {key!r}; known presets: {', '.join(PRESETS)}")


def load_manifest(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "preset" in d:
        return get_preset(d["preset"])
    missing = [k for k in ("C_rated", "C_EOL", "V0", "V_EOD", "n") if k not in d]
    if missing:
        raise SchemaError(f"{path}: manifest lacks {missing}")
    return DatasetPreset(d.get("name", "custom"), float(d["C_rated"]), float(d["C_EOL"]),
                         float(d["V0"]), float(d["V_EOD"]), int(d["n"]))


def write_manifest(directory, preset):
    d = asdict(preset) if preset.name not in PRESETS else {"preset": preset.name}
    Path(directory, "manifest.json").write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV


def _read_file(path):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return rows
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        pos = [header.index(c) for c in COLUMNS]
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                vals = [raw[i] for i in pos]
                cyc, step = int(vals[0]), int(vals[1])
                t, i_a, v_v = float(vals[2]), float(vals[3]), float(vals[4])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed row {raw!r} ({exc})") from None
            if not (math.isfinite(t) and math.isfinite(i_a) and math.isfinite(v_v)) or v_v <= 0:
                raise ParseError(f"{path}:{lineno}: non-finite value or non-positive voltage")
            rows.setdefault(cyc, []).append((step, t, i_a, v_v))
    return rows


def _infer_dt(time, where):
    diffs = np.diff(time)
    dt = float(np.median(diffs))
    if dt <= 0 or np.any(np.abs(diffs - dt) > 0.01 * dt):
        log.warning("%s: non-uniform sampling, cycle rejected", where)
        return None
    return dt


def load_cycles(path, preset=None, n=None):
    """Read every cycle under ``path`` (a CSV file or a directory of them).

    Cycles shorter than ``n + 1`` samples or with jittery sampling are skipped
    with a warning. Files are read in path order, cycles by index within each.
    """
    if n is None and preset is not None:
        n = get_preset(preset).n if isinstance(preset, str) else preset.n
    p = Path(path)
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    out = []
    for fp in files:
        for cyc, rows in sorted(_read_file(fp).items()):
            rows.sort(key=lambda r: r[0])
            arr = np.asarray([r[1:] for r in rows], dtype=np.float64)
            where = f"{fp.name} cycle {cyc}"
            if n is not None and len(arr) < n + 1:
                log.warning("%s: %d samples < n+1=%d, skipped", where, len(arr), n + 1)
                continue
            if len(arr) < 2:
                log.warning("%s: too short, skipped", where)
                continue
            dt = _infer_dt(arr[:, 0], where)
            if dt is None:
                continue
            out.append(CycleRecord(cyc, dt, arr[:, 1], arr[:, 2], time=arr[:, 0], cell=fp.stem))
    return out


def save_cycles(cycles, path):
    """Write cycles to one CSV; floats use the shortest exact round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for c in cycles:
            for j in range(c.t_eod):
                w.writerow((c.cycle_index, j + 1, repr(float(c.time[j])),
                            repr(float(c.current[j])), repr(float(c.voltage[j]))))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    windows: np.ndarray      # (B, n, 2)
    currents: np.ndarray     # (B, L) steps n+1.., zero padded
    voltages: np.ndarray     # (B, L)
    masks: np.ndarray        # (B, L)
    dt: np.ndarray           # (B,) identical within a batch
    cycle_indices: list
    lengths: np.ndarray      # (B,) valid predicted steps

    def __len__(self):
        return len(self.cycle_indices)

    @property
    def step_dt(self):
        return float(self.dt[0])


def _batch_of(group, n):
    for c in group:
        if c.t_eod < n + 1:
            raise ValueError(f"cycle {c.cycle_index} has {c.t_eod} samples, needs >= n+1={n + 1}")
    lengths = np.array([c.t_eod - n for c in group])
    L = int(lengths.max())
    B = len(group)
    cur = np.zeros((B, L))
    vol = np.zeros((B, L))
    mask = np.zeros((B, L))
    for b, c in enumerate(group):
        k = lengths[b]
        cur[b, :k] = c.current[n:]
        vol[b, :k] = c.voltage[n:]
        mask[b, :k] = 1.0
    return Batch(
        windows=np.stack([c.window(n) for c in group]),
        currents=cur, voltages=vol, masks=mask,
        dt=np.array([c.dt for c in group]),
        cycle_indices=[c.cycle_index for c in group],
        lengths=lengths,
    )


def make_batch(cycles, n, max_batch):
    """Split cycles into padded batches; cycles with different dt never share a batch."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    groups = {}
    for c in cycles:
        groups.setdefault(c.dt, []).append(c)
    out = []
    for group in groups.values():
        for i in range(0, len(group), max_batch):
            out.append(_batch_of(group[i:i + max_batch], n))
    return out


# ---------------------------------------------------------------------------
# synthetic cell


@dataclass
class OracleConfig:
    """Second-order ECM with a power-law OCV and linear capacity fade."""

    R0_true: float = 0.03
    r_true: tuple = (0.02, 0.04)
    tau_true: tuple = (15.0, 200.0)
    ocv_exponent: float = 0.9
    soh_fade_per_cycle: float = 0.002
    num_cycles: int = 10
    profile_kind: str = "constant"   # constant | multistage | randomized
    seed: int = 0
    battery: BatteryConfig = field(default_factory=lambda: PRESETS["tri"].battery(dt=1.0))
    c_rate: float = 1.0                   # constant profile
    stage_c_rate: tuple = (0.5, 2.0)      # multistage current range, in C
    stage_count: tuple = (3, 6)
    random_current: tuple = (0.5, 4.0)    # randomized profile, amps
    first_cycle: int = 0
    cycle_stride: int = 1
    step_cap: int = 50000

    def __post_init__(self):
        if isinstance(self.battery, dict):
            self.battery = BatteryConfig.from_dict(self.battery)
        self.r_true = tuple(float(v) for v in self.r_true)
        self.tau_true = tuple(float(v) for v in self.tau_true)
        if self.R0_true <= 0 or min(self.r_true) <= 0 or min(self.tau_true) <= 0:
            raise ValueError("resistances and time constants must be positive")
        if len(self.r_true) != len(self.tau_true):
            raise ValueError("r_true and tau_true need the same length")
        if self.profile_kind not in ("constant", "multistage", "randomized"):
            raise ValueError(f"unknown profile_kind {self.profile_kind!r}")
        if self.num_cycles < 1 or self.cycle_stride < 1 or self.first_cycle < 0:
            raise ValueError("num_cycles and cycle_stride must be positive")
        if self.soh(self.num_cycles - 1) < 0.5:
            raise ValueError("capacity fade drives SOH below 0.5")

    def soh(self, k):
        return 1.0 - self.soh_fade_per_cycle * (self.first_cycle + k * self.cycle_stride)

    def cycle_number(self, k):
        return self.first_cycle + k * self.cycle_stride

    def to_dict(self):
        d = asdict(self)
        d["battery"] = self.battery.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown OracleConfig field(s): {bad}")
        return cls(**d)


def ocv_true(soc, cfg):
    b = cfg.battery
    return b.V_EOD + (b.V0 - b.V_EOD) * soc ** cfg.ocv_exponent


def _profile(cfg, rng, c_eff):
    b = cfg.battery
    if cfg.profile_kind == "constant":
        amps = cfg.c_rate * b.C_rated
        return lambda j: amps
    if cfg.profile_kind == "randomized":
        lo, hi = cfg.random_current
        return lambda j: float(rng.uniform(lo, hi))
    lo, hi = cfg.stage_c_rate
    k = int(rng.integers(cfg.stage_count[0], cfg.stage_count[1] + 1))
    amps = rng.uniform(lo, hi, size=k) * b.C_rated
    # rough discharge length at the mean stage current; the last stage runs to cutoff
    est_steps = c_eff * 3600.0 / float(amps.mean()) / b.dt
    frac = rng.uniform(0.5, 1.5, size=k - 1)
    ends = np.cumsum(frac / (k) * est_steps).astype(np.int64)

    def at(j):
        return float(amps[int(np.searchsorted(ends, j, side="right"))])

    return at


def simulate_cycle(cfg, soh, profile):
    """Discharge from full charge until the terminal voltage drops below cutoff.

    ``profile(j)`` gives the current at 0-based step ``j``. Returns arrays of
    current, voltage, SOC (before the step's charge update) and RC voltages.
    """
    b = cfg.battery
    c_eff = b.beta * b.C_EOL + (b.C_rated - b.beta * b.C_EOL) * soh
    alpha = [math.exp(-b.dt / t) for t in cfg.tau_true]
    soc = 1.0
    v = [0.0] * len(alpha)
    cur, vol, socs, vrc = [], [], [], []
    for j in range(cfg.step_cap):
        i_a = profile(j)
        ocv_j = ocv_true(soc, cfg)
        v = [a * vk + (1.0 - a) * r * i_a for a, vk, r in zip(alpha, v, cfg.r_true)]
        term = ocv_j - cfg.R0_true * i_a - sum(v)
        cur.append(i_a)
        vol.append(term)
        socs.append(soc)
        vrc.append(list(v))
        if term < b.V_EOD:
            return np.array(cur), np.array(vol), np.array(socs), np.array(vrc)
        soc = min(1.0, max(0.0, soc - i_a * b.dt / (3600.0 * c_eff)))
    raise GenerationError(f"cutoff not reached within {cfg.step_cap} steps")


def synth_generate(cfg):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    b = cfg.battery
    out = []
    for k in range(cfg.num_cycles):
        soh = cfg.soh(k)
        c_eff = b.beta * b.C_EOL + (b.C_rated - b.beta * b.C_EOL) * soh
        cur, vol, _, _ = simulate_cycle(cfg, soh, _profile(cfg, rng, c_eff))
        out.append(CycleRecord(cfg.cycle_number(k), b.dt, cur, vol,
                               time=np.arange(len(cur)) * b.dt, cell=f"synth{cfg.seed}"))
    return out


DESK_DT = 20.0


def desk_split(num_train=64, num_val=16, num_test=16, dt=DESK_DT, **overrides):
    """Train/val/test synthetic cells on the ``synthetic`` preset with multistage profiles.

    Validation and test cycles interleave the training fade range (every 4th
    cycle, offset by 1 and 2) and use their own profile seeds.
    """
    battery = PRESETS["synthetic"].battery(dt=dt)
    base = dict(profile_kind="multistage", battery=battery, soh_fade_per_cycle=0.002)
    base.update(overrides)
    stride = max(1, num_train // max(num_val, num_test, 1))

    def gen(**kw):
        return synth_generate(OracleConfig(**dict(base, **kw)))

    train = gen(num_cycles=num_train, seed=1)
    val = gen(num_cycles=num_val, cycle_stride=stride, first_cycle=1, seed=2)
    test = gen(num_cycles=num_test, cycle_stride=stride, first_cycle=2, seed=3)
    return train, val, test, battery
