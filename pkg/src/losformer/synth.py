"""Synthetic cohort generation with a planted, documented severity signal.

Each admission carries a latent severity s ~ Uniform[0,1] that drives, with
strength `severity_effect` (e):

  * stay length: los = 1 + 29 * Beta(kappa*m, kappa*(1-m)) days with mean
    curve m(s) = 0.012 + 0.38 * e * s^2 and concentration kappa = 30, so
    higher severity stochastically lengthens the stay, the marginal is
    right-skewed, and stays never exceed 30 days;
  * the probability that a measurement falls outside its reference range:
    p_abn = 0.04 + 0.5 * e * s;
  * the event count: Poisson with mean mean_events * (0.65 + 0.7 * e * s);
  * a handful of history fields (first six comorbidity flags, ambulance
    arrival, triage urgency).

With e = 0 all of these dependencies vanish and event patterns carry no
information about the stay length.

Generation draws from one RNG stream per admission, seeded by
(seed, admission index), so admissions could be produced in parallel
without changing a single byte of output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .events import (
    ADMISSION_TYPES,
    ARRIVAL_MODES,
    HOUR_BUCKETS,
    MAX_AGE_YEARS,
    N_COMORBIDITY_SLOTS,
    N_PRESCRIPTION_SLOTS,
    SEASONS,
    TRIAGE_LEVELS,
    WEEKDAYS,
    Admission,
    Cohort,
    Demographics,
    EventType,
    History,
    MedicalEvent,
    Sex,
    ValidationError,
)

# Stay-length curve (see module docstring); tuned so that at e=1 the latent
# severity ranks the binary label with AUROC ~0.94 and the three classes
# split roughly 28/44/28.
LOS_MEAN_BASE = 0.012
LOS_MEAN_SLOPE = 0.38
LOS_CONCENTRATION = 30.0

ABNORMAL_P_BASE = 0.04
ABNORMAL_P_SLOPE = 0.5

EVENT_RATE_BASE = 0.65
EVENT_RATE_SLOPE = 0.7

# Event-type mix: labs, vitals, medications, procedures.
EVENT_TYPE_CUMPROBS = (0.55, 0.80, 0.92, 1.0)
EVENT_TYPES = (EventType.LAB, EventType.VITAL, EventType.MEDICATION, EventType.PROCEDURE)

# All synthetic events land inside the first 36 hours: timestamps are
# 36 * Beta(1, 2), independent of the stay length (only the first 24 hours
# are ever consumed downstream).
EVENT_SPAN_HOURS = 36.0

VITAL_NAMES = ("temperature", "spo2", "pulse", "resp_rate", "bp_sys", "bp_dia", "bmi")
VITAL_RANGES = {
    "temperature": (36.1, 38.0),
    "spo2": (94.0, 100.0),
    "pulse": (55.0, 100.0),
    "resp_rate": (10.0, 20.0),
    "bp_sys": (95.0, 140.0),
    "bp_dia": (55.0, 90.0),
    "bmi": (18.5, 27.0),
}

AGE_BANDS = ((0, 18), (18, 40), (40, 65), (65, MAX_AGE_YEARS + 1))
DEMO_COMBOS = (
    (Sex.FEMALE, False),
    (Sex.FEMALE, True),
    (Sex.MALE, False),
    (Sex.UNKNOWN, False),
)


@dataclass(frozen=True)
class SynthConfig:
    n_admissions: int = 1000
    seed: int = 0
    n_lab_codes: int = 50
    n_vital_codes: int = 7
    n_med_codes: int = 100
    n_proc_codes: int = 100
    mean_events_per_admission: float = 40.0
    severity_effect: float = 1.0
    co_timestamp_frac: float = 0.30

    def __post_init__(self):
        for field in ("n_admissions", "n_lab_codes", "n_vital_codes", "n_med_codes", "n_proc_codes"):
            if getattr(self, field) < 1:
                raise ValidationError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.severity_effect < 0:
            raise ValidationError(f"severity_effect must be >= 0, got {self.severity_effect}")
        if not 0 <= self.co_timestamp_frac <= 1:
            raise ValidationError(f"co_timestamp_frac must be in [0,1], got {self.co_timestamp_frac}")
        if self.mean_events_per_admission <= 0:
            raise ValidationError("mean_events_per_admission must be > 0")


def lab_codes(cfg: SynthConfig) -> tuple[str, ...]:
    # code 0 is the hand-authored albumin analyte
    return ("albumin",) + tuple(f"lab{i:03d}" for i in range(1, cfg.n_lab_codes))


def vital_codes(cfg: SynthConfig) -> tuple[str, ...]:
    named = VITAL_NAMES[: cfg.n_vital_codes]
    extra = tuple(f"vital{i:02d}" for i in range(len(named), cfg.n_vital_codes))
    return named + extra


def med_codes(cfg: SynthConfig) -> tuple[str, ...]:
    return tuple(f"med{i:03d}" for i in range(cfg.n_med_codes))


def proc_codes(cfg: SynthConfig) -> tuple[str, ...]:
    return tuple(f"proc{i:03d}" for i in range(cfg.n_proc_codes))


@dataclass(frozen=True)
class RangeRow:
    """One reference-range row; the age interval is half-open
    [age_low, age_high)."""
    code: str
    sex: Sex
    age_low: int
    age_high: int
    pregnant: bool
    low: float
    high: float


class RangeTable:
    """Demographic-conditioned reference ranges for measurement codes.

    Rows for a given (code, sex, pregnant) combination must tile the age
    axis 0..120 without gaps or overlaps; construction fails otherwise.
    """

    def __init__(self, rows):
        self._groups: dict[tuple[str, Sex, bool], list[RangeRow]] = {}
        for row in rows:
            if not (row.low < row.high):
                raise ValidationError(f"range row for {row.code}: low must be < high, got ({row.low}, {row.high})")
            self._groups.setdefault((row.code, row.sex, row.pregnant), []).append(row)
        for key, group in self._groups.items():
            group.sort(key=lambda r: r.age_low)
            if group[0].age_low != 0:
                raise ValidationError(f"age intervals for {key} do not start at 0")
            for prev, cur in zip(group, group[1:]):
                if cur.age_low < prev.age_high:
                    raise ValidationError(
                        f"overlapping age intervals for {key}: "
                        f"[{prev.age_low},{prev.age_high}) and [{cur.age_low},{cur.age_high})"
                    )
                if cur.age_low > prev.age_high:
                    raise ValidationError(
                        f"age-interval gap for {key}: [{prev.age_high},{cur.age_low}) is uncovered"
                    )
            if group[-1].age_high < MAX_AGE_YEARS + 1:
                raise ValidationError(f"age intervals for {key} do not cover {MAX_AGE_YEARS}")

    def lookup(self, code: str, demo: Demographics) -> tuple[float, float] | None:
        group = self._groups.get((code, demo.sex, demo.pregnant))
        if group is None:
            return None
        for row in group:
            if row.age_low <= demo.age_years < row.age_high:
                return (row.low, row.high)
        return None

    def rows(self) -> list[RangeRow]:
        out = []
        for key in sorted(self._groups, key=lambda k: (k[0], k[1].value, k[2])):
            out.extend(self._groups[key])
        return out

    def codes(self) -> list[str]:
        return sorted({key[0] for key in self._groups})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["code", "sex", "age_low", "age_high", "pregnant", "low", "high"])
            for row in self.rows():
                writer.writerow([
                    row.code, row.sex.value, row.age_low, row.age_high,
                    int(row.pregnant), repr(row.low), repr(row.high),
                ])

    @classmethod
    def load(cls, path) -> "RangeTable":
        rows = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            expected = ["code", "sex", "age_low", "age_high", "pregnant", "low", "high"]
            if header != expected:
                raise ValidationError(f"bad range-table header {header}, expected {expected}")
            for rec in reader:
                rows.append(RangeRow(
                    code=rec[0], sex=Sex(rec[1]), age_low=int(rec[2]), age_high=int(rec[3]),
                    pregnant=bool(int(rec[4])), low=float(rec[5]), high=float(rec[6]),
                ))
        return cls(rows)


def generate_range_table(cfg: SynthConfig) -> RangeTable:
    """Build reference ranges covering every lab/vital code for every
    (sex, pregnancy, age band) combination.

    The albumin row for non-pregnant males aged 18-39 is pinned to
    (36, 48) g/L; all other cells get deterministic per-demographic jitter
    around a per-code base interval.
    """
    rng = np.random.default_rng([cfg.seed, 0x7A6B])
    rows = []
    base: dict[str, tuple[float, float]] = {"albumin": (36.0, 48.0)}
    for code in lab_codes(cfg):
        if code in base:
            continue
        mid = float(rng.uniform(1.0, 200.0))
        width = mid * float(rng.uniform(0.15, 0.5))
        base[code] = (mid - width / 2.0, mid + width / 2.0)
    for code in vital_codes(cfg):
        if code in VITAL_RANGES:
            base[code] = VITAL_RANGES[code]
        else:
            mid = float(rng.uniform(1.0, 200.0))
            width = mid * float(rng.uniform(0.15, 0.5))
            base[code] = (mid - width / 2.0, mid + width / 2.0)

    for code in lab_codes(cfg) + vital_codes(cfg):
        low0, high0 = base[code]
        width = high0 - low0
        for sex, pregnant in DEMO_COMBOS:
            for age_low, age_high in AGE_BANDS:
                jitter_low = float(rng.uniform(-0.06, 0.06)) * width
                jitter_high = float(rng.uniform(-0.06, 0.06)) * width
                low, high = low0 + jitter_low, high0 + jitter_high
                if code == "albumin" and sex == Sex.MALE and not pregnant and (age_low, age_high) == (18, 40):
                    low, high = 36.0, 48.0
                if high <= low:  # jitter cannot invert: |jitter| <= 0.06*width each side
                    high = low + 0.05 * width
                rows.append(RangeRow(code, sex, age_low, age_high, pregnant, low, high))
    return RangeTable(rows)


def _admission_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def latent_severities(cfg: SynthConfig) -> np.ndarray:
    """Recompute the latent severity of each admission (index-aligned with
    the generated cohort). This is the generator-side oracle for planted-
    signal checks; the severity never appears in the cohort itself."""
    out = np.empty(cfg.n_admissions)
    for i in range(cfg.n_admissions):
        out[i] = _admission_rng(cfg.seed, i).random()
    return out


def _draw_los(rng: np.random.Generator, e: float, s: float) -> float:
    m = LOS_MEAN_BASE + LOS_MEAN_SLOPE * e * s * s
    t = rng.beta(LOS_CONCENTRATION * m, LOS_CONCENTRATION * (1.0 - m))
    return 1.0 + 29.0 * max(float(t), 1e-12)


def _draw_history(rng: np.random.Generator, e: float, s: float) -> History:
    com = []
    for k in range(N_COMORBIDITY_SLOTS):
        p = 0.05 + 0.25 * e * s if k < 6 else 0.10
        com.append(bool(rng.random() < p))
    rx = [bool(rng.random() < 0.15) for _ in range(N_PRESCRIPTION_SLOTS)]
    if rng.random() < 0.25 + 0.35 * e * s:
        arrival = "ambulance"
    else:
        arrival = ARRIVAL_MODES[1:][int(rng.integers(0, 3))]
    hour = HOUR_BUCKETS[int(rng.integers(0, 4))]
    weekday = WEEKDAYS[int(rng.integers(0, 7))]
    season = SEASONS[int(rng.integers(0, 4))]
    urgency = min(0.55 * e * s + (1.0 - 0.55 * e) * rng.random(), 1.0 - 1e-9)
    triage = TRIAGE_LEVELS[4 - int(urgency * 5.0)]
    admission_type = ADMISSION_TYPES[int(rng.integers(0, 3))]
    return History(
        comorbidities=tuple(com), prescriptions=tuple(rx),
        arrival_mode=arrival, hour_bucket=hour, weekday=weekday,
        season=season, triage=triage, admission_type=admission_type,
    )


def _draw_value(rng: np.random.Generator, bounds: tuple[float, float], p_abnormal: float) -> float:
    low, high = bounds
    width = high - low
    if rng.random() < p_abnormal:
        magnitude = float(rng.uniform(0.02, 0.6)) * width
        if rng.random() < 0.5:
            return low - magnitude
        return high + magnitude
    return float(rng.uniform(low, high))


def _generate_admission(cfg: SynthConfig, ranges: RangeTable, index: int,
                        codes: dict[EventType, tuple[str, ...]]) -> Admission:
    rng = _admission_rng(cfg.seed, index)
    e = cfg.severity_effect
    s = rng.random()

    age = int(rng.integers(18, 101))
    u_sex = rng.random()
    sex = Sex.FEMALE if u_sex < 0.49 else (Sex.MALE if u_sex < 0.98 else Sex.UNKNOWN)
    pregnant = bool(sex == Sex.FEMALE and 18 <= age <= 45 and rng.random() < 0.08)
    demo = Demographics(age_years=age, sex=sex, pregnant=pregnant)

    history = _draw_history(rng, e, s)

    lam = cfg.mean_events_per_admission * (EVENT_RATE_BASE + EVENT_RATE_SLOPE * e * s)
    n_events = int(rng.poisson(lam))

    timestamps = np.sort(EVENT_SPAN_HOURS * rng.beta(1.0, 2.0, size=n_events))
    type_draws = rng.random(n_events)
    p_abn = min(ABNORMAL_P_BASE + ABNORMAL_P_SLOPE * e * s, 0.9)

    etypes = []
    for u in type_draws:
        for etype, cum in zip(EVENT_TYPES, EVENT_TYPE_CUMPROBS):
            if u < cum:
                etypes.append(etype)
                break

    # chunk a fraction of consecutive lab draws onto the same timestamp
    for i in range(1, n_events):
        if etypes[i] == EventType.LAB and etypes[i - 1] == EventType.LAB:
            if rng.random() < cfg.co_timestamp_frac:
                timestamps[i] = timestamps[i - 1]

    event_list = []
    for i in range(n_events):
        etype = etypes[i]
        vocab = codes[etype]
        code = vocab[int(rng.integers(0, len(vocab)))]
        value = None
        if etype in (EventType.LAB, EventType.VITAL):
            bounds = ranges.lookup(code, demo)
            if bounds is None:
                raise ValidationError(f"no reference range for {code} / {demo}")
            value = _draw_value(rng, bounds, p_abn)
        event_list.append(MedicalEvent(
            event_type=etype, code=code, value=value,
            timestamp_hours=float(timestamps[i]),
        ))

    los = _draw_los(rng, e, s)
    return Admission(
        admission_id=f"A{index:06d}",
        demographics=demo,
        history=history,
        events=tuple(event_list),
        los_days=los,
    )


def generate_cohort(cfg: SynthConfig) -> tuple[Cohort, RangeTable]:
    """Generate a cohort and its reference-range table.

    Deterministic given the config: the same config always produces the
    same admissions byte for byte.
    """
    ranges = generate_range_table(cfg)
    codes = {
        EventType.LAB: lab_codes(cfg),
        EventType.VITAL: vital_codes(cfg),
        EventType.MEDICATION: med_codes(cfg),
        EventType.PROCEDURE: proc_codes(cfg),
    }
    admissions = tuple(
        _generate_admission(cfg, ranges, i, codes) for i in range(cfg.n_admissions)
    )
    return Cohort(admissions=admissions, seed=cfg.seed), ranges


# --- flat key-value config file ------------------------------------------

def save_synth_config(cfg: SynthConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for field in (
            "n_admissions", "seed", "n_lab_codes", "n_vital_codes",
            "n_med_codes", "n_proc_codes", "mean_events_per_admission",
            "severity_effect", "co_timestamp_frac",
        ):
            fh.write(f"{field} = {getattr(cfg, field)!r}\n")


def load_synth_config(path) -> SynthConfig:
    values: dict[str, object] = {}
    int_fields = {"n_admissions", "seed", "n_lab_codes", "n_vital_codes", "n_med_codes", "n_proc_codes"}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"bad config line {lineno}: {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            values[key] = int(raw) if key in int_fields else float(raw)
    return SynthConfig(**values)
