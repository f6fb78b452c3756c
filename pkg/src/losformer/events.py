"""Domain types for admissions and their medical events, plus label and
dataset-preparation operations (stay clipping, observation windowing,
train/valid/test splitting, cohort persistence).

All types are immutable value objects; every operation here is a pure
function, so everything in this module is safe to call from multiple
threads.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

SCHEMA_VERSION = "1"

LOS_CLIP_DAYS = 30.0
OBSERVATION_WINDOW_HOURS = 24.0
MAX_AGE_YEARS = 120

N_COMORBIDITY_SLOTS = 18
N_PRESCRIPTION_SLOTS = 14

# Charlson-style comorbidity slot names, fixed order. The slot count is part
# of the history contract; the names are configurable decoration.
COMORBIDITY_NAMES = (
    "mi", "chf", "pvd", "cvd", "dementia", "copd", "rheumatic", "ulcer",
    "liver_mild", "diabetes", "diabetes_comp", "hemiplegia", "renal",
    "cancer", "liver_severe", "metastatic", "hiv", "lymphoma",
)

# ATC level-1 style prescription groups, fixed order.
PRESCRIPTION_GROUPS = (
    "A", "B", "C", "D", "G", "H", "J", "L", "M", "N", "P", "R", "S", "V",
)

ARRIVAL_MODES = ("ambulance", "walk_in", "referral", "transfer")
HOUR_BUCKETS = ("0-5", "6-11", "12-17", "18-23")
WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")
SEASONS = ("winter", "spring", "summer", "autumn")
TRIAGE_LEVELS = ("red", "orange", "yellow", "green", "blue")
ADMISSION_TYPES = ("medical", "surgical", "observation")

assert len(COMORBIDITY_NAMES) == N_COMORBIDITY_SLOTS
assert len(PRESCRIPTION_GROUPS) == N_PRESCRIPTION_SLOTS


class ValidationError(ValueError):
    """A domain invariant was violated while constructing or transforming
    a value."""


class CohortFormatError(ValueError):
    """A cohort file record could not be parsed; carries the offending line
    number (1-based) and field name."""

    def __init__(self, message: str, line: int = 0, field: str = ""):
        self.line = line
        self.field = field
        parts = []
        if line:
            parts.append(f"line {line}")
        if field:
            parts.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(parts)})" if parts else message)


class Sex(str, Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


class EventType(str, Enum):
    LAB = "lab"
    VITAL = "vital"
    MEDICATION = "medication"
    PROCEDURE = "procedure"


#: Event types that carry a numeric measurement value.
MEASUREMENT_TYPES = frozenset({EventType.LAB, EventType.VITAL})


@dataclass(frozen=True)
class Demographics:
    age_years: int
    sex: Sex
    pregnant: bool = False

    def __post_init__(self):
        if not 0 <= self.age_years <= MAX_AGE_YEARS:
            raise ValidationError(f"age_years must be in [0, {MAX_AGE_YEARS}], got {self.age_years}")
        if self.pregnant and self.sex != Sex.FEMALE:
            raise ValidationError("pregnant requires sex=female")


@dataclass(frozen=True)
class MedicalEvent:
    event_type: EventType
    code: str
    value: float | None
    timestamp_hours: float

    def __post_init__(self):
        has_value = self.value is not None
        if has_value != (self.event_type in MEASUREMENT_TYPES):
            raise ValidationError(
                f"value must be present iff event is a measurement; "
                f"got type={self.event_type.value} value={self.value!r}"
            )
        if has_value and not math.isfinite(self.value):
            raise ValidationError(f"measurement value must be finite, got {self.value!r}")
        if not math.isfinite(self.timestamp_hours) or self.timestamp_hours < 0:
            raise ValidationError(f"timestamp_hours must be finite and >= 0, got {self.timestamp_hours!r}")


@dataclass(frozen=True)
class History:
    """Pre-admission context: 18 comorbidity flags, 14 prescription-group
    flags, and the six arrival/time/triage categoricals. Tokenizes to
    exactly 38 tokens."""

    comorbidities: tuple[bool, ...]
    prescriptions: tuple[bool, ...]
    arrival_mode: str
    hour_bucket: str
    weekday: str
    season: str
    triage: str
    admission_type: str

    def __post_init__(self):
        if len(self.comorbidities) != N_COMORBIDITY_SLOTS:
            raise ValidationError(f"expected {N_COMORBIDITY_SLOTS} comorbidity slots, got {len(self.comorbidities)}")
        if len(self.prescriptions) != N_PRESCRIPTION_SLOTS:
            raise ValidationError(f"expected {N_PRESCRIPTION_SLOTS} prescription slots, got {len(self.prescriptions)}")
        for field, domain in (
            ("arrival_mode", ARRIVAL_MODES),
            ("hour_bucket", HOUR_BUCKETS),
            ("weekday", WEEKDAYS),
            ("season", SEASONS),
            ("triage", TRIAGE_LEVELS),
            ("admission_type", ADMISSION_TYPES),
        ):
            if getattr(self, field) not in domain:
                raise ValidationError(f"{field}={getattr(self, field)!r} not in {domain}")

    @classmethod
    def from_flags(
        cls,
        comorbidities: set[str] | frozenset[str] = frozenset(),
        prescriptions: set[str] | frozenset[str] = frozenset(),
        arrival_mode: str = "walk_in",
        hour_bucket: str = "12-17",
        weekday: str = "mon",
        season: str = "winter",
        triage: str = "green",
        admission_type: str = "medical",
    ) -> "History":
        """Build a History from the *names* of the active flags."""
        unknown = set(comorbidities) - set(COMORBIDITY_NAMES)
        if unknown:
            raise ValidationError(f"unknown comorbidity names: {sorted(unknown)}")
        unknown = set(prescriptions) - set(PRESCRIPTION_GROUPS)
        if unknown:
            raise ValidationError(f"unknown prescription groups: {sorted(unknown)}")
        return cls(
            comorbidities=tuple(name in comorbidities for name in COMORBIDITY_NAMES),
            prescriptions=tuple(group in prescriptions for group in PRESCRIPTION_GROUPS),
            arrival_mode=arrival_mode,
            hour_bucket=hour_bucket,
            weekday=weekday,
            season=season,
            triage=triage,
            admission_type=admission_type,
        )


@dataclass(frozen=True)
class Admission:
    admission_id: str
    demographics: Demographics
    history: History
    events: tuple[MedicalEvent, ...]
    los_days: float

    def __post_init__(self):
        if not (math.isfinite(self.los_days) and self.los_days > 1.0):
            raise ValidationError(f"los_days must be finite and > 1, got {self.los_days!r}")
        times = [e.timestamp_hours for e in self.events]
        for i in range(1, len(times)):
            if times[i] < times[i - 1]:
                raise ValidationError(
                    f"events must be sorted by timestamp: event {i} at {times[i]}h "
                    f"precedes event {i - 1} at {times[i - 1]}h"
                )


@dataclass(frozen=True)
class Cohort:
    admissions: tuple[Admission, ...]
    seed: int
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        ids = [a.admission_id for a in self.admissions]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ValidationError(f"duplicate admission_id {dup!r} in cohort")

    def __len__(self) -> int:
        return len(self.admissions)


def clip_los(los_days: float) -> float:
    """Clip a stay length to the 30-day planning horizon."""
    if not (isinstance(los_days, (int, float)) and math.isfinite(los_days) and los_days > 0):
        raise ValidationError(f"los_days must be finite and > 0, got {los_days!r}")
    return min(float(los_days), LOS_CLIP_DAYS)


def label_binary(los_days: float) -> int:
    """1 iff the clipped stay exceeds two days (strict)."""
    return 1 if clip_los(los_days) > 2.0 else 0


def label_category(los_days: float) -> int:
    """Three-way stay class: 0 for < 2 days, 1 for 2..7 days inclusive,
    2 for > 7 days (clipped)."""
    clipped = clip_los(los_days)
    if clipped < 2.0:
        return 0
    if clipped <= 7.0:
        return 1
    return 2


def window_events(adm: Admission, horizon_hours: float = OBSERVATION_WINDOW_HOURS) -> Admission:
    """Keep only the events observed within the first `horizon_hours` of
    the admission (inclusive). Order is preserved; idempotent."""
    if not (math.isfinite(horizon_hours) and horizon_hours > 0):
        raise ValidationError(f"horizon_hours must be > 0, got {horizon_hours!r}")
    kept = tuple(e for e in adm.events if e.timestamp_hours <= horizon_hours)
    if len(kept) == len(adm.events):
        return adm
    return dataclasses.replace(adm, events=kept)


def split_cohort(cohort: Cohort, seed: int) -> tuple[Cohort, Cohort, Cohort]:
    """Deterministic 80/10/10 partition into train/valid/test cohorts.

    Sizes are floor(0.8 n) / floor(0.1 n) / remainder; the same seed always
    yields the same partition and the three parts are disjoint with union
    equal to the input.
    """
    n = len(cohort)
    if n < 10:
        raise ValidationError(f"cohort too small to split 80/10/10: n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_valid = int(0.1 * n)
    idx_train = perm[:n_train]
    idx_valid = perm[n_train:n_train + n_valid]
    idx_test = perm[n_train + n_valid:]
    parts = tuple(
        Cohort(
            admissions=tuple(cohort.admissions[i] for i in sorted(idx)),
            seed=cohort.seed,
            schema_version=cohort.schema_version,
        )
        for idx in (idx_train, idx_valid, idx_test)
    )
    return parts


# --- persistence ---------------------------------------------------------
#
# Cohort file format: UTF-8 text, one JSON object per line. The first line
# is a header {"schema_version": ..., "seed": ...}; each subsequent line is
# one admission. Timestamps are fractional hours, LOS fractional days;
# floats survive the round trip exactly (shortest-repr JSON encoding).

def _admission_to_record(adm: Admission) -> dict:
    return {
        "admission_id": adm.admission_id,
        "demographics": {
            "age_years": adm.demographics.age_years,
            "sex": adm.demographics.sex.value,
            "pregnant": adm.demographics.pregnant,
        },
        "history": {
            "comorbidities": [int(b) for b in adm.history.comorbidities],
            "prescriptions": [int(b) for b in adm.history.prescriptions],
            "arrival_mode": adm.history.arrival_mode,
            "hour_bucket": adm.history.hour_bucket,
            "weekday": adm.history.weekday,
            "season": adm.history.season,
            "triage": adm.history.triage,
            "admission_type": adm.history.admission_type,
        },
        "events": [
            [e.event_type.value, e.code, e.value, e.timestamp_hours] for e in adm.events
        ],
        "los_days": adm.los_days,
    }


def _require(record: dict, field: str, line: int):
    if field not in record:
        raise CohortFormatError("missing required field", line=line, field=field)
    return record[field]


def _admission_from_record(record: dict, line: int) -> Admission:
    try:
        demo_rec = _require(record, "demographics", line)
        hist_rec = _require(record, "history", line)
        demo = Demographics(
            age_years=int(_require(demo_rec, "age_years", line)),
            sex=Sex(_require(demo_rec, "sex", line)),
            pregnant=bool(_require(demo_rec, "pregnant", line)),
        )
        history = History(
            comorbidities=tuple(bool(b) for b in _require(hist_rec, "comorbidities", line)),
            prescriptions=tuple(bool(b) for b in _require(hist_rec, "prescriptions", line)),
            arrival_mode=_require(hist_rec, "arrival_mode", line),
            hour_bucket=_require(hist_rec, "hour_bucket", line),
            weekday=_require(hist_rec, "weekday", line),
            season=_require(hist_rec, "season", line),
            triage=_require(hist_rec, "triage", line),
            admission_type=_require(hist_rec, "admission_type", line),
        )
        events = []
        for k, ev in enumerate(_require(record, "events", line)):
            if len(ev) != 4:
                raise CohortFormatError(f"event {k} must have 4 elements", line=line, field="events")
            etype, code, value, ts = ev
            events.append(MedicalEvent(
                event_type=EventType(etype),
                code=str(code),
                value=None if value is None else float(value),
                timestamp_hours=float(ts),
            ))
        return Admission(
            admission_id=str(_require(record, "admission_id", line)),
            demographics=demo,
            history=history,
            events=tuple(events),
            los_days=float(_require(record, "los_days", line)),
        )
    except CohortFormatError:
        raise
    except (ValidationError, ValueError, TypeError) as exc:
        raise CohortFormatError(str(exc), line=line) from exc


def save_cohort(cohort: Cohort, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": cohort.schema_version, "seed": cohort.seed}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for adm in cohort.admissions:
            fh.write(json.dumps(_admission_to_record(adm), separators=(",", ":")) + "\n")


def load_cohort(path) -> Cohort:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        warnings.warn(f"cohort file {path} is empty; loading an empty cohort")
        return Cohort(admissions=(), seed=0)
    try:
        header = json.loads(lines[0])
        schema_version = str(header["schema_version"])
        seed = int(header["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CohortFormatError(f"bad header: {exc}", line=1) from exc
    if schema_version != SCHEMA_VERSION:
        raise CohortFormatError(
            f"unsupported cohort schema version {schema_version!r}", line=1)
    admissions = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"invalid JSON: {exc.msg}", line=i) from exc
        admissions.append(_admission_from_record(record, line=i))
    return Cohort(admissions=tuple(admissions), seed=seed, schema_version=schema_version)
