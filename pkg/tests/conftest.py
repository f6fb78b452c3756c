"""Shared builders for the test suite."""

from losformer.events import Admission, Demographics, History, Sex


def make_history(**overrides) -> History:
    base = dict(
        comorbidities=(False,) * 18,
        prescriptions=(False,) * 14,
        arrival_mode="walk_in",
        hour_bucket="6-11",
        weekday="mon",
        season="winter",
        triage="yellow",
        admission_type="medical",
    )
    base.update(overrides)
    return History(**base)


def make_admission(events=(), los=3.0, admission_id="A000001", age=40,
                   sex=Sex.MALE, history=None) -> Admission:
    return Admission(
        admission_id=admission_id,
        demographics=Demographics(age_years=age, sex=sex, pregnant=False),
        history=history or make_history(),
        events=tuple(events),
        los_days=los,
    )
