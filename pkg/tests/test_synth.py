import numpy as np
import pytest

from losformer.events import EventType, MEASUREMENT_TYPES, Sex, ValidationError, label_binary
from losformer.synth import (
    RangeRow,
    RangeTable,
    SynthConfig,
    generate_cohort,
    generate_range_table,
    latent_severities,
    load_synth_config,
    save_synth_config,
)


def full_rows(code="x", low=1.0, high=2.0):
    rows = []
    for sex, pregnant in ((Sex.FEMALE, False), (Sex.FEMALE, True), (Sex.MALE, False), (Sex.UNKNOWN, False)):
        rows.append(RangeRow(code, sex, 0, 121, pregnant, low, high))
    return rows


class TestRangeTable:
    def test_lookup_by_age_band(self):
        rows = [
            RangeRow("x", Sex.MALE, 0, 18, False, 1.0, 2.0),
            RangeRow("x", Sex.MALE, 18, 121, False, 3.0, 4.0),
        ]
        table = RangeTable(rows)
        from losformer.events import Demographics
        assert table.lookup("x", Demographics(17, Sex.MALE, False)) == (1.0, 2.0)
        assert table.lookup("x", Demographics(18, Sex.MALE, False)) == (3.0, 4.0)
        assert table.lookup("x", Demographics(120, Sex.MALE, False)) == (3.0, 4.0)
        assert table.lookup("x", Demographics(31, Sex.FEMALE, False)) is None
        assert table.lookup("y", Demographics(31, Sex.MALE, False)) is None

    def test_overlap_rejected(self):
        rows = [
            RangeRow("x", Sex.MALE, 0, 40, False, 1.0, 2.0),
            RangeRow("x", Sex.MALE, 39, 121, False, 1.0, 2.0),
        ]
        with pytest.raises(ValidationError, match="overlap"):
            RangeTable(rows)

    def test_gap_rejected(self):
        rows = [
            RangeRow("x", Sex.MALE, 0, 40, False, 1.0, 2.0),
            RangeRow("x", Sex.MALE, 41, 121, False, 1.0, 2.0),
        ]
        with pytest.raises(ValidationError, match="gap"):
            RangeTable(rows)

    def test_must_start_at_zero(self):
        with pytest.raises(ValidationError):
            RangeTable([RangeRow("x", Sex.MALE, 1, 121, False, 1.0, 2.0)])

    def test_must_cover_max_age(self):
        with pytest.raises(ValidationError):
            RangeTable([RangeRow("x", Sex.MALE, 0, 100, False, 1.0, 2.0)])

    def test_low_below_high(self):
        with pytest.raises(ValidationError):
            RangeTable([RangeRow("x", Sex.MALE, 0, 121, False, 2.0, 2.0)])

    def test_round_trip(self, tmp_path):
        table = RangeTable(full_rows(low=36.25, high=48.125))
        path = tmp_path / "ranges.csv"
        table.save(path)
        loaded = RangeTable.load(path)
        assert loaded.rows() == table.rows()

    def test_bad_header(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n")
        with pytest.raises(ValidationError):
            RangeTable.load(path)


class TestGenerateRangeTable:
    def test_albumin_adult_male_row_pinned(self):
        from losformer.events import Demographics
        table = generate_range_table(SynthConfig(n_admissions=1, seed=3))
        assert table.lookup("albumin", Demographics(31, Sex.MALE, False)) == (36.0, 48.0)

    def test_every_code_covered_for_every_demo(self):
        from losformer.events import Demographics
        cfg = SynthConfig(n_admissions=1, seed=0, n_lab_codes=5, n_vital_codes=3)
        table = generate_range_table(cfg)
        demos = [
            Demographics(0, Sex.FEMALE, False),
            Demographics(25, Sex.FEMALE, True),
            Demographics(64, Sex.MALE, False),
            Demographics(120, Sex.UNKNOWN, False),
        ]
        for code in table.codes():
            for demo in demos:
                low, high = table.lookup(code, demo)
                assert low < high

    def test_deterministic(self):
        cfg = SynthConfig(n_admissions=1, seed=11)
        assert generate_range_table(cfg).rows() == generate_range_table(cfg).rows()


class TestGenerateCohort:
    def test_deterministic(self):
        cfg = SynthConfig(n_admissions=30, seed=4)
        a, _ = generate_cohort(cfg)
        b, _ = generate_cohort(cfg)
        assert a.admissions == b.admissions

    def test_shape_and_ids(self):
        cohort, _ = generate_cohort(SynthConfig(n_admissions=25, seed=1))
        assert len(cohort) == 25
        assert cohort.admissions[7].admission_id == "A000007"
        ids = {a.admission_id for a in cohort.admissions}
        assert len(ids) == 25

    def test_event_invariants(self):
        cohort, _ = generate_cohort(SynthConfig(n_admissions=50, seed=2))
        for adm in cohort.admissions:
            for ev in adm.events:
                assert 0.0 <= ev.timestamp_hours <= 36.0
                assert (ev.value is not None) == (ev.event_type in MEASUREMENT_TYPES)
            ts = [e.timestamp_hours for e in adm.events]
            assert ts == sorted(ts)
            assert 1.0 < adm.los_days <= 30.0

    def test_latent_severities_deterministic_and_bounded(self):
        cfg = SynthConfig(n_admissions=40, seed=6)
        s1, s2 = latent_severities(cfg), latent_severities(cfg)
        np.testing.assert_array_equal(s1, s2)
        assert s1.shape == (40,)
        assert np.all((s1 >= 0) & (s1 < 1))

    def test_severity_orders_los(self):
        # the planted signal: latent severity ranks the binary label well
        cfg = SynthConfig(n_admissions=2000, seed=7, severity_effect=1.0)
        cohort, _ = generate_cohort(cfg)
        sev = latent_severities(cfg)
        y = np.array([label_binary(a.los_days) for a in cohort.admissions])
        from losformer.metrics import auroc
        assert auroc(sev, y) > 0.85

    def test_zero_effect_removes_signal(self):
        cfg = SynthConfig(n_admissions=4000, seed=8, severity_effect=0.0)
        cohort, ranges = generate_cohort(cfg)
        y = np.array([label_binary(a.los_days) for a in cohort.admissions])
        abnormal = np.zeros(len(cohort))
        counts = np.zeros(len(cohort))
        for i, adm in enumerate(cohort.admissions):
            counts[i] = len(adm.events)
            for ev in adm.events:
                if ev.event_type in MEASUREMENT_TYPES:
                    low, high = ranges.lookup(ev.code, adm.demographics)
                    if not (low <= ev.value <= high):
                        abnormal[i] += 1
        assert abs(np.corrcoef(abnormal, y)[0, 1]) < 0.05
        assert abs(np.corrcoef(counts, y)[0, 1]) < 0.05

    def test_effect_raises_abnormal_rate(self):
        def abnormal_fraction(effect):
            cfg = SynthConfig(n_admissions=300, seed=12, severity_effect=effect)
            cohort, ranges = generate_cohort(cfg)
            outside = total = 0
            for adm in cohort.admissions:
                for ev in adm.events:
                    if ev.event_type in MEASUREMENT_TYPES:
                        low, high = ranges.lookup(ev.code, adm.demographics)
                        total += 1
                        outside += not (low <= ev.value <= high)
            return outside / total
        assert abnormal_fraction(1.0) > abnormal_fraction(0.0) + 0.1

    def test_co_timestamping_controlled_by_fraction(self):
        def shared_pairs(frac):
            cfg = SynthConfig(n_admissions=60, seed=13, co_timestamp_frac=frac)
            cohort, _ = generate_cohort(cfg)
            shared = 0
            for adm in cohort.admissions:
                for a, b in zip(adm.events, adm.events[1:]):
                    if (a.event_type == EventType.LAB and b.event_type == EventType.LAB
                            and a.timestamp_hours == b.timestamp_hours):
                        shared += 1
            return shared
        assert shared_pairs(0.0) == 0
        assert shared_pairs(0.9) > 50

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(n_admissions=0)
        with pytest.raises(ValidationError):
            SynthConfig(n_admissions=5, severity_effect=-0.5)
        with pytest.raises(ValidationError):
            SynthConfig(n_admissions=5, co_timestamp_frac=1.5)

    def test_config_round_trip(self, tmp_path):
        cfg = SynthConfig(n_admissions=77, seed=5, severity_effect=0.25,
                          mean_events_per_admission=12.5)
        path = tmp_path / "synth.cfg"
        save_synth_config(cfg, path)
        assert load_synth_config(path) == cfg
