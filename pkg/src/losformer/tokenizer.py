"""Turn windowed admissions into model-ready token sequences.

A sequence is [CLS], then a fixed 38-token history prefix, then one token
per event in time order. Measurement events (labs, vitals) carry a
reference-range suffix: ``albumin:H`` means the value sat above the
demographic-matched range, ``:L`` below, ``:N`` inside (boundaries count
as normal). Medications and procedures contribute their bare code.

Position ids encode time order rather than sequence order: [CLS] is 0,
history tokens occupy 1..38, the first event gets 39, and the position
advances only when the timestamp strictly increases, so events recorded
at the same instant share one position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .events import (
    COMORBIDITY_NAMES,
    MEASUREMENT_TYPES,
    PRESCRIPTION_GROUPS,
    Admission,
    CohortFormatError,
    Demographics,
    History,
    Sex,
    ValidationError,
    clip_los,
    label_binary,
    label_category,
    window_events,
)
from .synth import RangeTable

PAD_TOKEN = "[PAD]"
CLS_TOKEN = "[CLS]"
UNK_TOKEN = "[UNK]"
MASK_TOKEN = "[MASK]"
RESERVED_TOKENS = (PAD_TOKEN, CLS_TOKEN, UNK_TOKEN, MASK_TOKEN)

N_HISTORY_TOKENS = 38
MAX_SEQUENCE_LENGTH = 256
N_AGE_BUCKETS = 12

SEX_IDS = {Sex.FEMALE: 0, Sex.MALE: 1, Sex.UNKNOWN: 2}

# Measurements without a matching reference-range row fall back to the bare
# code token; this counter tracks how often that happened since the last
# reset so pipelines can surface data-coverage problems.
_missing_range_count = 0


def missing_range_warnings() -> int:
    return _missing_range_count


def reset_missing_range_warnings() -> None:
    global _missing_range_count
    _missing_range_count = 0


def bin_measurement(code: str, value: float, demo: Demographics, ranges: RangeTable) -> str:
    """Map a measurement to ``<code>:L``, ``<code>:N`` or ``<code>:H``
    against the demographic-matched reference range. Values exactly on a
    boundary are normal. With no matching range row the bare code is
    returned and the missing-range counter bumped."""
    global _missing_range_count
    bounds = ranges.lookup(code, demo)
    if bounds is None:
        _missing_range_count += 1
        return code
    low, high = bounds
    if value < low:
        return f"{code}:L"
    if value > high:
        return f"{code}:H"
    return f"{code}:N"


def build_history_tokens(h: History) -> list[str]:
    """Fixed-order 38-token prefix: 18 comorbidity flags, 14 prescription
    flags, then the six categorical admission attributes."""
    tokens = [
        f"cmb:{name}:{int(flag)}"
        for name, flag in zip(COMORBIDITY_NAMES, h.comorbidities)
    ]
    tokens += [
        f"rx:{group}:{int(flag)}"
        for group, flag in zip(PRESCRIPTION_GROUPS, h.prescriptions)
    ]
    tokens += [
        f"arr:{h.arrival_mode}",
        f"hr:{h.hour_bucket}",
        f"wd:{h.weekday}",
        f"season:{h.season}",
        f"triage:{h.triage}",
        f"adm:{h.admission_type}",
    ]
    assert len(tokens) == N_HISTORY_TOKENS
    return tokens


def assign_positions(timestamps) -> list[int]:
    """Position ids for [CLS] + history + events. The event portion advances
    only on a strict timestamp increase, so co-timestamped runs share one id."""
    positions = list(range(N_HISTORY_TOKENS + 1))
    prev_ts = None
    pos = N_HISTORY_TOKENS
    for ts in timestamps:
        if prev_ts is None or ts > prev_ts:
            pos += 1
        positions.append(pos)
        prev_ts = ts
    return positions


def age_bucket(age_years: int) -> int:
    return min(age_years // 10, N_AGE_BUCKETS - 1)


class Vocabulary:
    """Bijective token/id map with four fixed reserved entries at ids 0..3.

    Built from training-split token streams only; anything unseen at encode
    time maps to [UNK].
    """

    def __init__(self, tokens=()):
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        existing = self._token_to_id.get(token)
        if existing is not None:
            return existing
        idx = len(self._id_to_token)
        self._id_to_token.append(token)
        self._token_to_id[token] = idx
        return idx

    def encode(self, token: str) -> int:
        return self._token_to_id.get(token, self._token_to_id[UNK_TOKEN])

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_token):
            raise ValidationError(f"token id {token_id} outside vocabulary of size {len(self)}")
        return self._id_to_token[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __len__(self) -> int:
        return len(self._id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != RESERVED_TOKENS:
            raise CohortFormatError(f"vocabulary file {path} does not start with the reserved tokens")
        vocab = cls()
        for lineno, token in enumerate(lines[4:], start=5):
            if token in vocab:
                raise CohortFormatError(f"duplicate token {token!r}", line=lineno)
            vocab.add(token)
        return vocab


@dataclass
class TokenizedSequence:
    """Model-ready encoding of one admission.

    position_ids is non-decreasing, starts at 0 for [CLS], and repeats a
    value exactly where consecutive events shared a timestamp.
    """
    admission_id: str
    token_ids: list[int] = field(repr=False)
    position_ids: list[int] = field(repr=False)
    age_bucket: int
    sex_id: int
    label_binary: int
    label_category: int
    label_real: float

    def __post_init__(self):
        if len(self.token_ids) != len(self.position_ids):
            raise ValidationError(
                f"{self.admission_id}: {len(self.token_ids)} token ids vs "
                f"{len(self.position_ids)} position ids"
            )
        if not self.token_ids or self.token_ids[0] != 1:
            raise ValidationError(f"{self.admission_id}: sequence must start with [CLS] (id 1)")
        if self.position_ids[0] != 0:
            raise ValidationError(f"{self.admission_id}: [CLS] must sit at position 0")
        if not 0 <= self.age_bucket < N_AGE_BUCKETS:
            raise ValidationError(f"age bucket {self.age_bucket} outside 0..{N_AGE_BUCKETS - 1}")
        if self.sex_id not in (0, 1, 2):
            raise ValidationError(f"sex id {self.sex_id} outside {{0,1,2}}")
        for earlier, later in zip(self.position_ids, self.position_ids[1:]):
            if later < earlier:
                raise ValidationError(f"{self.admission_id}: position ids decrease")

    def __len__(self) -> int:
        return len(self.token_ids)


def admission_tokens(adm: Admission, ranges: RangeTable) -> tuple[list[str], list[int]]:
    """Token strings and position ids for an already-windowed admission."""
    tokens = [CLS_TOKEN] + build_history_tokens(adm.history)
    for ev in adm.events:
        if ev.event_type in MEASUREMENT_TYPES:
            tokens.append(bin_measurement(ev.code, ev.value, adm.demographics, ranges))
        else:
            tokens.append(ev.code)
    positions = assign_positions([ev.timestamp_hours for ev in adm.events])
    return tokens, positions


def build_sequence(adm: Admission, vocab: Vocabulary, ranges: RangeTable) -> TokenizedSequence:
    """Encode a windowed admission against a fixed vocabulary. Does not
    truncate; apply `truncate` (or use `encode_admission`) afterwards."""
    tokens, positions = admission_tokens(adm, ranges)
    return TokenizedSequence(
        admission_id=adm.admission_id,
        token_ids=[vocab.encode(t) for t in tokens],
        position_ids=positions,
        age_bucket=age_bucket(adm.demographics.age_years),
        sex_id=SEX_IDS[adm.demographics.sex],
        label_binary=label_binary(adm.los_days),
        label_category=label_category(adm.los_days),
        label_real=clip_los(adm.los_days),
    )


def truncate(seq: TokenizedSequence, max_len: int = MAX_SEQUENCE_LENGTH) -> TokenizedSequence:
    """Cap a sequence at max_len by keeping [CLS]+history plus the most
    recent events. Surviving tokens keep their original position ids."""
    if len(seq) <= max_len:
        return seq
    head = N_HISTORY_TOKENS + 1
    tail = max_len - head
    return TokenizedSequence(
        admission_id=seq.admission_id,
        token_ids=seq.token_ids[:head] + seq.token_ids[len(seq) - tail:],
        position_ids=seq.position_ids[:head] + seq.position_ids[len(seq) - tail:],
        age_bucket=seq.age_bucket,
        sex_id=seq.sex_id,
        label_binary=seq.label_binary,
        label_category=seq.label_category,
        label_real=seq.label_real,
    )


def encode_admission(adm: Admission, vocab: Vocabulary, ranges: RangeTable,
                     window_hours: float = 24.0,
                     max_len: int = MAX_SEQUENCE_LENGTH) -> TokenizedSequence:
    """Full pipeline for one admission: window, tokenize, encode, truncate."""
    return truncate(build_sequence(window_events(adm, window_hours), vocab, ranges), max_len)


def build_vocab(token_streams) -> Vocabulary:
    """Vocabulary over training-split token streams, ids by first occurrence.

    `token_streams` is an iterable of token-string lists (one per admission,
    in a deterministic order)."""
    vocab = Vocabulary()
    n_streams = 0
    for tokens in token_streams:
        n_streams += 1
        for token in tokens:
            if token not in RESERVED_TOKENS:
                vocab.add(token)
    if n_streams == 0:
        raise ValidationError("cannot build a vocabulary from an empty training split")
    return vocab


def build_vocab_from_cohort(train_admissions, ranges: RangeTable,
                            window_hours: float = 24.0) -> Vocabulary:
    return build_vocab(
        admission_tokens(window_events(adm, window_hours), ranges)[0]
        for adm in train_admissions
    )


# --- tokenized dataset persistence -----------------------------------------

DATASET_SCHEMA_VERSION = "1"


def save_dataset(sequences, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": DATASET_SCHEMA_VERSION}, separators=(",", ":")) + "\n")
        for seq in sequences:
            record = {
                "admission_id": seq.admission_id,
                "token_ids": seq.token_ids,
                "position_ids": seq.position_ids,
                "age_bucket": seq.age_bucket,
                "sex_id": seq.sex_id,
                "label_binary": seq.label_binary,
                "label_category": seq.label_category,
                "label_real": seq.label_real,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_dataset(path) -> list[TokenizedSequence]:
    sequences = []
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CohortFormatError(f"dataset file {path} is empty", line=1)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"bad dataset header: {exc}", line=1) from exc
        if not isinstance(header, dict) or "schema_version" not in header:
            raise CohortFormatError("dataset header missing schema_version", line=1)
        if header["schema_version"] != DATASET_SCHEMA_VERSION:
            raise CohortFormatError(
                f"unsupported dataset schema {header['schema_version']!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sequences.append(TokenizedSequence(
                    admission_id=rec["admission_id"],
                    token_ids=[int(t) for t in rec["token_ids"]],
                    position_ids=[int(p) for p in rec["position_ids"]],
                    age_bucket=int(rec["age_bucket"]),
                    sex_id=int(rec["sex_id"]),
                    label_binary=int(rec["label_binary"]),
                    label_category=int(rec["label_category"]),
                    label_real=float(rec["label_real"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as exc:
                raise CohortFormatError(f"bad dataset record: {exc}", line=lineno) from exc
    return sequences
