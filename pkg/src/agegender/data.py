"""Manifest loading, age-bin bookkeeping and mini-batch production."""

from __future__ import annotations

import bisect
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import audio
from .features import FeatureConfig, extract

log = logging.getLogger(__name__)

GENDERS = ("male", "female")
SPLITS = ("train", "valid", "test")
MANIFEST_KEYS = ("audio_path", "speaker_id", "gender", "age_years", "age_bin", "split")

SPKID_STAGE = "spkid_pretrain"


class ManifestError(ValueError):
    pass


class AgeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class AgeBinTable:
    boundaries: tuple[float, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90)

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if len(b) != 9:
            raise ValueError(f"an age-bin table needs 9 boundaries (8 bins), got {len(b)}")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError("age-bin boundaries must be strictly ascending")
        object.__setattr__(self, "boundaries", b)

    @property
    def midpoints(self) -> tuple[float, ...]:
        b = self.boundaries
        return tuple((lo + hi) / 2 for lo, hi in zip(b, b[1:]))

    def bin_of(self, age_years: float) -> int:
        b = self.boundaries
        if not b[0] <= age_years < b[-1]:
            raise AgeRangeError(f"age {age_years} is outside the bin table range [{b[0]}, {b[-1]})")
        return bisect.bisect_right(b, age_years) - 1

    def midpoint_age(self, age_bin: int) -> float:
        if not 0 <= age_bin < 8:
            raise AgeRangeError(f"age bin {age_bin} is out of range 0..7")
        return self.midpoints[age_bin]


DEFAULT_BINS = AgeBinTable()


def bin_of(age_years: float, table: AgeBinTable = DEFAULT_BINS) -> int:
    return table.bin_of(age_years)


def midpoint_age(age_bin: int, table: AgeBinTable = DEFAULT_BINS) -> float:
    return table.midpoint_age(age_bin)


@dataclass(frozen=True)
class UtteranceRecord:
    audio_path: str
    split: str
    speaker_id: Optional[str] = None
    gender: Optional[str] = None
    age_years: Optional[float] = None
    age_bin: Optional[int] = None

    @property
    def record_id(self) -> str:
        return self.audio_path

    def to_json(self) -> dict:
        # absent optionals are omitted, never written as null
        out = {"audio_path": self.audio_path}
        for key in ("speaker_id", "gender", "age_years", "age_bin"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out["split"] = self.split
        return out


def regression_target(record: UtteranceRecord, table: AgeBinTable = DEFAULT_BINS) -> float:
    """Exact age when known, otherwise the midpoint of the record's age bin."""
    if record.age_years is not None:
        return float(record.age_years)
    if record.age_bin is not None:
        return table.midpoint_age(record.age_bin)
    raise ManifestError(f"{record.record_id}: record has neither age_years nor age_bin")


def age_bin_target(record: UtteranceRecord, table: AgeBinTable = DEFAULT_BINS) -> int:
    if record.age_bin is not None:
        return record.age_bin
    if record.age_years is not None:
        return table.bin_of(record.age_years)
    raise ManifestError(f"{record.record_id}: record has neither age_years nor age_bin")


def _parse_record(obj, base: Path, table: AgeBinTable) -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    unknown = set(obj) - set(MANIFEST_KEYS)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    nulls = [k for k, v in obj.items() if v is None]
    if nulls:
        raise ValueError(f"null values for {nulls}; omit optional keys instead")
    for key in ("audio_path", "split"):
        if key not in obj:
            raise ValueError(f"missing required key {key!r}")
    if obj["split"] not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {obj['split']!r}")
    gender = obj.get("gender")
    if gender is not None and gender not in GENDERS:
        raise ValueError(f"gender must be one of {GENDERS}, got {gender!r}")
    age = obj.get("age_years")
    if age is not None:
        if isinstance(age, bool) or not isinstance(age, (int, float)) or not np.isfinite(age) or age < 0:
            raise ValueError(f"age_years must be a non-negative number, got {age!r}")
        age = float(age)
    age_bin = obj.get("age_bin")
    if age_bin is not None:
        if isinstance(age_bin, bool) or not isinstance(age_bin, int) or not 0 <= age_bin <= 7:
            raise ValueError(f"age_bin must be an integer in 0..7, got {age_bin!r}")
    if age is not None and age_bin is not None:
        try:
            expected = table.bin_of(age)
        except AgeRangeError:
            expected = None
        if expected != age_bin:
            raise ValueError(f"age_bin {age_bin} disagrees with age_years {age} (bin {expected})")
    path = Path(obj["audio_path"])
    if not path.is_absolute():
        path = base / path
    speaker = obj.get("speaker_id")
    return UtteranceRecord(str(path), obj["split"], None if speaker is None else str(speaker),
                           gender, age, age_bin)


def check_stage_requirements(record: UtteranceRecord, stage: str) -> None:
    if stage == SPKID_STAGE:
        if record.speaker_id is None:
            raise ManifestError(f"{record.record_id}: speaker-recognition records need speaker_id")
        return
    if record.gender is None:
        raise ManifestError(f"{record.record_id}: age/gender records need gender")
    if record.age_years is None and record.age_bin is None:
        raise ManifestError(f"{record.record_id}: age/gender records need age_years or age_bin")


def load_manifest(path, stage: Optional[str] = None,
                  table: AgeBinTable = DEFAULT_BINS) -> list[UtteranceRecord]:
    """Parse a JSON Lines manifest. Relative audio paths resolve against the
    manifest's directory. All bad lines are collected and reported together."""
    path = Path(path)
    base = path.parent
    records, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: unparseable JSON ({exc.msg})")
                continue
            try:
                rec = _parse_record(obj, base, table)
                if stage is not None:
                    check_stage_requirements(rec, stage)
            except (ValueError, ManifestError) as exc:
                rid = obj.get("audio_path", "?") if isinstance(obj, dict) else "?"
                problems.append(f"line {lineno} ({rid}): {exc}")
                continue
            records.append(rec)
    if problems:
        raise ManifestError(f"{path}: {len(problems)} invalid line(s):\n  " + "\n  ".join(problems))
    if not records:
        log.warning("manifest %s is empty", path)
    return records


def write_manifest(path, records: Sequence[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


@dataclass
class Batch:
    features: np.ndarray  # B x T x F
    gender_targets: np.ndarray
    age_targets: np.ndarray
    age_bin_targets: np.ndarray
    speaker_targets: Optional[np.ndarray] = None
    record_ids: tuple[str, ...] = ()

    def __len__(self):
        return self.features.shape[0]


@dataclass
class SkipCounter:
    count: int = 0


def featurize_record(record: UtteranceRecord, feature_config: FeatureConfig, *,
                     mode: str = "random", crop_seconds: float = 5.0, seed=0,
                     vad_threshold_db: float = 40.0) -> np.ndarray:
    buf = audio.decode_wav(record.audio_path)
    buf = audio.preprocess(buf, crop_seconds=crop_seconds, seed=seed, mode=mode,
                           vad_threshold_db=vad_threshold_db)
    return extract(buf, feature_config).values.astype(np.float32)


def make_batches(records: Sequence[UtteranceRecord], batch_size: int, seed: int, *,
                 feature_config: FeatureConfig, epoch: int = 0, crop_seconds: float = 5.0,
                 speaker_index: Optional[dict] = None, table: AgeBinTable = DEFAULT_BINS,
                 threads: int = 1, skipped: Optional[SkipCounter] = None,
                 vad_threshold_db: float = 40.0, stream: int = 0) -> Iterator[Batch]:
    """Shuffle under ``(seed, stream, epoch)`` and yield fixed-length-crop
    batches.

    The crop for record ``i`` (manifest order) is seeded by
    ``(seed, stream, epoch, i)``, so it is independent of shuffling and
    prefetching. ``stream`` separates e.g. training from validation draws.
    Undecodable records are skipped and counted in ``skipped``.
    """
    if not records:
        raise ValueError("cannot batch an empty record list")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng([seed, stream, epoch]).permutation(len(records))

    def load(i):
        rec = records[i]
        try:
            feats = featurize_record(rec, feature_config, mode="random", crop_seconds=crop_seconds,
                                     seed=[seed, stream, epoch, int(i)], vad_threshold_db=vad_threshold_db)
        except (audio.AudioError, OSError) as exc:
            log.warning("skipping %s: %s", rec.record_id, exc)
            return None
        return feats

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loaded = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            keep = [(i, f) for i, f in zip(idx, loaded) if f is not None]
            if skipped is not None:
                skipped.count += len(idx) - len(keep)
            if not keep:
                continue
            yield _collate([records[i] for i, _ in keep], [f for _, f in keep], table, speaker_index)
    finally:
        if pool:
            pool.shutdown()


def _collate(recs, feats, table, speaker_index) -> Batch:
    n = len(recs)
    gender = np.zeros(n, dtype=np.float32)
    age = np.zeros(n, dtype=np.float32)
    age_bin = np.zeros(n, dtype=np.int64)
    for j, rec in enumerate(recs):
        if rec.gender is not None:
            gender[j] = 1.0 if rec.gender == "male" else 0.0
        if rec.age_years is not None or rec.age_bin is not None:
            age[j] = regression_target(rec, table)
            age_bin[j] = age_bin_target(rec, table)
    speakers = None
    if speaker_index is not None:
        speakers = np.array([speaker_index[r.speaker_id] for r in recs], dtype=np.int64)
    return Batch(np.stack(feats), gender, age, age_bin, speakers, tuple(r.record_id for r in recs))
