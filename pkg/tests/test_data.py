import json
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agegender import data
from agegender.audio import AudioBuffer, write_wav
from agegender.data import AgeBinTable, ManifestError, UtteranceRecord
from agegender.features import FeatureConfig

from conftest import tone

BOUNDS = [10, 20, 30, 40, 50, 60, 70, 80, 90]


def scan_bin(age, bounds=BOUNDS):
    for i in range(8):
        if bounds[i] <= age < bounds[i + 1]:
            return i
    raise AssertionError("out of range")


def write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


class TestAgeBins:
    @pytest.mark.parametrize("age,expected", [(15, 0), (20, 1), (89.9, 7), (10, 0), (25, 1)])
    def test_bin_of(self, age, expected):
        assert data.bin_of(age) == expected == scan_bin(age)

    @pytest.mark.parametrize("age", [9.99, 90, 120, -1])
    def test_out_of_range(self, age):
        with pytest.raises(data.AgeRangeError, match=str(age)):
            data.bin_of(age)

    def test_midpoints(self):
        assert data.midpoint_age(0) == 15.0
        assert data.midpoint_age(7) == 85.0
        assert AgeBinTable().midpoints == (15, 25, 35, 45, 55, 65, 75, 85)
        with pytest.raises(data.AgeRangeError):
            data.midpoint_age(8)

    def test_table_validation(self):
        with pytest.raises(ValueError, match="9 boundaries"):
            AgeBinTable((0, 10, 20))
        with pytest.raises(ValueError, match="ascending"):
            AgeBinTable((0, 10, 20, 30, 30, 50, 60, 70, 80))

    def test_custom_table(self):
        t = AgeBinTable((0, 18, 25, 35, 45, 55, 65, 75, 100))
        assert t.bin_of(18) == 1
        assert t.midpoint_age(7) == 87.5

    @given(st.floats(10, 90, exclude_max=True))
    def test_bin_properties(self, age):
        b = data.bin_of(age)
        assert BOUNDS[b] <= age < BOUNDS[b + 1]
        assert abs(data.midpoint_age(b) - age) <= (BOUNDS[b + 1] - BOUNDS[b]) / 2


class TestRegressionTarget:
    def test_exact_age_passthrough(self):
        assert data.regression_target(UtteranceRecord("a.wav", "train", gender="male", age_years=37.2)) == 37.2

    def test_bin_midpoint(self):
        assert data.regression_target(UtteranceRecord("a.wav", "train", gender="male", age_bin=1)) == 25.0

    def test_neither(self):
        with pytest.raises(ManifestError):
            data.regression_target(UtteranceRecord("a.wav", "train", gender="male"))


class TestLoadManifest:
    def test_three_records(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [
            {"audio_path": "a.wav", "speaker_id": "s1", "gender": "male", "age_years": 30, "split": "train"},
            {"audio_path": "b.wav", "speaker_id": "s2", "gender": "female", "age_bin": 2, "split": "valid"},
            {"audio_path": "/abs/c.wav", "gender": "female", "age_years": 61.5, "age_bin": 5, "split": "test"},
        ])
        recs = data.load_manifest(p, stage="finetune")
        assert len(recs) == 3
        assert recs[0].audio_path == str(tmp_path / "a.wav")
        assert recs[2].audio_path == "/abs/c.wav"
        assert recs[1].age_bin == 2 and recs[1].age_years is None
        assert recs[0].age_years == 30.0

    def test_bin_disagreement(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [
            {"audio_path": "a.wav", "gender": "male", "age_years": 25, "age_bin": 3, "split": "train"}])
        with pytest.raises(ManifestError, match=r"line 1 \(a.wav\).*age_bin 3"):
            data.load_manifest(p)

    def test_empty_file_warns(self, tmp_path, caplog):
        (tmp_path / "e.jsonl").write_text("")
        with caplog.at_level(logging.WARNING):
            assert data.load_manifest(tmp_path / "e.jsonl") == []
        assert "empty" in caplog.text

    def test_reports_all_bad_lines(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [
            {"audio_path": "a.wav", "split": "train"},
            "{not json",
            {"audio_path": "b.wav", "split": "train", "gender": "other"},
            {"audio_path": "c.wav", "split": "train", "age_years": None},
        ])
        with pytest.raises(ManifestError) as exc:
            data.load_manifest(p)
        msg = str(exc.value)
        assert "3 invalid line(s)" in msg
        assert "line 2" in msg and "line 3" in msg and "line 4" in msg

    def test_stage_requirements(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [{"audio_path": "a.wav", "split": "train", "gender": "male"}])
        with pytest.raises(ManifestError, match="a.wav.*age_years or age_bin"):
            data.load_manifest(p, stage="finetune")
        with pytest.raises(ManifestError, match="speaker_id"):
            data.load_manifest(p, stage="spkid_pretrain")
        assert len(data.load_manifest(p)) == 1

    def test_unknown_key(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [{"audio_path": "a.wav", "split": "train", "accent": "x"}])
        with pytest.raises(ManifestError, match="accent"):
            data.load_manifest(p)

    def test_write_round_trip(self, tmp_path):
        recs = [UtteranceRecord(str(tmp_path / "a.wav"), "train", "s", "female", 33.0, 2),
                UtteranceRecord(str(tmp_path / "b.wav"), "test", None, "male", None, 6)]
        data.write_manifest(tmp_path / "m.jsonl", recs)
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert "null" not in lines[1]
        assert data.load_manifest(tmp_path / "m.jsonl") == recs


@pytest.fixture
def batch_records(tmp_path):
    recs = []
    for i in range(33):
        p = tmp_path / f"u{i}.wav"
        write_wav(p, AudioBuffer(tone(150 + 10 * i, 0.5, amp=0.3), 16000))
        recs.append(UtteranceRecord(str(p), "train", f"s{i % 3}", "male" if i % 2 else "female",
                                    20.0 + i, None))
    return recs


FC = FeatureConfig()


class TestMakeBatches:
    def test_partition(self, batch_records):
        sizes = [len(b) for b in data.make_batches(batch_records, 16, 0, feature_config=FC, crop_seconds=1.0)]
        assert sizes == [16, 16, 1]

    def test_batch_contents(self, batch_records):
        b = next(data.make_batches(batch_records, 4, 0, feature_config=FC, crop_seconds=1.0,
                                   speaker_index={"s0": 0, "s1": 1, "s2": 2}))
        assert b.features.shape == (4, 98, 30)
        assert b.features.dtype == np.float32
        by_id = {r.audio_path: r for r in batch_records}
        for j, rid in enumerate(b.record_ids):
            r = by_id[rid]
            assert b.gender_targets[j] == (1.0 if r.gender == "male" else 0.0)
            assert b.age_targets[j] == r.age_years
            assert b.age_bin_targets[j] == data.bin_of(r.age_years)
            assert b.speaker_targets[j] == int(r.speaker_id[1])

    def test_determinism(self, batch_records):
        def run(seed, epoch=0, threads=1):
            return list(data.make_batches(batch_records, 8, seed, feature_config=FC, crop_seconds=1.0,
                                          epoch=epoch, threads=threads))
        a, b = run(5), run(5)
        assert [x.record_ids for x in a] == [x.record_ids for x in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.age_targets, y.age_targets)
            np.testing.assert_array_equal(x.gender_targets, y.gender_targets)
            assert x.features.tobytes() == y.features.tobytes()
        assert [x.record_ids for x in run(6)] != [x.record_ids for x in a]
        assert [x.record_ids for x in run(5, epoch=1)] != [x.record_ids for x in a]

    def test_prefetch_keeps_order(self, batch_records):
        one = list(data.make_batches(batch_records, 8, 3, feature_config=FC, crop_seconds=1.0))
        many = list(data.make_batches(batch_records, 8, 3, feature_config=FC, crop_seconds=1.0, threads=4))
        assert [b.record_ids for b in one] == [b.record_ids for b in many]
        for x, y in zip(one, many):
            assert x.features.tobytes() == y.features.tobytes()

    def test_decode_failure_skipped(self, batch_records, tmp_path, caplog):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"garbage")
        recs = batch_records[:5] + [UtteranceRecord(str(bad), "train", "s0", "male", 30.0)]
        counter = data.SkipCounter()
        with caplog.at_level(logging.WARNING):
            batches = list(data.make_batches(recs, 4, 0, feature_config=FC, crop_seconds=1.0, skipped=counter))
        assert sum(len(b) for b in batches) == 5
        assert counter.count == 1
        assert "bad.wav" in caplog.text

    def test_empty(self):
        with pytest.raises(ValueError):
            next(data.make_batches([], 16, 0, feature_config=FC))
