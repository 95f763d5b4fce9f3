import sys

import numpy as np
import pytest

from agegender.audio import AudioBuffer, write_wav
from agegender.data import UtteranceRecord, write_manifest


def tone(freq, seconds, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wav_corpus(tmp_path):
    """Three short labelled wavs plus a manifest."""
    recs = []
    for i, (gender, age) in enumerate([("male", 25.0), ("female", 41.5), ("male", 67.0)]):
        path = tmp_path / f"utt{i}.wav"
        write_wav(path, AudioBuffer(tone(200 + 100 * i, 1.0, amp=0.3), 16000))
        recs.append(UtteranceRecord(path.name, "test", f"s{i}", gender, age))
    write_manifest(tmp_path / "manifest.jsonl", recs)
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
