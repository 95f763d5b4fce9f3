"""Deterministic synthetic speech-like corpus for desk-scale runs.

Each synthetic speaker is a harmonic source whose fundamental depends on
gender (low for "male", high for "female") and whose formant-like spectral
peak moves with age. Utterances are padded with near-silence so VAD has
something to remove.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .audio import AudioBuffer, write_wav
from .data import DEFAULT_BINS, UtteranceRecord, write_manifest

SR = 16000


@dataclass(frozen=True)
class SynthSpeaker:
    speaker_id: str
    gender: str
    age: float


def synth_utterance(spk: SynthSpeaker, seconds: float, rng: np.random.Generator,
                    sr: int = SR, pad_seconds: float = 0.3) -> np.ndarray:
    t = np.arange(int(seconds * sr)) / sr
    f0 = (120.0 if spk.gender == "male" else 220.0) * (1.0 + 0.02 * rng.standard_normal())
    # formant-like peak sweeps 600 Hz -> 3000 Hz over ages 10..90
    formant = 600.0 + 30.0 * (spk.age - 10.0)
    tilt = 1.0 if spk.gender == "male" else 0.5
    x = np.zeros_like(t)
    for h in range(1, int(7000 / f0)):
        fh = h * f0
        amp = np.exp(-0.5 * ((fh - formant) / 250.0) ** 2) + tilt * 0.3 / h
        x += amp * np.sin(2 * np.pi * fh * t + rng.uniform(0, 2 * np.pi))
    # slow syllable-rate envelope
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    x = 0.3 * x / np.max(np.abs(x))
    x += 0.002 * rng.standard_normal(x.shape)
    pad = int(pad_seconds * sr)
    silence = lambda: 1e-4 * rng.standard_normal(pad)
    return np.concatenate([silence(), x, silence()])


def make_speakers(n: int, seed: int, age_range=(20.0, 79.0)) -> list[SynthSpeaker]:
    rng = np.random.default_rng([seed, 7])
    ages = np.linspace(age_range[0], age_range[1], n)
    rng.shuffle(ages)
    return [SynthSpeaker(f"spk{i:03d}", "male" if i % 2 == 0 else "female", round(float(a), 1))
            for i, a in enumerate(ages)]


def write_corpus(out_dir, speakers, utts_per_speaker: int, seed: int, seconds: float = 2.0,
                 splits=None) -> list[UtteranceRecord]:
    """Write wavs for every (speaker, utterance) and return records with
    exact ages. ``splits`` maps utterance index -> split (default train)."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    records = []
    for si, spk in enumerate(speakers):
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, si, u])
            x = synth_utterance(spk, seconds, rng)
            rel = Path("wav") / f"{spk.speaker_id}_{u:02d}.wav"
            write_wav(out_dir / rel, AudioBuffer(x, SR))
            split = (splits or {}).get(u, "train")
            records.append(UtteranceRecord(str(rel), split, spk.speaker_id, spk.gender, spk.age, None))
    return records


def make_desk_corpus(out_dir, seed: int = 0) -> Path:
    """Synthetic stand-ins for the three corpora of the transfer chain plus a
    run config ``desk.yaml``; returns the config path.

    - ``spkid.jsonl``: speaker identities only (speaker-recognition stage)
    - ``agegender.jsonl``: gender + age bin only (bin midpoint as target)
    - ``finetune.jsonl``: gender + exact age, train/valid splits
    - ``test.jsonl``: held-out speakers with exact ages
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spk_recs = write_corpus(out_dir, make_speakers(6, seed + 1), 3, seed + 1, splits={2: "valid"})
    write_manifest(out_dir / "spkid.jsonl",
                   [UtteranceRecord(r.audio_path, r.split, r.speaker_id) for r in spk_recs])

    cv = write_corpus(out_dir / "cv", make_speakers(8, seed + 2), 2, seed + 2, splits={1: "valid"})
    write_manifest(out_dir / "agegender.jsonl",
                   [UtteranceRecord("cv/" + r.audio_path, r.split, r.speaker_id, r.gender, None,
                                    DEFAULT_BINS.bin_of(r.age_years)) for r in cv])

    ft = write_corpus(out_dir / "ft", make_speakers(8, seed + 3), 2, seed + 3, splits={1: "valid"})
    write_manifest(out_dir / "finetune.jsonl",
                   [UtteranceRecord("ft/" + r.audio_path, *_tail(r)) for r in ft])

    test = write_corpus(out_dir / "test", make_speakers(4, seed + 4), 1, seed + 4, splits={0: "test"})
    write_manifest(out_dir / "test.jsonl",
                   [UtteranceRecord("test/" + r.audio_path, *_tail(r)) for r in test])

    config = {
        "seed": seed,
        "crop_seconds": 1.0,
        "features": {"kind": "mfcc"},
        "embedder": {"width": 16},
        "optimizer": {"lr": 0.01, "warmup_steps": 2, "batch_size": 4},
        "paths": {"checkpoint_dir": "checkpoints", "report_dir": "reports"},
        "stages": [
            {"name": "spkid_pretrain", "manifest": "spkid.jsonl", "epochs": 2, "dataset": "SynthSpk"},
            {"name": "agegender_pretrain", "manifest": "agegender.jsonl", "epochs": 2,
             "init_from": "spkid_pretrain", "dataset": "SynthCV"},
            {"name": "finetune", "manifest": "finetune.jsonl", "epochs": 2,
             "init_from": "agegender_pretrain", "dataset": "SynthTIMIT"},
        ],
    }
    path = out_dir / "desk.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


def _tail(r: UtteranceRecord):
    return r.split, r.speaker_id, r.gender, r.age_years, None
