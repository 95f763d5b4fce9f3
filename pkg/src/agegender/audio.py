"""Waveform preprocessing: decoding, resampling, energy VAD, loudness
normalisation and fixed-length cropping.

Every function is pure given its inputs (and seed); buffers are never
mutated in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

log = logging.getLogger(__name__)

TARGET_SR = 16000
TARGET_DBFS = -30.0

VAD_ALL_REJECTED = "vad_all_rejected"


class AudioError(ValueError):
    """Raised for undecodable or otherwise unusable audio."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("audio contains NaN or Inf samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples, warnings=None) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate,
                           self.warnings if warnings is None else warnings)


@dataclass(frozen=True)
class VadDecision:
    frame_length: int
    frame_hop: int
    keep_mask: np.ndarray

    @property
    def all_rejected(self) -> bool:
        return not bool(self.keep_mask.any())


def decode_wav(path) -> AudioBuffer:
    """Read a PCM WAV file (16-bit int or 32-bit float) as mono in [-1, 1].

    Stereo input is mixed down by averaging channels.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError as exc:
        raise AudioError(f"{path}: cannot open ({exc.strerror})") from exc
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file (found header {head[:4]!r})")
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: unsupported WAV encoding ({exc})") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}; "
                         "expected 16-bit PCM or 32-bit float")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioBuffer(samples, int(sr))


def write_wav(path, buf: AudioBuffer) -> None:
    """Write a buffer as 16-bit PCM, clipping to full scale."""
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, buf.sample_rate, pcm)


def resample(buf: AudioBuffer, target_hz: int = TARGET_SR) -> AudioBuffer:
    if buf.sample_rate == target_hz:
        return buf
    if buf.sample_rate < target_hz:
        raise AudioError(f"upsampling {buf.sample_rate} Hz -> {target_hz} Hz is not supported")
    ratio = Fraction(target_hz, buf.sample_rate)
    out = sps.resample_poly(buf.samples, ratio.numerator, ratio.denominator,
                            window=("kaiser", 10.0))
    n_out = int(round(len(buf) * target_hz / buf.sample_rate))
    if out.shape[0] >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - out.shape[0]))
    return AudioBuffer(out, target_hz, buf.warnings)


def _frame_count(n: int, win: int, hop: int) -> int:
    if n < win:
        return 0
    return (n - win) // hop + 1


def vad_decision(buf: AudioBuffer, win_ms: float = 25.0, hop_ms: float = 10.0,
                 threshold_db: float = 40.0) -> VadDecision:
    """Frame-energy VAD: a frame is speech iff its energy in dB lies within
    ``threshold_db`` of the loudest frame."""
    win = int(round(buf.sample_rate * win_ms / 1000))
    hop = int(round(buf.sample_rate * hop_ms / 1000))
    n_frames = _frame_count(len(buf), win, hop)
    if n_frames == 0:
        return VadDecision(win, hop, np.ones(0, dtype=bool))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    energy = np.mean(buf.samples[idx] ** 2, axis=1)
    peak = energy.max()
    if peak <= 0.0:
        return VadDecision(win, hop, np.zeros(n_frames, dtype=bool))
    with np.errstate(divide="ignore"):
        energy_db = 10.0 * np.log10(energy)
    keep = energy_db > 10.0 * np.log10(peak) - threshold_db
    return VadDecision(win, hop, keep)


def apply_vad(buf: AudioBuffer, threshold_db: float = 40.0) -> AudioBuffer:
    """Drop non-speech frames and concatenate what remains.

    Frame ``i`` owns samples ``[i*hop, (i+1)*hop)``; the last complete frame
    also owns everything to the end of the buffer, so an all-speech mask
    reproduces the input exactly.
    """
    if len(buf) == 0:
        raise AudioError("cannot run VAD on an empty buffer")
    dec = vad_decision(buf, threshold_db=threshold_db)
    n_frames = dec.keep_mask.shape[0]
    if n_frames == 0:
        return buf
    if dec.all_rejected:
        log.warning("VAD rejected every frame; keeping the original buffer")
        return buf.with_samples(buf.samples, buf.warnings + (VAD_ALL_REJECTED,))
    owner = np.minimum(np.arange(len(buf)) // dec.frame_hop, n_frames - 1)
    return buf.with_samples(buf.samples[dec.keep_mask[owner]])


def rms_dbfs(buf: AudioBuffer) -> float:
    rms = float(np.sqrt(np.mean(buf.samples ** 2)))
    if rms == 0.0:
        return float("-inf")
    return 20.0 * np.log10(rms)


def normalize_dbfs(buf: AudioBuffer, target_dbfs: float = TARGET_DBFS) -> AudioBuffer:
    """Scale so that the RMS level (full scale 1.0) equals ``target_dbfs``."""
    rms = float(np.sqrt(np.mean(buf.samples ** 2))) if len(buf) else 0.0
    if rms == 0.0:
        raise AudioError("cannot normalise a silent buffer")
    gain = 10.0 ** (target_dbfs / 20.0) / rms
    return buf.with_samples(buf.samples * gain)


def crop(buf: AudioBuffer, seconds: float = 5.0, seed=0, mode: str = "random") -> AudioBuffer:
    """Fixed-length training crop.

    ``mode="full"`` returns the input untouched (evaluation path). In random
    mode a start offset is drawn uniformly; inputs shorter than the crop are
    tiled cyclically up to length. ``seed`` is anything accepted by
    :func:`numpy.random.default_rng`.
    """
    if mode == "full":
        return buf
    if mode != "random":
        raise ValueError(f"unknown crop mode {mode!r}")
    if len(buf) == 0:
        raise AudioError("cannot crop an empty buffer")
    n = int(round(seconds * buf.sample_rate))
    if len(buf) <= n:
        return buf.with_samples(np.resize(buf.samples, n))
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(buf) - n + 1))
    return buf.with_samples(buf.samples[start:start + n])


def preprocess(buf: AudioBuffer, *, crop_seconds: float = 5.0, seed=0,
               mode: str = "random", vad_threshold_db: float = 40.0) -> AudioBuffer:
    """Resample -> VAD -> crop -> -30 dBFS, the order used for training and
    evaluation alike (evaluation passes ``mode="full"``)."""
    buf = resample(buf, TARGET_SR)
    buf = apply_vad(buf, threshold_db=vad_threshold_db)
    buf = crop(buf, crop_seconds, seed=seed, mode=mode)
    return normalize_dbfs(buf)
