"""Log-mel and MFCC front end (25 ms Hamming / 10 ms hop, 40-8000 Hz)."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import AudioBuffer

LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"VPFM"
KIND_CODES = {"mel": 0, "mfcc": 1}


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    kind: str = "mfcc"
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    n_mfcc: int = 30
    f_low: float = 40.0
    f_high: float = 8000.0
    sample_rate: int = 16000
    fft_size: int = 512
    normalize_features: bool = True
    include_c0: bool = True  # keep cepstral coefficient 0; else keep 1..n_mfcc

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise FeatureError(f"feature kind must be one of {sorted(KIND_CODES)}, got {self.kind!r}")
        if self.f_high > self.sample_rate / 2:
            raise FeatureError("f_high exceeds the Nyquist frequency")
        if not self.f_low < self.f_high:
            raise FeatureError("f_low must be below f_high")
        if self.n_mfcc + (not self.include_c0) > self.n_mels:
            raise FeatureError("n_mfcc cannot exceed n_mels")
        if self.fft_size < self.win_length:
            raise FeatureError("fft_size is shorter than the analysis window")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def dim(self) -> int:
        return self.n_mfcc if self.kind == "mfcc" else self.n_mels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # T x F
    kind: str

    @property
    def shape(self):
        return self.values.shape


def hamming(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def frame_signal(buf: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """Return the T x win_length matrix of Hamming-windowed frames."""
    win, hop = config.win_length, config.hop_length
    x = buf.samples
    if x.shape[0] < win:
        raise FeatureError(f"buffer of {x.shape[0]} samples is shorter than one {win}-sample window")
    n_frames = (x.shape[0] - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    return frames * hamming(win)


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    if frames.shape[-1] > fft_size:
        raise FeatureError("frame length exceeds fft_size")
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edge_frequencies(config: FeatureConfig) -> np.ndarray:
    """The n_mels + 2 band edges in Hz; entries 1..n_mels are filter centres."""
    return _edges(config.n_mels, config.f_low, config.f_high)


def _edges(n_mels, f_low, f_high):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), n_mels + 2))
    # pin the outer edges so the mel round trip cannot leak past the band
    edges[0], edges[-1] = f_low, f_high
    return edges


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    return mel_edge_frequencies(config)[1:-1]


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """n_mels x (fft_size/2 + 1) triangular filters, unit peak height.

    Triangles are evaluated at the exact bin frequencies, so every filter
    has at least one non-zero bin even where the mel spacing is narrower
    than the FFT resolution.
    """
    return _filterbank_cached(config.n_mels, config.f_low, config.f_high,
                              config.sample_rate, config.fft_size).copy()


@lru_cache(maxsize=8)
def _filterbank_cached(n_mels, f_low, f_high, sample_rate, fft_size):
    edges = _edges(n_mels, f_low, f_high)
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def log_mel(power_spec: np.ndarray, filterbank: np.ndarray) -> FeatureMatrix:
    if power_spec.shape[-1] != filterbank.shape[1]:
        raise FeatureError(f"spectrum has {power_spec.shape[-1]} bins, filterbank expects {filterbank.shape[1]}")
    return FeatureMatrix(np.log(power_spec @ filterbank.T + LOG_FLOOR), "mel")


def mfcc(log_mel_matrix: FeatureMatrix, n_mfcc: int = 30, include_c0: bool = True) -> FeatureMatrix:
    """Orthonormal DCT-II over the mel axis, keeping coefficients 0..n_mfcc-1
    (or 1..n_mfcc without c0)."""
    values = log_mel_matrix.values if isinstance(log_mel_matrix, FeatureMatrix) else log_mel_matrix
    first = 0 if include_c0 else 1
    if first + n_mfcc > values.shape[-1]:
        raise FeatureError("n_mfcc exceeds the number of mel bands")
    coeffs = dct(values, type=2, axis=-1, norm="ortho")
    return FeatureMatrix(coeffs[..., first:first + n_mfcc], "mfcc")


def normalize_features(fm: FeatureMatrix, enabled: bool = True) -> FeatureMatrix:
    """Per-dimension mean subtraction over time."""
    if not enabled:
        return fm
    if fm.values.shape[0] < 2:
        raise FeatureError("mean normalisation needs at least two frames")
    return FeatureMatrix(fm.values - fm.values.mean(axis=0, keepdims=True), fm.kind)


def extract(buf: AudioBuffer, config: FeatureConfig) -> FeatureMatrix:
    """Full front end for an already preprocessed 16 kHz buffer."""
    if buf.sample_rate != config.sample_rate:
        raise FeatureError(f"expected {config.sample_rate} Hz audio, got {buf.sample_rate} Hz")
    frames = frame_signal(buf, config)
    fm = log_mel(power_spectrum(frames, config.fft_size), mel_filterbank(config))
    if config.kind == "mfcc":
        fm = mfcc(fm, config.n_mfcc, config.include_c0)
    return normalize_features(fm, config.normalize_features)


# On-disk layout: b"VPFM", u32 T, u32 F, u32 kind code, then T*F float32
# values in row-major order. All integers and floats little-endian.

_HEADER = struct.Struct("<4sIII")


def write_feature_file(path, fm: FeatureMatrix) -> None:
    values = np.ascontiguousarray(fm.values, dtype="<f4")
    t, f = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, t, f, KIND_CODES[fm.kind]))
        fh.write(values.tobytes())


def read_feature_file(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureError(f"{path}: truncated feature file")
    magic, t, f, code = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureError(f"{path}: bad magic {magic!r}")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if code not in kinds:
        raise FeatureError(f"{path}: unknown kind code {code}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * t * f:
        raise FeatureError(f"{path}: payload holds {len(body)} bytes, header implies {4 * t * f}")
    values = np.frombuffer(body, dtype="<f4").reshape(t, f)
    return FeatureMatrix(values.astype(np.float32), kinds[code])
