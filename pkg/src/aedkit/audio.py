"""Waveform I/O, resampling and log-mel feature extraction.

Features are a single-channel log-mel filterbank computed from a Hann-windowed
power spectrum. The STFT defaults (25 ms window, 10 ms hop, 80 mel bands at
16 kHz) are fixed in :class:`FeatureConfig` so that every run featurizes the
same way. No mean/variance normalization is applied to the output.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal


class AudioError(Exception):
    """Base class for audio-core failures."""


class WavReadError(AudioError):
    """The file could not be opened or read."""


class MalformedWavError(AudioError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedEncodingError(AudioError):
    """The WAV encoding is not PCM16 / float32 with 1-2 channels."""


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform. ``samples`` is a read-only float64 array."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise AudioError("clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioClip":
        return AudioClip(samples, self.sample_rate)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int | None = None
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be > 0")
        if self.window_samples < 1 or self.hop_samples < 1:
            raise ValueError("window and hop must cover at least one sample")
        if self.fft_size is not None and self.fft_size < self.window_samples:
            raise ValueError("fft_size must be >= window length in samples")
        if not 0 <= self.fmin < self.f_high <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.f_high}"
            )

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return int(self.fft_size)
        return 1 << (self.window_samples - 1).bit_length()

    @property
    def f_high(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def floor_value(self) -> float:
        """Log-energy assigned to silence, ``log(log_floor)``."""
        return math.log(self.log_floor)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_samples) // self.hop_samples


@dataclass(frozen=True, eq=False)
class MelSpec:
    """``values`` has shape (n_mels, n_frames)."""

    values: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"MelSpec values must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values) -> "MelSpec":
        return MelSpec(values, self.config)


# --------------------------------------------------------------------------
# WAV I/O

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def _read_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("malformed WAV: missing RIFF/WAVE header")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedWavError(f"malformed WAV: truncated {cid!r} chunk")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file, averaging stereo to mono.

    Integer samples are scaled by 1/32768.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WavReadError(f"cannot read {path}: {exc}") from exc

    chunks = _read_chunks(data)
    fmt = chunks.get(b"fmt ")
    if fmt is None or len(fmt) < 16:
        raise MalformedWavError("malformed WAV: missing or short fmt chunk")
    if b"data" not in chunks:
        raise MalformedWavError("malformed WAV: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])

    if channels not in (1, 2):
        raise UnsupportedEncodingError(f"{channels} channels (only mono/stereo supported)")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncodingError(f"format tag {tag} with {bits} bits per sample")
    if rate == 0 or block_align != channels * dtype.itemsize:
        raise MalformedWavError("malformed WAV: inconsistent fmt chunk")

    raw = chunks[b"data"]
    n_frames = len(raw) // block_align
    frames = np.frombuffer(raw[:n_frames * block_align], dtype=dtype)
    frames = frames.reshape(n_frames, channels).astype(np.float64) * scale
    return AudioClip(frames.mean(axis=1), rate)


def save_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono WAV. ``encoding`` is ``"pcm16"`` or ``"float32"``."""
    if encoding == "pcm16":
        payload = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _PCM, 16
    elif encoding == "float32":
        payload = clip.samples.astype("<f4")
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    body = payload.tobytes()
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    out = b"".join([
        b"RIFF", struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)), b"WAVE",
        b"fmt ", struct.pack("<I", len(fmt)), fmt,
        b"data", struct.pack("<I", len(body)), body,
    ])
    Path(path).write_bytes(out)


# --------------------------------------------------------------------------
# Sample-rate and length handling

def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion.

    Uses a polyphase FIR (scipy ``resample_poly``: Kaiser-windowed sinc,
    beta=5.0, half-length 10 zero crossings of the slower rate). Output length
    is ``ceil(len * target / source)``.
    """
    if target_rate <= 0:
        raise AudioError(f"target_rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return clip
    ratio = Fraction(target_rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(out, target_rate)


def resample_to_length(samples: np.ndarray, n: int) -> np.ndarray:
    """Band-limited (Fourier) resampling of a buffer to exactly ``n`` samples."""
    if len(samples) == n:
        return np.array(samples, dtype=np.float64)
    return signal.resample(samples, n)


def fix_length(clip: AudioClip, seconds: float) -> AudioClip:
    """Zero-pad or truncate to ``round(seconds * sample_rate)`` samples."""
    if seconds <= 0:
        raise AudioError("seconds must be positive")
    n = int(round(seconds * clip.sample_rate))
    if len(clip) == n:
        return clip
    if len(clip) > n:
        return clip.with_samples(clip.samples[:n])
    return clip.with_samples(np.concatenate([clip.samples, np.zeros(n - len(clip))]))


# --------------------------------------------------------------------------
# Mel features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_matrix(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filterbank of shape (n_mels, n_fft // 2 + 1).

    Band edges are spaced linearly in mel between ``fmin`` and ``fmax``;
    filters peak at 1.0 and are not area-normalized.
    """
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.f_high), cfg.n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (center - lo)
    falling = (hi - bin_hz) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise AudioError(
            f"n_mels={cfg.n_mels} too large for fft_size={cfg.n_fft}: "
            f"{empty.size} filters have empty support (first: {empty[0]})"
        )
    return weights


def power_frames(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Hann-windowed power spectra, shape (n_frames, n_fft // 2 + 1)."""
    win = cfg.window_samples
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::cfg.hop_samples]
    window = signal.get_window("hann", win)
    spectrum = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def log_mel(clip: AudioClip, cfg: FeatureConfig | None = None) -> MelSpec:
    cfg = cfg or FeatureConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(
            f"sample-rate mismatch: clip at {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    if len(clip) < cfg.window_samples:
        raise AudioError(
            f"clip of {len(clip)} samples is shorter than one window ({cfg.window_samples})"
        )
    energies = mel_matrix(cfg) @ power_frames(clip.samples, cfg).T
    return MelSpec(np.log(np.maximum(energies, cfg.log_floor)), cfg)
