"""On-the-fly augmentation.

Label-preserving waveform transforms (gain, pitch, speed, noise, bandpass,
resampling round trip), spectrogram frame zeroing, union-label mixup, and
negative data augmentation (NDA) variants that turn a spectrogram into a
negative example with an all-zero target.

:func:`augment_pipeline` applies everything in one fixed order::

    mixup -> pitch -> stretch -> resample round trip -> bandpass -> gain
          -> noise -> fix length -> log-mel -> zero frames -> NDA

Each transform fires independently with its own probability; its parameters
are drawn uniformly from the configured range. Mixup and NDA are only legal in
multi-label mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .audio import (
    AudioClip,
    FeatureConfig,
    MelSpec,
    fix_length,
    log_mel,
    resample,
    resample_to_length,
)
from .rng import as_rng

SINGLE_LABEL = "single-label"
MULTI_LABEL = "multi-label"
MODES = (SINGLE_LABEL, MULTI_LABEL)
NDA_VARIANTS = ("freq_shuffle", "time_shuffle", "jigsaw", "cutout")


class AugmentConfigError(ValueError):
    """AugmentSpec is invalid, or invalid for the requested label mode."""


# --------------------------------------------------------------------------
# Examples and specs

@dataclass(frozen=True, eq=False)
class LabeledExample:
    """A clip or spectrogram with a multi-hot label vector.

    Negative examples (NDA output) always carry all-zero labels.
    """

    payload: AudioClip | MelSpec
    labels: np.ndarray
    is_negative: bool = False

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.float64).reshape(-1)
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise ValueError("labels must be multi-hot (entries 0.0 or 1.0)")
        if self.is_negative and labels.any():
            raise ValueError("negative examples must have all-zero labels")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def stage(self) -> str:
        return "waveform" if isinstance(self.payload, AudioClip) else "spectrogram"

    @classmethod
    def one_hot(cls, payload, index: int, n_classes: int) -> "LabeledExample":
        labels = np.zeros(n_classes)
        labels[index] = 1.0
        return cls(payload, labels)


@dataclass(frozen=True)
class RangeSpec:
    probability: float = 0.0
    low: float = 0.0
    high: float = 0.0


@dataclass(frozen=True)
class BandpassSpec:
    probability: float = 0.0
    low: tuple[float, float] = (50.0, 500.0)
    high: tuple[float, float] = (2000.0, 8000.0)


@dataclass(frozen=True)
class ResampleSpec:
    probability: float = 0.0
    rates: tuple[int, ...] = (8000, 22050, 32000)


@dataclass(frozen=True)
class MixupSpec:
    probability: float = 0.0
    ratio_low: float = 0.3
    ratio_high: float = 0.7


@dataclass(frozen=True)
class NdaSpec:
    probability: float = 0.0
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)  # order of NDA_VARIANTS
    jigsaw_grid: tuple[int, int] = (4, 4)
    cutout_max_area: float = 0.3


@dataclass(frozen=True)
class AugmentSpec:
    """Per-transform probabilities and parameter ranges.

    The default instance never alters anything. Use :meth:`default` for the
    stock probabilities.
    """

    gain_db: RangeSpec = RangeSpec(0.0, -6.0, 6.0)
    pitch_semitones: RangeSpec = RangeSpec(0.0, -2.0, 2.0)
    stretch_rate: RangeSpec = RangeSpec(0.0, 0.85, 1.15)
    noise_snr_db: RangeSpec = RangeSpec(0.0, 5.0, 30.0)
    bandpass: BandpassSpec = BandpassSpec()
    zero_frame_fraction: RangeSpec = RangeSpec(0.0, 0.0, 0.1)
    resample_roundtrip: ResampleSpec = ResampleSpec()
    mixup: MixupSpec = MixupSpec()
    nda: NdaSpec = NdaSpec()

    @classmethod
    def default(cls, mode: str = SINGLE_LABEL) -> "AugmentSpec":
        spec = cls(
            gain_db=RangeSpec(0.5, -6.0, 6.0),
            pitch_semitones=RangeSpec(0.3, -2.0, 2.0),
            stretch_rate=RangeSpec(0.3, 0.85, 1.15),
            noise_snr_db=RangeSpec(0.3, 5.0, 30.0),
            bandpass=BandpassSpec(0.2),
            zero_frame_fraction=RangeSpec(0.2, 0.0, 0.1),
            resample_roundtrip=ResampleSpec(0.2),
        )
        if mode == MULTI_LABEL:
            spec = replace(spec, mixup=MixupSpec(0.5), nda=NdaSpec(0.2))
        return spec

    def probabilities(self) -> dict[str, float]:
        return {
            "gain_db": self.gain_db.probability,
            "pitch_semitones": self.pitch_semitones.probability,
            "stretch_rate": self.stretch_rate.probability,
            "noise_snr_db": self.noise_snr_db.probability,
            "bandpass": self.bandpass.probability,
            "zero_frame_fraction": self.zero_frame_fraction.probability,
            "resample_roundtrip": self.resample_roundtrip.probability,
            "mixup": self.mixup.probability,
            "nda": self.nda.probability,
        }

    def is_identity(self) -> bool:
        return all(p == 0 for p in self.probabilities().values())

    def validate(self, mode: str | None = None) -> None:
        for name, p in self.probabilities().items():
            if not 0.0 <= p <= 1.0:
                raise AugmentConfigError(f"{name}: probability {p} outside [0, 1]")
        ranges = {
            "gain_db": (self.gain_db.low, self.gain_db.high),
            "pitch_semitones": (self.pitch_semitones.low, self.pitch_semitones.high),
            "stretch_rate": (self.stretch_rate.low, self.stretch_rate.high),
            "noise_snr_db": (self.noise_snr_db.low, self.noise_snr_db.high),
            "bandpass.low": self.bandpass.low,
            "bandpass.high": self.bandpass.high,
            "zero_frame_fraction": (self.zero_frame_fraction.low, self.zero_frame_fraction.high),
            "mixup.ratio": (self.mixup.ratio_low, self.mixup.ratio_high),
        }
        for name, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise AugmentConfigError(f"{name}: lower bound {lo} > upper bound {hi}")
        if self.pitch_semitones.probability and max(abs(self.pitch_semitones.low), abs(self.pitch_semitones.high)) > 12:
            raise AugmentConfigError("pitch_semitones must stay within [-12, 12]")
        if self.stretch_rate.probability and not (0.5 <= self.stretch_rate.low and self.stretch_rate.high <= 2.0):
            raise AugmentConfigError("stretch_rate must stay within [0.5, 2.0]")
        if not (0.0 <= self.zero_frame_fraction.low and self.zero_frame_fraction.high <= 1.0):
            raise AugmentConfigError("zero_frame_fraction must stay within [0, 1]")
        if not (0.0 < self.mixup.ratio_low and self.mixup.ratio_high < 1.0):
            raise AugmentConfigError("mixup ratio must stay within (0, 1)")
        if self.resample_roundtrip.probability and not self.resample_roundtrip.rates:
            raise AugmentConfigError("resample_roundtrip needs at least one rate")
        if len(self.nda.weights) != len(NDA_VARIANTS) or min(self.nda.weights) < 0 or sum(self.nda.weights) <= 0:
            raise AugmentConfigError(f"nda.weights needs {len(NDA_VARIANTS)} nonnegative entries with positive sum")
        if min(self.nda.jigsaw_grid) < 1:
            raise AugmentConfigError("nda.jigsaw_grid entries must be >= 1")
        if not 0.0 < self.nda.cutout_max_area <= 1.0:
            raise AugmentConfigError("nda.cutout_max_area must be in (0, 1]")
        if mode is not None:
            _check_mode(mode)
            if mode == SINGLE_LABEL and (self.mixup.probability > 0 or self.nda.probability > 0):
                raise AugmentConfigError(
                    "mixup and NDA require multi-label targets; set their probabilities to 0 in single-label mode"
                )


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise AugmentConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def _require_multi_label(mode: str, what: str) -> None:
    _check_mode(mode)
    if mode != MULTI_LABEL:
        raise AugmentConfigError(f"{what} is only available in multi-label mode")


# --------------------------------------------------------------------------
# Waveform transforms

def apply_gain(clip: AudioClip, db: float) -> AudioClip:
    if not math.isfinite(db):
        raise ValueError("gain must be finite")
    if db == 0:
        return clip
    return clip.with_samples(np.clip(clip.samples * 10.0 ** (db / 20.0), -1.0, 1.0))


def _stft(x, n_fft, hop):
    pad = n_fft // 2
    padded = np.pad(x, (pad, pad))
    if len(padded) < n_fft:
        padded = np.pad(padded, (0, n_fft - len(padded)))
    n_frames = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = signal.get_window("hann", n_fft)
    return np.fft.rfft(frames * window, axis=1)


def _istft(spec, n_fft, hop, length):
    window = signal.get_window("hann", n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (len(frames) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + n_fft] += frame
        norm[i * hop:i * hop + n_fft] += window ** 2
    out = out / np.where(norm > 1e-8, norm, 1.0)
    pad = n_fft // 2
    out = out[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def time_stretch(clip: AudioClip, rate: float, n_fft: int = 512, hop: int = 128) -> AudioClip:
    """Phase-vocoder speed change; output length is ``round(len / rate)``.

    Magnitudes are linearly interpolated between analysis frames and phases
    advance by the measured instantaneous frequency, so pitch is preserved.
    """
    if not 0.5 <= rate <= 2.0:
        raise ValueError(f"stretch rate {rate} outside [0.5, 2.0]")
    out_len = int(round(len(clip) / rate))
    if rate == 1.0:
        return clip
    stft = _stft(clip.samples, n_fft, hop)
    steps = np.arange(0, len(stft), rate)
    stft = np.vstack([stft, np.zeros((2, stft.shape[1]), dtype=stft.dtype)])
    idx = steps.astype(int)
    alpha = (steps - idx)[:, None]
    left, right = stft[idx], stft[idx + 1]
    mag = (1 - alpha) * np.abs(left) + alpha * np.abs(right)

    advance = 2 * np.pi * hop * np.arange(stft.shape[1]) / n_fft
    dphase = np.angle(right) - np.angle(left) - advance
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    phase = np.angle(stft[0]) + np.vstack([
        np.zeros((1, stft.shape[1])),
        np.cumsum(advance + dphase[:-1], axis=0),
    ])
    out = _istft(mag * np.exp(1j * phase), n_fft, hop, out_len)
    return clip.with_samples(out)


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Shift pitch by ``2 ** (semitones / 12)`` keeping the duration.

    Stretches time by the pitch factor, then resamples back to the original
    length.
    """
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to +-12 semitones")
    if semitones == 0:
        return clip
    factor = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(clip, 1.0 / factor)
    return clip.with_samples(resample_to_length(stretched.samples, len(clip)))


def add_noise(clip: AudioClip, snr_db: float, rng) -> AudioClip:
    """Add white Gaussian noise at the requested SNR, then clamp to [-1, 1].

    The noise draw is rescaled to the exact target power so the SNR before
    clamping is exact.
    """
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite; disable noise with probability 0 instead")
    power = float(np.mean(clip.samples ** 2))
    if power == 0.0:
        raise ValueError("SNR is undefined for a zero-energy clip")
    noise = as_rng(rng).standard_normal(len(clip))
    noise *= math.sqrt(power / 10.0 ** (snr_db / 10.0) / np.mean(noise ** 2))
    return clip.with_samples(np.clip(clip.samples + noise, -1.0, 1.0))


def bandpass(clip: AudioClip, low: float, high: float, order: int = 4) -> AudioClip:
    """Zero-phase Butterworth bandpass (``order`` per edge, run forward-backward)."""
    nyquist = clip.sample_rate / 2
    if not 0 < low < high < nyquist:
        raise ValueError(f"invalid band [{low}, {high}] for sample rate {clip.sample_rate}")
    sos = signal.butter(order, [low, high], btype="bandpass", output="sos", fs=clip.sample_rate)
    return clip.with_samples(signal.sosfiltfilt(sos, clip.samples))


def resample_roundtrip(clip: AudioClip, rate: int) -> AudioClip:
    """Resample to ``rate`` and back, keeping the original sample count."""
    back = resample(resample(clip, rate), clip.sample_rate)
    n = len(clip)
    out = back.samples[:n]
    if len(out) < n:
        out = np.pad(out, (0, n - len(out)))
    return clip.with_samples(out)


def mixup(a: LabeledExample, b: LabeledExample, ratio: float, mode: str = MULTI_LABEL) -> LabeledExample:
    """Blend two waveforms; the result is positive for every class of either input."""
    _require_multi_label(mode, "mixup")
    if not 0.0 < ratio < 1.0:
        raise ValueError("mixup ratio must lie in (0, 1)")
    ca, cb = a.payload, b.payload
    if not (isinstance(ca, AudioClip) and isinstance(cb, AudioClip)):
        raise ValueError("mixup operates on waveforms")
    if ca.sample_rate != cb.sample_rate or len(ca) != len(cb):
        raise ValueError("mixup needs clips of equal length and sample rate")
    if a.labels.shape != b.labels.shape:
        raise ValueError("label vectors differ in length")
    samples = ratio * ca.samples + (1.0 - ratio) * cb.samples
    return LabeledExample(ca.with_samples(samples), np.maximum(a.labels, b.labels))


# --------------------------------------------------------------------------
# Spectrogram transforms

def zero_frames(spec: MelSpec, fraction: float, rng) -> MelSpec:
    """Floor ``round(fraction * n_frames)`` distinct, randomly chosen frames."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    count = int(round(fraction * spec.n_frames))
    if count == 0:
        return spec
    cols = as_rng(rng).choice(spec.n_frames, size=count, replace=False)
    values = spec.values.copy()
    values[:, cols] = spec.config.floor_value
    return spec.with_values(values)


def _jigsaw(values, grid, floor, rng):
    rows, cols = grid
    h, w = values.shape
    ch, cw = -(-h // rows), -(-w // cols)
    padded = np.full((ch * rows, cw * cols), floor)
    padded[:h, :w] = values
    cells = padded.reshape(rows, ch, cols, cw).transpose(0, 2, 1, 3).reshape(rows * cols, ch, cw)
    cells = cells[rng.permutation(rows * cols)]
    shuffled = cells.reshape(rows, cols, ch, cw).transpose(0, 2, 1, 3).reshape(rows * ch, cols * cw)
    return shuffled[:h, :w]


def _cutout(values, max_area, floor, rng):
    h, w = values.shape
    budget = max(1, int(math.floor(max_area * h * w)))
    rect_h = int(rng.integers(1, min(h, budget) + 1))
    rect_w = int(rng.integers(1, min(w, budget // rect_h) + 1))
    top = int(rng.integers(0, h - rect_h + 1))
    left = int(rng.integers(0, w - rect_w + 1))
    out = values.copy()
    out[top:top + rect_h, left:left + rect_w] = floor
    return out


def nda(
    spec: MelSpec,
    variant: str,
    rng,
    params: NdaSpec | None = None,
    n_classes: int = 1,
    mode: str = MULTI_LABEL,
) -> LabeledExample:
    """Destroy a spectrogram's structure and return it as a negative example.

    ``freq_shuffle`` permutes mel rows, ``time_shuffle`` permutes frames,
    ``jigsaw`` permutes grid cells (edge cells padded with the floor value,
    then cropped back), ``cutout`` floors one rectangle of at most
    ``cutout_max_area`` of the matrix.
    """
    _require_multi_label(mode, "NDA")
    params = params or NdaSpec()
    rng = as_rng(rng)
    floor = spec.config.floor_value
    values = spec.values
    if variant == "freq_shuffle":
        out = values[rng.permutation(values.shape[0])]
    elif variant == "time_shuffle":
        out = values[:, rng.permutation(values.shape[1])]
    elif variant == "jigsaw":
        out = _jigsaw(values, params.jigsaw_grid, floor, rng)
    elif variant == "cutout":
        out = _cutout(values, params.cutout_max_area, floor, rng)
    else:
        raise ValueError(f"unknown NDA variant {variant!r}; expected one of {NDA_VARIANTS}")
    return LabeledExample(spec.with_values(out), np.zeros(n_classes), is_negative=True)


# --------------------------------------------------------------------------
# Pipeline

def _fires(rng, probability: float) -> bool:
    # one draw per transform keeps the stream layout fixed
    return rng.random() < probability


def _prepare(clip: AudioClip, features: FeatureConfig, clip_seconds: float | None) -> AudioClip:
    if clip.sample_rate != features.sample_rate:
        clip = resample(clip, features.sample_rate)
    if clip_seconds is not None:
        clip = fix_length(clip, clip_seconds)
    return clip


def _to_length(clip: AudioClip, n: int) -> AudioClip:
    if len(clip) == n:
        return clip
    if len(clip) > n:
        return clip.with_samples(clip.samples[:n])
    return clip.with_samples(np.pad(clip.samples, (0, n - len(clip))))


@dataclass
class _Log:
    entries: list = field(default_factory=list)

    def add(self, transform, **params):
        self.entries.append({"transform": transform, **params})


def augment_waveform(
    ex: LabeledExample,
    spec: AugmentSpec,
    rng,
    mode: str,
    mix_partner: LabeledExample | None = None,
    features: FeatureConfig | None = None,
    clip_seconds: float | None = None,
    log: list | None = None,
) -> LabeledExample:
    """Waveform half of the pipeline: standardize rate/length, then mixup through noise."""
    spec.validate(mode)
    features = features or FeatureConfig()
    rng = as_rng(rng)
    record = _Log(log if log is not None else [])
    if not isinstance(ex.payload, AudioClip):
        raise ValueError("expected a waveform-stage example")

    clip = _prepare(ex.payload, features, clip_seconds)
    n = len(clip)
    current = LabeledExample(clip, ex.labels)

    if _fires(rng, spec.mixup.probability) and mix_partner is not None:
        ratio = float(rng.uniform(spec.mixup.ratio_low, spec.mixup.ratio_high))
        partner_clip = _to_length(_prepare(mix_partner.payload, features, clip_seconds), n)
        current = mixup(current, LabeledExample(partner_clip, mix_partner.labels), ratio, mode)
        record.add("mixup", ratio=ratio)
    clip = current.payload

    if _fires(rng, spec.pitch_semitones.probability):
        semitones = float(rng.uniform(spec.pitch_semitones.low, spec.pitch_semitones.high))
        clip = pitch_shift(clip, semitones)
        record.add("pitch_shift", semitones=semitones)
    if _fires(rng, spec.stretch_rate.probability):
        rate = float(rng.uniform(spec.stretch_rate.low, spec.stretch_rate.high))
        clip = time_stretch(clip, rate)
        record.add("time_stretch", rate=rate)
    if _fires(rng, spec.resample_roundtrip.probability):
        rate = int(spec.resample_roundtrip.rates[rng.integers(len(spec.resample_roundtrip.rates))])
        clip = resample_roundtrip(clip, rate)
        record.add("resample_roundtrip", rate=rate)
    if _fires(rng, spec.bandpass.probability):
        low = float(rng.uniform(*spec.bandpass.low))
        high = float(rng.uniform(*spec.bandpass.high))
        # keep the upper edge strictly below Nyquist
        high = min(high, 0.49 * clip.sample_rate)
        clip = bandpass(clip, low, high)
        record.add("bandpass", low=low, high=high)
    if _fires(rng, spec.gain_db.probability):
        db = float(rng.uniform(spec.gain_db.low, spec.gain_db.high))
        clip = apply_gain(clip, db)
        record.add("gain", db=db)
    if _fires(rng, spec.noise_snr_db.probability):
        snr = float(rng.uniform(spec.noise_snr_db.low, spec.noise_snr_db.high))
        if np.any(clip.samples):
            clip = add_noise(clip, snr, rng)
            record.add("noise", snr_db=snr)
    return LabeledExample(_to_length(clip, n), current.labels)


def augment_spectrogram(
    ex: LabeledExample,
    spec: AugmentSpec,
    rng,
    mode: str,
    log: list | None = None,
) -> LabeledExample:
    """Spectrogram half of the pipeline: frame zeroing, then NDA."""
    spec.validate(mode)
    rng = as_rng(rng)
    record = _Log(log if log is not None else [])
    mel = ex.payload
    if _fires(rng, spec.zero_frame_fraction.probability):
        fraction = float(rng.uniform(spec.zero_frame_fraction.low, spec.zero_frame_fraction.high))
        mel = zero_frames(mel, fraction, rng)
        record.add("zero_frames", fraction=fraction)
    if _fires(rng, spec.nda.probability):
        weights = np.asarray(spec.nda.weights, dtype=np.float64)
        variant = NDA_VARIANTS[int(rng.choice(len(NDA_VARIANTS), p=weights / weights.sum()))]
        record.add("nda", variant=variant)
        return nda(mel, variant, rng, spec.nda, n_classes=len(ex.labels), mode=mode)
    return LabeledExample(mel, ex.labels)


def augment_pipeline(
    ex: LabeledExample,
    spec: AugmentSpec,
    rng,
    mode: str,
    mix_partner: LabeledExample | None = None,
    features: FeatureConfig | None = None,
    clip_seconds: float | None = None,
    log: list | None = None,
) -> LabeledExample:
    """Run one waveform example through the full augmentation chain.

    Returns a spectrogram-stage example. Fired transforms and their drawn
    parameters are appended to ``log`` when a list is given.
    """
    features = features or FeatureConfig()
    rng = as_rng(rng)
    wave = augment_waveform(ex, spec, rng, mode, mix_partner, features, clip_seconds, log)
    mel = LabeledExample(log_mel(wave.payload, features), wave.labels)
    return augment_spectrogram(mel, spec, rng, mode, log)
