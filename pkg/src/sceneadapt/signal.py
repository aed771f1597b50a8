"""Deterministic DSP primitives: framing, STFT/iSTFT, ERB filterbank
analysis, compressed band features, mask application and SNR-controlled
mixing.  All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import (
    ContractViolationError,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
    SynthesisError,
)

DEFAULT_SAMPLE_RATE = 16000
_SILENCE_FLOOR = 1e-12
# Worker count for batched FFTs; the per-row results do not depend on it.
FFT_WORKERS = min(4, __import__("os").cpu_count() or 1)


def rfft(x, axis=-1):
    return scipy.fft.rfft(x, axis=axis, workers=FFT_WORKERS)


def irfft(x, n, axis=-1):
    return scipy.fft.irfft(x, n=n, axis=axis, workers=FFT_WORKERS)


@dataclass
class Waveform:
    """A mono sampled signal with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInputError("waveform must be a non-empty 1-D signal")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """frames x bins complex grid plus the analysis geometry that made it."""

    data: np.ndarray
    frame_len: int
    hop: int
    window: str
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ShapeError("spectrogram must be 2-D (frames x bins)")
        if self.data.shape[1] != self.frame_len // 2 + 1:
            raise ShapeError(
                f"bins {self.data.shape[1]} != frame_len/2+1 = {self.frame_len // 2 + 1}")
        if self.hop > self.frame_len or self.hop <= 0:
            raise InvalidConfigError("hop must be in (0, frame_len]")
        if not np.all(np.isfinite(self.data.view(np.float64))):
            raise InvalidInputError("spectrogram contains non-finite entries")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]


@dataclass
class ErbFilterbank:
    """Triangular filters on the ERB-rate scale; rows are bands, columns bins."""

    weights: np.ndarray
    centers_hz: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def bands(self) -> int:
        return self.weights.shape[0]

    @property
    def bins(self) -> int:
        return self.weights.shape[1]


@dataclass
class ErbFeatures:
    """frames x bands compressed magnitudes, exponent in (0, 1]."""

    data: np.ndarray
    compression: float

    def __post_init__(self):
        if not (0.0 < self.compression <= 1.0):
            raise InvalidConfigError("compression exponent must lie in (0, 1]")


def make_window(kind: str, frame_len: int) -> np.ndarray:
    """Analysis/synthesis window.

    'sine' is the half-sample-offset square-root Hann, w[n] = sin(pi (n+0.5)/N).
    It satisfies w[n]^2 + w[n + N/2]^2 = 1, so analysis-times-synthesis
    overlap-add at 50% hop is exactly flat, and w[0] > 0 keeps the edge
    samples recoverable.  'rect' is the all-ones window.
    """
    if kind == "sine":
        n = np.arange(frame_len)
        return np.sin(np.pi * (n + 0.5) / frame_len)
    if kind == "rect":
        return np.ones(frame_len)
    raise InvalidConfigError(f"unknown window '{kind}'")


def frame_signals(block: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """(..., samples) -> (..., frames, frame_len) strided view of full frames."""
    view = np.lib.stride_tricks.sliding_window_view(block, frame_len, axis=-1)
    return view[..., ::hop, :]


def overlap_add(segments: np.ndarray, window: np.ndarray, hop: int):
    """Windowed overlap-add of (..., frames, frame_len) segments.

    Returns (signal, window_sum) where signal accumulates segment*window and
    window_sum accumulates window^2 for later normalization.
    """
    n_frames, frame_len = segments.shape[-2:]
    n = frame_len + (n_frames - 1) * hop
    out = np.zeros(segments.shape[:-2] + (n,))
    wsum = np.zeros(n)
    wsq = window * window
    for t in range(n_frames):
        out[..., t * hop: t * hop + frame_len] += segments[..., t, :] * window
        wsum[t * hop: t * hop + frame_len] += wsq
    return out, wsum


def stft(wave: Waveform, frame_len: int = 512, hop: int = 256,
         window: str = "sine") -> ComplexSpectrogram:
    """Short-time Fourier transform without centering.

    frames = 1 + floor((len - frame_len) / hop); the tail frame is
    zero-padded if it overruns the signal.  Raises when the input is
    shorter than one frame.
    """
    x = wave.samples
    if x.size < frame_len:
        raise InvalidInputError(
            f"wave of {x.size} samples is shorter than one frame ({frame_len})")
    if hop <= 0 or hop > frame_len:
        raise InvalidConfigError("hop must be in (0, frame_len]")
    w = make_window(window, frame_len)
    n_frames = 1 + (x.size - frame_len) // hop
    covered = frame_len + (n_frames - 1) * hop
    if covered > x.size:
        x = np.concatenate([x, np.zeros(covered - x.size)])
    frames = frame_signals(x, frame_len, hop)[:n_frames]
    spec = rfft(frames * w, axis=1)
    return ComplexSpectrogram(spec, frame_len, hop, window, wave.sample_rate)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Overlap-add synthesis with window-sum normalization.

    Output length is frame_len + (frames - 1) * hop.  Raises if the
    squared-window sum vanishes anywhere (non-reconstructing window/hop).
    """
    w = make_window(spec.window, spec.frame_len)
    segs = irfft(spec.data, n=spec.frame_len, axis=1)
    out, wsum = overlap_add(segs, w, spec.hop)
    if np.any(wsum <= _SILENCE_FLOOR):
        raise SynthesisError("zero window sum during overlap-add synthesis")
    return Waveform(out / wsum, spec.sample_rate)


def erb_rate(freq_hz):
    """Hz to ERB-rate (Glasberg & Moore)."""
    return 21.4 * np.log10(1.0 + 4.37e-3 * np.asarray(freq_hz, dtype=np.float64))


def erb_rate_to_hz(rate):
    return (10.0 ** (np.asarray(rate, dtype=np.float64) / 21.4) - 1.0) / 4.37e-3


def make_erb_filterbank(bands: int, bins: int,
                        sample_rate: int = DEFAULT_SAMPLE_RATE) -> ErbFilterbank:
    """Triangular filterbank with ERB-rate-spaced centers from 0 Hz to Nyquist.

    Adjacent triangles form a partition of unity over [0, Nyquist], so every
    FFT bin is covered and the filterbank-weighted mask expansion has exact
    unit gain under an all-ones mask.  The edge filters saturate at 1 outside
    the center range.
    """
    if bands < 2:
        raise InvalidConfigError("need at least 2 bands")
    if bands > bins:
        raise InvalidConfigError(f"bands ({bands}) may not exceed bins ({bins})")
    nyquist = sample_rate / 2.0
    centers = erb_rate_to_hz(np.linspace(0.0, float(erb_rate(nyquist)), bands))
    centers[0] = 0.0
    centers[-1] = nyquist
    freqs = np.linspace(0.0, nyquist, bins)
    weights = np.zeros((bands, bins))
    for b in range(bands):
        rising = np.ones(bins) if b == 0 else (
            (freqs - centers[b - 1]) / (centers[b] - centers[b - 1]))
        falling = np.ones(bins) if b == bands - 1 else (
            (centers[b + 1] - freqs) / (centers[b + 1] - centers[b]))
        weights[b] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return ErbFilterbank(weights, centers, sample_rate)


def erb_features(spec: ComplexSpectrogram, fb: ErbFilterbank,
                 compression: float = 0.3) -> ErbFeatures:
    """Compressed band magnitudes: (|spec| @ weights.T) ** c."""
    if fb.bins != spec.bins:
        raise ShapeError(f"filterbank bins {fb.bins} != spectrogram bins {spec.bins}")
    band_mag = np.abs(spec.data) @ fb.weights.T
    return ErbFeatures(band_mag ** compression, compression)


def expand_mask_to_bins(mask: np.ndarray, fb: ErbFilterbank) -> np.ndarray:
    """Per-bin gain from a band mask: g[t,k] = sum_b w[b,k] m[t,b] / sum_b w[b,k]."""
    colsum = fb.weights.sum(axis=0)
    return (mask @ fb.weights) / colsum


def apply_erb_mask(spec: ComplexSpectrogram, mask: np.ndarray,
                   fb: ErbFilterbank) -> ComplexSpectrogram:
    """Gate the spectrogram with a band mask in [0, 1]; phase is unchanged."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (spec.frames, fb.bands):
        raise ShapeError(
            f"mask shape {mask.shape} != (frames, bands) = {(spec.frames, fb.bands)}")
    if fb.bins != spec.bins:
        raise ShapeError(f"filterbank bins {fb.bins} != spectrogram bins {spec.bins}")
    if np.any(mask < 0.0) or np.any(mask > 1.0):
        raise ContractViolationError("mask entries outside [0, 1]")
    gain = expand_mask_to_bins(mask, fb)
    return ComplexSpectrogram(gain * spec.data, spec.frame_len, spec.hop,
                              spec.window, spec.sample_rate)


def mean_power(samples: np.ndarray) -> float:
    return float(np.mean(np.square(samples)))


def match_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Crop noise when longer than n, tile cyclically when shorter."""
    if noise.size >= n:
        return noise[:n]
    reps = int(np.ceil(n / noise.size))
    return np.tile(noise, reps)[:n]


def mix_at_snr(clean: Waveform, noise: Waveform,
               target_snr_db: float) -> tuple[Waveform, float]:
    """Scale noise so that clean-vs-scaled-noise power ratio hits the target.

    Returns (clean + alpha * noise, alpha) with
    alpha = sqrt(P_clean / (P_noise * 10^(snr/10))); the measured SNR of the
    mix is the target exactly.  Both signals must be non-silent.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InvalidInputError("sample-rate mismatch between clean and noise")
    n = match_length(noise.samples, len(clean))
    p_clean = mean_power(clean.samples)
    p_noise = mean_power(n)
    if p_clean < _SILENCE_FLOOR:
        raise InvalidInputError("clean signal is silent")
    if p_noise < _SILENCE_FLOOR:
        raise InvalidInputError("noise signal is silent")
    alpha = float(np.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0))))
    return Waveform(clean.samples + alpha * n, clean.sample_rate), alpha


def read_wav(path) -> Waveform:
    """Read a mono PCM-16 or float-32 WAV file."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise InvalidInputError(
            f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, wave: Waveform, fmt: str = "float32") -> None:
    """Write mono WAV as 'float32' (IEEE float) or 'pcm16'."""
    if fmt == "float32":
        scipy.io.wavfile.write(path, wave.sample_rate,
                               wave.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(wave.samples, -1.0, 32767.0 / 32768.0)
        scipy.io.wavfile.write(path, wave.sample_rate,
                               np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise InvalidConfigError(f"unknown wav format '{fmt}'")
