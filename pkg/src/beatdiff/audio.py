"""Waveform <-> mel-spectrogram codec.

A 5-second clip at 22050 Hz is mapped to a 256x256 image: magnitude STFT
(window 2048, hop 512, centered), 256 HTK-style triangular mel filters over
0..11025 Hz, log(1 + S/ref) compression, then per-clip min-max normalization
to [0, 1].  The natural frame count is ceil(110250/512) = 216; the image is
right-padded to 256 frames with the normalization floor and cropped back on
inversion.  Inversion de-normalizes, lifts mel to linear frequency with the
filterbank pseudo-inverse, and recovers phase with Griffin-Lim.

WAV files are 16-bit PCM mono at 22050 Hz; anything else is rejected rather
than silently resampled.  Spectrograms persist as little-endian float32: an
8-value header (magic, version, rows, cols, sr, hop, fft, reserved) followed
by the flat array in log-amplitude (pre-normalization) units, so the per-clip
(min, max) pair needed for faithful inversion is recoverable from the data
itself.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_finite

__all__ = [
    "Waveform", "MelSpectrogram", "wav_to_mel", "mel_to_wav",
    "read_wav", "write_wav", "read_mel", "write_mel",
    "mel_filterbank", "MelSpectrogramCodec",
]

SAMPLE_RATE = 22050
CLIP_SECONDS = 5.0
CLIP_SAMPLES = int(round(CLIP_SECONDS * SAMPLE_RATE))  # 110250
FFT_SIZE = 2048
HOP = 512
MEL_BINS = 256
FRAMES = 256
NATURAL_FRAMES = CLIP_SAMPLES // HOP + 1  # 216 centered frames
FMIN = 0.0
FMAX = SAMPLE_RATE / 2.0
LOG_REF = 1e-5
# Default de-normalization ceiling for spectrograms born in normalized space
# (e.g. decoded from latents), roughly the norm_max of a full-scale clip.
DEFAULT_LOG_MAX = 14.0

_MEL_MAGIC = 7169388.0  # "mel" packed as an exactly representable float
_MEL_VERSION = 1.0


@dataclass
class Waveform:
    """Mono audio clip; amplitudes in [-1, 1], finite."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform samples must be 1-D, got shape {self.samples.shape}")
        check_finite(self.samples, "waveform samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Normalized 256x256 log-mel image plus the bounds that undo it.

    values are mel bins x time frames in [0, 1]; (norm_min, norm_max) are the
    per-clip extrema of the log-compressed spectrogram before normalization.
    """

    values: np.ndarray
    norm_min: float = 0.0
    norm_max: float = DEFAULT_LOG_MAX
    mel_bins: int = MEL_BINS
    hop: int = HOP
    fft_size: int = FFT_SIZE
    sr: int = SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mel_bins, FRAMES):
            raise ValueError(
                f"spectrogram must be {self.mel_bins}x{FRAMES}, got {self.values.shape}")
        check_finite(self.values, "spectrogram values")

    def log_values(self) -> np.ndarray:
        """De-normalized log-amplitude values."""
        return self.values * (self.norm_max - self.norm_min) + self.norm_min


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = MEL_BINS, n_fft: int = FFT_SIZE,
                   sr: int = SAMPLE_RATE, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """HTK-style triangular filters (unit peak), shape (n_mels, n_fft//2 + 1)."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    mel_edges = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_edges = _mel_to_hz(mel_edges)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_bin_centers(n_mels: int = MEL_BINS, sr: int = SAMPLE_RATE,
                    fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    mel_edges = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mel_edges[1:-1])


def _frame_centered(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Zero-padded centered frames, shape (n_frames, n_fft)."""
    pad = n_fft // 2
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    n_frames = len(x) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft_magnitude(x: np.ndarray, n_fft: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Magnitude STFT with a periodic Hann window, shape (n_fft//2+1, n_frames)."""
    window = get_window("hann", n_fft, fftbins=True)
    frames = _frame_centered(x, n_fft, hop) * window
    return np.abs(np.fft.rfft(frames, axis=1)).T


def _stft_complex(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    window = get_window("hann", n_fft, fftbins=True)
    frames = _frame_centered(x, n_fft, hop) * window
    return np.fft.rfft(frames, axis=1).T


def _istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of _stft_complex."""
    window = get_window("hann", n_fft, fftbins=True)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    n_frames = frames.shape[0]
    pad = n_fft // 2
    total = hop * (n_frames - 1) + n_fft
    out = np.zeros(total)
    wsum = np.zeros(total)
    wsq = window * window
    for k in range(n_frames):
        start = k * hop
        out[start:start + n_fft] += frames[k]
        wsum[start:start + n_fft] += wsq
    out = out / np.maximum(wsum, 1e-12)
    return out[pad:pad + length]


def wav_to_mel(w: Waveform) -> MelSpectrogram:
    """Analyze a 5 s clip into a normalized 256x256 mel image."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected sample rate {SAMPLE_RATE} Hz, got {w.sample_rate}")
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    if not (4.9 <= w.duration <= 5.1):
        raise ValueError(f"clip duration {w.duration:.3f} s outside [4.9, 5.1] s")
    x = w.samples
    if len(x) < CLIP_SAMPLES:
        x = np.concatenate([x, np.zeros(CLIP_SAMPLES - len(x))])
    else:
        x = x[:CLIP_SAMPLES]

    mag = stft_magnitude(x)  # (1025, 216)
    mel = mel_filterbank() @ mag
    logmel = np.log1p(mel / LOG_REF)
    lo, hi = float(logmel.min()), float(logmel.max())
    if hi - lo > 1e-12:
        norm = (logmel - lo) / (hi - lo)
    else:
        norm = np.zeros_like(logmel)  # constant input maps to the floor
    padded = np.zeros((MEL_BINS, FRAMES))
    padded[:, :norm.shape[1]] = norm
    return MelSpectrogram(values=padded, norm_min=lo, norm_max=hi)


def mel_to_wav(m: MelSpectrogram, iterations: int = 64) -> Waveform:
    """Invert a mel image to a 5 s waveform via pseudo-inverse + Griffin-Lim.

    Deterministic: phase recovery starts from zero phase.  Output is
    peak-normalized unless essentially silent.
    """
    check_finite(m.values, "spectrogram values")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    logmel = m.log_values()[:, :NATURAL_FRAMES]
    mel = LOG_REF * np.expm1(np.maximum(logmel, 0.0))
    fb = mel_filterbank()
    mag = np.linalg.pinv(fb) @ mel
    mag = np.maximum(mag, 0.0)

    spec = mag.astype(np.complex128)  # zero initial phase
    x = _istft(spec, m.fft_size, m.hop, CLIP_SAMPLES)
    for _ in range(iterations):
        phase = _stft_complex(x, m.fft_size, m.hop)
        denom = np.abs(phase)
        phase = phase / np.maximum(denom, 1e-12)
        x = _istft(mag * phase, m.fft_size, m.hop, CLIP_SAMPLES)

    peak = np.max(np.abs(x))
    if peak > 1e-6:
        x = x / peak * 0.99
    return Waveform(samples=x, sample_rate=m.sr)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono, saturating out-of-range amplitudes."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV at 22050 Hz; reject anything else."""
    try:
        with wave.open(str(path), "rb") as f:
            nch, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if nch != 1:
                raise ValueError(f"{path}: expected mono audio, got {nch} channels")
            if width != 2:
                raise ValueError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise ValueError(f"{path}: expected sample rate {SAMPLE_RATE} Hz, got {rate}")
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise ValueError(f"{path}: malformed WAV file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples=samples, sample_rate=SAMPLE_RATE)


def write_mel(path, m: MelSpectrogram) -> None:
    """Persist a spectrogram in the documented float32 container."""
    rows, cols = m.values.shape
    header = np.array(
        [_MEL_MAGIC, _MEL_VERSION, rows, cols, m.sr, m.hop, m.fft_size, 0.0],
        dtype="<f4")
    body = m.log_values().astype("<f4").ravel()
    Path(path).write_bytes(header.tobytes() + body.tobytes())


def read_mel(path) -> MelSpectrogram:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if len(raw) < 8 or raw[0] != _MEL_MAGIC:
        raise ValueError(f"{path}: not a spectrogram container")
    if raw[1] != _MEL_VERSION:
        raise ValueError(f"{path}: unsupported container version {raw[1]}")
    rows, cols = int(raw[2]), int(raw[3])
    if len(raw) != 8 + rows * cols:
        raise ValueError(f"{path}: truncated container")
    logmel = raw[8:].astype(np.float64).reshape(rows, cols)
    lo, hi = float(logmel.min()), float(logmel.max())
    if hi - lo > 1e-12:
        values = (logmel - lo) / (hi - lo)
    else:
        values, lo, hi = np.zeros_like(logmel), float(logmel.min()), float(logmel.min())
    return MelSpectrogram(values=values, norm_min=lo, norm_max=hi,
                          sr=int(raw[4]), hop=int(raw[5]), fft_size=int(raw[6]))


class MelSpectrogramCodec(BaseEstimator, TransformerMixin):
    """Stateless transformer view of the codec for pipeline composition.

    transform maps waveforms (Waveform objects or raw sample arrays) to a
    stacked (n_clips, 256, 256) array; inverse_transform synthesizes audio
    back with Griffin-Lim, using a default dynamic range for spectrograms
    that were never produced by analysis.
    """

    def __init__(self, griffin_lim_iters: int = 64, log_max: float = DEFAULT_LOG_MAX):
        self.griffin_lim_iters = griffin_lim_iters
        self.log_max = log_max

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        mels = [wav_to_mel(x if isinstance(x, Waveform) else Waveform(x)) for x in X]
        return np.stack([m.values for m in mels])

    def inverse_transform(self, X) -> list[Waveform]:
        out = []
        for values in X:
            m = MelSpectrogram(values=np.clip(values, 0.0, 1.0),
                               norm_min=0.0, norm_max=self.log_max)
            out.append(mel_to_wav(m, iterations=self.griffin_lim_iters))
        return out
