"""Logmel spectrogram frontend.

Raw PCM audio goes through resampling, Hann-windowed power STFT and a
triangular mel filterbank, ending in natural-log compressed energies.
Defaults (44.1 kHz, fft 1024, hop 512, 128 bands) are what the network
in :mod:`weaknet.model` expects.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile


LOG_FLOOR = 1e-10
#: logmel value of digital silence under the default floor
SILENCE_LOGMEL = float(np.log(LOG_FLOOR))

_FEATURE_MAGIC = b"LMEL"
_FEATURE_VERSION = 1


class AudioError(ValueError):
    """Unreadable or unsupported audio input."""


@dataclass
class AudioClip:
    samples: np.ndarray  # mono, float64, amplitude in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("AudioClip samples must be one-dimensional")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogmelConfig:
    sample_rate: int = 44100
    fft_size: int = 1024
    hop_size: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.fmax is None:
            self.fmax = self.sample_rate / 2
        if self.hop_size > self.fft_size:
            raise ValueError("hop_size must not exceed fft_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin} fmax={self.fmax}"
            )

    @property
    def silence_value(self) -> float:
        return float(np.log(self.log_floor))


@dataclass
class LogmelSpectrogram:
    frames: np.ndarray  # (T, n_mels) float32 log energies
    config: LogmelConfig = field(default_factory=LogmelConfig)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def load_audio(path) -> AudioClip:
    """Read a PCM WAV file as a mono clip scaled to [-1, 1].

    Integer samples are scaled by the type's full negative range
    (e.g. int16 by 32768), multichannel audio is averaged to mono.
    """
    if not os.path.exists(path):
        raise AudioError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc

    if data.size == 0:
        raise AudioError(f"zero-length audio: {path}")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV encoding {data.dtype} in {path}")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling to ``target_rate``.

    Output length is round(n * target / source); a matching rate is a no-op.
    """
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    n_in = len(clip.samples)
    n_out = int(round(n_in * target_rate / clip.sample_rate))
    # positions of output samples on the input index axis
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    samples = np.interp(positions, np.arange(n_in), clip.samples)
    return AudioClip(samples=samples, sample_rate=target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: LogmelConfig) -> np.ndarray:
    """Triangular filterbank, shape (n_mels, fft_size//2 + 1).

    Centers are equally spaced on the mel scale between fmin and fmax.
    Raises if the FFT resolution is too coarse for the requested band
    count (some filter would have no positive weight).
    """
    n_freqs = config.fft_size // 2 + 1
    freqs = np.arange(n_freqs) * config.sample_rate / config.fft_size
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((config.n_mels, n_freqs))
    for m in range(config.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))

    dead = np.flatnonzero(fb.max(axis=1) <= 0.0)
    if dead.size:
        raise ValueError(
            f"n_mels={config.n_mels} too large for fft_size={config.fft_size} "
            f"at {config.sample_rate} Hz: filters {dead.tolist()} have no support"
        )
    return fb


def filterbank_centers(config: LogmelConfig) -> np.ndarray:
    """Center frequency in Hz of every mel filter."""
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def frame_count(n_samples: int, config: LogmelConfig) -> int:
    if n_samples < config.fft_size:
        raise ValueError(
            f"clip of {n_samples} samples is shorter than one window ({config.fft_size})"
        )
    return (n_samples - config.fft_size) // config.hop_size + 1


def logmel(clip: AudioClip, config: LogmelConfig | None = None) -> LogmelSpectrogram:
    """Log mel energies of a clip, shape (T, n_mels).

    T follows floor((len - fft_size) / hop_size) + 1; energies below
    ``log_floor`` clamp to the floor so silence maps to a fixed value.
    """
    config = config or LogmelConfig()
    if clip.sample_rate != config.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} != config rate {config.sample_rate}; "
            "resample first"
        )
    n = len(clip.samples)
    t = frame_count(n, config)

    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(config.fft_size) / config.fft_size)
    starts = np.arange(t) * config.hop_size
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, config.fft_size)[starts]
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    fb = mel_filterbank(config)
    energy = power @ fb.T
    out = np.log(np.maximum(energy, config.log_floor))
    return LogmelSpectrogram(frames=out.astype(np.float32), config=config)


def write_feature(path, frames: np.ndarray) -> None:
    """Write a (T, n_mels) matrix as a little-endian LMEL binary file."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    t, n_mels = frames.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _FEATURE_MAGIC, _FEATURE_VERSION, t, n_mels))
        fh.write(frames.tobytes())


def read_feature(path) -> np.ndarray:
    """Read an LMEL file back into a (T, n_mels) float32 matrix."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"truncated feature file: {path}")
        magic, version, t, n_mels = struct.unpack("<4sIII", header)
        if magic != _FEATURE_MAGIC:
            raise ValueError(f"not a feature file (bad magic): {path}")
        if version != _FEATURE_VERSION:
            raise ValueError(f"unsupported feature file version {version}: {path}")
        data = np.frombuffer(fh.read(4 * t * n_mels), dtype="<f4")
    if data.size != t * n_mels:
        raise ValueError(f"truncated feature payload: {path}")
    return data.reshape(t, n_mels).copy()
