"""Audio I/O, resampling, STFT analysis/synthesis and Griffin-Lim phase refinement.

Conventions used throughout the package:

* waveforms are float arrays in [-1, 1] at an explicit sample rate,
* spectrograms are stored as separate magnitude/phase planes of shape
  (freq_bins, time_frames) with ``freq_bins = fft_size // 2 + 1``,
* analysis frame ``t`` is centered on sample ``t * hop`` (reflection padding
  at both ends), and the frame count of an N-sample clip is
  ``ceil(N / hop) + 1``.

``istft`` is the exact least-squares inverse of ``stft`` (windowed
overlap-add with the squared-window envelope, folded back through the
reflection padding), which makes the ``stft -> istft`` round trip exact to
machine precision and the Griffin-Lim consistency distance provably
non-increasing.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AudioClip",
    "Spectrogram",
    "load_audio",
    "save_audio",
    "resample",
    "stft",
    "istft",
    "normalize",
    "denormalize",
    "griffin_lim",
    "consistency_curve",
]

_PCM_SCALE = 32767.0


@dataclass
class AudioClip:
    """Mono waveform with its sample rate. Samples are finite floats in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Complex STFT split into magnitude and phase planes of shape (F, T).

    ``normalized`` marks log(1+x) magnitude space; ``num_samples`` remembers
    the analysed clip length so the inverse reproduces it exactly.
    """

    magnitudes: np.ndarray
    phases: np.ndarray
    hop: int
    fft_size: int
    normalized: bool = False
    num_samples: int | None = field(default=None)

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        if self.magnitudes.shape != self.phases.shape:
            raise ValueError("magnitude and phase planes must have equal shape")
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[1] < 1:
            raise ValueError("spectrogram must be F x T with T >= 1")
        if self.magnitudes.shape[0] != self.fft_size // 2 + 1:
            raise ValueError(
                f"expected {self.fft_size // 2 + 1} frequency bins for "
                f"fft_size={self.fft_size}, got {self.magnitudes.shape[0]}"
            )
        if not self.normalized and np.any(self.magnitudes < 0):
            raise ValueError("unnormalized magnitudes must be non-negative")

    @property
    def num_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, PCM 16-bit little-endian, 1 or 2 channels)
# ---------------------------------------------------------------------------


def load_audio(path) -> AudioClip:
    """Read a 16-bit PCM WAV file; stereo is averaged to mono.

    Raises ValueError for unsupported encodings and OSError for unreadable
    files.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wav:
            n_channels = wav.getnchannels()
            sampwidth = wav.getsampwidth()
            comptype = wav.getcomptype()
            rate = wav.getframerate()
            n_frames = wav.getnframes()
            raw = wav.readframes(n_frames)
    except wave.Error as exc:
        raise ValueError(f"{path}: not a readable WAV file ({exc})") from exc
    if comptype != "NONE":
        raise ValueError(f"{path}: unsupported compression type {comptype!r}")
    if sampwidth != 2:
        raise ValueError(f"{path}: only 16-bit PCM is supported, got {8 * sampwidth}-bit")
    if n_channels not in (1, 2):
        raise ValueError(f"{path}: expected 1 or 2 channels, got {n_channels}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    if n_channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def save_audio(clip: AudioClip, path) -> None:
    """Write a clip as mono 16-bit PCM WAV. Samples are clipped to [-1, 1]."""
    scaled = np.clip(clip.samples, -1.0, 1.0) * _PCM_SCALE
    pcm = np.round(scaled).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(clip.sample_rate)
        wav.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resample(clip: AudioClip, target_rate: int, taps: int = 64) -> AudioClip:
    """Band-limited resampling with a Hann-windowed sinc kernel.

    ``taps`` is the kernel half-width in source samples. The output has
    ``round(len * target_rate / source_rate)`` samples.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = clip.samples
    if target_rate == clip.sample_rate:
        return AudioClip(src.copy(), clip.sample_rate)
    out_len = int(round(len(src) * target_rate / clip.sample_rate))
    if out_len == 0 or len(src) == 0:
        return AudioClip(np.zeros(0), target_rate)

    ratio = clip.sample_rate / target_rate
    cutoff = min(1.0, target_rate / clip.sample_rate)  # relative to source Nyquist
    out = np.empty(out_len, dtype=np.float64)
    offsets = np.arange(-taps + 1, taps + 1)
    chunk = max(1, 1 << 16 >> int(np.log2(2 * taps)))  # keep gather blocks ~64k wide
    for start in range(0, out_len, chunk):
        n = np.arange(start, min(start + chunk, out_len))
        center = n * ratio
        k = np.floor(center).astype(np.int64)[:, None] + offsets[None, :]
        t = center[:, None] - k
        kernel = cutoff * np.sinc(cutoff * t) * (0.5 + 0.5 * np.cos(np.pi * t / taps))
        valid = (k >= 0) & (k < len(src))
        gathered = src[np.clip(k, 0, len(src) - 1)]
        out[n] = np.sum(gathered * kernel * valid, axis=1)
    return AudioClip(out, target_rate)


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _reflect_indices(positions: np.ndarray, length: int) -> np.ndarray:
    """Map (possibly out-of-range) sample positions onto [0, length) by reflection."""
    if length == 1:
        return np.zeros_like(positions)
    period = 2 * (length - 1)
    m = np.mod(positions, period)
    return np.where(m < length, m, period - m)


def frame_count(num_samples: int, hop: int) -> int:
    """Number of analysis frames for a clip: ceil(N / hop) + 1."""
    return -(-num_samples // hop) + 1


def _stft_geometry(num_samples: int, fft_size: int, hop: int):
    n_frames = frame_count(num_samples, hop)
    padded_len = (n_frames - 1) * hop + fft_size
    pad_left = fft_size // 2
    positions = np.arange(padded_len) - pad_left
    idx = _reflect_indices(positions, num_samples)
    return n_frames, padded_len, idx


def stft(clip: AudioClip, fft_size: int = 512, hop: int | None = None) -> Spectrogram:
    """Short-time Fourier transform with a periodic Hann window.

    Frame ``t`` is centered on sample ``t * hop``; both ends are reflection
    padded so every frame is complete.
    """
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two >= 2")
    if hop is None:
        hop = fft_size // 2
    if not 0 < hop <= fft_size // 2:
        raise ValueError("hop must satisfy 0 < hop <= fft_size / 2")
    samples = clip.samples
    if len(samples) < 1:
        raise ValueError("cannot analyse an empty clip")

    n_frames, _, idx = _stft_geometry(len(samples), fft_size, hop)
    padded = samples[idx]
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(fft_size)[None, :]]
    spec = np.fft.rfft(frames * _hann_periodic(fft_size), axis=1).T
    return Spectrogram(
        magnitudes=np.abs(spec),
        phases=np.angle(spec),
        hop=hop,
        fft_size=fft_size,
        normalized=False,
        num_samples=len(samples),
    )


def istft(spec: Spectrogram, sample_rate: int = 1) -> AudioClip:
    """Least-squares inverse STFT (weighted overlap-add, COLA-normalized).

    The squared-window envelope, including the reflection-padded edges, is
    folded back onto the original sample range, so the result is the exact
    minimizer of the spectral reconstruction error. Spectrograms do not carry
    a sample rate, so callers that need one pass it explicitly.
    """
    if spec.normalized:
        raise ValueError("istft requires unnormalized magnitudes (call denormalize first)")
    fft_size, hop = spec.fft_size, spec.hop
    if not 0 < hop <= fft_size // 2:
        raise ValueError("inconsistent hop/fft_size")
    n_frames = spec.num_frames
    num_samples = spec.num_samples
    if num_samples is None:
        num_samples = (n_frames - 1) * hop
    if frame_count(num_samples, hop) != n_frames:
        raise ValueError(
            f"num_samples={num_samples} is inconsistent with {n_frames} frames at hop {hop}"
        )

    window = _hann_periodic(fft_size)
    frames = np.fft.irfft((spec.magnitudes * np.exp(1j * spec.phases)).T, n=fft_size, axis=1)
    frames *= window

    _, padded_len, idx = _stft_geometry(num_samples, fft_size, hop)
    acc = np.zeros(padded_len)
    env = np.zeros(padded_len)
    wsq = window * window
    for t in range(n_frames):
        sl = slice(t * hop, t * hop + fft_size)
        acc[sl] += frames[t]
        env[sl] += wsq
    num = np.zeros(num_samples)
    den = np.zeros(num_samples)
    np.add.at(num, idx, acc)
    np.add.at(den, idx, env)
    return AudioClip(num / den, sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# Magnitude normalization
# ---------------------------------------------------------------------------


def normalize(mag: np.ndarray) -> np.ndarray:
    """Compress magnitudes with log(1 + x)."""
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise ValueError("normalize expects non-negative magnitudes")
    return np.log1p(mag)


def denormalize(norm_mag: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`: exp(y) - 1."""
    return np.expm1(np.asarray(norm_mag))


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------


def _consistency_weights(num_bins: int) -> np.ndarray:
    # Interior bins represent two conjugate FFT bins each; DC/Nyquist one.
    w = np.full(num_bins, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def _spectral_distance(mag: np.ndarray, other_mag: np.ndarray) -> float:
    w = _consistency_weights(mag.shape[0])[:, None]
    return float(np.sqrt(np.sum(w * (mag - other_mag) ** 2)))


def griffin_lim(
    mag: np.ndarray,
    init_phase: np.ndarray,
    iterations: int = 10,
    fft_size: int | None = None,
    hop: int | None = None,
    num_samples: int | None = None,
) -> Spectrogram:
    """Refine phases by alternating projections while keeping ``mag`` fixed.

    Each iteration replaces the phases with those of ``stft(istft(current))``.
    With ``iterations=0`` the initial phases are returned unchanged.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("griffin_lim expects non-negative magnitudes")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if fft_size is None:
        fft_size = 2 * (mag.shape[0] - 1)
    if hop is None:
        hop = fft_size // 2
    phases = np.asarray(init_phase, dtype=np.float64).copy()
    for _ in range(iterations):
        spec = Spectrogram(mag, phases, hop, fft_size, num_samples=num_samples)
        clip = istft(spec)
        phases = stft(clip, fft_size=fft_size, hop=hop).phases
    return Spectrogram(mag, phases, hop, fft_size, num_samples=num_samples)


def consistency_curve(
    mag: np.ndarray,
    init_phase: np.ndarray,
    iterations: int = 10,
    fft_size: int | None = None,
    hop: int | None = None,
    num_samples: int | None = None,
) -> np.ndarray:
    """Griffin-Lim consistency distance before each update, then after the last.

    Entry ``i`` is ``||mag - |stft(istft(spec_i))|||`` (full-FFT weighting) for
    the iterate ``spec_i``; the array has ``iterations + 1`` entries and is
    non-increasing.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if fft_size is None:
        fft_size = 2 * (mag.shape[0] - 1)
    if hop is None:
        hop = fft_size // 2
    phases = np.asarray(init_phase, dtype=np.float64).copy()
    curve = []
    for _ in range(iterations + 1):
        spec = Spectrogram(mag, phases, hop, fft_size, num_samples=num_samples)
        reanalysed = stft(istft(spec), fft_size=fft_size, hop=hop)
        curve.append(_spectral_distance(mag, reanalysed.magnitudes))
        phases = reanalysed.phases
    return np.asarray(curve)
