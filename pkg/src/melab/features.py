"""Waveform and image featurization.

Spoken words become fixed-shape log-mel spectrograms (10 ms hop, 25 ms
window, 40 triangular mel filters on the HTK scale with Slaney area
normalization, log floor 1e-10, no STFT centering). Images become
channel-normalized 3xHxW tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Widely published ImageNet channel statistics; configurable everywhere.
IMAGENET_MEANS = (0.485, 0.456, 0.406)
IMAGENET_STDS = (0.229, 0.224, 0.225)

LOG_FLOOR = 1e-10


class FeaturizationError(ValueError):
    """Input violates a featurization precondition."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FeaturizationError("sample_rate must be positive")
        if len(self.samples) == 0:
            raise FeaturizationError("waveform must be non-empty")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    hop_ms: float = 10.0
    win_ms: float = 25.0
    n_mels: int = 40
    target_frames: int = 256


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies, n_mels x n_frames.

    ``n_valid_frames`` records the frame count before any padding, so
    downstream pooling can mask padded frames.
    """

    values: np.ndarray
    n_mels: int
    n_frames: int
    n_valid_frames: int

    def __post_init__(self):
        if self.values.shape != (self.n_mels, self.n_frames):
            raise FeaturizationError(
                f"values shape {self.values.shape} != ({self.n_mels}, {self.n_frames})")
        if not np.all(np.isfinite(self.values)):
            raise FeaturizationError("mel spectrogram contains non-finite values")


@dataclass(frozen=True)
class ImageSample:
    """Normalized 3xHxW image with class/provenance metadata."""

    pixels: np.ndarray
    class_label: str
    source_bucket: str
    is_isolated: bool

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise FeaturizationError(f"pixels must be 3xHxW, got {self.pixels.shape}")
        if self.pixels.shape[1] != self.pixels.shape[2]:
            raise FeaturizationError("images must be square")


def hz_to_mel(f):
    """HTK mel scale: m = 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters with Slaney area normalization, spanning 0..sr/2."""
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(bin_freqs)))
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # area normalization
    return fb


def frame_count(n_samples: int, win_samples: int, hop_samples: int) -> int:
    """Frames for uncentered framing: 1 + floor((len - win)/hop)."""
    return 1 + (n_samples - win_samples) // hop_samples


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_spectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel features of one spoken word (no padding to target_frames)."""
    win = int(round(w.sample_rate * cfg.win_ms / 1000.0))
    hop = int(round(w.sample_rate * cfg.hop_ms / 1000.0))
    if len(w.samples) < win:
        raise FeaturizationError(
            f"waveform of {len(w.samples)} samples shorter than one {win}-sample window")
    n_frames = frame_count(len(w.samples), win, hop)
    n_fft = 1
    while n_fft < win:
        n_fft *= 2

    offsets = np.arange(n_frames) * hop
    frames = w.samples[offsets[:, None] + np.arange(win)[None, :]]
    frames = frames * _periodic_hann(win)[None, :]
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2  # (n_frames, bins)
    fb = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate)
    energies = spectrum @ fb.T  # (n_frames, n_mels)
    values = np.log(energies.T + LOG_FLOOR)
    return MelSpectrogram(values=values, n_mels=cfg.n_mels, n_frames=n_frames,
                          n_valid_frames=n_frames)


def pad_or_truncate(m: MelSpectrogram, target_frames: int = 256) -> MelSpectrogram:
    """Fix the frame count: pad with the log floor, or keep the earliest frames."""
    if m.n_frames == target_frames:
        return m
    if m.n_frames > target_frames:
        return MelSpectrogram(values=m.values[:, :target_frames].copy(), n_mels=m.n_mels,
                              n_frames=target_frames,
                              n_valid_frames=min(m.n_valid_frames, target_frames))
    padded = np.full((m.n_mels, target_frames), np.log(LOG_FLOOR))
    padded[:, :m.n_frames] = m.values
    return MelSpectrogram(values=padded, n_mels=m.n_mels, n_frames=target_frames,
                          n_valid_frames=m.n_valid_frames)


def normalize_image(raw: np.ndarray, means=IMAGENET_MEANS, stds=IMAGENET_STDS) -> np.ndarray:
    """Per-channel (x - mean)/std for a 3xHxW image in [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise FeaturizationError(f"expected 3xHxW image, got shape {raw.shape}")
    means = np.asarray(means, dtype=np.float64).reshape(3, 1, 1)
    stds = np.asarray(stds, dtype=np.float64).reshape(3, 1, 1)
    if np.any(stds <= 0):
        raise FeaturizationError("channel stds must be positive")
    return (raw - means) / stds
