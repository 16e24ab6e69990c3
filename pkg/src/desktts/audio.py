"""Waveform I/O and log-mel feature extraction."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PCM16_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Raised when a WAV file is not mono PCM16."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio as float samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """STFT / mel-filterbank parameters.

    ``hop <= win <= fft_size`` and ``0 <= fmin < fmax <= sample_rate / 2``.
    """

    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 200
    win: int = 800
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop <= self.win <= self.fft_size):
            raise ValueError(
                f"need 0 < hop <= win <= fft_size, got {self.hop}/{self.win}/{self.fft_size}"
            )
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}/{self.fmax}"
            )
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def num_frames(self, n_samples: int) -> int:
        """Frame count for a signal of ``n_samples``: 1 + floor((len - win) / hop)."""
        if n_samples < self.win:
            raise ValueError(f"signal of {n_samples} samples is shorter than one window ({self.win})")
        return 1 + (n_samples - self.win) // self.hop


DEFAULT_MEL = MelConfig()


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel magnitudes, shape (frames, n_mels). Entries are >= log(log_floor)."""

    frames: np.ndarray
    config: MelConfig

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def load_wav(path: str | Path) -> Waveform:
    """Read a mono PCM16 WAV file, rescaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getcomptype() != "NONE":
            raise AudioFormatError(f"{path}: expected uncompressed PCM, got {f.getcomptype()}")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(samples=ints.astype(np.float64) / PCM16_SCALE, sample_rate=sr)


def save_wav(path: str | Path, wav: Waveform) -> None:
    """Write a mono PCM16 WAV file. Samples are clipped to the int16 range."""
    ints = np.clip(np.rint(wav.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(ints.tobytes())


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges_hz(cfg: MelConfig) -> np.ndarray:
    """The n_mels + 2 band edge frequencies; band k peaks at edge k + 1."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)


def mel_band_centers_hz(cfg: MelConfig) -> np.ndarray:
    """Peak frequency of each triangular mel band."""
    return mel_band_edges_hz(cfg)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, fft_size // 2 + 1).

    Every row is non-negative and has at least one nonzero weight: if a band
    is narrower than one FFT bin, unit weight is placed on the bin nearest its
    center.
    """
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_band_edges_hz(cfg)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for k in range(cfg.n_mels):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (bin_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - center, 1e-12)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
        if not fb[k].any():
            fb[k, int(np.argmin(np.abs(bin_hz - center)))] = 1.0
    return fb


def stft_magnitude(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Hann-windowed magnitude STFT, shape (frames, fft_size // 2 + 1).

    Frames lie fully inside the signal; no padding is applied, so the frame
    count is exactly ``cfg.num_frames(len(samples))``.
    """
    n_frames = cfg.num_frames(len(samples))
    window = np.hanning(cfg.win)
    frames = np.empty((n_frames, cfg.win), dtype=np.float64)
    for i in range(n_frames):
        start = i * cfg.hop
        frames[i] = samples[start : start + cfg.win]
    return np.abs(np.fft.rfft(frames * window, n=cfg.fft_size, axis=1))


def wav_to_mel(wav: Waveform, cfg: MelConfig = DEFAULT_MEL) -> MelSpectrogram:
    """Log-mel spectrogram: log(max(filterbank @ |STFT|, log_floor))."""
    if wav.sample_rate != cfg.sample_rate:
        raise AudioFormatError(
            f"waveform sample rate {wav.sample_rate} != config sample rate {cfg.sample_rate}"
        )
    spec = stft_magnitude(np.asarray(wav.samples, dtype=np.float64), cfg)
    mel = spec @ mel_filterbank(cfg).T
    return MelSpectrogram(frames=np.log(np.maximum(mel, cfg.log_floor)), config=cfg)
