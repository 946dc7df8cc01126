"""Spectrogram frontends: middle-truncation, log STFT and log Mel spectrograms.

Framing follows the training setup the model expects: 40 ms Hamming windows
every 10 ms at 16 kHz, a 1024-point DFT, and 128 Mel bands.  Frames are
``valid`` only: a trailing partial frame is dropped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000

SPEC_MAGIC = b"SPG1"
_SPEC_HEADER = struct.Struct("<4sII4s")
_SPEC_DTYPE = b"<f4\x00"


class DspError(ValueError):
    pass


class ClipTooShortError(DspError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DspError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise DspError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class DspConfig:
    window_len: float = 0.040
    hop_len: float = 0.010
    dft_len: int = 1024
    mel_bands: int = 128
    max_duration: float = 14.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.window_len >= self.hop_len > 0:
            raise DspError("need window_len >= hop_len > 0")
        if self.dft_len < self.win_samples:
            raise DspError("dft_len shorter than the analysis window")
        if self.mel_bands < 1:
            raise DspError("mel_bands must be >= 1")
        if self.log_floor <= 0:
            raise DspError("log_floor must be positive")

    @property
    def win_samples(self) -> int:
        return int(round(self.window_len * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_len * self.sample_rate))

    @property
    def n_fft_bins(self) -> int:
        return self.dft_len // 2 + 1


@dataclass
class Spectrogram:
    """Log-magnitude time-frequency map, rows are frames."""

    values: np.ndarray
    kind: str = field(default="stft")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DspError(f"bad spectrogram shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DspError("spectrogram values must be finite")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def truncate_middle(clip: AudioClip, max_duration: float = 14.0) -> AudioClip:
    """Keep the centred ``max_duration`` seconds of a longer clip."""
    max_len = int(round(max_duration * clip.sample_rate))
    n = len(clip.samples)
    if n <= max_len:
        return clip
    start = (n - max_len) // 2
    return AudioClip(clip.samples[start:start + max_len], clip.sample_rate)


def hamming_window(n: int) -> np.ndarray:
    # 0.54 - 0.46 cos(2 pi k / (n - 1)), identical to np.hamming(n)
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def _check_clip(clip: AudioClip, cfg: DspConfig):
    if clip.sample_rate != cfg.sample_rate:
        raise DspError(
            f"clip sampled at {clip.sample_rate} Hz, frontend expects "
            f"{cfg.sample_rate} Hz (resample upstream)")
    if len(clip.samples) < cfg.win_samples:
        raise ClipTooShortError(
            f"clip has {len(clip.samples)} samples, one frame needs {cfg.win_samples}")


def magnitude_frames(clip: AudioClip, cfg: DspConfig) -> np.ndarray:
    """|rfft| of Hamming-windowed frames, shape (n_frames, dft_len // 2 + 1)."""
    _check_clip(clip, cfg)
    win, hop = cfg.win_samples, cfg.hop_samples
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop]
    return np.abs(np.fft.rfft(frames * hamming_window(win), n=cfg.dft_len, axis=1))


def _log(mag: np.ndarray, floor: float) -> np.ndarray:
    return np.log(np.maximum(mag, floor))


def stft_spectrogram(clip: AudioClip, cfg: DspConfig | None = None) -> Spectrogram:
    cfg = cfg or DspConfig()
    return Spectrogram(_log(magnitude_frames(clip, cfg), cfg.log_floor), kind="stft")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_bands: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """n_bands + 2 frequencies (Hz), equally spaced on the HTK mel scale."""
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_bands + 2)
    return mel_to_hz(mels)


def mel_filterbank(n_bands: int, dft_len: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, shape (n_bands, dft_len // 2 + 1), each row scaled
    by 2 / (upper - lower) so that filters have equal area.

    Bands narrower than the DFT bin spacing may come out all-zero.
    """
    edges = mel_band_edges(n_bands, sample_rate)
    freqs = np.arange(dft_len // 2 + 1) * sample_rate / dft_len
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    return fb * (2.0 / (upper - lower))


_FILTERBANKS: dict[tuple[int, int, int], np.ndarray] = {}


def _cached_filterbank(cfg: DspConfig) -> np.ndarray:
    key = (cfg.mel_bands, cfg.dft_len, cfg.sample_rate)
    fb = _FILTERBANKS.get(key)
    if fb is None:
        fb = mel_filterbank(*key)
        fb.setflags(write=False)
        _FILTERBANKS[key] = fb
    return fb


def mel_spectrogram(clip: AudioClip, cfg: DspConfig | None = None) -> Spectrogram:
    cfg = cfg or DspConfig()
    mel = magnitude_frames(clip, cfg) @ _cached_filterbank(cfg).T
    return Spectrogram(_log(mel, cfg.log_floor), kind="mel")


def spectrogram(clip: AudioClip, cfg: DspConfig | None = None, frontend: str = "mel") -> Spectrogram:
    """Truncate to ``cfg.max_duration`` then run the requested frontend."""
    cfg = cfg or DspConfig()
    clip = truncate_middle(clip, cfg.max_duration)
    if frontend == "mel":
        return mel_spectrogram(clip, cfg)
    if frontend == "stft":
        return stft_spectrogram(clip, cfg)
    raise DspError(f"unknown frontend {frontend!r}")


def save_spectrogram(spec: Spectrogram, path) -> None:
    """Binary layout: magic, L_T, L_F (uint32 LE), dtype tag, then row-major LE float32."""
    data = np.ascontiguousarray(spec.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SPEC_HEADER.pack(SPEC_MAGIC, spec.n_frames, spec.n_bins, _SPEC_DTYPE))
        fh.write(data.tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _SPEC_HEADER.size:
        raise DspError(f"{path}: truncated header")
    magic, n_t, n_f, dtype = _SPEC_HEADER.unpack_from(raw)
    if magic != SPEC_MAGIC or dtype != _SPEC_DTYPE:
        raise DspError(f"{path}: not a spectrogram file")
    body = raw[_SPEC_HEADER.size:]
    if len(body) != 4 * n_t * n_f:
        raise DspError(f"{path}: expected {n_t}x{n_f} values")
    values = np.frombuffer(body, dtype="<f4").reshape(n_t, n_f)
    return Spectrogram(values.astype(np.float64))
