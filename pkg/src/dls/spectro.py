"""Audio to three-band power spectrogram front end.

The chain is: standardize length, resample, downmix, power STFT, then split
the frequency axis into low/middle/high thirds stacked as channels.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.io import wavfile

TENSOR_MAGIC = b"DLST"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # [channels, frames]
    sample_rate: int
    source_path: str | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"samples must be [channels, frames] with both >= 1, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop_length: int = 512
    window_function: str = "hann"
    target_sample_rate: int = 44100

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length:
            raise ValueError(
                f"need 0 < hop_length <= window_length, got {self.hop_length}, {self.window_length}"
            )
        if self.target_sample_rate <= 0:
            raise ValueError("target_sample_rate must be positive")

    @property
    def freq_bins(self) -> int:
        return self.window_length // 2 + 1

    def time_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_length) // self.hop_length + 1


@dataclass(frozen=True)
class PowerSpectrogram:
    values: np.ndarray  # [freq_bins, time_frames]
    bin_hz: float


@dataclass(frozen=True)
class BandedSpectrogram:
    values: np.ndarray  # [3, band_bins, time_frames], low/middle/high
    bin_hz: float = field(default=float("nan"))

    @property
    def shape(self):
        return self.values.shape


def load_audio(path: str | os.PathLike) -> AudioClip:
    """Read a WAV file (integer PCM or float) into an ``AudioClip`` scaled to [-1, 1]."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    x = np.atleast_2d(x.T) if x.ndim == 2 else x[None, :]
    return AudioClip(x, int(sr), str(path))


def standardize_length(
    clip: AudioClip, target_s: float, mode: str = "eval", seed: int = 0
) -> AudioClip:
    """Zero-pad at the end or crop to exactly ``target_s`` seconds.

    Crops are random in ``"train"`` mode (seeded) and centered in ``"eval"`` mode.
    """
    if target_s <= 0:
        raise ValueError(f"target_s must be positive, got {target_s}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = int(round(target_s * clip.sample_rate))
    x = clip.samples
    if x.shape[1] < n:
        x = np.pad(x, ((0, 0), (0, n - x.shape[1])))
    elif x.shape[1] > n:
        slack = x.shape[1] - n
        if mode == "train":
            start = int(np.random.default_rng(seed).integers(0, slack + 1))
        else:
            start = slack // 2
        x = x[:, start : start + n]
    return AudioClip(x, clip.sample_rate, clip.source_path)


def resample(clip: AudioClip, target_sr: int) -> AudioClip:
    if clip.sample_rate == target_sr:
        return clip
    g = gcd(clip.sample_rate, target_sr)
    y = signal.resample_poly(clip.samples, target_sr // g, clip.sample_rate // g, axis=1)
    return AudioClip(y, target_sr, clip.source_path)


def to_mono(clip: AudioClip) -> AudioClip:
    if clip.channels == 1:
        return clip
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate, clip.source_path)


def stft_power(clip: AudioClip | np.ndarray, cfg: StftConfig = StftConfig(), sample_rate: int | None = None) -> PowerSpectrogram:
    """Power spectrogram ``Re(X)^2 + Im(X)^2`` of a mono signal, no edge padding."""
    if isinstance(clip, AudioClip):
        if clip.channels != 1:
            raise ValueError("stft_power expects a mono clip; downmix or split channels first")
        x, sr = clip.samples[0], clip.sample_rate
    else:
        x = np.asarray(clip, dtype=np.float64)
        sr = sample_rate or cfg.target_sample_rate
        if x.ndim != 1:
            raise ValueError("stft_power expects a 1-D signal")
    if x.shape[0] < cfg.window_length:
        raise ValueError(
            f"signal of {x.shape[0]} samples is shorter than one window ({cfg.window_length})"
        )
    window = signal.get_window(cfg.window_function, cfg.window_length, fftbins=True)
    frames = sliding_window_view(x, cfg.window_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * window, axis=1)
    power = spec.real**2 + spec.imag**2
    return PowerSpectrogram(np.ascontiguousarray(power.T), sr / cfg.window_length)


def band_split(spec: PowerSpectrogram | np.ndarray) -> BandedSpectrogram:
    """Split the frequency axis into three equal thirds stacked as channels.

    When the bin count is not divisible by 3, the top (highest-frequency)
    remainder rows are dropped first.
    """
    values = spec.values if isinstance(spec, PowerSpectrogram) else np.asarray(spec)
    bin_hz = spec.bin_hz if isinstance(spec, PowerSpectrogram) else float("nan")
    if values.ndim != 2:
        raise ValueError(f"expected [freq, time] array, got shape {values.shape}")
    f = values.shape[0]
    if f < 3:
        raise ValueError(f"need at least 3 frequency bins, got {f}")
    part = f // 3
    return BandedSpectrogram(values[: 3 * part].reshape(3, part, values.shape[1]), bin_hz)


def unsplit(banded: BandedSpectrogram | np.ndarray) -> np.ndarray:
    v = banded.values if isinstance(banded, BandedSpectrogram) else np.asarray(banded)
    return v.reshape(-1, v.shape[-1])


def standardize_spectrogram(values: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-spectrogram zero mean / unit variance, std floored at ``eps``."""
    values = np.asarray(values, dtype=np.float64)
    return (values - values.mean()) / max(values.std(), eps)


def pipeline(
    clip: AudioClip,
    cfg: StftConfig = StftConfig(),
    target_s: float = 5.0,
    mode: str = "eval",
    seed: int = 0,
    stereo: bool = False,
) -> BandedSpectrogram:
    """Full front end for one clip.

    With ``stereo=True`` each of two channels runs separately and the result
    has ``6`` channels (left bands, then right bands); mono input is duplicated.
    """
    clip = standardize_length(clip, target_s, mode=mode, seed=seed)
    clip = resample(clip, cfg.target_sample_rate)
    if not stereo:
        return band_split(stft_power(to_mono(clip), cfg))
    chans = clip.samples if clip.channels >= 2 else np.repeat(clip.samples, 2, axis=0)
    parts = [
        band_split(stft_power(AudioClip(ch[None, :], clip.sample_rate), cfg)) for ch in chans[:2]
    ]
    return BandedSpectrogram(np.concatenate([p.values for p in parts], axis=0), parts[0].bin_hz)


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Dump an array as ``DLST`` magic, uint32 ndim, uint32 dims, little-endian float32 data."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a DLST tensor file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    data = np.frombuffer(raw, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload size {data.size} does not match shape {shape}")
    return data.reshape(shape).copy()
