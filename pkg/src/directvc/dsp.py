"""Signal-processing front end: STFT, MFCC, CMVN, Griffin-Lim and WAV I/O."""
from __future__ import annotations

import wave
from functools import lru_cache
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import get_window

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-12


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    frame_len: int = 400
    frame_hop: int = 160
    fft_size: int = 512
    mel_channels: int = 80
    mfcc_order: int = 40
    griffin_lim_iters: int = 60
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        for name in ("sample_rate", "frame_len", "frame_hop", "fft_size", "mel_channels", "mfcc_order"):
            if getattr(self, name) <= 0:
                raise DspError(f"{name} must be positive")
        if self.griffin_lim_iters < 0:
            raise DspError("griffin_lim_iters must be non-negative")
        if self.frame_len > self.fft_size:
            raise DspError("frame_len must not exceed fft_size")
        if self.mfcc_order > self.mel_channels:
            raise DspError("mfcc_order must not exceed mel_channels")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    frames: np.ndarray
    frame_hop_s: float
    fft_size: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.fft_size // 2 + 1:
            raise DspError(f"spectrogram must have {self.fft_size // 2 + 1} bins, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)) or np.any(self.frames < 0):
            raise DspError("spectrogram magnitudes must be finite and non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MfccSequence:
    frames: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DspError("MFCC frames must be a T x D matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def order(self) -> int:
        return self.frames.shape[1]


def n_frames(n_samples: int, frame_len: int, frame_hop: int) -> int:
    if n_samples < frame_len:
        raise DspError(f"utterance too short: {n_samples} samples < one frame of {frame_len}")
    return 1 + (n_samples - frame_len) // frame_hop


@lru_cache(maxsize=16)
def _window(frame_len: int) -> np.ndarray:
    w = get_window("hann", frame_len, fftbins=True).astype(np.float64)
    w.flags.writeable = False
    return w


def analysis_window(cfg: DspConfig) -> np.ndarray:
    return _window(cfg.frame_len)


def _check_rate(w: Waveform, cfg: DspConfig):
    if w.sample_rate != cfg.sample_rate:
        raise DspError(f"sample rate {w.sample_rate} Hz does not match configured {cfg.sample_rate} Hz")


def stft_complex(samples: np.ndarray, cfg: DspConfig) -> np.ndarray:
    t = n_frames(len(samples), cfg.frame_len, cfg.frame_hop)
    frames = sliding_window_view(samples, cfg.frame_len)[:: cfg.frame_hop][:t]
    return np.fft.rfft(frames * analysis_window(cfg), n=cfg.fft_size, axis=1)


def stft(w: Waveform, cfg: DspConfig = DspConfig()) -> Spectrogram:
    """Magnitude STFT with a Hann window, zero-padded to ``cfg.fft_size``."""
    if len(w) == 0:
        raise DspError("empty waveform")
    _check_rate(w, cfg)
    mag = np.abs(stft_complex(w.samples, cfg))
    return Spectrogram(mag, cfg.frame_hop / cfg.sample_rate, cfg.fft_size)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular filters of unit peak, shape (mel_channels, n_bins), spanning 0 Hz to Nyquist.

    Cached per config; the returned array is read-only.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.mel_channels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((cfg.mel_channels, cfg.n_bins))
    for m in range(cfg.mel_channels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.flags.writeable = False
    return fb


def mfcc_from_magnitudes(mag: np.ndarray, cfg: DspConfig = DspConfig()) -> MfccSequence:
    """Cepstra c_1..c_D of a magnitude spectrogram (c_0 dropped)."""
    mel = np.einsum("tf,mf->tm", mag, mel_filterbank(cfg))
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    cep = dct(logmel, type=2, norm="ortho", axis=1)
    return MfccSequence(cep[:, 1 : cfg.mfcc_order + 1], normalized=False)


def mfcc(w: Waveform, cfg: DspConfig = DspConfig()) -> MfccSequence:
    return mfcc_from_magnitudes(stft(w, cfg).frames, cfg)


def cmvn(m: MfccSequence, var_floor: float = VAR_FLOOR) -> MfccSequence:
    """Per-utterance, per-dimension mean/variance normalization (population variance)."""
    x = m.frames
    if x.shape[0] < 2:
        raise DspError("cmvn needs at least 2 frames")
    mu = x.mean(axis=0)
    centered = x - mu
    var = np.mean(centered**2, axis=0)
    std = np.where(var > var_floor, np.sqrt(var), 1.0)
    out = np.where(var > var_floor, centered / std, 0.0)
    return MfccSequence(out, normalized=True)


def istft_lsee(spec: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Least-squares inverse STFT; the window-squared normalization makes it a projection."""
    t = spec.shape[0]
    win = analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.frame_len] * win
    length = (t - 1) * cfg.frame_hop + cfg.frame_len
    num = np.zeros(length)
    den = np.zeros(length)
    for i in range(t):
        s = i * cfg.frame_hop
        num[s : s + cfg.frame_len] += frames[i]
        den[s : s + cfg.frame_len] += win**2
    return np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)


def magnitude_error(target: np.ndarray, samples: np.ndarray, cfg: DspConfig) -> float:
    """Relative L2 distance between a target magnitude spectrogram and |STFT(samples)|."""
    achieved = np.abs(stft_complex(samples, cfg))
    denom = np.linalg.norm(target)
    if denom == 0.0:
        return float(np.linalg.norm(achieved))
    return float(np.linalg.norm(achieved - target) / denom)


def griffin_lim(s: Spectrogram, cfg: DspConfig = DspConfig(), iters: int | None = None,
                trace: list | None = None) -> Waveform:
    """Iterative phase reconstruction starting from zero phase.

    If ``trace`` is a list, the relative magnitude error after every iteration
    (including iteration 0) is appended to it.
    """
    if s.fft_size != cfg.fft_size:
        raise DspError("spectrogram fft_size does not match config")
    iters = cfg.griffin_lim_iters if iters is None else iters
    target = s.frames
    x = istft_lsee(target.astype(np.complex128), cfg)
    if trace is not None:
        trace.append(magnitude_error(target, x, cfg))
    for _ in range(iters):
        spec = stft_complex(x, cfg)
        mag = np.abs(spec)
        phase = np.where(mag > 0, spec / np.where(mag > 0, mag, 1.0), 1.0)
        x = istft_lsee(target * phase, cfg)
        if trace is not None:
            trace.append(magnitude_error(target, x, cfg))
    return Waveform(x, cfg.sample_rate)


def read_wav(path, sample_rate: int = 16000) -> Waveform:
    """Read a mono 16-bit PCM WAV; other layouts and rates are rejected."""
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise DspError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise DspError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != sample_rate:
            raise DspError(f"{path}: expected {sample_rate} Hz, got {f.getframerate()} Hz")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, sample_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform):
    path = Path(path)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(to_pcm16(w.samples).tobytes())
