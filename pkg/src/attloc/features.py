"""Log-mel front end: 64 ms Hann frames with half overlap, 40 HTK mel bands."""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000
WIN = 1024
HOP = 512
N_MELS = 40
CHUNK_SAMPLES = 4 * SAMPLE_RATE
MAX_SAMPLES = CHUNK_SAMPLES + HOP
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-6

log = logging.getLogger(__name__)


@dataclass
class AudioChunk:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        if self.samples.ndim != 1:
            raise ValueError(f"audio must be mono, got shape {self.samples.shape}")
        n = len(self.samples)
        if not 1 <= n <= MAX_SAMPLES:
            raise ValueError(f"audio length {n} outside [1, {MAX_SAMPLES}]")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def n_frames(n_samples):
    """Frame count for a signal of ``n_samples`` (trailing partial frame dropped)."""
    if n_samples < WIN:
        raise ValueError(f"audio has {n_samples} samples, need at least {WIN} for one frame")
    return (n_samples - WIN) // HOP + 1


@lru_cache(maxsize=None)
def hann():
    w = get_window("hann", WIN, fftbins=True)
    w.flags.writeable = False
    return w


def frame_signal(audio):
    """Cut an AudioChunk into Hann-windowed frames, shape (T, 1024)."""
    x = audio.samples
    t = n_frames(len(x))
    frames = sliding_window_view(x, WIN)[::HOP][:t]
    return frames * hann()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers():
    """Center frequency in Hz of each of the 40 filters."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    return edges[1:-1]


@lru_cache(maxsize=None)
def mel_filterbank():
    """(40, 513) matrix of unit-peak triangular filters on the HTK mel scale."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    freqs = np.arange(WIN // 2 + 1) * SAMPLE_RATE / WIN
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def log_mel(windows):
    """Natural-log mel energies of windowed frames, shape (T, 40), unnormalized."""
    power = np.abs(np.fft.rfft(windows, n=WIN, axis=-1)) ** 2
    energy = power @ mel_filterbank().T
    return np.log(np.maximum(energy, LOG_FLOOR))


def mel_chunk(audio):
    return log_mel(frame_signal(audio))


def fit_norm(chunks):
    """Per-bin mean and population std over every frame of the training chunks."""
    if len(chunks) < 2:
        raise ValueError(f"fit_norm needs at least 2 chunks, got {len(chunks)}")
    allframes = np.concatenate([np.asarray(c, dtype=np.float64) for c in chunks], axis=0)
    mean = allframes.mean(axis=0)
    std = allframes.std(axis=0)
    low = std < STD_FLOOR
    if low.any():
        log.warning("clamping std of %d degenerate mel bins to %g", int(low.sum()), STD_FLOOR)
        std = np.where(low, STD_FLOOR, std)
    return NormStats(mean=mean, std=std)


def apply_norm(chunk, stats):
    return (np.asarray(chunk, dtype=np.float64) - stats.mean) / stats.std
