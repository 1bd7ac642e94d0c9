"""Segment featurization: log spectrogram plus its first-order delta.

A 2000-sample segment becomes a (129, 32, 2) tensor: channel 0 is the dB
magnitude of a centered Hann STFT (n_fft 256, hop 64), channel 1 is the
per-frequency regression delta of channel 0 across frames. A naive O(n^2)
DFT is included as an oracle so the FFT path can be verified exactly.
"""

from __future__ import annotations

import functools
import os
import struct

import numpy as np

from .errors import InputError
from .ingest import _atomic_write_bytes

N_FFT = 256
HOP = 64
N_BINS = N_FFT // 2 + 1
DELTA_WIDTH = 9
LOG_FLOOR = 1e-10

_FEATURE_MAGIC = b"SFTR"
_FEATURE_VERSION = 1


def hann_periodic(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window: 0.5 * (1 - cos(2 pi n / N))."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Indices implementing reflect padding (no edge repeat) of any width."""
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def frame_segment(segment: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered analysis frames: reflect-pad by n_fft/2, frame t covers
    padded samples [t*hop, t*hop + n_fft)."""
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("segment must be 1-D")
    if x.size < n_fft // 2:
        raise InputError(f"segment of {x.size} samples is shorter than n_fft/2 = {n_fft // 2}")
    padded = x[_reflect_indices(x.size, n_fft // 2)]
    n_frames = (padded.size - n_fft) // hop + 1
    starts = np.arange(n_frames) * hop
    return padded[starts[:, None] + np.arange(n_fft)[None, :]]


def stft_magnitude(segment: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Magnitude spectrogram, shape (n_fft/2 + 1, floor(len/hop) + 1)."""
    frames = frame_segment(segment, n_fft, hop) * hann_periodic(n_fft)
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1)).T


@functools.lru_cache(maxsize=4)
def _dft_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n // 2 + 1)[:, None]
    ang = 2.0 * np.pi * k * np.arange(n)[None, :] / n
    return np.cos(ang), np.sin(ang)


def naive_dft_frame(frame: np.ndarray) -> np.ndarray:
    """Direct O(n^2) DFT magnitudes for bins 0..n/2 (test oracle, no FFT)."""
    x = np.asarray(frame, dtype=np.float64)
    cos_basis, sin_basis = _dft_basis(x.size)
    return np.hypot(cos_basis @ x, sin_basis @ x)


def log_amplitude(mag: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """Amplitude in dB: 20*log10(max(m, floor)); no upper clamp."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    return 20.0 * np.log10(np.maximum(mag, floor))


def delta(grid: np.ndarray, width: int = DELTA_WIDTH, mode: str = "regression") -> np.ndarray:
    """First-order delta of each frequency row across frames.

    ``regression`` uses the usual least-squares slope over ``width`` frames,
    d_t = sum_n n * (c[t+n] - c[t-n]) / (2 * sum_n n^2), with edge frames
    replicated. ``diff`` is the plain 2-point difference, kept for ablation.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[1] < 1:
        raise ValueError("expected a (freq, frames) grid")
    if mode == "diff":
        padded = np.pad(grid, ((0, 0), (1, 1)), mode="edge")
        return 0.5 * (padded[:, 2:] - padded[:, :-2])
    if mode != "regression":
        raise ValueError(f"unknown delta mode {mode!r}")
    if width % 2 == 0 or width < 3:
        raise ValueError(f"delta width must be odd and >= 3, got {width}")
    half = (width - 1) // 2
    padded = np.pad(grid, ((0, 0), (half, half)), mode="edge")
    t = grid.shape[1]
    out = np.zeros_like(grid)
    for n in range(1, half + 1):
        out += n * (padded[:, half + n:half + n + t] - padded[:, half - n:half - n + t])
    return out / (2.0 * sum(n * n for n in range(1, half + 1)))


def featurize(segment: np.ndarray, n_fft: int = N_FFT, hop: int = HOP,
              delta_width: int = DELTA_WIDTH, delta_mode: str = "regression") -> np.ndarray:
    """Stack log spectrogram and its delta into a (bins, frames, 2) tensor."""
    log_spec = log_amplitude(stft_magnitude(segment, n_fft, hop))
    return np.stack([log_spec, delta(log_spec, delta_width, delta_mode)], axis=-1)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path: str, tensors: np.ndarray, labels: np.ndarray) -> None:
    """Write the binary feature format.

    Header: magic "SFTR", version u32, record count u32, dims as three u32.
    Each record: label u8 followed by the row-major float32 tensor.
    """
    tensors = np.asarray(tensors, dtype="<f4")
    labels = np.asarray(labels, dtype=np.uint8)
    if tensors.ndim != 4 or tensors.shape[0] != labels.size:
        raise ValueError("expected (n, bins, frames, channels) tensors with one label each")
    dims = tensors.shape[1:]
    parts = [_FEATURE_MAGIC, struct.pack("<IIIII", _FEATURE_VERSION, tensors.shape[0], *dims)]
    for tensor, label in zip(tensors, labels):
        parts.append(struct.pack("<B", int(label)))
        parts.append(np.ascontiguousarray(tensor).tobytes())
    _atomic_write_bytes(path, b"".join(parts))


def read_features(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a feature file back into (tensors float32, labels uint8)."""
    if not os.path.exists(path):
        raise InputError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != _FEATURE_MAGIC:
        raise InputError(f"malformed header in {path}")
    version, count, d0, d1, d2 = struct.unpack("<IIIII", blob[4:24])
    if version != _FEATURE_VERSION:
        raise InputError(f"malformed header in {path}: unsupported version {version}")
    record_bytes = 1 + 4 * d0 * d1 * d2
    if len(blob) - 24 != count * record_bytes:
        raise InputError(f"truncated feature file {path}")
    tensors = np.empty((count, d0, d1, d2), dtype=np.float32)
    labels = np.empty(count, dtype=np.uint8)
    offset = 24
    for i in range(count):
        labels[i] = blob[offset]
        start = offset + 1
        tensors[i] = np.frombuffer(blob[start:start + record_bytes - 1],
                                   dtype="<f4").reshape(d0, d1, d2)
        offset += record_bytes
    if np.any(labels >= 3):
        raise InputError(f"feature file {path} contains invalid labels")
    return tensors, labels
