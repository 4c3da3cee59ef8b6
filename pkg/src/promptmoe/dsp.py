"""IQ capture to 128x128 STFT magnitude spectrogram.

Frame ``m`` covers samples ``[m*hop, m*hop + n_fft)``, is multiplied by a
periodic Hann window and transformed with a full complex DFT, so all
``n_fft`` bins are kept and bin ``k`` sits in row ``k`` (no fftshift unless
asked for).  The time axis is then zero-padded or cropped to a square grid.
No scaling or normalization is applied.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

N_SAMPLES = 1024
N_FFT = 128
HOP = 8
GRID = 128


@dataclass
class IQRecord:
    samples: np.ndarray  # complex64, shape (n,)
    label: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        s = np.asarray(self.samples)
        if not np.iscomplexobj(s):
            s = s.astype(np.float32)
        self.samples = s.astype(np.complex64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("IQRecord needs at least one sample")
        if not np.all(np.isfinite(self.samples.view(np.float32))):
            raise ValueError("IQRecord samples must be finite")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class STFTConfig:
    n_samples: int = N_SAMPLES
    n_fft: int = N_FFT
    hop: int = HOP
    grid: int = GRID
    periodic_window: bool = True
    fftshift: bool = False

    @property
    def n_frames(self) -> int:
        return (self.n_samples - self.n_fft) // self.hop + 1


DEFAULT_STFT = STFTConfig()


def frame_signal(rec: IQRecord | np.ndarray, n_samples: int = N_SAMPLES) -> np.ndarray:
    """Truncate to the first ``n_samples`` or right-pad with complex zeros."""
    s = rec.samples if isinstance(rec, IQRecord) else np.asarray(rec, dtype=np.complex64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot frame an empty record")
    if s.size >= n_samples:
        return s[:n_samples].astype(np.complex64, copy=True)
    out = np.zeros(n_samples, dtype=np.complex64)
    out[: s.size] = s
    return out


def hann_window(n: int, periodic: bool = True) -> np.ndarray:
    """Hann window; periodic form is w[k] = 0.5 (1 - cos(2 pi k / n))."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    denom = n if periodic else n - 1
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / denom))


def stft_magnitude(frame: np.ndarray, cfg: STFTConfig = DEFAULT_STFT) -> np.ndarray:
    """Magnitude STFT as an ``(n_fft, n_frames)`` float32 grid."""
    frame = np.asarray(frame)
    if frame.shape[-1] != cfg.n_samples:
        raise ValueError(f"expected {cfg.n_samples} samples, got {frame.shape[-1]}")
    w = hann_window(cfg.n_fft, cfg.periodic_window)
    starts = np.arange(cfg.n_frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.n_fft)[None, :]
    segs = frame.astype(np.complex128)[..., idx] * w  # (..., frames, n_fft)
    spec = np.abs(np.fft.fft(segs, axis=-1))
    if cfg.fftshift:
        spec = np.fft.fftshift(spec, axes=-1)
    return np.swapaxes(spec, -1, -2).astype(np.float32)


def pad_crop_to_square(raw: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Right-pad or crop the time axis to ``grid`` columns."""
    raw = np.asarray(raw, dtype=np.float32)
    if raw.shape[-2] != grid:
        raise ValueError(f"expected {grid} frequency rows, got {raw.shape[-2]}")
    t = raw.shape[-1]
    if t >= grid:
        return np.ascontiguousarray(raw[..., :grid])
    out = np.zeros(raw.shape[:-1] + (grid,), dtype=np.float32)
    out[..., :t] = raw
    return out


def iq_to_spectrogram(rec: IQRecord | np.ndarray, cfg: STFTConfig = DEFAULT_STFT) -> np.ndarray:
    frame = frame_signal(rec, cfg.n_samples)
    return pad_crop_to_square(stft_magnitude(frame, cfg), cfg.grid)


def batch_spectrograms(records: Iterable[IQRecord], cfg: STFTConfig = DEFAULT_STFT) -> np.ndarray:
    frames = [frame_signal(r, cfg.n_samples) for r in records]
    if not frames:
        return np.zeros((0, cfg.grid, cfg.grid), dtype=np.float32)
    frames = np.stack(frames)
    return pad_crop_to_square(stft_magnitude(frames, cfg), cfg.grid)


# binary formats ------------------------------------------------------------

def write_iq(path: str | os.PathLike, records: Sequence[IQRecord]) -> list[tuple[int, int]]:
    """Append records as little-endian interleaved f32 (I0, Q0, I1, Q1, ...).

    Returns ``(byte_offset, n_samples)`` per record.
    """
    spans = []
    with open(path, "wb") as fh:
        for r in records:
            iq = np.empty(2 * r.samples.size, dtype="<f4")
            iq[0::2] = r.samples.real
            iq[1::2] = r.samples.imag
            spans.append((fh.tell(), r.samples.size))
            fh.write(iq.tobytes())
    return spans


def read_iq(path: str | os.PathLike, offset: int, length: int) -> np.ndarray:
    with open(path, "rb") as fh:
        fh.seek(offset)
        buf = fh.read(8 * length)
    if len(buf) != 8 * length:
        raise ValueError(f"short read at offset {offset} in {path}")
    iq = np.frombuffer(buf, dtype="<f4")
    return (iq[0::2] + 1j * iq[1::2]).astype(np.complex64)


def write_spectrogram_cache(prefix: str | os.PathLike, specs: np.ndarray, labels: Sequence[int]) -> None:
    """Write ``<prefix>.f32`` (raw row-major 128x128 blocks) and ``<prefix>.json``."""
    specs = np.asarray(specs, dtype="<f4")
    if specs.ndim != 3 or len(specs) != len(labels):
        raise ValueError("specs must be (n, H, W) with one label per record")
    prefix = os.fspath(prefix)
    with open(prefix + ".f32", "wb") as fh:
        fh.write(np.ascontiguousarray(specs).tobytes())
    header = {"count": int(len(specs)), "height": int(specs.shape[1]), "width": int(specs.shape[2]),
              "dtype": "float32-le", "labels": [int(v) for v in labels]}
    with open(prefix + ".json", "w") as fh:
        json.dump(header, fh)


def read_spectrogram_cache(prefix: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    prefix = os.fspath(prefix)
    with open(prefix + ".json") as fh:
        header = json.load(fh)
    n, h, w = header["count"], header["height"], header["width"]
    data = np.fromfile(prefix + ".f32", dtype="<f4")
    if data.size != n * h * w:
        raise ValueError(f"cache payload has {data.size} values, header promises {n * h * w}")
    return data.reshape(n, h, w).astype(np.float32), np.asarray(header["labels"], dtype=np.int64)
