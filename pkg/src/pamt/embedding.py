"""Frame-embedding sequences: the frozen toy encoder and the PEMB file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .audio import AudioClip

FRAME_LEN = 320
FRAME_RATE_HZ = 50.0
N_BANDS = 64
ENCODER_DIM = 768
PAMT_DIM = 128
_N_FFT = 1024
_LOG_FLOOR = 1e-8

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingSequence:
    data: np.ndarray
    frame_rate_hz: float = FRAME_RATE_HZ

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"embedding sequence must be T x D with T >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("embedding sequence contains non-finite values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]

    def pooled(self) -> np.ndarray:
        return self.data.mean(axis=0)


def _mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_inv(m):
    return 700.0 * (10 ** (m / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate_hz: int = 16000, n_bands: int = N_BANDS, n_fft: int = _N_FFT) -> np.ndarray:
    """Triangular mel-spaced filters, shape (n_fft//2+1, n_bands), each column sums to 1."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    pts = _mel_inv(np.linspace(_mel(20.0), _mel(sample_rate_hz / 2), n_bands + 2))
    fb = np.zeros((freqs.size, n_bands))
    for j in range(n_bands):
        lo, c, hi = pts[j], pts[j + 1], pts[j + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        w = np.maximum(0.0, np.minimum(up, down))
        if w.sum() == 0:
            w[np.argmin(np.abs(freqs - c))] = 1.0
        fb[:, j] = w / w.sum()
    return fb


class ToyEncoder:
    """Frozen stand-in for a pretrained frame encoder.

    20 ms frames -> 64 log mel band energies -> fixed orthonormal lift to 768
    dims. The lift is drawn once from ``seed`` and never trained.
    """

    def __init__(self, seed: int = 0, sample_rate_hz: int = 16000):
        self.seed = seed
        self.sample_rate_hz = sample_rate_hz
        rng = np.random.Generator(np.random.Philox(key=seed))
        q, _ = np.linalg.qr(rng.standard_normal((ENCODER_DIM, N_BANDS)))
        # rows orthonormal: the lift preserves distances between band-energy vectors
        self._lift = torch.from_numpy(np.ascontiguousarray(q.T))
        self._fb = torch.from_numpy(mel_filterbank(sample_rate_hz))
        self._window = torch.from_numpy(np.hanning(FRAME_LEN + 1)[:-1].copy())

    def band_energies(self, x: torch.Tensor) -> torch.Tensor:
        """Log10 mel band energies of non-overlapping frames, (T, 64)."""
        T = x.shape[-1] // FRAME_LEN
        if T < 1:
            raise ValueError(f"clip shorter than one {FRAME_LEN}-sample frame")
        frames = x[..., :T * FRAME_LEN].reshape(*x.shape[:-1], T, FRAME_LEN)
        spec = torch.fft.rfft(frames * self._window.to(x.dtype), n=_N_FFT)
        power = spec.real**2 + spec.imag**2
        return torch.log10(power @ self._fb.to(x.dtype) + _LOG_FLOOR)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable path from waveform (..., n) to (..., T, 768)."""
        return self.band_energies(x) @ self._lift.to(x.dtype)

    def __call__(self, clip: AudioClip) -> EmbeddingSequence:
        if clip.sample_rate_hz != self.sample_rate_hz:
            raise ValueError(f"encoder expects {self.sample_rate_hz} Hz, clip is {clip.sample_rate_hz} Hz")
        with torch.no_grad():
            e = self.encode_tensor(torch.from_numpy(clip.samples))
        return EmbeddingSequence(e.numpy(), FRAME_RATE_HZ)


@lru_cache(maxsize=4)
def get_encoder(seed: int = 0, sample_rate_hz: int = 16000) -> ToyEncoder:
    return ToyEncoder(seed, sample_rate_hz)


def toy_encode(clip: AudioClip, encoder_seed: int = 0) -> EmbeddingSequence:
    return get_encoder(encoder_seed, clip.sample_rate_hz)(clip)


def write_embeddings(seq: EmbeddingSequence, path) -> None:
    T, D = seq.data.shape
    header = PEMB_MAGIC + struct.pack("<IIIf", PEMB_VERSION, T, D, seq.frame_rate_hz)
    Path(path).write_bytes(header + np.ascontiguousarray(seq.data, dtype="<f4").tobytes())


def read_embeddings(path, expected_dim: int | None = None) -> EmbeddingSequence:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise EmbeddingFormatError(f"{path}: truncated header")
    if data[:4] != PEMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {data[:4]!r}")
    version, T, D, rate = struct.unpack_from("<IIIf", data, 4)
    if version != PEMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if expected_dim is not None and D != expected_dim:
        raise EmbeddingFormatError(f"{path}: dimension {D} != expected {expected_dim}")
    need = 20 + 4 * T * D
    if len(data) < need:
        raise EmbeddingFormatError(f"{path}: header claims {T}x{D} but payload holds {(len(data) - 20) // (4 * max(D, 1))} rows")
    arr = np.frombuffer(data, dtype="<f4", count=T * D, offset=20).reshape(T, D)
    return EmbeddingSequence(arr.astype(np.float32), float(rate))
