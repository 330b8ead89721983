"""Audio container, 16-bit WAV I/O and deterministic test-signal synthesis."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SR = 16000


class AudioFormatError(ValueError):
    """Raised for WAV files we cannot decode."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("AudioClip needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))

    def clipped(self) -> "AudioClip":
        return AudioClip(np.clip(self.samples, -1.0, 1.0), self.sample_rate_hz)


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM RIFF/WAVE file; stereo is downmixed by channel mean."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, sr, _, block_align, bits = fmt
    if tag != 1:
        raise AudioFormatError(f"{path}: unsupported compression tag {tag}")
    if bits != 16:
        raise AudioFormatError(f"{path}: unsupported bit depth {bits}")
    if channels < 1 or block_align != 2 * channels:
        raise AudioFormatError(f"{path}: inconsistent channel layout")
    n = len(pcm) // block_align
    if n < 1:
        raise AudioFormatError(f"{path}: no samples")
    frames = np.frombuffer(pcm[:n * block_align], dtype="<i2").reshape(n, channels)
    mono = frames.astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(mono, sr)


def write_wav(clip: AudioClip, path) -> None:
    """Write mono 16-bit PCM. Values are saturated to the int16 range."""
    if not str(path):
        raise OSError("empty output path")
    q = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    sr = clip.sample_rate_hz
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    data = b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(header + fmt + data)


def synth_tone(freq_hz: float, duration_s: float, amplitude: float = 0.5,
               sample_rate_hz: int = DEFAULT_SR) -> AudioClip:
    if not 0 < freq_hz < sample_rate_hz / 2:
        raise ValueError(f"frequency {freq_hz} Hz violates Nyquist for {sample_rate_hz} Hz")
    if not 0 < amplitude <= 1:
        raise ValueError("amplitude must lie in (0, 1]")
    n = max(1, int(round(duration_s * sample_rate_hz)))
    t = np.arange(n) / sample_rate_hz
    return AudioClip(amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate_hz)


@dataclass
class CorpusConfig:
    """Toy classification corpus.

    Each class owns a small set of note fundamentals and a harmonic profile;
    each clip is a random melody over its class's notes, so clip identity lives
    in pitch and rhythm while level and noise floor stay nearly constant.
    """

    n_classes: int = 4
    clips_per_class: int = 8
    duration_s: float = 2.0
    sample_rate_hz: int = DEFAULT_SR
    note_sets_hz: list = field(default_factory=lambda: [
        [110.0, 130.8, 164.8], [146.8, 174.6, 220.0], [196.0, 246.9, 293.7],
        [261.6, 329.6, 392.0], [123.5, 185.0, 277.2], [87.3, 207.7, 349.2]])
    n_partials: int = 8
    notes_per_clip: tuple = (4, 9)
    noise_floor_db: tuple = (-62.0, -58.0)
    amplitude: tuple = (0.4, 0.5)
    # per-class harmonic rolloff exponents (partial k has weight k**-p); empty means p = 1
    rolloff: tuple = ()


def _class_profile(cfg: CorpusConfig, label: int) -> np.ndarray:
    ks = np.arange(1, cfg.n_partials + 1)
    p = cfg.rolloff[label % len(cfg.rolloff)] if cfg.rolloff else 1.0
    base = ks ** -float(p)
    # even classes: full harmonic series; odd classes: odd harmonics dominate
    return base if label % 2 == 0 else np.where(ks % 2 == 1, base, 0.05 * base)


def synth_clip(cfg: CorpusConfig, label: int, rng: np.random.Generator) -> AudioClip:
    sr = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * sr))
    notes = cfg.note_sets_hz[label % len(cfg.note_sets_hz)]
    profile = _class_profile(cfg, label)
    n_notes = int(rng.integers(cfg.notes_per_clip[0], cfg.notes_per_clip[1] + 1))
    bounds = np.concatenate([[0], np.sort(rng.choice(np.arange(1, n), n_notes - 1, replace=False)), [n]])
    y = np.zeros(n)
    for a, b in zip(bounds[:-1], bounds[1:]):
        f0 = notes[int(rng.integers(len(notes)))]
        t = np.arange(b - a) / sr
        env = np.exp(-t * rng.uniform(0.5, 3.0)) * np.minimum(1.0, t / 0.01)
        seg = np.zeros(b - a)
        for k, w in enumerate(profile, start=1):
            if k * f0 < 0.45 * sr:
                seg += w * rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        y[a:b] = seg * env
    y *= rng.uniform(*cfg.amplitude) / np.max(np.abs(y))
    y += 10 ** (rng.uniform(*cfg.noise_floor_db) / 20) * rng.standard_normal(n)
    return AudioClip(np.clip(y, -1.0, 1.0), sr)


def synth_corpus(cfg: CorpusConfig | None = None, seed: int = 0) -> list[tuple[AudioClip, int]]:
    """Deterministic labelled corpus of ``n_classes * clips_per_class`` clips."""
    cfg = cfg or CorpusConfig()
    rng = np.random.Generator(np.random.Philox(key=seed))
    out = []
    for label in range(cfg.n_classes):
        for _ in range(cfg.clips_per_class):
            out.append((synth_clip(cfg, label, rng), label))
    return out
