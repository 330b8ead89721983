"""Signal-processing primitives shared by the perturbation operators."""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

ZWICKER_EDGES_HZ = (20, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480,
                    1720, 2000, 2320, 2700, 3150, 3700, 4400, 5300, 6400, 7700,
                    9500, 12000, 15500)
N_BARK_BANDS = 24


def bark_band_edges(sample_rate_hz: int) -> list[tuple[float, float]]:
    """The 24 Zwicker critical bands, truncated at Nyquist.

    Below 31 kHz some tabulated bands lie entirely above Nyquist. The highest
    band that still starts below Nyquist is truncated there and split into equal
    sub-bands so exactly 24 bands with strictly increasing edges are returned.
    """
    if sample_rate_hz < 16000:
        raise ValueError("Bark band layout needs sample_rate_hz >= 16000")
    nyq = sample_rate_hz / 2
    edges = [float(e) for e in ZWICKER_EDGES_HZ]
    lows = [e for e in edges[:-1] if e < nyq]
    if len(lows) == N_BARK_BANDS and edges[-1] <= nyq:
        return list(zip(edges[:-1], edges[1:]))
    kept = lows[:-1]
    top_lo = lows[-1]
    missing = N_BARK_BANDS - len(kept)
    split = list(np.linspace(top_lo, nyq, missing + 1))
    all_edges = kept + split
    return [(float(a), float(b)) for a, b in zip(all_edges[:-1], all_edges[1:])]


def stft(x: np.ndarray, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Centered Hann STFT, shape (n_fft//2+1, frames)."""
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect" if x.size > pad else "constant")
    n_frames = 1 + (xp.size - n_fft) // hop
    win = np.hanning(n_fft + 1)[:-1]
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * win, axis=1).T


def istft(spec: np.ndarray, hop: int = 256, length: int | None = None) -> np.ndarray:
    n_fft = 2 * (spec.shape[0] - 1)
    win = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += win**2
    y /= np.where(norm > 1e-8, norm, 1.0)
    y = y[n_fft // 2:]
    if length is not None:
        y = np.pad(y, (0, max(0, length - y.size)))[:length]
    return y


def phase_vocoder_stretch(x: np.ndarray, rate: float, n_fft: int = 1024,
                          hop: int = 256) -> np.ndarray:
    """Time-stretch by ``rate`` (>1 shortens) keeping pitch; output len round(len/rate)."""
    S = stft(x, n_fft, hop)
    n_bins, n_frames = S.shape
    steps = np.arange(0, n_frames, rate)
    Sp = np.pad(S, ((0, 0), (0, 2)))
    omega = np.pi * hop * np.arange(n_bins) / (n_bins - 1)
    phase = np.angle(S[:, 0])
    out = np.empty((n_bins, steps.size), dtype=complex)
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        a, b = Sp[:, i], Sp[:, i + 1]
        mag = (1 - frac) * np.abs(a) + frac * np.abs(b)
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi
    return istft(out, hop, length=int(round(x.size / rate)))


def sinc_resample(x: np.ndarray, out_len: int, half_width: int = 16) -> np.ndarray:
    """Band-limited resampling of ``x`` onto ``out_len`` evenly spaced points.

    Hann-windowed sinc kernel; the cutoff drops below Nyquist when downsampling.
    """
    n = x.size
    if out_len < 1:
        raise ValueError("out_len must be positive")
    step = n / out_len
    fc = min(1.0, 1.0 / step)
    reach = int(np.ceil(half_width / fc))
    t = np.arange(out_len) * step
    base = np.floor(t).astype(np.int64)
    offs = np.arange(-reach, reach + 1)
    idx = base[:, None] + offs[None, :]
    d = t[:, None] - idx
    kernel = fc * np.sinc(fc * d) * (0.5 + 0.5 * np.cos(np.pi * np.clip(d / (reach + 1), -1, 1)))
    valid = (idx >= 0) & (idx < n)
    vals = np.where(valid, x[np.clip(idx, 0, n - 1)], 0.0)
    return np.sum(vals * kernel, axis=1)


def compress(x: np.ndarray, sample_rate_hz: int, threshold_db: float, ratio: float,
             attack_s: float = 0.005, release_s: float = 0.05,
             detector_s: float = 0.005) -> np.ndarray:
    """Feed-forward hard-knee compressor, no makeup gain.

    Levels are RMS dB re full scale (20 log10 rms). The power detector is a
    one-pole average; attack/release smooth the gain in dB, so a steady tone
    settles exactly on the static curve ``T + (L - T) / ratio``.
    """
    a_det = np.exp(-1.0 / (detector_s * sample_rate_hz))
    a_att = np.exp(-1.0 / (attack_s * sample_rate_hz))
    a_rel = np.exp(-1.0 / (release_s * sample_rate_hz))
    slope = 1.0 - 1.0 / ratio
    # detector starts settled on the first 5 ms so the opening transient is bounded
    head = x[:max(1, int(detector_s * sample_rate_hz))]
    p0 = float(np.mean(head**2))
    power, _ = lfilter([1 - a_det], [1, -a_det], x * x, zi=[a_det * p0])
    level = 10 * np.log10(np.maximum(power, 1e-20))
    target = np.minimum(0.0, (threshold_db - level) * slope).tolist()
    gain_db = min(0.0, (threshold_db - 10 * np.log10(max(p0, 1e-20))) * slope)
    gains = [0.0] * len(target)
    for i, tgt in enumerate(target):
        a = a_att if tgt < gain_db else a_rel
        gain_db = a * gain_db + (1 - a) * tgt
        gains[i] = gain_db
    return x * 10 ** (np.asarray(gains) / 20)


def rms_db(x: np.ndarray) -> float:
    return float(20 * np.log10(max(np.sqrt(np.mean(x**2)), 1e-12)))
