"""The six perturbation operators, parameter sampling and vectorization.

Parameter ranges::

    L2Noise              eps_rel        [0.01, 1.0]   x RMS(signal)
    LInfNoise            eta_rel        [0.001, 0.01] x max|signal|
    BarkBandNoise        band_index     {0..23}, scale [0.1, 0.5] of band energy
    PitchShift           semitones      [-5, 5]
    SpeedChange          factor         [0.80, 1.20]
    DynRangeCompression  threshold_dbfs [-30, -10], ratio [2, 8]
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .audio import AudioClip

MIN_APPLY_LEN = 2048
VECTOR_LEN = 10


class Kind(enum.IntEnum):
    L2Noise = 0
    LInfNoise = 1
    BarkBandNoise = 2
    PitchShift = 3
    SpeedChange = 4
    DynRangeCompression = 5


# name -> (low, high) for every continuous parameter, in vector-slot order
PARAM_RANGES: dict[Kind, dict[str, tuple[float, float]]] = {
    Kind.L2Noise: {"eps_rel": (0.01, 1.0)},
    Kind.LInfNoise: {"eta_rel": (0.001, 0.01)},
    Kind.BarkBandNoise: {"band_index": (0, 23), "scale": (0.1, 0.5)},
    Kind.PitchShift: {"semitones": (-5.0, 5.0)},
    Kind.SpeedChange: {"factor": (0.80, 1.20)},
    Kind.DynRangeCompression: {"threshold_dbfs": (-30.0, -10.0), "ratio": (2.0, 8.0)},
}

KIND_ALIASES = {
    "l2": Kind.L2Noise, "linf": Kind.LInfNoise, "bark": Kind.BarkBandNoise,
    "pitch": Kind.PitchShift, "speed": Kind.SpeedChange, "drc": Kind.DynRangeCompression,
}


def parse_kind(name: str | int | Kind) -> Kind:
    if isinstance(name, Kind):
        return name
    if isinstance(name, int):
        return Kind(name)
    if name in Kind.__members__:
        return Kind[name]
    try:
        return KIND_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown perturbation kind {name!r}") from None


@dataclass
class PerturbationSpec:
    kind: Kind
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.kind = parse_kind(self.kind)
        ranges = PARAM_RANGES[self.kind]
        if set(self.params) != set(ranges):
            raise ValueError(f"{self.kind.name} expects params {sorted(ranges)}, got {sorted(self.params)}")
        for name, (lo, hi) in ranges.items():
            v = self.params[name]
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ValueError(f"{self.kind.name}.{name}={v} outside [{lo}, {hi}]")
        if self.kind == Kind.BarkBandNoise:
            self.params["band_index"] = int(self.params["band_index"])

    def to_json(self) -> dict:
        return {"kind": self.kind.name, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, obj: dict | str) -> "PerturbationSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(obj["kind"], dict(obj["params"]), int(obj.get("seed", 0)))


def sample_spec(seed: int, kind: Kind | str | None = None) -> PerturbationSpec:
    """Draw a spec with parameters uniform over their ranges."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    kind = Kind(int(rng.integers(len(Kind)))) if kind is None else parse_kind(kind)
    params = {}
    for name, (lo, hi) in PARAM_RANGES[kind].items():
        params[name] = int(rng.integers(lo, hi + 1)) if name == "band_index" else float(rng.uniform(lo, hi))
    noise_seed = int(rng.integers(2**63))
    return PerturbationSpec(kind, params, noise_seed)


def vectorize(spec: PerturbationSpec) -> np.ndarray:
    """one-hot(kind) ++ 4 parameter slots affinely mapped to [0, 1]."""
    v = np.zeros(VECTOR_LEN)
    v[int(spec.kind)] = 1.0
    for slot, (name, (lo, hi)) in enumerate(PARAM_RANGES[spec.kind].items()):
        v[len(Kind) + slot] = (spec.params[name] - lo) / (hi - lo)
    return v


def _noise_rng(spec: PerturbationSpec) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=spec.seed))


def band_mask(n: int, sample_rate_hz: int, band_index: int) -> np.ndarray:
    lo, hi = dsp.bark_band_edges(sample_rate_hz)[band_index]
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
    return (freqs >= lo) & (freqs < hi)


def band_limited_noise(n: int, sample_rate_hz: int, band_index: int,
                       rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    spec[~band_mask(n, sample_rate_hz, band_index)] = 0.0
    return np.fft.irfft(spec, n=n)


def band_energy(x: np.ndarray, sample_rate_hz: int, band_index: int) -> float:
    """Time-domain energy of the part of ``x`` inside a Bark band (Parseval)."""
    X = np.fft.rfft(x)
    X[~band_mask(x.size, sample_rate_hz, band_index)] = 0.0
    return float(np.sum(np.fft.irfft(X, n=x.size) ** 2))


def apply(spec: PerturbationSpec, clip: AudioClip, clip_output: bool = True) -> AudioClip:
    """Apply ``spec`` to ``clip``. Only SpeedChange alters the length."""
    x = clip.samples
    sr = clip.sample_rate_hz
    if x.size < MIN_APPLY_LEN:
        raise ValueError(f"clip has {x.size} samples; perturbations need >= {MIN_APPLY_LEN}")
    p = spec.params
    k = spec.kind
    if k == Kind.L2Noise:
        d = _noise_rng(spec).standard_normal(x.size)
        budget = p["eps_rel"] * np.sqrt(np.mean(x**2)) * np.sqrt(x.size)
        y = x + d * (budget / np.linalg.norm(d))
    elif k == Kind.LInfNoise:
        eta = p["eta_rel"] * np.max(np.abs(x))
        y = x + _noise_rng(spec).uniform(-eta, eta, x.size)
    elif k == Kind.BarkBandNoise:
        b = p["band_index"]
        noise = band_limited_noise(x.size, sr, b, _noise_rng(spec))
        target = p["scale"] * band_energy(x, sr, b)
        e = float(np.sum(noise**2))
        y = x + (noise * np.sqrt(target / e) if e > 0 else 0.0)
    elif k == Kind.PitchShift:
        ratio = 2.0 ** (p["semitones"] / 12.0)
        stretched = dsp.phase_vocoder_stretch(x, 1.0 / ratio)
        y = dsp.sinc_resample(stretched, x.size)
    elif k == Kind.SpeedChange:
        y = dsp.sinc_resample(x, int(round(x.size / p["factor"])))
    elif k == Kind.DynRangeCompression:
        y = dsp.compress(x, sr, p["threshold_dbfs"], p["ratio"])
    else:  # pragma: no cover
        raise ValueError(k)
    if clip_output:
        y = np.clip(y, -1.0, 1.0)
    return AudioClip(y, sr)
