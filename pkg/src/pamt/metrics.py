"""Objective metrics, rank-correlation protocol, 2AFC scoring and the synthetic judge."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import dsp
from .audio import AudioClip
from .perturb import Kind, PerturbationSpec, apply, sample_spec

SNR_CAP_DB = 200.0
LSD_FLOOR = 1e-10


class UndefinedCorrelationError(ValueError):
    """Spearman's rho is undefined when an input has no rank variation."""


# --------------------------------------------------------- signal metrics

def _trimmed(ref: AudioClip, pert: AudioClip) -> tuple[np.ndarray, np.ndarray]:
    n = min(len(ref), len(pert))
    return ref.samples[:n], pert.samples[:n]


def snr_db(ref: AudioClip, pert: AudioClip) -> float:
    """Signal-to-perturbation power ratio; clips are trimmed to the shorter length."""
    r, p = _trimmed(ref, pert)
    sig = float(np.sum(r**2))
    if sig == 0:
        raise ValueError("reference has zero power")
    noise = float(np.sum((p - r) ** 2))
    if noise == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10 * math.log10(sig / noise))


def lsd(ref: AudioClip, pert: AudioClip, n_fft: int = 1024, hop: int = 256) -> float:
    """Mean squared difference of log10 STFT magnitudes."""
    r, p = _trimmed(ref, pert)
    if r.size < n_fft:
        raise ValueError(f"clips shorter than one {n_fft}-sample window")
    a = np.log10(np.abs(dsp.stft(r, n_fft, hop)) + LSD_FLOOR)
    b = np.log10(np.abs(dsp.stft(p, n_fft, hop)) + LSD_FLOOR)
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------- FAD

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(embeddings: Sequence[np.ndarray] | np.ndarray) -> GaussianStats:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 vectors of equal dimension")
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    return GaussianStats(X.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    try:
        sa = _psd_sqrt(a.cov)
        cross = _psd_sqrt(sa @ b.cov @ sa)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition failed: {exc}") from None
    d = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(cross))
    return max(d, 0.0)


def frechet_distance_samples(A: np.ndarray, B: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to sample rows of A and B.

    Equal to ``frechet_distance(gaussian_stats(A), gaussian_stats(B))`` but uses
    the trace-sqrt identity tr((Sa^1/2 Sb Sa^1/2)^1/2) = ||Ac Bc^T||_* / sqrt((n-1)(m-1)),
    which is cheap when there are fewer samples than dimensions.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("dimension mismatch")
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    na, nb = A.shape[0] - 1, B.shape[0] - 1
    nuc = np.linalg.svd(Ac @ Bc.T, compute_uv=False).sum() / math.sqrt(na * nb)
    d = np.sum((A.mean(0) - B.mean(0)) ** 2) + np.sum(Ac**2) / na + np.sum(Bc**2) / nb - 2 * nuc
    return max(float(d), 0.0)


# ------------------------------------------------------------ correlation

def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of tie-averaged ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if a.size < 3:
        raise ValueError("need at least 3 observations")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        raise UndefinedCorrelationError("undefined correlation: constant input")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def f1_score(truth: np.ndarray, pred: np.ndarray) -> float:
    tp = float(np.sum(truth & pred))
    fp = float(np.sum(~truth & pred))
    fn = float(np.sum(truth & ~pred))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


# ------------------------------------------------------------- 2AFC + judge

@dataclass
class JudgmentRecord:
    ref_id: str
    left_id: str
    right_id: str
    winner: str  # "left" | "right"

    def __post_init__(self):
        if self.left_id == self.right_id:
            raise ValueError("a judgment compares two distinct samples")
        if self.winner not in ("left", "right"):
            raise ValueError(f"winner must be 'left' or 'right', got {self.winner!r}")

    @property
    def winner_id(self) -> str:
        return self.left_id if self.winner == "left" else self.right_id


@dataclass
class ScoreRecord:
    clip_id: str
    spec: PerturbationSpec | None
    score_2afc: int
    score_mos: float | None = None
    ref_id: str = ""


def derive_2afc_scores(judgments: Sequence[JudgmentRecord], specs: dict | None = None,
                       versions_per_ref: int = 6) -> list[ScoreRecord]:
    """Win counts from an exhaustive round-robin of each reference's versions."""
    by_ref: dict[str, list[JudgmentRecord]] = defaultdict(list)
    for j in judgments:
        by_ref[j.ref_id].append(j)
    out = []
    for ref, js in by_ref.items():
        ids = sorted({j.left_id for j in js} | {j.right_id for j in js})
        if len(ids) != versions_per_ref:
            raise ValueError(f"reference {ref}: {len(ids)} versions, expected {versions_per_ref}")
        seen = set()
        for j in js:
            key = frozenset((j.left_id, j.right_id))
            if key in seen:
                raise ValueError(f"reference {ref}: duplicate pair {sorted(key)}")
            seen.add(key)
        expected = math.comb(versions_per_ref, 2)
        if len(seen) != expected:
            raise ValueError(f"reference {ref}: {len(seen)} of {expected} pairs judged")
        wins = {i: 0 for i in ids}
        for j in js:
            wins[j.winner_id] += 1
        for i in ids:
            out.append(ScoreRecord(i, (specs or {}).get(i), wins[i], None, ref))
    return out


DEFAULT_JUDGE_WEIGHTS = {
    Kind.L2Noise: 0.8, Kind.LInfNoise: 0.3, Kind.BarkBandNoise: 0.5,
    Kind.PitchShift: 1.0, Kind.SpeedChange: 0.9, Kind.DynRangeCompression: 0.4,
}


def perturbation_magnitude(spec: PerturbationSpec) -> float:
    """Strength of a spec on [0, 1], 0 at the mildest end of its range."""
    p = spec.params
    k = spec.kind
    if k == Kind.L2Noise:
        return (p["eps_rel"] - 0.01) / 0.99
    if k == Kind.LInfNoise:
        return (p["eta_rel"] - 0.001) / 0.009
    if k == Kind.BarkBandNoise:
        return (p["scale"] - 0.1) / 0.4
    if k == Kind.PitchShift:
        return abs(p["semitones"]) / 5.0
    if k == Kind.SpeedChange:
        return abs(p["factor"] - 1.0) / 0.2
    # deeper threshold and higher ratio both compress harder
    return 0.5 * ((-10.0 - p["threshold_dbfs"]) / 20.0 + (p["ratio"] - 2.0) / 6.0)


@dataclass
class JudgeConfig:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_JUDGE_WEIGHTS))
    # logistic flip scale; 0 gives a noiseless judge
    noise: float = 0.1

    def ground_truth(self, spec: PerturbationSpec) -> float:
        return self.weights[spec.kind] * perturbation_magnitude(spec)


def synthetic_judge(ref: AudioClip | None, a: tuple[AudioClip | None, PerturbationSpec],
                    b: tuple[AudioClip | None, PerturbationSpec], seed: int,
                    config: JudgeConfig = JudgeConfig()) -> str:
    """Pick the version ("left" = a, "right" = b) that sounds closer to ``ref``.

    The less perturbed version (lower weighted magnitude) wins, except that the
    answer flips with probability 1 / (1 + exp(|dg| / noise)).
    """
    ga, gb = config.ground_truth(a[1]), config.ground_truth(b[1])
    dg = abs(ga - gb)
    if dg == 0:
        p_flip = 0.5
    elif config.noise <= 0:
        p_flip = 0.0
    else:
        p_flip = 1.0 / (1.0 + math.exp(min(dg / config.noise, 700.0)))
    winner = "left" if ga < gb else "right"
    if ga == gb:
        winner = "left"
    u = np.random.Generator(np.random.Philox(key=seed)).random()
    if u < p_flip:
        winner = "right" if winner == "left" else "left"
    return winner


def judge_reference(ref_id: str, versions: dict[str, PerturbationSpec], seed: int,
                    config: JudgeConfig = JudgeConfig()) -> list[JudgmentRecord]:
    """All C(n, 2) comparisons among a reference's perturbed versions."""
    from .pcsct import derive_seed

    ids = sorted(versions)
    out = []
    for i, j in itertools.combinations(range(len(ids)), 2):
        s = derive_seed(seed, _stable_hash(ref_id), i, j)
        w = synthetic_judge(None, (None, versions[ids[i]]), (None, versions[ids[j]]), s, config)
        out.append(JudgmentRecord(ref_id, ids[i], ids[j], w))
    return out


def _stable_hash(text: str) -> int:
    h = 1469598103934665603
    for ch in text.encode("utf-8"):
        h = ((h ^ ch) * 1099511628211) % 2**64
    return h


@dataclass
class JudgedPair:
    ref_id: str
    clip_id: str
    spec: PerturbationSpec
    ref: AudioClip
    pert: AudioClip
    score_2afc: int


def build_judged_dataset(refs: Sequence[AudioClip], seed: int = 0,
                         config: JudgeConfig = JudgeConfig(),
                         ref_ids: Sequence[str] | None = None) -> list[JudgedPair]:
    """One version of every perturbation kind per reference, scored by round-robin 2AFC."""
    from .pcsct import derive_seed

    ref_ids = list(ref_ids) if ref_ids is not None else [f"ref{i:04d}" for i in range(len(refs))]
    out = []
    for r, (rid, clip) in enumerate(zip(ref_ids, refs)):
        versions = {f"{rid}_{k.name}": sample_spec(derive_seed(seed, r, int(k)), k) for k in Kind}
        scores = derive_2afc_scores(judge_reference(rid, versions, seed, config), versions)
        for rec in sorted(scores, key=lambda s: int(s.spec.kind)):
            out.append(JudgedPair(rid, rec.clip_id, rec.spec, clip, apply(rec.spec, clip), rec.score_2afc))
    return out


# -------------------------------------------------------------- evaluation

def split_refs(ref_ids: Sequence[str], seed: int = 0, test_frac: float = 0.2) -> tuple[set, set]:
    """Deterministic reference-level split: no reference appears in both halves."""
    uniq = sorted(set(ref_ids))
    perm = np.random.Generator(np.random.Philox(key=seed)).permutation(len(uniq))
    n_test = max(1, int(round(test_frac * len(uniq))))
    test = {uniq[i] for i in perm[:n_test]}
    return set(uniq) - test, test


@dataclass
class MetricResult:
    spearman: float
    f1: float
    threshold: float
    n_test: int
    per_kind: dict = field(default_factory=dict)


def evaluate_metric(metric: Callable[[JudgedPair], float] | Sequence[float],
                    dataset: Sequence[JudgedPair], higher_is_similar: bool = False,
                    split_seed: int = 0, test_refs: set | None = None) -> MetricResult:
    """Spearman (percent-free) and F1 (%) of a metric against 2AFC scores on the test split.

    Values are sign-aligned so larger means more similar. F1 treats
    "noticeable" (2AFC score below the dataset median) as the positive class;
    the decision threshold is the train-split F1 maximiser.
    """
    values = np.asarray([metric(p) for p in dataset] if callable(metric) else metric, dtype=np.float64)
    if values.shape[0] != len(dataset):
        raise ValueError("one metric value per dataset item required")
    sim = values if higher_is_similar else -values
    scores = np.asarray([p.score_2afc for p in dataset], dtype=np.float64)
    refs = [p.ref_id for p in dataset]
    if test_refs is None:
        _, test_refs = split_refs(refs, split_seed)
    test = np.array([r in test_refs for r in refs])
    train = ~test
    if test.sum() < 3 or train.sum() < 1:
        raise ValueError("degenerate train/test split")
    rho = spearman_rho(sim[test], scores[test])
    noticeable = scores < np.median(scores)
    cand = np.unique(sim[train])
    thresholds = np.concatenate([[cand[0] - 1.0], 0.5 * (cand[1:] + cand[:-1]), [cand[-1] + 1.0]])
    best_thr, best_f1 = thresholds[0], -1.0
    for thr in thresholds:
        f = f1_score(noticeable[train], sim[train] < thr)
        if f > best_f1:
            best_f1, best_thr = f, thr
    f1 = 100.0 * f1_score(noticeable[test], sim[test] < best_thr)
    per_kind = {}
    kinds = np.array([int(p.spec.kind) for p in dataset])
    for k in Kind:
        sel = test & (kinds == int(k))
        try:
            per_kind[k.name] = spearman_rho(sim[sel], scores[sel])
        except ValueError:
            per_kind[k.name] = float("nan")
    return MetricResult(rho, f1, float(best_thr), int(test.sum()), per_kind)


# ------------------------------------------------------------------ d_PAMT

def d_pamt(x, y, model, encoder_seed: int = 0) -> float:
    """L2 distance between NULL-conditioned, time-pooled PAMT embeddings."""
    from .pcsct import embed_pamt

    if model is None:
        raise ValueError("d_pamt needs a trained model")
    zx = embed_pamt(x, model, encoder_seed=encoder_seed).pooled().astype(np.float64)
    zy = embed_pamt(y, model, encoder_seed=encoder_seed).pooled().astype(np.float64)
    return float(np.linalg.norm(zx - zy))
