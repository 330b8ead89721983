"""Perceptually constrained attacks, embedding-space adversarial training and
union robust accuracy.

Attack families
---------------
``pgd_linf_audio``
    signed-gradient PGD on the waveform inside an L-infinity ball of radius
    ``linf_rel * max|x|``.
``pgd_dpamt``
    signed-gradient ascent on the waveform, then radial bisection on the
    perturbation scale until ``d_PAMT(x', x) <= eps``.
``bark_constrained``
    gradient masked to the clip's most energetic Bark band, L2 budget
    ``sqrt(bark_scale * band energy)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import neural as nn_ops
from .audio import AudioClip
from .embedding import get_encoder
from .pcsct import PCSCTModel, derive_seed, pooled_pamt
from .dsp import N_BARK_BANDS as N_BANDS
from .perturb import apply, band_energy, band_mask, sample_spec

log = logging.getLogger(__name__)

FAMILIES = ("pgd_linf_audio", "pgd_dpamt", "bark_constrained")
DPAMT_TOL = 1e-3
BISECT_ITERS = 30


@dataclass
class AttackConfig:
    family: str = "pgd_dpamt"
    eps: float = 0.0          # d_PAMT units, pgd_dpamt only
    steps: int = 20
    step_size: float | None = None  # defaults: eps/8 in the family's own units
    linf_rel: float = 0.005
    bark_scale: float = 0.1
    wave_step_rel: float = 0.002    # waveform step for pgd_dpamt, x max|x|

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.family == "pgd_dpamt" and self.eps < 0:
            raise ValueError("eps must be >= 0")


@dataclass
class Classifier:
    W: np.ndarray  # (128, K)
    b: np.ndarray  # (K,)

    @classmethod
    def init(cls, dim: int, n_classes: int, seed: int = 0) -> "Classifier":
        gen = torch.Generator().manual_seed(seed)
        W = nn_ops.uniform_init((dim, n_classes), dim, gen, torch.float64).numpy()
        return cls(W, np.zeros(n_classes))

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return nn_ops.linear(z, torch.as_tensor(self.W, dtype=z.dtype), torch.as_tensor(self.b, dtype=z.dtype))

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(np.asarray(z, dtype=np.float64) @ self.W + self.b, axis=-1)


@dataclass
class AttackResult:
    clip: AudioClip
    family: str
    budget: float
    achieved: float
    satisfied: bool


class PamtPipeline:
    """Differentiable waveform -> pooled, NULL-conditioned PAMT embedding."""

    def __init__(self, model: PCSCTModel, encoder_seed: int = 0, sample_rate_hz: int = 16000):
        self.model = model
        self.encoder = get_encoder(encoder_seed, sample_rate_hz)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        e = self.encoder.encode_tensor(x).to(self.model.dtype)
        z = self.model(e, self.model.null_conditioning(e.shape[0]))
        return z.mean(dim=-2).to(torch.float64)


def _check_models(classifier, model):
    if classifier is None or model is None:
        raise ValueError("attack needs a trained classifier and PAMT model")


def attack_batch(clips: Sequence[AudioClip], labels: Sequence[int], classifier: Classifier,
                 model: PCSCTModel, cfg: AttackConfig, encoder_seed: int = 0) -> list[AttackResult]:
    """Attack equal-length clips jointly; each item's constraint is enforced separately."""
    _check_models(classifier, model)
    n = len(clips[0])
    if any(len(c) != n for c in clips):
        raise ValueError("attack_batch needs equal-length clips")
    sr = clips[0].sample_rate_hz
    pipe = PamtPipeline(model, encoder_seed, sr)
    x0 = torch.as_tensor(np.stack([c.samples for c in clips]))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    B = x0.shape[0]
    peak = x0.abs().max(dim=1).values
    with torch.no_grad():
        z0 = pipe.pooled(x0)

    masks = None
    if cfg.family == "pgd_linf_audio":
        budget = cfg.linf_rel * peak
        alpha = budget / 8 if cfg.step_size is None else torch.full_like(budget, cfg.step_size)
    elif cfg.family == "bark_constrained":
        bands = [int(np.argmax([band_energy(c.samples, sr, k) for k in range(N_BANDS)])) for c in clips]
        energies = torch.tensor([band_energy(c.samples, sr, k) for c, k in zip(clips, bands)], dtype=torch.float64)
        budget = torch.sqrt(cfg.bark_scale * energies)
        alpha = budget / 4 if cfg.step_size is None else torch.full_like(budget, cfg.step_size)
        masks = torch.as_tensor(np.stack([band_mask(n, sr, k) for k in bands]))
    else:
        budget = torch.full((B,), float(cfg.eps), dtype=torch.float64)
        alpha = cfg.wave_step_rel * peak if cfg.step_size is None else torch.full_like(peak, cfg.step_size)

    delta = torch.zeros_like(x0)
    if cfg.steps > 0 and float(budget.max()) > 0:
        for _ in range(cfg.steps):
            delta.requires_grad_(True)
            xa = torch.clamp(x0 + delta, -1.0, 1.0)
            loss = nn_ops.cross_entropy(classifier.logits(pipe.pooled(xa)), y) * B
            (g,) = torch.autograd.grad(loss, delta)
            if not torch.isfinite(g).all():
                raise FloatingPointError("non-finite attack gradient")
            with torch.no_grad():
                if cfg.family == "pgd_linf_audio":
                    delta = delta + alpha[:, None] * torch.sign(g)
                    delta = torch.maximum(torch.minimum(delta, budget[:, None]), -budget[:, None])
                elif cfg.family == "bark_constrained":
                    G = torch.fft.rfft(g, dim=1) * masks
                    gb = torch.fft.irfft(G, n=n, dim=1)
                    gn = gb.norm(dim=1, keepdim=True).clamp_min(1e-30)
                    delta = delta + alpha[:, None] * gb / gn
                    dn = delta.norm(dim=1, keepdim=True)
                    delta = delta * torch.clamp(budget[:, None] / dn.clamp_min(1e-30), max=1.0)
                else:
                    delta = delta + alpha[:, None] * torch.sign(g)
                    delta = _radial_project(pipe, x0, z0, delta, budget)
            delta = delta.detach()

    with torch.no_grad():
        xa = torch.clamp(x0 + delta, -1.0, 1.0)
        d_eff = xa - x0
        if cfg.family == "pgd_linf_audio":
            achieved = d_eff.abs().max(dim=1).values
            ok = achieved <= budget * (1 + 1e-9) + 1e-12
        elif cfg.family == "bark_constrained":
            achieved = d_eff.norm(dim=1)
            ok = achieved <= budget * (1 + 1e-9) + 1e-12
        else:
            achieved = (pipe.pooled(xa) - z0).norm(dim=1)
            ok = achieved <= budget * (1 + DPAMT_TOL) + 1e-12
    return [AttackResult(AudioClip(xa[i].numpy(), sr), cfg.family, float(budget[i]), float(achieved[i]), bool(ok[i]))
            for i in range(B)]


def _radial_project(pipe, x0, z0, delta, eps) -> torch.Tensor:
    """Shrink each delta toward zero until d_PAMT(x0 + s*delta, x0) <= eps."""
    def dist(scale, rows):
        xa = torch.clamp(x0[rows] + scale[:, None] * delta[rows], -1.0, 1.0)
        return (pipe.pooled(xa) - z0[rows]).norm(dim=1)

    B = x0.shape[0]
    d1 = dist(torch.ones(B, dtype=x0.dtype), torch.arange(B))
    scale = torch.ones(B, dtype=x0.dtype)
    bad = torch.nonzero(d1 > eps).flatten()
    if bad.numel():
        lo = torch.zeros(bad.numel(), dtype=x0.dtype)
        hi = torch.ones(bad.numel(), dtype=x0.dtype)
        active = torch.ones(bad.numel(), dtype=torch.bool)
        e = eps[bad]
        for _ in range(BISECT_ITERS):
            if not active.any():
                break
            idx = torch.nonzero(active).flatten()
            mid = 0.5 * (lo[idx] + hi[idx])
            d = dist(mid, bad[idx])
            feas = d <= e[idx]
            lo[idx] = torch.where(feas, mid, lo[idx])
            hi[idx] = torch.where(feas, hi[idx], mid)
            done = feas & (e[idx] - d <= DPAMT_TOL * e[idx])
            active[idx[done]] = False
        scale[bad] = lo
    return delta * scale[:, None]


def attack(clip: AudioClip, label: int, classifier: Classifier, model: PCSCTModel,
           cfg: AttackConfig, encoder_seed: int = 0) -> AudioClip:
    return attack_batch([clip], [label], classifier, model, cfg, encoder_seed)[0].clip


def dpamt_budget(clips: Sequence[AudioClip], model: PCSCTModel, seed: int = 0,
                 quantile: float = 0.25, encoder_seed: int = 0) -> float:
    """Quantile of d_PAMT over one random perturbation per clip."""
    enc = get_encoder(encoder_seed, clips[0].sample_rate_hz)
    ref = [enc(c).data for c in clips]
    pert = [enc(apply(sample_spec(derive_seed(seed, 31, i)), c)).data for i, c in enumerate(clips)]
    d = np.linalg.norm(pooled_pamt(ref, model) - pooled_pamt(pert, model), axis=1)
    return float(np.quantile(d, quantile))


# ---------------------------------------------------------------- training

@dataclass
class DefenseConfig:
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 1e-5
    eps: float = 0.0          # embedding-space radius; 0 gives standard training
    attack_steps: int = 10
    seed: int = 0


@dataclass
class DefenseLog:
    losses: list = field(default_factory=list)


def _embedding_pgd(W, b, z, y, eps, steps):
    """Worst-case L2 perturbation of pooled embeddings against a linear head."""
    delta = torch.zeros_like(z)
    alpha = 2.5 * eps / max(steps, 1)
    for _ in range(steps):
        delta.requires_grad_(True)
        loss = nn_ops.cross_entropy(nn_ops.linear(z + delta, W, b), y) * z.shape[0]
        (g,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta = delta + alpha * g / g.norm(dim=1, keepdim=True).clamp_min(1e-30)
            delta = delta * torch.clamp(eps / delta.norm(dim=1, keepdim=True).clamp_min(1e-30), max=1.0)
        delta = delta.detach()
    return delta


def adversarial_train(embeddings: np.ndarray, labels: Sequence[int], cfg: DefenseConfig,
                      n_classes: int | None = None) -> tuple[Classifier, DefenseLog]:
    """Min-max training of a linear head on frozen pooled PAMT embeddings.

    The inner maximisation runs in embedding space over the L2 ball of radius
    ``cfg.eps``, which contains every waveform perturbation with
    d_PAMT <= eps. ``eps = 0`` or ``attack_steps = 0`` is plain training.
    """
    z = torch.as_tensor(np.asarray(embeddings, dtype=np.float64))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    K = n_classes or int(y.max()) + 1
    clf = Classifier.init(z.shape[1], K, cfg.seed)
    W = torch.as_tensor(clf.W).clone().requires_grad_(True)
    b = torch.as_tensor(clf.b).clone().requires_grad_(True)
    opt = nn_ops.AdamW([W, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    dlog = DefenseLog()
    for _ in range(cfg.epochs):
        if cfg.eps > 0 and cfg.attack_steps > 0:
            delta = _embedding_pgd(W.detach(), b.detach(), z, y, cfg.eps, cfg.attack_steps)
        else:
            delta = torch.zeros_like(z)
        loss = nn_ops.cross_entropy(nn_ops.linear(z + delta, W, b), y)
        grads = torch.autograd.grad(loss, [W, b])
        opt.step(grads)
        dlog.losses.append(loss.item())
    return Classifier(W.detach().numpy().copy(), b.detach().numpy().copy()), dlog


def adversarial_train_audio(clips: Sequence[AudioClip], labels: Sequence[int], model: PCSCTModel,
                            cfg: DefenseConfig, attack_cfg: AttackConfig, encoder_seed: int = 0,
                            batch_size: int = 16) -> tuple[Classifier, DefenseLog]:
    """Min-max training with the inner max computed by waveform ``attack_batch``.

    Much slower than :func:`adversarial_train`; the PAMT model stays frozen.
    """
    enc = get_encoder(encoder_seed, clips[0].sample_rate_hz)
    z_clean = pooled_pamt([enc(c).data for c in clips], model)
    y_all = np.asarray(labels, dtype=np.int64)
    clf = Classifier.init(z_clean.shape[1], int(y_all.max()) + 1, cfg.seed)
    W = torch.as_tensor(clf.W).clone().requires_grad_(True)
    b = torch.as_tensor(clf.b).clone().requires_grad_(True)
    opt = nn_ops.AdamW([W, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    dlog = DefenseLog()
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(clips))
        for s in range(0, len(clips), batch_size):
            idx = order[s:s + batch_size]
            current = Classifier(W.detach().numpy(), b.detach().numpy())
            if attack_cfg.steps > 0:
                adv = attack_batch([clips[i] for i in idx], y_all[idx], current, model, attack_cfg, encoder_seed)
                z = torch.as_tensor(pooled_pamt([enc(r.clip).data for r in adv], model))
            else:
                z = torch.as_tensor(z_clean[idx])
            loss = nn_ops.cross_entropy(nn_ops.linear(z, W, b), torch.as_tensor(y_all[idx]))
            opt.step(torch.autograd.grad(loss, [W, b]))
            dlog.losses.append(loss.item())
    return Classifier(W.detach().numpy().copy(), b.detach().numpy().copy()), dlog


# --------------------------------------------------------------- evaluation

@dataclass
class RobustnessReport:
    clean_acc: float
    per_family: dict
    union_acc: float
    constraint_violations: int
    results: dict = field(default_factory=dict)


def union_robust_accuracy(classifier: Classifier, model: PCSCTModel, clips: Sequence[AudioClip],
                          labels: Sequence[int], attacks: Sequence[AttackConfig],
                          encoder_seed: int = 0, batch_size: int = 64) -> RobustnessReport:
    """An item counts for the union only if it survives every attack family."""
    if not clips:
        raise ValueError("empty test set")
    if not attacks:
        raise ValueError("need at least one attack family")
    enc = get_encoder(encoder_seed, clips[0].sample_rate_hz)
    y = np.asarray(labels)
    clean_pred = classifier.predict(pooled_pamt([enc(c).data for c in clips], model))
    union_ok = np.ones(len(clips), dtype=bool)
    per_family = {}
    results = {}
    violations = 0
    for cfg in attacks:
        res = []
        for s in range(0, len(clips), batch_size):
            res += attack_batch(clips[s:s + batch_size], y[s:s + batch_size], classifier, model, cfg, encoder_seed)
        pred = classifier.predict(pooled_pamt([enc(r.clip).data for r in res], model))
        ok = pred == y
        violations += sum(not r.satisfied for r in res)
        per_family[cfg.family] = float(ok.mean())
        results[cfg.family] = res
        union_ok &= ok
    return RobustnessReport(float(np.mean(clean_pred == y)), per_family, float(union_ok.mean()), violations, results)
