"""End-to-end workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .adversarial import (FAMILIES, AttackConfig, DefenseConfig, RobustnessReport, adversarial_train,
                          dpamt_budget, union_robust_accuracy)
from .audio import AudioClip
from .embedding import get_encoder
from .metrics import (JudgedPair, MetricResult, evaluate_metric, frechet_distance_samples, lsd,
                      snr_db, spearman_rho)
from .pcsct import PCSCTModel, embed_pamt, pooled_pamt

log = logging.getLogger(__name__)

METRIC_ROWS = ("SNR", "LSD", "FAD (raw)", "FAD (PAMT)", "1-cos (raw pooled)", "d_PAMT")


def encode_dataset(dataset: Sequence[JudgedPair], encoder_seed: int = 0,
                   embeddings: dict | None = None) -> dict[str, np.ndarray]:
    """Encoder sequences keyed by ref and clip id; ``embeddings`` overrides the toy encoder."""
    if embeddings is not None:
        missing = [k for p in dataset for k in (p.ref_id, p.clip_id) if k not in embeddings]
        if missing:
            raise ValueError(f"no embedding for clip id {missing[0]!r}")
        return {k: np.asarray(embeddings[k]) for p in dataset for k in (p.ref_id, p.clip_id)}
    enc = get_encoder(encoder_seed, dataset[0].ref.sample_rate_hz)
    out: dict[str, np.ndarray] = {}
    for p in dataset:
        if p.ref_id not in out:
            out[p.ref_id] = enc(p.ref).data
        out[p.clip_id] = enc(p.pert).data
    return out


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return 1.0 - (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def dpamt_values(dataset: Sequence[JudgedPair], enc: dict, model: PCSCTModel) -> np.ndarray:
    za = pooled_pamt([enc[p.ref_id] for p in dataset], model)
    zb = pooled_pamt([enc[p.clip_id] for p in dataset], model)
    return np.linalg.norm(za - zb, axis=1)


def judge_val_metric(dataset: Sequence[JudgedPair], enc: dict) -> Callable[[PCSCTModel], float]:
    """Early-stopping score: Spearman of pooled cosine similarity against the 2AFC scores."""
    scores = [p.score_2afc for p in dataset]

    def metric(model: PCSCTModel) -> float:
        za = pooled_pamt([enc[p.ref_id] for p in dataset], model)
        zb = pooled_pamt([enc[p.clip_id] for p in dataset], model)
        return spearman_rho(-cosine_distance(za, zb), scores)

    return metric


def metric_table(dataset: Sequence[JudgedPair], model: PCSCTModel | None, test_refs: set,
                 encoder_seed: int = 0, embeddings: dict | None = None,
                 rows: Sequence[str] = METRIC_ROWS) -> dict[str, MetricResult]:
    """Every requested metric evaluated on the same reference-level test split."""
    enc = encode_dataset(dataset, encoder_seed, embeddings)
    out = {}
    for name in rows:
        if name == "SNR":
            out[name] = evaluate_metric([snr_db(p.ref, p.pert) for p in dataset], dataset,
                                        higher_is_similar=True, test_refs=test_refs)
            continue
        if name == "LSD":
            vals = [lsd(p.ref, p.pert) for p in dataset]
        elif name == "FAD (raw)":
            vals = [frechet_distance_samples(enc[p.ref_id], enc[p.clip_id]) for p in dataset]
        elif name == "1-cos (raw pooled)":
            vals = cosine_distance(np.stack([enc[p.ref_id].mean(0) for p in dataset]),
                                   np.stack([enc[p.clip_id].mean(0) for p in dataset]))
        elif name in ("FAD (PAMT)", "d_PAMT"):
            if model is None:
                raise ValueError(f"metric {name!r} needs a trained model")
            if name == "d_PAMT":
                vals = dpamt_values(dataset, enc, model)
            else:
                cache = {k: embed_pamt(v, model).data for k, v in enc.items()}
                vals = [frechet_distance_samples(cache[p.ref_id], cache[p.clip_id]) for p in dataset]
        else:
            raise ValueError(f"unknown metric {name!r}")
        out[name] = evaluate_metric(vals, dataset, test_refs=test_refs)
    return out


def separation_rate(dataset: Sequence[JudgedPair], enc: dict, model: PCSCTModel,
                    refs: set, seed: int = 0) -> float:
    """Fraction of triplets with cos(anchor, perturbed) > cos(anchor, other clip).

    Each perturbed version of a held-out reference forms one triplet; the
    negative is the clean version of another held-out reference.
    """
    items = [p for p in dataset if p.ref_id in refs]
    ref_ids = sorted(refs)
    if len(ref_ids) < 2:
        raise ValueError("separation needs at least two references")
    rng = np.random.Generator(np.random.Philox(key=seed))
    others = []
    for p in items:
        j = int(rng.integers(len(ref_ids) - 1))
        k = ref_ids.index(p.ref_id)
        others.append(ref_ids[j + (j >= k)])
    za = pooled_pamt([enc[p.ref_id] for p in items], model)
    zp = pooled_pamt([enc[p.clip_id] for p in items], model)
    zo = pooled_pamt([enc[o] for o in others], model)
    return float(np.mean(cosine_distance(za, zp) < cosine_distance(za, zo)))


@dataclass
class ClassificationSplit:
    train: np.ndarray
    test: np.ndarray


def stratified_split(labels: Sequence[int], test_frac: float, seed: int = 0) -> ClassificationSplit:
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.Philox(key=seed))
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(test_frac * len(idx))))
        test += idx[:n_test].tolist()
        train += idx[n_test:].tolist()
    if not train:
        raise ValueError("test_frac leaves no training clips")
    return ClassificationSplit(np.array(sorted(train)), np.array(sorted(test)))


def robustness_table(clips: Sequence[AudioClip], labels: Sequence[int], model: PCSCTModel,
                     split: ClassificationSplit, attack: dict, defense: DefenseConfig,
                     seed: int = 0, encoder_seed: int = 0) -> dict[str, RobustnessReport]:
    """Undefended and PAMT-space adversarially trained linear probes under the union attack."""
    labels = np.asarray(labels)
    enc = get_encoder(encoder_seed, clips[0].sample_rate_hz)
    train_clips = [clips[i] for i in split.train]
    test_clips = [clips[i] for i in split.test]
    eps = attack.get("eps") or dpamt_budget(train_clips, model, seed=seed, quantile=attack["eps_quantile"],
                                             encoder_seed=encoder_seed)
    log.info("d_PAMT budget eps=%.4g", eps)
    attacks = [AttackConfig(f, eps=eps if f == "pgd_dpamt" else 0.0, steps=attack["steps"],
                            linf_rel=attack["linf_rel"], bark_scale=attack["bark_scale"])
               for f in attack.get("families", FAMILIES)]
    z = pooled_pamt([enc(c).data for c in train_clips], model)
    out = {}
    for method, radius in (("No defense", 0.0), ("PAMT AT", eps)):
        cfg = DefenseConfig(epochs=defense.epochs, lr=defense.lr, weight_decay=defense.weight_decay,
                            eps=radius, attack_steps=defense.attack_steps, seed=defense.seed)
        clf, _ = adversarial_train(z, labels[split.train], cfg, n_classes=int(labels.max()) + 1)
        out[method] = union_robust_accuracy(clf, model, test_clips, labels[split.test], attacks, encoder_seed)
        log.info("%s: clean %.3f union %.3f", method, out[method].clean_acc, out[method].union_acc)
    return out
