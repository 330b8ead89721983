import numpy as np
import pytest
import torch

from pamt.adversarial import (AttackConfig, Classifier, DefenseConfig, PamtPipeline, _embedding_pgd,
                              adversarial_train, attack, attack_batch, union_robust_accuracy)
from pamt.audio import CorpusConfig, synth_corpus
from pamt.dsp import bark_band_edges
from pamt.embedding import get_encoder
from pamt.neural import cross_entropy, encode_checkpoint
from pamt.pcsct import ModelConfig, PCSCTModel, pooled_pamt

SMALL = ModelConfig(input_dim=768, d_model=16, n_layers=2, heads=2, ffn_dim=32, output_dim=16)


@pytest.fixture(scope="module")
def toy():
    data = synth_corpus(CorpusConfig(n_classes=4, clips_per_class=3, duration_s=0.5), seed=5)
    clips = [c for c, _ in data]
    labels = np.array([y for _, y in data])
    model = PCSCTModel(SMALL, seed=1, dtype=torch.float64)
    enc = get_encoder(0)
    z = pooled_pamt([enc(c).data for c in clips], model)
    clf, _ = adversarial_train(z, labels, DefenseConfig(epochs=200, lr=5e-2))
    return clips, labels, model, clf


def _ce(clf, model, clips, labels):
    pipe = PamtPipeline(model)
    with torch.no_grad():
        x = torch.as_tensor(np.stack([c.samples for c in clips]))
        logits = clf.logits(pipe.pooled(x))
    z = logits - logits.max(dim=1, keepdim=True).values
    logp = z - torch.log(torch.exp(z).sum(dim=1, keepdim=True))
    return -logp[torch.arange(len(labels)), torch.as_tensor(labels)].numpy()


def test_config_validation():
    with pytest.raises(ValueError, match="family"):
        AttackConfig("fgsm")
    with pytest.raises(ValueError):
        AttackConfig("pgd_dpamt", eps=-1.0)


def test_untrained_models_rejected(toy):
    clips, labels, model, clf = toy
    with pytest.raises(ValueError):
        attack(clips[0], 0, None, model, AttackConfig("pgd_linf_audio"))


def test_zero_budget_returns_input(toy):
    clips, labels, model, clf = toy
    out = attack(clips[0], int(labels[0]), clf, model, AttackConfig("pgd_dpamt", eps=0.0, steps=3))
    assert np.array_equal(out.samples, clips[0].samples)


def test_linf_budget_and_ascent(toy):
    clips, labels, model, clf = toy
    res = attack_batch(clips, labels, clf, model, AttackConfig("pgd_linf_audio", steps=5))
    for c, r in zip(clips, res):
        assert r.satisfied
        assert np.max(np.abs(r.clip.samples - c.samples)) <= 0.005 * np.max(np.abs(c.samples)) + 1e-12
        assert np.max(np.abs(r.clip.samples)) <= 1.0
    before = _ce(clf, model, clips, labels)
    after = _ce(clf, model, [r.clip for r in res], labels)
    assert np.mean(after >= before - 1e-9) >= 0.95


def test_dpamt_constraint_within_tolerance(toy):
    clips, labels, model, clf = toy
    enc = get_encoder(0)
    z0 = pooled_pamt([enc(c).data for c in clips], model)
    eps = 0.5 * float(np.median(np.linalg.norm(z0 - z0.mean(0), axis=1)))
    res = attack_batch(clips, labels, clf, model, AttackConfig("pgd_dpamt", eps=eps, steps=4))
    z1 = pooled_pamt([enc(r.clip).data for r in res], model)
    d = np.linalg.norm(z1 - z0, axis=1)
    assert all(r.satisfied for r in res)
    assert np.all(d <= eps * (1 + 1e-3) + 1e-9)


def test_bark_attack_stays_in_band(toy):
    clips, labels, model, clf = toy
    res = attack_batch(clips[:4], labels[:4], clf, model, AttackConfig("bark_constrained", steps=4))
    edges = bark_band_edges(16000)
    for c, r in zip(clips[:4], res):
        assert r.satisfied
        delta = r.clip.samples - c.samples
        assert np.linalg.norm(delta) <= r.budget * (1 + 1e-9)
        spec = np.abs(np.fft.rfft(delta)) ** 2
        f = np.fft.rfftfreq(len(delta), 1 / 16000)
        in_band = np.zeros_like(f, dtype=bool)
        for lo, hi in edges:
            sel = (f >= lo) & (f < hi)
            if spec[sel].sum() > 0.5 * spec.sum():
                in_band |= sel
        assert spec[~in_band].sum() <= 1e-6 * spec.sum() + 1e-20


def test_models_frozen(toy):
    clips, labels, model, clf = toy
    before = encode_checkpoint(model.tensors())
    attack_batch(clips[:2], labels[:2], clf, model, AttackConfig("pgd_linf_audio", steps=2))
    enc = get_encoder(0)
    z = pooled_pamt([enc(c).data for c in clips], model)
    adversarial_train(z, labels, DefenseConfig(epochs=5, eps=0.1, attack_steps=2))
    assert encode_checkpoint(model.tensors()) == before


def test_standard_training_separates_toy_corpus():
    data = synth_corpus(CorpusConfig(n_classes=4, clips_per_class=6, duration_s=0.5), seed=2)
    enc = get_encoder(0)
    model = PCSCTModel(SMALL, seed=0, dtype=torch.float64)
    z = pooled_pamt([enc(c).data for c, _ in data], model)
    y = np.array([l for _, l in data])
    clf, _ = adversarial_train(z, y, DefenseConfig(epochs=300, lr=5e-2, attack_steps=0))
    assert np.mean(clf.predict(z) == y) >= 0.9


def test_adversarial_train_deterministic(toy):
    clips, labels, model, _ = toy
    z = pooled_pamt([get_encoder(0)(c).data for c in clips], model)
    a, _ = adversarial_train(z, labels, DefenseConfig(epochs=20, eps=0.05, seed=3))
    b, _ = adversarial_train(z, labels, DefenseConfig(epochs=20, eps=0.05, seed=3))
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_embedding_space_robustness_improves():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((3, 8)) * 2
    y = np.repeat(np.arange(3), 30)
    z = centers[y] + 0.3 * rng.standard_normal((90, 8))
    eps = 0.8

    def robust_acc(clf):
        zt, yt = torch.as_tensor(z), torch.as_tensor(y)
        d = _embedding_pgd(torch.as_tensor(clf.W), torch.as_tensor(clf.b), zt, yt, eps, 20)
        return np.mean(clf.predict((zt + d).numpy()) == y)

    std, _ = adversarial_train(z, y, DefenseConfig(epochs=300, lr=5e-2))
    at, _ = adversarial_train(z, y, DefenseConfig(epochs=300, lr=5e-2, eps=eps))
    assert robust_acc(at) >= robust_acc(std)
    assert np.mean(at.predict(z) == y) >= 0.9


def test_union_accuracy_properties(toy):
    clips, labels, model, clf = toy
    fams = [AttackConfig("pgd_linf_audio", steps=3), AttackConfig("bark_constrained", steps=3)]
    single = union_robust_accuracy(clf, model, clips, labels, fams[:1])
    both = union_robust_accuracy(clf, model, clips, labels, fams)
    assert single.union_acc == pytest.approx(single.per_family["pgd_linf_audio"])
    assert both.union_acc <= min(both.per_family.values()) + 1e-12
    assert both.union_acc <= single.union_acc + 1e-12
    assert both.constraint_violations == 0
    with pytest.raises(ValueError):
        union_robust_accuracy(clf, model, [], [], fams)
    with pytest.raises(ValueError):
        union_robust_accuracy(clf, model, clips, labels, [])


def test_classifier_logits_match_predict():
    clf = Classifier.init(4, 3, seed=0)
    z = np.random.default_rng(1).standard_normal((5, 4))
    logits = clf.logits(torch.as_tensor(z)).numpy()
    assert np.array_equal(np.argmax(logits, 1), clf.predict(z))
    assert float(cross_entropy(torch.as_tensor(logits), torch.zeros(5, dtype=torch.long))) > 0
