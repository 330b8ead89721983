import math

import numpy as np
import pytest
import torch

from pamt.audio import CorpusConfig, synth_corpus
from pamt.neural import gradcheck
from pamt.pcsct import (ModelConfig, PCSCTModel, TrainConfig, audio_pair_source, embed_pamt,
                        infonce_from_pooled, infonce_loss, masked_mean, pool_and_sim, ppe_forward, train)
from pamt.perturb import sample_spec, vectorize

SMALL = ModelConfig(input_dim=12, d_model=8, n_layers=2, heads=2, ffn_dim=16, output_dim=6, cond_dim=5)


def randomize(model, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.p.values():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def test_architecture_layer_shapes():
    m = PCSCTModel()
    t = m.tensors()
    assert m.config.n_layers == 4 and m.config.heads == 4
    assert t["input.W"].shape == (768, 256)
    assert t["layer3.ffn.0.W"].shape == (256, 1024)
    assert t["layer0.film.W"].shape == (64, 512)
    assert t["output.W"].shape == (256, 128)
    assert t["ppe.0.W"].shape == (10, 64) and t["ppe.1.W"].shape == (64, 64)
    assert not any(k.startswith("layer4") for k in t)


def test_ppe_zero_input_zero_output():
    m = PCSCTModel()
    c = ppe_forward(np.zeros(10), m)
    assert c.shape == (64,) and torch.count_nonzero(c) == 0
    assert ppe_forward(vectorize(sample_spec(1)), m).shape == (64,)
    with pytest.raises(ValueError):
        ppe_forward(np.zeros(9), m)


def test_ppe_gradcheck():
    m = randomize(PCSCTModel(SMALL, dtype=torch.float64), 1)
    v = torch.tensor(vectorize(sample_spec(5)), dtype=torch.float64)
    w = torch.randn(SMALL.cond_dim, dtype=torch.float64)
    params = [m.p["ppe.0.W"], m.p["ppe.0.b"], m.p["ppe.1.W"], m.p["ppe.1.b"]]
    assert gradcheck(lambda: (m.ppe(v) * w).sum(), params) <= 1e-4


def test_forward_shapes_single_frame():
    m = PCSCTModel()
    with torch.no_grad():
        z = m(torch.randn(1, 768), m.null_conditioning())
    assert z.shape == (1, 128)


def test_identity_film_makes_output_independent_of_conditioning():
    m = PCSCTModel()  # FiLM generators start at gamma=1, beta=0
    e = torch.randn(5, 768)
    with torch.no_grad():
        a = m(e, torch.randn(64))
        b = m(e, torch.randn(64))
    assert torch.equal(a, b)


def test_forward_gradcheck_pooled_norm():
    m = randomize(PCSCTModel(SMALL, dtype=torch.float64), 2)
    e = torch.randn(3, SMALL.input_dim, dtype=torch.float64)
    c = torch.randn(SMALL.cond_dim, dtype=torch.float64)
    assert gradcheck(lambda: m(e, c).mean(0).norm(), list(m.p.values())) <= 1e-4


def test_nonfinite_activation_names_layer():
    m = PCSCTModel(SMALL)
    with torch.no_grad():
        m.p["layer1.ffn.1.b"].fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="layer 1"):
        m(torch.randn(2, SMALL.input_dim), torch.zeros(SMALL.cond_dim))


def test_pool_and_sim():
    u = torch.randn(4, 128, dtype=torch.float64)
    assert float(pool_and_sim(u, u)) == pytest.approx(1.0)
    assert float(pool_and_sim(u, 3 * u)) == pytest.approx(1.0)
    a = torch.zeros(2, 128, dtype=torch.float64)
    b = torch.zeros(2, 128, dtype=torch.float64)
    a[:, 0] = 1
    b[:, 1] = 1
    assert float(pool_and_sim(a, b)) == pytest.approx(0.0)
    with pytest.raises(ZeroDivisionError):
        pool_and_sim(torch.zeros(2, 128), u)


def _pooled_with_sims(s_pos, s_neg):
    # unit vectors in 2-D whose cosines are s_pos within pairs, s_neg across
    ang_pos = math.acos(s_pos)
    u = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    v = torch.tensor([[math.cos(ang_pos), math.sin(ang_pos)], [-math.cos(ang_pos), -math.sin(ang_pos)]],
                     dtype=torch.float64)
    assert float(u[0] @ v[1]) == pytest.approx(s_neg)
    return u, v


def test_infonce_equal_similarities_is_ln2():
    u = torch.ones(2, 4, dtype=torch.float64)
    assert float(infonce_from_pooled(u, u.clone(), 0.1)) == pytest.approx(math.log(2))
    z = torch.ones(2, 3, 4, dtype=torch.float64)
    assert float(infonce_loss(z, z.clone(), 0.1)) == pytest.approx(math.log(2))


def test_infonce_separated_pair():
    u, v = _pooled_with_sims(1.0, -1.0)
    assert float(infonce_from_pooled(u, v, 0.1)) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)


def test_infonce_monotone_in_positive_similarity():
    losses = []
    for s_pos in (0.0, 0.3, 0.6, 0.9):
        ang = math.acos(s_pos)
        u = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
        v = torch.tensor([[math.cos(ang), math.sin(ang), 0.0], [0.0, math.sin(ang), math.cos(ang)]],
                         dtype=torch.float64)
        losses.append(float(infonce_from_pooled(u, v, 0.1)))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_infonce_uniform_is_ln_b_and_permutation_invariant():
    B = 5
    u = torch.ones(B, 8, dtype=torch.float64)
    assert float(infonce_from_pooled(u, u, 0.1)) == pytest.approx(math.log(B))
    g = torch.Generator().manual_seed(0)
    u = torch.randn(B, 8, generator=g, dtype=torch.float64)
    v = torch.randn(B, 8, generator=g, dtype=torch.float64)
    perm = torch.randperm(B, generator=g)
    l1 = infonce_from_pooled(u, v, 0.1)
    assert float(l1) > 0
    assert float(infonce_from_pooled(u[perm], v[perm], 0.1)) == pytest.approx(float(l1), abs=1e-12)
    with pytest.raises(ValueError):
        infonce_from_pooled(u[:1], v[:1], 0.1)


def test_masked_mean_ignores_padding():
    z = torch.randn(2, 4, 3)
    mask = torch.tensor([[True, True, False, False], [True, True, True, True]])
    pooled = masked_mean(z, mask)
    assert torch.allclose(pooled[0], z[0, :2].mean(0))
    assert torch.allclose(pooled[1], z[1].mean(0))


def test_end_to_end_loss_gradcheck_full_size():
    m = randomize(PCSCTModel(dtype=torch.float64), 3, scale=0.05)
    g = torch.Generator().manual_seed(4)
    eo = torch.randn(2, 3, 768, generator=g, dtype=torch.float64)
    ep = torch.randn(2, 3, 768, generator=g, dtype=torch.float64)
    pv = torch.tensor(np.stack([vectorize(sample_spec(i)) for i in range(2)]), dtype=torch.float64)

    def loss():
        c = m.ppe(pv)
        return infonce_loss(m(eo, c), m(ep, c), 0.1)

    assert gradcheck(loss, list(m.p.values()), max_coords=4) <= 1e-4


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = CorpusConfig(n_classes=4, clips_per_class=2, duration_s=0.5)
    return [c for c, _ in synth_corpus(cfg, seed=3)]


def test_training_reduces_loss(tiny_corpus):
    cfg = TrainConfig(batch_size=8, max_epochs=50, patience=50, lr=1e-3, seed=1)
    _, tlog = train(audio_pair_source(tiny_corpus, seed=1), cfg, val_metric=lambda m: 0.0, model_config=SMALL_AUDIO)
    losses = [r["loss"] for r in tlog.rows]
    assert len(losses) == 50
    assert np.mean(losses[-5:]) < losses[0]


SMALL_AUDIO = ModelConfig(input_dim=768, d_model=16, n_layers=4, heads=4, ffn_dim=32, output_dim=128)


def test_training_deterministic(tiny_corpus):
    cfg = TrainConfig(batch_size=4, max_epochs=2, patience=5, seed=2)
    a, la = train(audio_pair_source(tiny_corpus, seed=2), cfg, model_config=SMALL_AUDIO)
    b, lb = train(audio_pair_source(tiny_corpus, seed=2), cfg, model_config=SMALL_AUDIO)
    from pamt.neural import encode_checkpoint
    assert encode_checkpoint(a.tensors()) == encode_checkpoint(b.tensors())
    assert la.rows == lb.rows


def test_early_stopping_constant_metric(tiny_corpus):
    cfg = TrainConfig(batch_size=4, max_epochs=10, patience=1, seed=0)
    _, tlog = train(audio_pair_source(tiny_corpus, seed=0), cfg, val_metric=lambda m: 0.5, model_config=SMALL_AUDIO)
    assert tlog.epochs_run == 2
    assert tlog.best_epoch == 0


def test_embed_pamt_inference(tiny_corpus):
    m = PCSCTModel()
    a = embed_pamt(tiny_corpus[0], m)
    b = embed_pamt(tiny_corpus[0], m)
    assert a.data.shape[1] == 128
    assert np.array_equal(a.data, b.data)


def test_null_vs_conditioned_after_film_moves(tiny_corpus):
    m = randomize(PCSCTModel(), 5, scale=0.05)
    c = m.ppe(torch.tensor(vectorize(sample_spec(3)), dtype=torch.float32)).detach()
    assert not np.allclose(embed_pamt(tiny_corpus[0], m).data, embed_pamt(tiny_corpus[0], m, c).data)


def test_checkpoint_roundtrip(tmp_path):
    m = randomize(PCSCTModel(SMALL), 1)
    p = tmp_path / "m.pckp"
    m.save(p)
    back = PCSCTModel.load(p, SMALL)
    for k, v in m.tensors().items():
        assert torch.equal(back.tensors()[k], v)
    assert p.read_bytes()[:4] == b"PCKP"
