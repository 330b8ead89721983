import math

import numpy as np
import pytest
import torch

from pamt import neural as nn
from pamt.neural import (AdamW, CheckpointFormatError, cosine_warmup_lr, decode_checkpoint,
                         encode_checkpoint, film, gradcheck, layer_norm, linear,
                         multi_head_self_attention)

SEEDS = range(20)


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def test_linear_identity_and_bias():
    x = torch.randn(4, 3, dtype=torch.float64)
    assert torch.equal(linear(x, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)), x)
    b = torch.tensor([1.0, 2.0], dtype=torch.float64)
    assert torch.equal(linear(torch.zeros(5, 3, dtype=torch.float64), torch.ones(3, 2, dtype=torch.float64), b),
                       b.expand(5, 2))
    with pytest.raises(ValueError):
        linear(x, torch.ones(4, 2, dtype=torch.float64))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    x, W, b = _rand(g, 3, 4), _rand(g, 4, 5), _rand(g, 5)
    assert gradcheck(lambda: linear(x, W, b).sum(), [x, W, b]) <= 1e-4


def test_layer_norm_stats():
    x = torch.randn(6, 16, dtype=torch.float64) * 3 + 2
    y = layer_norm(x, torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64), eps=0.0)
    assert torch.allclose(y.mean(-1), torch.zeros(6, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(6, dtype=torch.float64), atol=1e-6)
    const = torch.full((2, 8), 3.0, dtype=torch.float64)
    bias = torch.arange(8, dtype=torch.float64)
    assert torch.equal(layer_norm(const, torch.ones(8, dtype=torch.float64), bias), bias.expand(2, 8))


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    x, gain, bias, w = _rand(g, 3, 6), _rand(g, 6), _rand(g, 6), _rand(g, 3, 6)
    assert gradcheck(lambda: (layer_norm(x, gain, bias) * w).sum(), [x, gain, bias]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_gradcheck_and_exact_form(seed):
    g = torch.Generator().manual_seed(seed)
    x = _rand(g, 7)
    assert torch.allclose(nn.gelu(x), torch.nn.functional.gelu(x), atol=1e-12)
    assert gradcheck(lambda t: nn.gelu(t).sum(), x) <= 1e-4


def _attn_params(gen, d):
    return [_rand(gen, d, d) for _ in range(4)] + [_rand(gen, d) for _ in range(4)]


def test_attention_single_frame_is_value_projection():
    g = torch.Generator().manual_seed(0)
    x = _rand(g, 1, 8)
    P = _attn_params(g, 8)
    out, w = multi_head_self_attention(x, *P, heads=2, return_weights=True)
    assert torch.allclose(w, torch.ones_like(w))
    Wq, Wk, Wv, Wo, bq, bk, bv, bo = P
    assert torch.allclose(out, linear(linear(x, Wv, bv), Wo, bo))


def test_attention_rows_sum_to_one():
    g = torch.Generator().manual_seed(1)
    x = _rand(g, 5, 8)
    _, w = multi_head_self_attention(x, *_attn_params(g, 8), heads=4, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(4, 5, dtype=torch.float64), atol=1e-6)


def test_attention_mask_ignores_padding():
    g = torch.Generator().manual_seed(2)
    P = _attn_params(g, 8)
    x = _rand(g, 1, 4, 8)
    padded = torch.cat([x, _rand(g, 1, 2, 8)], dim=1)
    mask = torch.tensor([[True] * 4 + [False] * 2])
    a = multi_head_self_attention(x, *P, heads=2)
    b = multi_head_self_attention(padded, *P, heads=2, key_mask=mask)
    assert torch.allclose(a, b[:, :4])


def test_attention_shape_errors():
    g = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        multi_head_self_attention(_rand(g, 3, 6), *_attn_params(g, 6), heads=4)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    x = _rand(g, 3, 8)
    P = _attn_params(g, 8)
    w = _rand(g, 3, 8)
    assert gradcheck(lambda: (multi_head_self_attention(x, *P, heads=2) * w).sum(), [x] + P) <= 1e-4


def test_film_identity_and_zero_gamma():
    h = torch.randn(5, 4, dtype=torch.float64)
    one, zero = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
    assert torch.equal(film(h, one, zero), h)
    beta = torch.arange(4, dtype=torch.float64)
    assert torch.equal(film(h, zero, beta), beta.expand(5, 4))
    with pytest.raises(ValueError):
        film(h, torch.ones(3), torch.zeros(3))


@pytest.mark.parametrize("seed", SEEDS)
def test_film_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    h, gamma, beta, w = _rand(g, 3, 4), _rand(g, 4), _rand(g, 4), _rand(g, 3, 4)
    assert gradcheck(lambda: (film(h, gamma, beta) * w).sum(), [h, gamma, beta]) <= 1e-4


def test_adamw_pure_decay():
    p = torch.tensor([1.0], dtype=torch.float64)
    opt = AdamW([p], lr=1e-4, weight_decay=1e-5)
    opt.step([torch.zeros(1, dtype=torch.float64)])
    assert p.item() == pytest.approx(1 - 1e-9, abs=1e-15)


def test_adamw_zero_lr_identity():
    p = torch.randn(3, 3, dtype=torch.float64)
    before = p.clone()
    opt = AdamW([p], lr=0.0, weight_decay=1e-2)
    for _ in range(5):
        opt.step([torch.randn(3, 3, dtype=torch.float64)])
    assert torch.equal(p, before)


def test_adamw_constant_gradient_limit():
    # with a constant gradient m_hat = g and v_hat = g^2, so each update -> lr * sign(g)
    p = torch.tensor([0.0], dtype=torch.float64)
    opt = AdamW([p], lr=1e-3, weight_decay=0.0)
    prev = p.item()
    for _ in range(200):
        opt.step([torch.tensor([0.7], dtype=torch.float64)])
        step = prev - p.item()
        prev = p.item()
    assert step == pytest.approx(1e-3 * 0.7 / (0.7 + 1e-8), rel=1e-6)


def test_adamw_step_function():
    p = torch.tensor([2.0], dtype=torch.float64)
    state = AdamW([p], lr=0.1, weight_decay=0.0)
    nn.adamw_step([p], [torch.tensor([1.0], dtype=torch.float64)], state)
    assert p.item() == pytest.approx(1.9, abs=1e-6)


def test_cosine_warmup():
    assert cosine_warmup_lr(10, 100, 1e-4) == pytest.approx(1e-4)
    assert cosine_warmup_lr(100, 100, 1e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_warmup_lr(55, 100, 1e-4) == pytest.approx(5e-5, abs=1e-9)
    assert cosine_warmup_lr(5, 100, 1e-4) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        cosine_warmup_lr(101, 100, 1e-4)


def test_gradcheck_square():
    assert gradcheck(lambda x: (x**2).sum(), torch.tensor([3.0], dtype=torch.float64)) <= 1e-8


def test_gradcheck_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x  # should be 3x^2

    x = torch.tensor([1.3, -0.7], dtype=torch.float64)
    assert gradcheck(lambda t: Wrong.apply(t).sum(), x) > 1e-2


def test_gradcheck_nonfinite():
    with pytest.raises(FloatingPointError):
        gradcheck(lambda x: torch.log(x).sum(), torch.tensor([-1.0], dtype=torch.float64))


def test_checkpoint_roundtrip():
    g = torch.Generator().manual_seed(0)
    tensors = {"a.W": torch.randn(3, 4, generator=g), "b": torch.randn(7, generator=g), "s": torch.tensor(2.5)}
    data = encode_checkpoint(tensors)
    back = decode_checkpoint(data)
    for k, v in tensors.items():
        assert np.array_equal(back[k], v.numpy())
    assert encode_checkpoint(back) == data


def test_checkpoint_errors():
    data = encode_checkpoint({"w": torch.ones(4, 4)})
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data[:-8])


def test_cross_entropy_matches_log_softmax():
    logits = torch.randn(5, 3, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1, 0])
    ref = -torch.log_softmax(logits, -1)[torch.arange(5), y].mean()
    assert nn.cross_entropy(logits, y).item() == pytest.approx(ref.item(), abs=1e-12)


def test_positions_shape():
    pe = nn.sinusoidal_positions(7, 16)
    assert pe.shape == (7, 16)
    assert torch.allclose(pe[0, 1::2], torch.ones(8))
    assert not math.isnan(float(pe.sum()))
