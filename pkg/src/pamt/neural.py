"""Differentiable building blocks, optimizer, LR schedule and gradient checker.

Reverse-mode gradients come from torch autograd; the layer arithmetic itself
is written out here so every op can be verified against finite differences.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


def _check_last(x: Tensor, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ValueError(f"{what}: expected last dimension {n}, got {tuple(x.shape)}")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = xW + b with W stored as (in, out)."""
    _check_last(x, W.shape[0], "linear")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {tuple(b.shape)} != ({W.shape[1]},)")
        y = y + b
    return y


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def relu(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0.0)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = torch.exp(x - x.max(dim=dim, keepdim=True).values.detach())
    return z / z.sum(dim=dim, keepdim=True)


def multi_head_self_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
                              bq: Tensor, bk: Tensor, bv: Tensor, bo: Tensor,
                              heads: int, key_mask: Tensor | None = None,
                              return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis.

    ``x`` is (T, d) or (B, T, d). ``key_mask`` (B, T) marks valid frames; padded
    keys receive zero weight.
    """
    d_model = x.shape[-1]
    if d_model % heads:
        raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, T, _ = x.shape
    dh = d_model // heads

    def split(t):
        return t.view(B, T, heads, dh).transpose(1, 2)

    q = split(linear(x, Wq, bq))
    k = split(linear(x, Wk, bk))
    v = split(linear(x, Wv, bv))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    w = softmax(scores, dim=-1)
    ctx = (w @ v).transpose(1, 2).reshape(B, T, d_model)
    out = linear(ctx, Wo, bo)
    if squeeze:
        out, w = out[0], w[0]
    return (out, w) if return_weights else out


def film(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Feature-wise affine modulation, broadcast over time.

    ``h`` is (T, C) with ``gamma``/``beta`` of shape (C,), or (B, T, C) with
    (B, C) modulation parameters.
    """
    if gamma.shape != beta.shape or gamma.shape[-1] != h.shape[-1]:
        raise ValueError(f"film: h {tuple(h.shape)}, gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    if h.dim() == 3:
        if gamma.dim() == 1:
            gamma, beta = gamma.expand(h.shape[0], -1), beta.expand(h.shape[0], -1)
        return gamma[:, None, :] * h + beta[:, None, :]
    return gamma * h + beta


def sinusoidal_positions(T: int, d_model: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / d_model))
    pe = torch.zeros(T, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe.to(dtype)


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    logp = z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))
    return -logp.gather(-1, labels[:, None]).mean()


# --------------------------------------------------------------------- optim

class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor | None] | None = None, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = torch.zeros_like(p)
            p.mul_(1 - lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamW,
               lr: float | None = None) -> None:
    state.params = list(params)
    state.step(grads, lr)


def cosine_warmup_lr(step: float, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- gradcheck

def gradcheck(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
              point: Tensor | Sequence[Tensor], h: float = 1e-5,
              max_coords: int | None = None, seed: int = 0, atol: float = 1e-7) -> float:
    """Max relative error between autograd and central differences.

    ``point`` is a tensor (``f`` takes it as argument) or a list of leaf tensors
    that ``f`` closes over. ``max_coords`` samples at most that many coordinates
    per tensor; the error is ``|a - n| / max(1e-8, |a| + |n|)``, taken as zero
    when ``|a - n| <= atol`` (differences at finite-difference roundoff level).
    """
    single = isinstance(point, Tensor)
    tensors = [point] if single else list(point)

    def evaluate():
        out = f(tensors[0]) if single else f()
        if out.numel() != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        return out.reshape(())

    for t in tensors:
        t.requires_grad_(True)
    out = evaluate()
    if not torch.isfinite(out):
        raise FloatingPointError("function value is not finite")
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            n = flat.numel()
            idx = range(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = evaluate().item()
                flat[i] = orig - h
                fm = evaluate().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = g.reshape(-1)[i].item()
                if not (math.isfinite(num) and math.isfinite(ana)):
                    raise FloatingPointError("non-finite gradient in gradcheck")
                if abs(ana - num) > atol:
                    worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
    return worst


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_checkpoint(tensors: dict[str, Tensor | np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(data):
                raise CheckpointFormatError(f"truncated payload for {name}")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(tensors: dict[str, Tensor], path) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def uniform_init(shape: Iterable[int], fan_in: int, gen: torch.Generator, dtype=torch.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)
