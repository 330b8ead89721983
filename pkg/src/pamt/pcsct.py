"""Conditioned sequential contrastive transformer head.

A small MLP (the parameter encoder) maps a vectorized perturbation spec to a
64-dim conditioning vector. A 4-layer Pre-LN transformer over encoder frames
applies FiLM, driven by that vector, to each feed-forward output, and a final
linear layer emits 128-dim frames. Training minimises a symmetric InfoNCE loss
on time-pooled cosine similarity between clean and perturbed clips.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import neural as nn_ops
from .audio import AudioClip
from .embedding import ENCODER_DIM, PAMT_DIM, EmbeddingSequence, get_encoder
from .perturb import VECTOR_LEN, PerturbationSpec, apply, parse_kind, sample_spec, vectorize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = ENCODER_DIM
    d_model: int = 256
    n_layers: int = 4
    heads: int = 4
    ffn_dim: int = 1024
    output_dim: int = PAMT_DIM
    cond_dim: int = 64
    param_dim: int = VECTOR_LEN


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 100
    warmup_frac: float = 0.1
    temperature: float = 0.1
    patience: int = 10
    seed: int = 0
    encoder_seed: int = 0
    val_frac: float = 0.2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")


class _Params(torch.nn.ParameterDict):
    """ParameterDict accepting dotted names (stored with '/' separators)."""

    def __getitem__(self, key):
        return super().__getitem__(key.replace(".", "/"))

    def __setitem__(self, key, value):
        super().__setitem__(key.replace(".", "/"), value)

    def __contains__(self, key):
        return super().__contains__(key.replace(".", "/"))


class PCSCTModel(torch.nn.Module):
    """Parameter encoder + FiLM-conditioned Pre-LN transformer + output projection."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        cfg = config
        gen = torch.Generator().manual_seed(seed)
        P = _Params()

        def lin(name, fan_in, fan_out):
            P[f"{name}.W"] = torch.nn.Parameter(nn_ops.uniform_init((fan_in, fan_out), fan_in, gen, dtype))
            P[f"{name}.b"] = torch.nn.Parameter(torch.zeros(fan_out, dtype=dtype))

        def norm(name, dim):
            P[f"{name}.g"] = torch.nn.Parameter(torch.ones(dim, dtype=dtype))
            P[f"{name}.b"] = torch.nn.Parameter(torch.zeros(dim, dtype=dtype))

        lin("ppe.0", cfg.param_dim, cfg.cond_dim)
        lin("ppe.1", cfg.cond_dim, cfg.cond_dim)
        lin("input", cfg.input_dim, cfg.d_model)
        for l in range(cfg.n_layers):
            norm(f"layer{l}.ln_attn", cfg.d_model)
            for w in "qkvo":
                lin(f"layer{l}.attn.{w}", cfg.d_model, cfg.d_model)
            norm(f"layer{l}.ln_ffn", cfg.d_model)
            lin(f"layer{l}.ffn.0", cfg.d_model, cfg.ffn_dim)
            lin(f"layer{l}.ffn.1", cfg.ffn_dim, cfg.d_model)
            # identity modulation at init: gamma = 1, beta = 0 for any conditioning
            P[f"layer{l}.film.W"] = torch.nn.Parameter(torch.zeros(cfg.cond_dim, 2 * cfg.d_model, dtype=dtype))
            P[f"layer{l}.film.b"] = torch.nn.Parameter(
                torch.cat([torch.ones(cfg.d_model, dtype=dtype), torch.zeros(cfg.d_model, dtype=dtype)]))
        norm("final_ln", cfg.d_model)
        lin("output", cfg.d_model, cfg.output_dim)
        self.p = P

    # -- conditioning -------------------------------------------------------

    def ppe(self, param_vec: torch.Tensor) -> torch.Tensor:
        """(..., 10) -> (..., 64) conditioning vector."""
        nn_ops._check_last(param_vec, self.config.param_dim, "ppe")
        P = self.p
        h = nn_ops.relu(nn_ops.linear(param_vec, P["ppe.0.W"], P["ppe.0.b"]))
        return nn_ops.linear(h, P["ppe.1.W"], P["ppe.1.b"])

    def null_conditioning(self, batch: int | None = None) -> torch.Tensor:
        z = torch.zeros(self.config.param_dim, dtype=self.dtype)
        c = self.ppe(z)
        return c if batch is None else c.expand(batch, -1)

    def film_params(self, c: torch.Tensor, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        gb = nn_ops.linear(c, self.p[f"layer{layer}.film.W"], self.p[f"layer{layer}.film.b"])
        return gb[..., :self.config.d_model], gb[..., self.config.d_model:]

    @property
    def dtype(self):
        return self.p["input.W"].dtype

    # -- forward ------------------------------------------------------------

    def forward(self, e: torch.Tensor, c: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, 768) frames + (B, 64) conditioning -> (B, T, 128). 2-D input is one sequence."""
        single = e.dim() == 2
        if single:
            e, c = e.unsqueeze(0), c.reshape(1, -1)
            mask = None if mask is None else mask.unsqueeze(0)
        cfg, P = self.config, self.p
        nn_ops._check_last(e, cfg.input_dim, "pcsct input")
        if e.shape[1] < 1:
            raise ValueError("sequence needs at least one frame")
        x = nn_ops.linear(e, P["input.W"], P["input.b"])
        x = x + nn_ops.sinusoidal_positions(e.shape[1], cfg.d_model, x.dtype)
        for l in range(cfg.n_layers):
            pre = f"layer{l}"
            h = nn_ops.layer_norm(x, P[f"{pre}.ln_attn.g"], P[f"{pre}.ln_attn.b"])
            x = x + nn_ops.multi_head_self_attention(
                h, *(P[f"{pre}.attn.{w}.W"] for w in "qkvo"), *(P[f"{pre}.attn.{w}.b"] for w in "qkvo"),
                heads=cfg.heads, key_mask=mask)
            h = nn_ops.layer_norm(x, P[f"{pre}.ln_ffn.g"], P[f"{pre}.ln_ffn.b"])
            h = nn_ops.gelu(nn_ops.linear(h, P[f"{pre}.ffn.0.W"], P[f"{pre}.ffn.0.b"]))
            h = nn_ops.linear(h, P[f"{pre}.ffn.1.W"], P[f"{pre}.ffn.1.b"])
            gamma, beta = self.film_params(c, l)
            x = x + nn_ops.film(h, gamma, beta)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after transformer layer {l}")
        x = nn_ops.layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        z = nn_ops.linear(x, P["output.W"], P["output.b"])
        return z[0] if single else z

    # -- persistence --------------------------------------------------------

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k.replace("/", "."): v.detach() for k, v in self.p.items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> "PCSCTModel":
        names = {k.replace("/", "."): v for k, v in self.p.items()}
        missing = set(names) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)[:3]}...")
        with torch.no_grad():
            for k, v in names.items():
                t = torch.as_tensor(np.asarray(tensors[k]), dtype=v.dtype)
                if t.shape != v.shape:
                    raise ValueError(f"checkpoint tensor {k} has shape {tuple(t.shape)}, expected {tuple(v.shape)}")
                v.copy_(t)
        return self

    def save(self, path) -> None:
        nn_ops.save_checkpoint(self.tensors(), path)

    @classmethod
    def load(cls, path, config: ModelConfig = ModelConfig()) -> "PCSCTModel":
        return cls(config).load_tensors(nn_ops.load_checkpoint(path))


def ppe_forward(param_vec, model: PCSCTModel) -> torch.Tensor:
    return model.ppe(torch.as_tensor(np.asarray(param_vec), dtype=model.dtype))


def masked_mean(z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Time-pool (B, T, D) -> (B, D), ignoring padded frames."""
    if mask is None:
        return z.mean(dim=-2)
    m = mask.to(z.dtype)[..., None]
    return (z * m).sum(dim=-2) / m.sum(dim=-2)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, EmbeddingSequence):
        x = x.data
    return torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x


def pool_and_sim(u, v) -> torch.Tensor:
    """Cosine similarity of the time-pooled mean vectors of two sequences."""
    a = _as_tensor(u).mean(dim=-2)
    b = _as_tensor(v).to(a.dtype).mean(dim=-2)
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ZeroDivisionError("pooled vector has zero norm; cosine undefined")
    return (a @ b) / (na * nb)


def infonce_from_pooled(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE on pooled (B, D) vectors; row i of u pairs with row i of v.

    Anchored at each clean item, negatives are the other perturbed items; the
    mirrored term anchors at each perturbed item against the other clean ones.
    """
    B = u.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    un = u / u.norm(dim=-1, keepdim=True)
    vn = v / v.norm(dim=-1, keepdim=True)
    logits = un @ vn.T / tau
    labels = torch.arange(B)
    return 0.5 * (nn_ops.cross_entropy(logits, labels) + nn_ops.cross_entropy(logits.T, labels))


def infonce_loss(z_orig: torch.Tensor, z_pert: torch.Tensor, tau: float = 0.1,
                 mask_orig: torch.Tensor | None = None, mask_pert: torch.Tensor | None = None) -> torch.Tensor:
    return infonce_from_pooled(masked_mean(z_orig, mask_orig), masked_mean(z_pert, mask_pert), tau)


def pad_batch(seqs: Sequence[np.ndarray | torch.Tensor], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (T_i, D) sequences into (B, T_max, D) plus a validity mask."""
    T = max(s.shape[0] for s in seqs)
    D = seqs[0].shape[1]
    out = torch.zeros(len(seqs), T, D, dtype=dtype)
    mask = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = torch.as_tensor(np.asarray(s), dtype=dtype)
        mask[i, :s.shape[0]] = True
    return out, mask


def embed_pamt(x, model: PCSCTModel, c: torch.Tensor | None = None, encoder_seed: int = 0) -> EmbeddingSequence:
    """Inference-time PAMT embedding; ``c=None`` uses the NULL conditioning."""
    if isinstance(x, AudioClip):
        x = get_encoder(encoder_seed, x.sample_rate_hz)(x)
    e = _as_tensor(x).to(model.dtype)
    with torch.no_grad():
        cond = model.null_conditioning() if c is None else torch.as_tensor(c, dtype=model.dtype)
        z = model(e, cond)
    return EmbeddingSequence(z.numpy(), x.frame_rate_hz if isinstance(x, EmbeddingSequence) else 50.0)


def pooled_pamt(seqs: Sequence[np.ndarray], model: PCSCTModel, batch: int = 64) -> np.ndarray:
    """NULL-conditioned pooled embeddings of many encoder sequences, (N, 128)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch):
            e, m = pad_batch(seqs[i:i + batch], model.dtype)
            z = model(e, model.null_conditioning(e.shape[0]), m)
            out.append(masked_mean(z, m).to(torch.float64).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.output_dim))


# ------------------------------------------------------------------ training

def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -math.inf
    epochs_run: int = 0

    def write_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "epoch", "val_spearman"])
            for r in self.rows:
                w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), r["epoch"],
                            "" if r["val_spearman"] is None else repr(r["val_spearman"])])


PairSource = Callable[[int, int], tuple[np.ndarray, np.ndarray, PerturbationSpec]]


def audio_pair_source(clips: Sequence[AudioClip], seed: int, encoder_seed: int = 0,
                      kinds: Sequence | None = None) -> tuple[int, PairSource]:
    """Fresh perturbation of clip ``i`` for each epoch; clean encodings cached.

    ``kinds`` restricts the sampled perturbation kinds (default: all six).
    """
    enc = get_encoder(encoder_seed, clips[0].sample_rate_hz)
    clean = [enc(c).data for c in clips]
    kinds = None if kinds is None else [parse_kind(k) for k in kinds]

    def source(i: int, epoch: int):
        s = derive_seed(seed, epoch, i)
        spec = sample_spec(s) if kinds is None else sample_spec(s, kinds[s % len(kinds)])
        pert = enc(apply(spec, clips[i])).data
        return clean[i], pert, spec

    return len(clips), source


def train(pairs: tuple[int, PairSource], cfg: TrainConfig,
          val_metric: Callable[[PCSCTModel], float] | None = None,
          model_config: ModelConfig = ModelConfig(),
          max_steps: int | None = None) -> tuple[PCSCTModel, TrainLog]:
    """AdamW + cosine warm-up training with early stopping on ``val_metric``.

    ``pairs`` is ``(n_items, source)``; ``source(i, epoch)`` returns the clean
    and perturbed encoder sequences and the spec for item ``i``. Both passes
    are conditioned on the pair's spec. ``val_metric`` is evaluated after every
    epoch (higher is better); the best-scoring weights are returned.
    """
    n, source = pairs
    if n < 2:
        raise ValueError("training needs at least 2 items")
    model = PCSCTModel(model_config, seed=cfg.seed)
    params = list(model.p.values())
    opt = nn_ops.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = sum(1 for s in range(0, n, cfg.batch_size) if min(cfg.batch_size, n - s) >= 2)
    total = steps_per_epoch * cfg.max_epochs
    if max_steps is not None:
        total = min(total, max_steps)
    tlog = TrainLog()
    best_state = copy.deepcopy(model.tensors())
    stale = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        order = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, 7919, epoch))).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2 or step >= total:
                continue
            items = [source(int(i), epoch) for i in idx]
            eo, mo = pad_batch([it[0] for it in items], model.dtype)
            ep, mp = pad_batch([it[1] for it in items], model.dtype)
            pv = torch.as_tensor(np.stack([vectorize(it[2]) for it in items]), dtype=model.dtype)
            c = model.ppe(pv)
            loss = infonce_loss(model(eo, c, mo), model(ep, c, mp), cfg.temperature, mo, mp)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            lr = nn_ops.cosine_warmup_lr(step + 1, total, cfg.lr, cfg.warmup_frac)
            opt.step(grads, lr)
            tlog.rows.append({"step": step, "lr": lr, "loss": loss.item(), "epoch": epoch, "val_spearman": None})
            step += 1
        val = float(val_metric(model)) if val_metric is not None else -float(tlog.rows[-1]["loss"])
        if tlog.rows:
            tlog.rows[-1]["val_spearman"] = val
        tlog.epochs_run = epoch + 1
        log.info("epoch %d loss %.4f val %.4f", epoch, tlog.rows[-1]["loss"] if tlog.rows else float("nan"), val)
        if val > tlog.best_val:
            tlog.best_val, tlog.best_epoch = val, epoch
            best_state = copy.deepcopy(model.tensors())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if step >= total:
            break
    model.load_tensors({k: v.numpy() for k, v in best_state.items()})
    return model, tlog
