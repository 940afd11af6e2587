"""A small transformer mask predictor with bidirectional and block-causal
attention, plus the masked-diffusion loss terms and a finite-difference
gradient checker."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seq import DomainError


class ConfigError(ValueError):
    pass


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 512
    attention: str = "bidirectional"   # or "block_causal"
    block_len: int = 0                 # only meaningful for block_causal
    dtype: str = "float32"
    tie_weights: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ConfigError("model sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.attention not in ("bidirectional", "block_causal"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.attention == "block_causal" and self.block_len < 1:
            raise ConfigError("block_causal attention needs block_len >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def block_ids(length: int, prefix_len: int, block_len: int) -> torch.Tensor:
    """1-based block index per position. The prefix (prompt) shares block 1
    with the first block of generated positions."""
    pos = torch.arange(length)
    rel = torch.clamp(pos - prefix_len, min=0)
    return rel // block_len + 1


def attention_mask(cfg: ModelConfig, length: int, prefix_len: int = 0) -> torch.Tensor | None:
    """Boolean (L, L) matrix, True where query i may attend to key j."""
    if cfg.attention == "bidirectional":
        return None
    bid = block_ids(length, prefix_len, cfg.block_len)
    return bid[None, :] <= bid[:, None]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 4 * d)
        self.ff2 = nn.Linear(4 * d, d)

    def forward(self, x, mask):
        B, L, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        q, k, v = (z.view(B, L, self.n_heads, d // self.n_heads).transpose(1, 2) for z in (q, k, v))
        att = q @ k.transpose(-2, -1) / math.sqrt(d // self.n_heads)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.proj(y)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x


class Denoiser(nn.Module):
    """Mask predictor p(x0 | xt): one categorical over the full vocabulary
    per position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.init_seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        if cfg.tie_weights:
            self.head.weight = self.tok_emb.weight
        self.to(cfg.torch_dtype)
        self._init(gen)

    @torch.no_grad()
    def _init(self, gen):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.02)

    def forward(self, ids: torch.Tensor, prefix_len: int = 0) -> torch.Tensor:
        if ids.dim() == 1:
            return self.forward(ids[None], prefix_len)[0]
        B, L = ids.shape
        if L > self.cfg.max_len:
            raise DomainError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        mask = attention_mask(self.cfg, L, prefix_len)
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(L))
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.ln_f(x))


def build_model(cfg: ModelConfig) -> Denoiser:
    return Denoiser(cfg)


@torch.no_grad()
def make_uniform(model: Denoiser) -> Denoiser:
    """Zero the output projection so every position predicts uniformly."""
    model.head.weight.zero_()
    model.head.bias.zero_()
    return model


@torch.no_grad()
def force_token(model: Denoiser, token: int, strength: float = 50.0) -> Denoiser:
    """Probe model whose every position puts (almost) all mass on ``token``."""
    model.head.weight.zero_()
    model.head.bias.zero_()
    model.head.bias[token] = strength
    return model


def as_tensor(ids) -> torch.Tensor:
    return torch.as_tensor(np.asarray(ids), dtype=torch.long)


def forward_logits(model: Denoiser, state, prefix_len: int = 0) -> torch.Tensor:
    """Logits of shape (L, V) for a single state (array-like of ids)."""
    return model(as_tensor(state), prefix_len)


# ---------------------------------------------------------------------------
# loss terms


def masked_nll(model: Denoiser, clean: torch.Tensor, noisy: torch.Tensor, t: torch.Tensor,
               mask_id: int, prefix_len: int = 0, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sequence weighted NLL over masked positions, batched.

    clean, noisy: (B, L) ids; t: (B,) times. Returns (B,) values of
    (1/t) * sum_{masked} -log p(clean | noisy). ``weight`` (B, L) optionally
    zeroes positions that must not count.
    """
    logits = model(noisy, prefix_len)
    logp = torch.log_softmax(logits, dim=-1).gather(-1, clean[..., None])[..., 0]
    sel = (noisy == mask_id).to(logp.dtype)
    if weight is not None:
        sel = sel * weight
    return -(sel * logp).sum(-1) / t


def nelbo_term(model: Denoiser, x0, xt, t: float, mask_id: int, prefix_len: int = 0) -> torch.Tensor:
    """Masked-diffusion NELBO summand for one corrupted sequence (a scalar
    tensor carrying the autograd graph). Zero when nothing is masked."""
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    clean, noisy = as_tensor(x0)[None], as_tensor(xt)[None]
    tt = torch.tensor([t], dtype=model.cfg.torch_dtype)
    return masked_nll(model, clean, noisy, tt, mask_id, prefix_len)[0]


def block_nelbo_term(model: Denoiser, x0, block_index: int, block_len: int, xt_block, t: float,
                     mask_id: int) -> torch.Tensor:
    """Block-wise NELBO summand: only masked positions of block ``block_index``
    count; later blocks are dropped from the input entirely."""
    cfg = model.cfg
    if cfg.attention != "block_causal" or cfg.block_len != block_len:
        raise ConfigError("block_nelbo_term needs a block_causal model with the same block length")
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    end = block_index * block_len
    x0 = np.asarray(x0)[:end]
    xt = np.array(xt_block)[:end]
    lo = end - block_len
    if np.any(xt[:lo] != x0[:lo]):
        raise ValueError("positions before the scored block must be clean")
    return nelbo_term(model, x0, xt, t, mask_id)


def loss_and_grads(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]):
    """Evaluate ``loss_fn(model)`` and return (loss, {name: gradient})."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    params = dict(model.named_parameters())
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    else:
        grads = [None] * len(params)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return float(loss.detach()), out


@dataclass
class GradCheckReport:
    rel_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e < self.tolerance else 'FAIL'} {name:<28s} rel_err={e:.3e}"
                for name, e in self.rel_errors.items()]


def grad_check(model: Denoiser, loss_fn, tolerance: float = 1e-4, step: float = 1e-5,
               max_coords: int = 48, seed: int = 0, grads: dict | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Each parameter tensor is probed on at most ``max_coords`` coordinates;
    the reported figure is the relative L2 error over those coordinates.
    ``grads`` substitutes the analytic side (used as a negative control).
    """
    if model.cfg.dtype != "float64":
        raise ConfigError("gradient checking needs double precision")
    if grads is None:
        _, grads = loss_and_grads(model, loss_fn)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            n = flat.numel()
            coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + step
                up = float(loss_fn(model))
                flat[c] = orig - step
                down = float(loss_fn(model))
                flat[c] = orig
                num[j] = (up - down) / (2 * step)
            ana = grads[name].reshape(-1)[torch.as_tensor(coords)].double().numpy()
            denom = max(np.linalg.norm(ana), np.linalg.norm(num))
            report.rel_errors[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(ana - num) / denom)
    return report
