"""Supervised fine-tuning and ELBO-based preference optimization.

Both run on the trimmed executor: no rollouts, no rewards, just a loss over
(prompt, response) data followed by an optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .likelihood import EstimatorConfig, draw_rows, evaluate
from .model import ConfigError, Denoiser, masked_nll
from .optim import AdamState, NonFiniteGradient, apply_update, clip_grads
from .seq import RngStream, Vocab, corrupt, sample_time, scored_length


@dataclass
class SftExample:
    prompt: np.ndarray
    response: np.ndarray       # eos-terminated, pad after eos

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64)
        self.response = np.asarray(self.response, dtype=np.int64)


@dataclass
class PreferencePair:
    prompt: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    def __post_init__(self):
        if np.array_equal(self.chosen, self.rejected):
            raise ValueError("chosen and rejected responses must differ")


class TrainingAborted(RuntimeError):
    pass


def _sft_inputs(model: Denoiser, examples: list[SftExample], ts, rng: RngStream, vocab: Vocab):
    """Corrupted batch for SFT. Prompt positions are never masked; only the
    scored part of each response (up to and including eos) may be.

    For block-causal models one response block per example is corrupted,
    the blocks before it stay clean."""
    P = len(examples[0].prompt)
    seqs = np.stack([np.concatenate([e.prompt, e.response]) for e in examples])
    noisy = seqs.copy()
    weight = np.zeros(seqs.shape)
    cfg = model.cfg
    for i, (e, t) in enumerate(zip(examples, ts)):
        r = rng.child(i)
        n = scored_length(e.response, vocab)
        lo, hi = 0, n
        if cfg.attention == "block_causal":
            n_blocks = math.ceil(n / cfg.block_len)
            b = int(r.integers(0, n_blocks))
            lo, hi = b * cfg.block_len, min(n, (b + 1) * cfg.block_len)
        noisy[i, P + lo:P + hi] = corrupt(seqs[i, P + lo:P + hi], t, r, vocab)
        weight[i, P + lo:P + hi] = 1.0
    assert not np.any(noisy[:, :P] == vocab.mask_id), "prompt positions must never be masked"
    return seqs, noisy, weight, P


def sft_loss(model: Denoiser, examples: list[SftExample], vocab: Vocab, rng: RngStream,
             t: float | None = None) -> torch.Tensor:
    """Mean over examples of the masked-diffusion loss restricted to the
    response. One t per example is drawn from ``rng`` unless ``t`` is given."""
    if not examples:
        raise ValueError("empty batch")
    if len({len(e.prompt) for e in examples}) != 1 or len({len(e.response) for e in examples}) != 1:
        raise ValueError("batch examples must share prompt and response lengths")
    ts = [t if t is not None else sample_time(rng.child("t", i)) for i in range(len(examples))]
    seqs, noisy, weight, P = _sft_inputs(model, examples, ts, rng, vocab)
    dtype = model.cfg.torch_dtype
    per_seq = masked_nll(model, torch.from_numpy(seqs), torch.from_numpy(noisy),
                         torch.tensor(ts, dtype=dtype), vocab.mask_id, P,
                         torch.from_numpy(weight).to(dtype))
    return per_seq.mean()


def dpo_vrpo_loss(model: Denoiser, ref_model: Denoiser, pairs: list[PreferencePair], vocab: Vocab,
                  rng: RngStream, beta: float = 0.5, est: EstimatorConfig | None = None):
    """Preference loss on ELBO scores, -log sigmoid(beta * margin), averaged.

    Policy and reference scores of one response are computed from the same
    corruption draws. Returns (loss tensor, margins as numpy array).
    """
    est = est or EstimatorConfig("mc_elbo", 16)
    if est.kind not in ("mc_elbo", "one_step", "coupled_pair", "block_elbo"):
        raise ConfigError("preference scores need a Monte Carlo estimator")
    rows = []
    for i, pair in enumerate(pairs):
        rows.append(draw_rows(est, pair.prompt, pair.chosen, vocab, rng.child(i, "chosen")))
        rows.append(draw_rows(est, pair.prompt, pair.rejected, vocab, rng.child(i, "rejected")))
    pol = torch.stack([s.value for s in evaluate(model, rows)])
    with torch.no_grad():
        ref = torch.stack([s.value for s in evaluate(ref_model, rows)])
    delta = pol - ref
    margin = delta[0::2] - delta[1::2]
    loss = -F.logsigmoid(beta * margin).mean()
    return loss, margin.detach().double().numpy()


def _step(model, loss, opt: AdamState, lr: float, clip: float):
    grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
    grads = {n: torch.zeros_like(p) if g is None else g
             for (n, p), g in zip(model.named_parameters(), grads)}
    grads, gnorm = clip_grads(grads, clip)
    apply_update(model, grads, opt, lr)
    return gnorm


@dataclass
class SftReport:
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_heldout_loss: list[float] = field(default_factory=list)
    skipped: int = 0


def heldout_loss(model: Denoiser, examples: list[SftExample], vocab: Vocab, seed: int,
                 batch_size: int = 256) -> float:
    """Loss under fixed noise (same draws every call)."""
    if not examples:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(examples), batch_size):
            batch = examples[s:s + batch_size]
            total += float(sft_loss(model, batch, vocab, RngStream(seed, "heldout", s))) * len(batch)
    return total / len(examples)


def train_sft(model: Denoiser, corpus: list[SftExample], vocab: Vocab, *, epochs: int, batch_size: int,
              lr: float, seed: int, heldout: list[SftExample] | None = None, opt: AdamState | None = None,
              clip: float = 1.0, on_epoch=None) -> SftReport:
    """Shuffled minibatch SFT. ``on_epoch(epoch, report)`` runs after every
    epoch (logging, evaluation, checkpoints)."""
    if not corpus:
        raise ValueError("empty corpus")
    opt = opt or AdamState()
    report = SftReport()
    consecutive = 0
    for epoch in range(epochs):
        model.train()
        order = RngStream(seed, "sft-order", epoch).permutation(len(corpus))
        losses = []
        for bi, s in enumerate(range(0, len(corpus), batch_size)):
            batch = [corpus[j] for j in order[s:s + batch_size]]
            loss = sft_loss(model, batch, vocab, RngStream(seed, "sft", epoch, bi))
            if not torch.isfinite(loss):
                report.skipped += 1
                consecutive += 1
                if consecutive >= 3:
                    raise TrainingAborted("three consecutive non-finite losses")
                continue
            try:
                _step(model, loss, opt, lr, clip)
            except NonFiniteGradient:
                report.skipped += 1
                consecutive += 1
                if consecutive >= 3:
                    raise TrainingAborted("three consecutive non-finite gradients")
                continue
            consecutive = 0
            losses.append(float(loss.detach()))
        report.epoch_train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if heldout:
            report.epoch_heldout_loss.append(heldout_loss(model, heldout, vocab, seed))
        if on_epoch is not None:
            on_epoch(epoch, report)
    return report


def train_dpo(model: Denoiser, ref_model: Denoiser, pairs: list[PreferencePair], vocab: Vocab, *,
              steps: int, batch_size: int, lr: float, seed: int, beta: float = 0.5,
              est: EstimatorConfig | None = None, opt: AdamState | None = None, clip: float = 1.0,
              on_step=None) -> list[dict]:
    opt = opt or AdamState()
    log = []
    for step in range(steps):
        idx = RngStream(seed, "dpo-batch", step).permutation(len(pairs))[:batch_size]
        batch = [pairs[j] for j in idx]
        loss, margins = dpo_vrpo_loss(model, ref_model, batch, vocab, RngStream(seed, "dpo", step), beta, est)
        if not torch.isfinite(loss):
            raise TrainingAborted("non-finite preference loss")
        gnorm = _step(model, loss, opt, lr, clip)
        rec = {"step": step, "loss": float(loss.detach()), "margin_mean": float(margins.mean()),
               "grad_norm": gnorm}
        log.append(rec)
        if on_step is not None:
            on_step(rec)
    return log
