"""Sequence-likelihood surrogates for diffusion policies.

Every estimator works in two phases. ``draw_rows`` turns (prompt, response,
rng) into a set of corrupted model inputs plus a per-position coefficient
matrix; ``evaluate`` runs the model on any number of such row sets in
batched forwards and reduces them to a score per response:

    score = sum over rows, positions of  coef * log p(target | noisy row)

Because the draws are separated from evaluation, re-evaluating the same
``Rows`` under new parameters reuses the exact same corruption noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ConfigError, Denoiser
from .rollout import IntegrityError, Trajectory, check_partition
from .seq import T_EPS, RngStream, Vocab, corrupt, sample_time, scored_length

KINDS = ("mc_elbo", "one_step", "coupled_pair", "block_elbo", "trajectory")
MAX_ORACLE_LEN = 12


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "mc_elbo"
    mc_samples: int = 16
    fixed_t: float | None = None      # None: t ~ U(eps, 1]; one_step treats None as t = 1
    weighted: bool = False            # coupled_pair: importance-weighted passes
    block_len: int = 32               # block_elbo only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.fixed_t is not None and not 0 < self.fixed_t <= 1:
            raise ConfigError("fixed_t must lie in (0, 1]")

    @property
    def n_samples(self) -> int:
        return self.mc_samples if self.kind in ("mc_elbo", "block_elbo") else 1


@dataclass
class Rows:
    """Corrupted inputs for one response."""
    noisy: np.ndarray        # (R, L) model inputs
    target: np.ndarray       # (R, L) clean tokens the log-probs are read at
    coef: np.ndarray         # (R, L) float64 weights; zero where nothing counts
    sample: np.ndarray       # (R,) Monte Carlo sample index of each row
    n_samples: int
    prefix_len: int
    # per-sample terms are multiplied by this to form the score (1/k for means)
    sample_scale: float = 1.0


@dataclass
class SurrogateScore:
    value: torch.Tensor | float
    terms: np.ndarray              # per-sample terms
    token_terms: torch.Tensor | None = None   # per-position contributions, (L,)

    def __float__(self):
        return float(self.value)


def _full(prompt, response) -> tuple[np.ndarray, int]:
    prompt = np.asarray(prompt, dtype=np.int64)
    return np.concatenate([prompt, np.asarray(response, dtype=np.int64)]), len(prompt)


def _empty_rows(prompt, response) -> Rows:
    seq, P = _full(prompt, response)
    z = np.zeros((0, len(seq)), dtype=np.int64)
    return Rows(z, z.copy(), np.zeros((0, len(seq))), np.zeros(0, dtype=np.int64), 0, P)


def _mc_rows(prompt, response, vocab: Vocab, k: int, rng: RngStream, fixed_t,
             lo: int = 0, hi: int | None = None) -> Rows:
    """k corruptions of response[lo:hi]; everything else stays clean."""
    seq, P = _full(prompt, response)
    n_valid = scored_length(response, vocab)
    hi = n_valid if hi is None else min(hi, n_valid)
    noisy = np.repeat(seq[None], k, axis=0)
    coef = np.zeros(noisy.shape)
    for i in range(k):
        t = fixed_t if fixed_t is not None else sample_time(rng)
        if rng is None and t == 1.0:
            span = np.full(hi - lo, vocab.mask_id)   # t = 1 masks everything, no draws needed
        else:
            span = corrupt(seq[P + lo:P + hi], t, rng, vocab)
        noisy[i, P + lo:P + hi] = span
        coef[i, P + lo:P + hi] = (span == vocab.mask_id) / t
    return Rows(noisy, np.repeat(seq[None], k, axis=0), coef, np.arange(k), k, P, 1.0 / k)


def draw_rows(est: EstimatorConfig, prompt, response, vocab: Vocab, rng: RngStream | None) -> Rows:
    """Draw the corruption noise for one response. Prompt positions are never
    masked; positions after the first eos never count."""
    response = np.asarray(response, dtype=np.int64)
    if scored_length(response, vocab) == 0:
        return _empty_rows(prompt, response)
    kind = est.kind
    if kind == "mc_elbo":
        return _mc_rows(prompt, response, vocab, est.mc_samples, rng, est.fixed_t)
    if kind == "one_step":
        return _mc_rows(prompt, response, vocab, 1, rng, 1.0 if est.fixed_t is None else est.fixed_t)
    if kind == "coupled_pair":
        return _coupled_rows(prompt, response, vocab, rng, est.weighted)
    if kind == "block_elbo":
        return _block_rows(prompt, response, vocab, est, rng)
    raise ConfigError("trajectory scores are drawn with trajectory_rows")


def _coupled_rows(prompt, response, vocab: Vocab, rng: RngStream, weighted: bool) -> Rows:
    seq, P = _full(prompt, response)
    n = scored_length(response, vocab)
    t = sample_time(rng, T_EPS, 1.0 - T_EPS)
    hit = corrupt(seq[P:P + n], t, rng, vocab) == vocab.mask_id
    noisy = np.repeat(seq[None], 2, axis=0)
    coef = np.zeros(noisy.shape)
    noisy[0, P:P + n][hit] = vocab.mask_id
    noisy[1, P:P + n][~hit] = vocab.mask_id
    if weighted:
        coef[0, P:P + n] = hit / (2 * t)
        coef[1, P:P + n] = ~hit / (2 * (1 - t))
    else:
        coef[0, P:P + n] = hit
        coef[1, P:P + n] = ~hit
    return Rows(noisy, np.repeat(seq[None], 2, axis=0), coef, np.zeros(2, dtype=np.int64), 1, P)


def _block_rows(prompt, response, vocab: Vocab, est: EstimatorConfig, rng: RngStream) -> Rows:
    """Per block: k corruptions of that block with a clean prefix. The block
    grid starts right after the prompt; a short last block is simply partial.
    Later blocks are left clean, which block-causal attention hides from the
    scored block."""
    n = scored_length(response, vocab)
    L = est.block_len
    parts = [_mc_rows(prompt, response, vocab, est.mc_samples, rng, est.fixed_t, lo, lo + L)
             for lo in range(0, n, L)]
    k = est.mc_samples
    rows = Rows(np.concatenate([p.noisy for p in parts]), np.concatenate([p.target for p in parts]),
                np.concatenate([p.coef for p in parts]), np.tile(np.arange(k), len(parts)),
                k, parts[0].prefix_len, 1.0 / k)
    return rows


def trajectory_rows(trajectory: Trajectory, vocab: Vocab) -> Rows:
    """One row per denoising step: the state before the step, scored at the
    positions written in that step. Rows are right-padded with mask tokens,
    which block-causal attention never lets earlier positions see."""
    check_partition(trajectory, vocab.mask_id)
    P = trajectory.prefix_len
    final = trajectory.initial.copy()
    for st in trajectory.steps:
        final[st.positions] = st.tokens
    upto = P + scored_length(final[P:], vocab)
    L = len(final)
    R = len(trajectory.steps)
    noisy = np.full((R, L), vocab.mask_id, dtype=np.int64)
    coef = np.zeros((R, L))
    for r, (state, st) in enumerate(trajectory.states()):
        noisy[r, :len(state)] = state
        if np.any(state[st.positions] != vocab.mask_id):
            raise IntegrityError("trajectory writes a position that is not masked")
        keep = st.positions[st.positions < upto]
        coef[r, keep] = 1.0
    return Rows(noisy, np.repeat(final[None], R, axis=0), coef, np.zeros(R, dtype=np.int64),
                1 if R else 0, P)


def evaluate(model: Denoiser, rows_list: list[Rows], chunk: int = 4096) -> list[SurrogateScore]:
    """Score every row set. Values carry gradients when autograd is enabled.

    Rows are batched by (length, prefix length), one forward per batch.
    """
    dtype = model.cfg.torch_dtype
    contrib: list[torch.Tensor | None] = [None] * len(rows_list)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, rows in enumerate(rows_list):
        if len(rows.noisy):
            groups.setdefault((rows.noisy.shape[1], rows.prefix_len), []).append(i)
    for (L, P), members in groups.items():
        noisy = np.concatenate([rows_list[i].noisy for i in members])
        target = np.concatenate([rows_list[i].target for i in members])
        coef = np.concatenate([rows_list[i].coef for i in members])
        outs = []
        for s in range(0, len(noisy), chunk):
            logits = model(torch.from_numpy(noisy[s:s + chunk]), P)
            logp = torch.log_softmax(logits, dim=-1)
            lp = logp.gather(-1, torch.from_numpy(target[s:s + chunk])[..., None])[..., 0]
            outs.append(lp * torch.from_numpy(coef[s:s + chunk]).to(dtype))
        per_pos = torch.cat(outs)
        off = 0
        for i in members:
            r = len(rows_list[i].noisy)
            contrib[i] = per_pos[off:off + r]
            off += r
    scores = []
    for rows, c in zip(rows_list, contrib):
        if c is None:
            scores.append(SurrogateScore(torch.zeros((), dtype=dtype), np.zeros(0),
                                         torch.zeros(0, dtype=dtype)))
            continue
        row_terms = c.sum(-1)
        terms = torch.zeros(rows.n_samples, dtype=row_terms.dtype).index_add(
            0, torch.from_numpy(rows.sample), row_terms)
        value = terms.sum() * rows.sample_scale
        token_terms = c.sum(0)[rows.prefix_len:] * rows.sample_scale
        scores.append(SurrogateScore(value, terms.detach().double().numpy(), token_terms))
    return scores


def _score(model, rows) -> SurrogateScore:
    with torch.no_grad():
        s = evaluate(model, [rows])[0]
    s.value = float(s.value)
    return s


def mc_elbo(model: Denoiser, prompt, response, vocab: Vocab, rng: RngStream, k: int = 16,
            fixed_t: float | None = None) -> SurrogateScore:
    """Monte Carlo ELBO estimate of log p(response | prompt) with k samples."""
    return _score(model, draw_rows(EstimatorConfig("mc_elbo", k, fixed_t), prompt, response, vocab, rng))


def one_step(model: Denoiser, prompt, response, vocab: Vocab, rng: RngStream | None = None,
             fixed_t: float | None = 1.0) -> SurrogateScore:
    """Single-sample ELBO; by default a single fully masked pass (t = 1).
    With ``fixed_t=None`` it draws t like mc_elbo(k=1)."""
    if fixed_t is None:
        return mc_elbo(model, prompt, response, vocab, rng, k=1)
    return _score(model, draw_rows(EstimatorConfig("one_step", fixed_t=fixed_t), prompt, response, vocab, rng))


def coupled_pair(model: Denoiser, prompt, response, vocab: Vocab, rng: RngStream,
                 weighted: bool = False) -> SurrogateScore:
    """Antithetic two-pass estimate: every response token is scored once, in
    whichever of the two complementary passes masked it."""
    est = EstimatorConfig("coupled_pair", weighted=weighted)
    return _score(model, draw_rows(est, prompt, response, vocab, rng))


def block_elbo(model: Denoiser, prompt, response, vocab: Vocab, rng: RngStream, k: int = 16,
               fixed_t: float | None = None) -> SurrogateScore:
    cfg = model.cfg
    if cfg.attention != "block_causal":
        raise ConfigError("block_elbo needs a block_causal model")
    est = EstimatorConfig("block_elbo", k, fixed_t, block_len=cfg.block_len)
    return _score(model, draw_rows(est, prompt, response, vocab, rng))


def trajectory_logprob(model: Denoiser, trajectory: Trajectory, vocab: Vocab) -> SurrogateScore:
    """Sum over denoising steps of log p(token | state before the step),
    under the model's current parameters."""
    if len(trajectory.initial) > model.cfg.max_len:
        raise IntegrityError("trajectory longer than the model context")
    return _score(model, trajectory_rows(trajectory, vocab))


def estimator_rows(est: EstimatorConfig, prompt, response, vocab: Vocab, rng: RngStream | None,
                   trajectory: Trajectory | None = None) -> Rows:
    if est.kind == "trajectory":
        if trajectory is None:
            raise IntegrityError("trajectory estimator needs a recorded trajectory")
        return trajectory_rows(trajectory, vocab)
    return draw_rows(est, prompt, response, vocab, rng)


# ---------------------------------------------------------------------------
# exact oracle


def _gauss_legendre(fn, a: float, b: float, nodes: int) -> float:
    x, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (b - a) * x + 0.5 * (b + a)
    return float(0.5 * (b - a) * np.sum(w * fn(t)))


@torch.no_grad()
def exact_elbo_oracle(model: Denoiser, prompt, response, vocab: Vocab, nodes: int = 64,
                      tol: float = 1e-6) -> float:
    """Expected mc_elbo value, computed without sampling.

    All 2^n mask subsets of the n scored response positions are enumerated;
    the time integral over t ~ U(eps, 1] uses Gauss-Legendre quadrature and
    is accepted only if doubling the node count moves it by less than ``tol``.
    """
    seq, P = _full(prompt, response)
    n = scored_length(response, vocab)
    if n > MAX_ORACLE_LEN:
        raise ValueError(f"oracle enumerates 2^n subsets; n={n} exceeds {MAX_ORACLE_LEN}")
    if n == 0:
        return 0.0
    subsets = (np.arange(2 ** n)[:, None] >> np.arange(n)[None]) & 1
    noisy = np.repeat(seq[None], len(subsets), axis=0)
    noisy[:, P:P + n] = np.where(subsets == 1, vocab.mask_id, seq[P:P + n])
    logits = model(torch.from_numpy(noisy), P).double()
    target = torch.from_numpy(np.broadcast_to(seq, noisy.shape).copy())
    lp = torch.log_softmax(logits, -1).gather(-1, target[..., None])[..., 0]
    lp = lp[:, P:P + n].numpy()
    sub_sum = (lp * subsets).sum(1)                   # sum of log-probs over masked positions
    size = subsets.sum(1)

    def integrand(t):
        # E_M[(1/t) sum_{l in M} log p] with P(M) = t^|M| (1-t)^(n-|M|)
        t = t[:, None]
        w = np.where(size[None] > 0, t ** np.maximum(size[None] - 1, 0) * (1 - t) ** (n - size[None]), 0.0)
        return (w * sub_sum[None]).sum(1)

    span = 1.0 - T_EPS
    v1 = _gauss_legendre(integrand, T_EPS, 1.0, nodes) / span
    v2 = _gauss_legendre(integrand, T_EPS, 1.0, 2 * nodes) / span
    if abs(v1 - v2) >= tol:
        raise ArithmeticError(f"oracle quadrature did not converge ({v1} vs {v2})")
    return v1


# ---------------------------------------------------------------------------
# variance diagnostics


@dataclass
class VarianceRecord:
    kind: str
    k: int
    reps: int
    mean: float
    var: float
    se: float
    values: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "reps": self.reps, "mean": self.mean,
                "var": self.var, "se": self.se}


@torch.no_grad()
def variance_probe(model: Denoiser, est: EstimatorConfig, prompt, response, vocab: Vocab,
                   rng: RngStream, reps: int, batch_reps: int = 256,
                   trajectory: Trajectory | None = None) -> VarianceRecord:
    """Sample statistics of an estimator over ``reps`` independent streams
    ``rng.child(i)``."""
    if reps < 2:
        raise ValueError("variance_probe needs reps >= 2")
    values = np.empty(reps)
    for s in range(0, reps, batch_reps):
        idx = range(s, min(reps, s + batch_reps))
        rows = [estimator_rows(est, prompt, response, vocab, rng.child(i), trajectory) for i in idx]
        values[s:s + len(rows)] = [float(x.value) for x in evaluate(model, rows)]
    var = float(values.var(ddof=1))
    return VarianceRecord(est.kind, est.n_samples, reps, float(values.mean()), var, math.sqrt(var / reps), values)
