"""Reverse-process samplers with full trajectory recording.

``sample_mdlm`` denoises a fixed-length response region under bidirectional
attention; ``sample_bdlm`` decodes block by block, each block conditioned on
the clean blocks before it. Both share one region denoiser, so a single
block decoded by ``sample_bdlm`` is bit-identical to ``sample_mdlm``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ConfigError, Denoiser
from .seq import RngStream, Vocab, normalize_response


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class DenoisePlan:
    steps: int
    counts: tuple[int, ...] | None = None
    selection: str = "top_confidence"   # or "random"
    temperature: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("plan needs at least one step")
        if self.selection not in ("top_confidence", "random"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.counts is not None and len(self.counts) != self.steps:
            raise ConfigError("counts must have one entry per step")

    def unmask_counts(self, n_masked: int) -> list[int]:
        """Per-step unmask counts; the default splits n_masked evenly with the
        remainder going to the earliest steps."""
        if self.counts is not None:
            if sum(self.counts) != n_masked or min(self.counts) < 0:
                raise ConfigError(f"plan counts {self.counts} do not sum to {n_masked}")
            return list(self.counts)
        if self.steps > n_masked:
            raise ConfigError(f"{self.steps} steps for only {n_masked} masked positions")
        base, extra = divmod(n_masked, self.steps)
        return [base + (1 if s < extra else 0) for s in range(self.steps)]


@dataclass
class Step:
    context_len: int          # length of the state fed to the model at this step
    positions: np.ndarray     # absolute canvas positions written this step
    tokens: np.ndarray
    logprobs: np.ndarray      # temperature-1 log-probs of the written tokens


@dataclass
class Trajectory:
    initial: np.ndarray       # prompt followed by mask tokens
    prefix_len: int
    steps: list[Step] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def states(self):
        """Yield (state before step, step) with state truncated to the step's
        context."""
        canvas = self.initial.copy()
        for st in self.steps:
            yield canvas[:st.context_len].copy(), st
            canvas[st.positions] = st.tokens

    def recorded_logprob(self, upto: int | None = None) -> float:
        """Sum of recorded log-probs, optionally only for canvas positions
        below ``upto``."""
        total = 0.0
        for st in self.steps:
            keep = st.positions < upto if upto is not None else slice(None)
            total += float(np.sum(st.logprobs[keep]))
        return total

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "header", "version": 1, "prefix_len": self.prefix_len,
                                "initial": self.initial.tolist()}) + "\n")
            for i, st in enumerate(self.steps):
                f.write(json.dumps({"kind": "step", "step": i, "context_len": st.context_len,
                                    "positions": st.positions.tolist(), "tokens": st.tokens.tolist(),
                                    "logprobs": [float(x) for x in st.logprobs]}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Trajectory":
        with open(path) as f:
            records = [json.loads(line) for line in f if line.strip()]
        head = records[0]
        if head.get("kind") != "header" or head.get("version") != 1:
            raise IntegrityError("missing or unsupported trajectory header")
        traj = cls(np.array(head["initial"], dtype=np.int64), head["prefix_len"])
        for r in records[1:]:
            traj.steps.append(Step(r["context_len"], np.array(r["positions"], dtype=np.int64),
                                   np.array(r["tokens"], dtype=np.int64),
                                   np.array(r["logprobs"], dtype=np.float64)))
        return traj


@dataclass
class RolloutResult:
    response: np.ndarray      # generated region, pad after the first eos
    raw: np.ndarray           # generated region exactly as decoded
    trajectory: Trajectory
    prompt_len: int
    seconds: float = 0.0


def _sample_token(logits: np.ndarray, temperature: float, mask_id: int, rng: RngStream) -> int:
    z = logits.astype(np.float64).copy()
    z[mask_id] = -np.inf
    if temperature == 0:
        return int(np.argmax(z))
    z = z / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    return int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))


@torch.no_grad()
def _denoise_region(model: Denoiser, canvas: np.ndarray, lo: int, hi: int, prefix_len: int,
                    plan: DenoisePlan, vocab: Vocab, rngs: list[RngStream],
                    trajs: list[Trajectory]) -> None:
    """Fill the masked positions canvas[:, lo:hi] in place, batch-wise.
    Rows never interact: each row only reads its own logits and rng."""
    B = canvas.shape[0]
    n_masked = [(canvas[b, lo:hi] == vocab.mask_id).sum() for b in range(B)]
    if len(set(n_masked)) != 1:
        raise ValueError("all rows must start with the same number of masked positions")
    counts = plan.unmask_counts(int(n_masked[0]))
    for k in counts:
        if k == 0:
            continue
        logits = model(torch.from_numpy(canvas[:, :hi].copy()), prefix_len)
        logp = torch.log_softmax(logits.double(), dim=-1).numpy()
        logits = logits.double().numpy()
        for b in range(B):
            masked = lo + np.flatnonzero(canvas[b, lo:hi] == vocab.mask_id)
            if plan.selection == "random":
                chosen = masked[rngs[b].permutation(len(masked))[:k]]
            else:
                probs = np.exp(logp[b, masked])
                probs[:, vocab.mask_id] = 0.0
                conf = probs.max(axis=1)
                chosen = masked[np.argsort(-conf, kind="stable")[:k]]
            chosen = np.sort(chosen)
            tokens = np.array([_sample_token(logits[b, pos], plan.temperature, vocab.mask_id, rngs[b])
                               for pos in chosen], dtype=np.int64)
            trajs[b].steps.append(Step(hi, chosen, tokens, logp[b, chosen, tokens]))
            canvas[b, chosen] = tokens


def _check_prompts(prompts) -> np.ndarray:
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    return prompts


def sample_mdlm_batch(model: Denoiser, prompts, gen_len: int, plan: DenoisePlan, vocab: Vocab,
                      rngs: list[RngStream]) -> list[RolloutResult]:
    """Sample one response per prompt row (all prompts share one length)."""
    cfg = model.cfg
    if cfg.attention != "bidirectional":
        raise ConfigError("sample_mdlm needs a bidirectional model")
    prompts = _check_prompts(prompts)
    B, P = prompts.shape
    if P + gen_len > cfg.max_len:
        raise ConfigError("prompt plus generation length exceeds max_len")
    if len(rngs) != B:
        raise ValueError("one rng stream per prompt row")
    t0 = time.perf_counter()
    canvas = np.concatenate([prompts, np.full((B, gen_len), vocab.mask_id, dtype=np.int64)], axis=1)
    trajs = [Trajectory(canvas[b].copy(), P) for b in range(B)]
    _denoise_region(model, canvas, P, P + gen_len, P, plan, vocab, rngs, trajs)
    dt = time.perf_counter() - t0
    return [RolloutResult(normalize_response(canvas[b, P:], vocab), canvas[b, P:].copy(), trajs[b], P, dt / B)
            for b in range(B)]


def sample_mdlm(model: Denoiser, prompt, gen_len: int, plan: DenoisePlan, vocab: Vocab,
                rng: RngStream) -> RolloutResult:
    return sample_mdlm_batch(model, np.asarray(prompt)[None], gen_len, plan, vocab, [rng])[0]


def sample_bdlm_batch(model: Denoiser, prompts, block_len: int, max_blocks: int, plan: DenoisePlan,
                      vocab: Vocab, rngs: list[RngStream], stop_at_eos: bool = True) -> list[RolloutResult]:
    """Semi-autoregressive decoding. Rows that produced eos stop growing; the
    remaining rows continue until every row stopped or ``max_blocks``."""
    cfg = model.cfg
    if cfg.attention != "block_causal" or cfg.block_len != block_len:
        raise ConfigError(f"sample_bdlm needs a block_causal model with block_len={block_len}")
    prompts = _check_prompts(prompts)
    B, P = prompts.shape
    if P + block_len > cfg.max_len:
        raise ConfigError("prompt plus one block exceeds max_len")
    t0 = time.perf_counter()
    canvases = [prompts[b].copy() for b in range(B)]
    trajs = [Trajectory(prompts[b].copy(), P) for b in range(B)]
    active = list(range(B))
    for blk in range(max_blocks):
        end = P + (blk + 1) * block_len
        if end > cfg.max_len or not active:
            break
        canvas = np.stack([np.concatenate([canvases[b], np.full(block_len, vocab.mask_id, dtype=np.int64)])
                           for b in active])
        _denoise_region(model, canvas, end - block_len, end, P, plan, vocab,
                        [rngs[b] for b in active], [trajs[b] for b in active])
        still = []
        for row, b in enumerate(active):
            canvases[b] = canvas[row]
            if not (stop_at_eos and np.any(canvas[row, end - block_len:end] == vocab.eos_id)):
                still.append(b)
        active = still
    dt = time.perf_counter() - t0
    out = []
    for b in range(B):
        n_gen = len(canvases[b]) - P
        trajs[b].initial = np.concatenate([prompts[b], np.full(n_gen, vocab.mask_id, dtype=np.int64)])
        raw = canvases[b][P:].copy()
        out.append(RolloutResult(normalize_response(raw, vocab), raw, trajs[b], P, dt / B))
    return out


def sample_bdlm(model: Denoiser, prompt, block_len: int, max_blocks: int, plan: DenoisePlan,
                vocab: Vocab, rng: RngStream, stop_at_eos: bool = True) -> RolloutResult:
    return sample_bdlm_batch(model, np.asarray(prompt)[None], block_len, max_blocks, plan, vocab, [rng],
                             stop_at_eos)[0]


def check_partition(trajectory: Trajectory, mask_id: int) -> None:
    seen: set[int] = set()
    for st in trajectory.steps:
        pos = st.positions.tolist()
        if len(set(pos)) != len(pos) or seen.intersection(pos):
            raise IntegrityError("trajectory steps write overlapping positions")
        seen.update(pos)
    expected = set(np.flatnonzero(trajectory.initial == mask_id).tolist())
    if seen != expected:
        raise IntegrityError("trajectory positions do not cover exactly the masked positions")


def replay(trajectory: Trajectory, initial, mask_id: int) -> np.ndarray:
    """Re-apply every recorded write to ``initial`` and return the final canvas."""
    canvas = np.array(initial, dtype=np.int64)
    if not trajectory.steps:
        return canvas
    if not np.array_equal(canvas, trajectory.initial):
        raise IntegrityError("initial state does not match the trajectory")
    check_partition(trajectory, mask_id)
    for st in trajectory.steps:
        canvas[st.positions] = st.tokens
    return canvas
