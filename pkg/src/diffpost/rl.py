"""Group-relative policy optimization for diffusion policies.

One training step runs the shared five-stage workflow:

  1. rollout      G responses per prompt from a frozen snapshot
  2. reward       task verifier, malformed output scores 0
  3. old scores   likelihood surrogate per response under a noise key
  4. advantages   group-normalized rewards
  5. update       clipped-ratio loss, new scores re-use the noise key

Algorithms differ only in the hooks carried by ``AlgorithmSpec``: the forward
corruption schedule, whether scoring uses the recorded trajectory or fresh
corruption, the likelihood estimator, and the policy-loss settings.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .likelihood import EstimatorConfig, Rows, estimator_rows, evaluate, variance_probe
from .model import ConfigError, Denoiser
from .optim import AdamState, NonFiniteGradient, apply_update, clip_grads
from .rollout import DenoisePlan, RolloutResult, sample_bdlm_batch, sample_mdlm_batch
from .seq import LINEAR, NoiseSchedule, RngStream, Vocab
from .tasks import Task, TaskInstance


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    likelihood: EstimatorConfig
    trajectory_rule: str = "fresh"        # "recorded": score the rollout's own trajectory
    forward_process: NoiseSchedule = LINEAR
    clip_eps: float = 0.2
    kl_coef: float = 0.0
    ratio_level: str = "sequence"         # or "token"
    shared_noise: bool = True

    def __post_init__(self):
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be >= 0")
        if self.ratio_level not in ("sequence", "token"):
            raise ConfigError("ratio_level is 'sequence' or 'token'")
        recorded = self.likelihood.kind == "trajectory"
        if self.trajectory_rule not in ("fresh", "recorded") or recorded != (self.trajectory_rule == "recorded"):
            raise ConfigError("the trajectory estimator and the 'recorded' rule go together")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be positive")


def algorithm(name: str, mc_samples: int = 16, **overrides) -> AlgorithmSpec:
    """Preset algorithms; each is the shared executor with a different
    likelihood hook."""
    presets = {
        "one_step_grpo": EstimatorConfig("one_step"),
        "coupled_grpo": EstimatorConfig("coupled_pair"),
        "elbo_grpo": EstimatorConfig("mc_elbo", mc_samples),
        "block_elbo_grpo": EstimatorConfig("block_elbo", mc_samples),
        "trajectory_grpo": EstimatorConfig("trajectory"),
    }
    if name not in presets:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {sorted(presets)}")
    est = presets[name]
    rule = "recorded" if est.kind == "trajectory" else "fresh"
    return AlgorithmSpec(name, est, trajectory_rule=rule, **overrides)


@dataclass
class RolloutGroup:
    instance: TaskInstance
    prompt: np.ndarray
    results: list[RolloutResult]
    rewards: np.ndarray
    tags: list[str]
    rows: list[Rows] = field(default_factory=list)
    old_scores: np.ndarray | None = None
    old_tokens: np.ndarray | None = None     # (G, response_len) per-position old terms
    ref_scores: np.ndarray | None = None
    advantages: np.ndarray | None = None


def compute_advantages(rewards, eps_std: float = 1e-6) -> np.ndarray:
    """(r - mean) / std with the population std; all zeros when the group's
    rewards are (numerically) constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("a group needs at least two responses")
    std = r.std()
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def rollout_group(model: Denoiser, task: Task, prompt: np.ndarray, G: int, plan: DenoisePlan,
                  vocab: Vocab, rngs: list[RngStream], workers: int = 0,
                  gen_len: int | None = None) -> list[RolloutResult]:
    """G rollouts of one prompt. ``workers=0`` decodes the group as one batch;
    ``workers>=1`` decodes each response on its own (serially for 1, on a
    thread pool otherwise)."""
    cfg = model.cfg
    n = gen_len or task.response_len

    def decode(prompts, streams):
        if cfg.attention == "bidirectional":
            return sample_mdlm_batch(model, prompts, n, plan, vocab, streams)
        return sample_bdlm_batch(model, prompts, cfg.block_len, math.ceil(n / cfg.block_len),
                                 plan, vocab, streams)

    if workers == 0:
        return decode(np.repeat(prompt[None], G, axis=0), rngs)
    one = lambda i: decode(prompt[None], [rngs[i]])[0]
    if workers == 1:
        return [one(i) for i in range(G)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(G)))


def _rows_for(algo: AlgorithmSpec, group: RolloutGroup, vocab: Vocab, keys: list[RngStream]) -> list[Rows]:
    est = algo.likelihood
    return [estimator_rows(est, group.prompt, res.response, vocab, key, res.trajectory)
            for res, key in zip(group.results, keys)]


def run_group(model: Denoiser, algo: AlgorithmSpec, task: Task, inst: TaskInstance, G: int,
              plan: DenoisePlan, vocab: Vocab, seed: int, step: int, prompt_index: int,
              ref_model: Denoiser | None = None, workers: int = 0, gen_len: int | None = None) -> RolloutGroup:
    """Stages 1-3 (and 4) for one prompt against the frozen current params."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    prompt = task.encode_prompt(inst, vocab)
    rngs = [RngStream(seed, "rollout", step, prompt_index, i) for i in range(G)]
    model.eval()
    results = rollout_group(model, task, prompt, G, plan, vocab, rngs, workers, gen_len)
    rewards = [task.verify(inst, res.response, vocab) for res in results]
    group = RolloutGroup(inst, prompt, results, np.array([r.value for r in rewards]),
                         [r.tag for r in rewards])
    keys = [RngStream(seed, "noise", step, prompt_index, i) for i in range(G)]
    group.rows = _rows_for(algo, group, vocab, keys)
    with torch.no_grad():
        old = evaluate(model, group.rows)
        group.old_scores = np.array([float(s.value) for s in old])
        group.old_tokens = np.stack([_tokens(s, len(res.raw)) for s, res in zip(old, results)])
        if ref_model is not None:
            group.ref_scores = np.array([float(s.value) for s in evaluate(ref_model, group.rows)])
    group.advantages = compute_advantages(group.rewards)
    return group


def _tokens(score, n: int):
    t = score.token_terms
    return t.detach().double().numpy() if len(t) else np.zeros(n)


def policy_loss(new_scores: torch.Tensor, old_scores, advantages, clip_eps: float = 0.2,
                kl_coef: float = 0.0, ref_scores=None, new_tokens: torch.Tensor | None = None,
                old_tokens=None):
    """Clipped-ratio surrogate, averaged over responses.

    Sequence level: ratio = exp(new - old) per response. Token level (pass
    ``new_tokens``/``old_tokens`` of shape (N, L)): one ratio per scored
    position, averaged within a response. The KL term uses the
    exp(ref - new) - (ref - new) - 1 estimator on sequence scores.

    Returns (loss, info); responses with a non-finite ratio are dropped and
    counted in ``info["dropped"]``.
    """
    dtype = new_scores.dtype
    old = torch.as_tensor(np.asarray(old_scores), dtype=dtype)
    adv = torch.as_tensor(np.asarray(advantages), dtype=dtype)
    if new_tokens is not None:
        old_tok = torch.as_tensor(np.asarray(old_tokens), dtype=dtype)
        active = (new_tokens.detach() != 0) | (old_tok != 0)
        ratio = torch.exp(new_tokens - old_tok)
        finite = torch.isfinite(ratio).all(-1)
        ratio = torch.where(active, ratio, torch.ones_like(ratio))
        surr = torch.minimum(ratio * adv[:, None], ratio.clamp(1 - clip_eps, 1 + clip_eps) * adv[:, None])
        per_resp = (surr * active).sum(-1) / active.sum(-1).clamp(min=1)
    else:
        ratio = torch.exp(new_scores - old)
        finite = torch.isfinite(ratio)
        per_resp = torch.minimum(ratio * adv, ratio.clamp(1 - clip_eps, 1 + clip_eps) * adv)
    keep = finite & torch.isfinite(per_resp)
    n_keep = int(keep.sum())
    if n_keep == 0:
        return torch.zeros((), dtype=dtype, requires_grad=new_scores.requires_grad), {"dropped": len(keep)}
    loss = -per_resp[keep].sum() / n_keep
    if kl_coef > 0 and ref_scores is not None:
        ref = torch.as_tensor(np.asarray(ref_scores), dtype=dtype)
        d = (ref - new_scores)[keep]
        loss = loss + kl_coef * (torch.exp(d) - d - 1).mean()
    return loss, {"dropped": int(len(keep) - n_keep)}


@dataclass
class RLSettings:
    group_size: int = 8
    prompts_per_step: int = 4
    steps: int = 200
    lr: float = 1e-4
    clip_grad: float = 1.0
    eps_std: float = 1e-6
    probe_reps: int = 4
    workers: int = 0
    gen_len: int = 0           # 0: the task's response length


@dataclass
class TrainState:
    step: int
    model: Denoiser
    opt: AdamState
    seed: int


def rl_step(state: TrainState, algo: AlgorithmSpec, task: Task, pool: list[TaskInstance], plan: DenoisePlan,
            vocab: Vocab, settings: RLSettings, ref_model: Denoiser | None = None) -> dict:
    """One pass of the five-stage workflow plus the optimizer update.
    Returns the step's metrics record (without wallclock)."""
    model, step, seed = state.model, state.step, state.seed
    picks = RngStream(seed, "prompts", step).permutation(len(pool))[:settings.prompts_per_step]
    groups = [run_group(model, algo, task, pool[j], settings.group_size, plan, vocab, seed, step, int(j),
                        ref_model, settings.workers, settings.gen_len or None) for j in picks]

    rewards = np.concatenate([g.rewards for g in groups])
    probe = _probe(model, algo, groups[0], vocab, seed, step, settings.probe_reps)

    # stage 5: new scores under the same noise as the old ones
    model.train()
    if algo.shared_noise:
        rows = [r for g in groups for r in g.rows]
    else:
        rows = []
        for j, g in zip(picks, groups):
            keys = [RngStream(seed, "noise-new", step, int(j), i) for i in range(len(g.results))]
            rows.extend(_rows_for(algo, g, vocab, keys))
    scores = evaluate(model, rows)
    new = torch.stack([s.value for s in scores])
    old = np.concatenate([g.old_scores for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    ref = np.concatenate([g.ref_scores for g in groups]) if ref_model is not None else None
    kw = {}
    if algo.ratio_level == "token":
        n = settings.gen_len or task.response_len
        kw["new_tokens"] = torch.stack([s.token_terms if len(s.token_terms) else
                                        torch.zeros(n, dtype=new.dtype) for s in scores])
        kw["old_tokens"] = np.concatenate([g.old_tokens for g in groups])
    loss, info = policy_loss(new, old, adv, algo.clip_eps, algo.kl_coef, ref, **kw)

    record = {"step": step, "reward_mean": float(rewards.mean()), "reward_std": float(rewards.std()),
              "correct_frac": float(np.mean([t == "correct" for g in groups for t in g.tags])),
              "est_var": probe, "dropped": info["dropped"]}
    if not torch.isfinite(loss):
        record.update(loss=None, grad_norm=None, update_norm=None, skipped=True)
        return record
    params = dict(model.named_parameters())
    if loss.requires_grad:
        gl = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    else:
        gl = [None] * len(params)
    grads = {n: torch.zeros_like(p) if g is None else g.detach() for (n, p), g in zip(params.items(), gl)}
    grads, gnorm = clip_grads(grads, settings.clip_grad)
    try:
        upd = apply_update(model, grads, state.opt, settings.lr)
    except NonFiniteGradient:
        record.update(loss=float(loss.detach()), grad_norm=None, update_norm=None, skipped=True)
        return record
    record.update(loss=float(loss.detach()), grad_norm=gnorm, update_norm=upd, skipped=False)
    return record


def _probe(model, algo: AlgorithmSpec, group: RolloutGroup, vocab, seed, step, reps) -> float | None:
    """Estimator variance on the step's first response."""
    if reps < 2:
        return None
    res = group.results[0]
    rec = variance_probe(model, algo.likelihood, group.prompt, res.response, vocab,
                         RngStream(seed, "probe", step), reps, trajectory=res.trajectory)
    return rec.var


def save_train_state(path, state: TrainState, run_digest: str) -> None:
    """Params, Adam moments and the step counter in one checkpoint."""
    from dataclasses import asdict
    from .checkpoint import model_tensors, save_checkpoint
    tensors = model_tensors(state.model)
    tensors.update(state.opt.tensors())
    meta = {"kind": "train_state", "step": state.step, "opt_step": state.opt.step, "seed": state.seed,
            "run_digest": run_digest, "model_config": asdict(state.model.cfg)}
    save_checkpoint(path, tensors, state.model.cfg.digest(), meta)


def load_train_state(path, model: Denoiser, run_digest: str | None = None) -> TrainState:
    """Restore into ``model`` (in place). ``run_digest`` guards against
    resuming under a different config."""
    from .checkpoint import CheckpointError, load_checkpoint, load_model_tensors
    tensors, digest, meta = load_checkpoint(path)
    if digest != model.cfg.digest():
        raise CheckpointError("checkpoint was written for a different model config")
    if run_digest is not None and meta.get("run_digest") != run_digest:
        raise CheckpointError("checkpoint belongs to a run with a different config")
    load_model_tensors(model, tensors)
    opt = AdamState()
    opt.load_tensors(tensors, meta["opt_step"])
    return TrainState(meta["step"], model, opt, meta["seed"])


def train_rl(state: TrainState, algo: AlgorithmSpec, task: Task, pool: list[TaskInstance], plan: DenoisePlan,
             vocab: Vocab, settings: RLSettings, *, ref_model: Denoiser | None = None, on_record=None,
             on_checkpoint=None, checkpoint_every: int = 0, stop_after: int | None = None) -> TrainState:
    """Run steps ``state.step .. settings.steps - 1``.

    ``on_record(record)`` receives every step's metrics; ``on_checkpoint(state)``
    runs every ``checkpoint_every`` completed steps. ``stop_after`` ends the
    loop early after that many steps (used to simulate an interrupted run).
    Three consecutive skipped updates abort training.
    """
    if algo.kl_coef > 0 and ref_model is None:
        raise ConfigError("a KL penalty needs a reference model")
    consecutive = 0
    done = 0
    while state.step < settings.steps:
        if stop_after is not None and done >= stop_after:
            break
        record = rl_step(state, algo, task, pool, plan, vocab, settings, ref_model)
        state.step += 1
        done += 1
        if on_record is not None:
            on_record(record)
        consecutive = consecutive + 1 if record["skipped"] else 0
        if consecutive >= 3:
            raise TrainingAborted(f"three consecutive skipped updates ending at step {record['step']}")
        if on_checkpoint is not None and checkpoint_every and state.step % checkpoint_every == 0:
            on_checkpoint(state)
    return state
