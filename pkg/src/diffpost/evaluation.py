"""Held-out task accuracy under a fixed decoding plan."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .model import Denoiser
from .rollout import DenoisePlan, sample_bdlm_batch, sample_mdlm_batch
from .seq import RngStream, Vocab
from .tasks import Task, TaskInstance


def generate_batch(model: Denoiser, task: Task, prompts: np.ndarray, plan: DenoisePlan, vocab: Vocab,
                   rngs: list[RngStream], gen_len: int | None = None):
    """Roll out one response per prompt row with the sampler matching the
    model's attention mode."""
    gen_len = gen_len or task.response_len
    cfg = model.cfg
    if cfg.attention == "bidirectional":
        return sample_mdlm_batch(model, prompts, gen_len, plan, vocab, rngs)
    return sample_bdlm_batch(model, prompts, cfg.block_len, math.ceil(gen_len / cfg.block_len), plan,
                             vocab, rngs)


def evaluate_task(model: Denoiser, task: Task, instances: list[TaskInstance], vocab: Vocab,
                  plan: DenoisePlan, seed: int = 0, batch_size: int = 128, gen_len: int | None = None) -> dict:
    """Mean reward, exact-match accuracy and reward tag counts."""
    model.eval()
    rewards, tags = [], Counter()
    for s in range(0, len(instances), batch_size):
        chunk = instances[s:s + batch_size]
        prompts = np.stack([task.encode_prompt(inst, vocab) for inst in chunk])
        rngs = [RngStream(seed, "eval", s + i) for i in range(len(chunk))]
        for inst, res in zip(chunk, generate_batch(model, task, prompts, plan, vocab, rngs, gen_len)):
            r = task.verify(inst, res.response, vocab)
            rewards.append(r.value)
            tags[r.tag] += 1
    n = max(len(rewards), 1)
    return {"n": len(rewards), "mean_reward": float(np.sum(rewards)) / n,
            "accuracy": tags["correct"] / n, "tags": dict(sorted(tags.items()))}
