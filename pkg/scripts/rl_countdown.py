"""SFT on countdown_lite, then GRPO with a chosen likelihood surrogate.

Prints a moving mean of the group reward every ``--log-every`` steps and the
greedy pool accuracy at the end. The SFT checkpoint is cached so several RL
variants can start from the same model:

    python scripts/rl_countdown.py --algo one_step_grpo --steps 250
    python scripts/rl_countdown.py --algo trajectory_grpo --steps 250
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch

from diffpost.alignment import SftExample, train_sft
from diffpost.checkpoint import load_model, save_model
from diffpost.evaluation import evaluate_task
from diffpost.model import ModelConfig, build_model
from diffpost.optim import AdamState
from diffpost.rl import RLSettings, TrainState, algorithm, rl_step
from diffpost.rollout import DenoisePlan
from diffpost.seq import default_vocab
from diffpost.tasks import Task, make_dataset


def sft_model(args, task, vocab, log=print):
    cfg = ModelConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=4, max_len=32, init_seed=args.seed)
    cache = Path(args.cache_dir) / f"cd_sft_{args.n_sft}_{args.sft_epochs}_{args.d_model}_{args.n_layers}_{args.seed}.ckpt"
    if cache.exists():
        return load_model(cache, cfg)[0]
    model = build_model(cfg)
    corpus = [SftExample(task.encode_prompt(i, vocab), task.reference_response(i, vocab))
              for i in make_dataset(task, args.n_sft, args.seed, "sft")]
    heldout = make_dataset(task, 200, args.seed, "heldout")
    greedy = DenoisePlan(task.response_len, temperature=0.0)
    t0 = time.time()

    def on_epoch(epoch, report):
        acc = evaluate_task(model, task, heldout, vocab, greedy)["accuracy"]
        log(f"sft epoch {epoch} loss {report.epoch_train_loss[-1]:.3f} heldout_acc {acc:.3f} "
            f"{time.time() - t0:.0f}s")

    train_sft(model, corpus, vocab, epochs=args.sft_epochs, batch_size=32, lr=args.sft_lr, seed=args.seed,
              on_epoch=on_epoch)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_model(cache, model)
    return model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--algo", default="one_step_grpo")
    ap.add_argument("--n-sft", type=int, default=20000)
    ap.add_argument("--sft-epochs", type=int, default=8)
    ap.add_argument("--sft-lr", type=float, default=1e-3)
    ap.add_argument("--d-model", type=int, default=128)
    ap.add_argument("--n-layers", type=int, default=4)
    ap.add_argument("--pool", type=int, default=16)
    ap.add_argument("--group-size", type=int, default=8)
    ap.add_argument("--prompts-per-step", type=int, default=8)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--steps", type=int, default=250)
    ap.add_argument("--temperature", type=float, default=1.0)
    ap.add_argument("--mc-samples", type=int, default=4)
    ap.add_argument("--log-every", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache-dir", default="runs/cache")
    args = ap.parse_args()
    torch.set_num_threads(1)

    vocab = default_vocab()
    task = Task("countdown_lite")
    model = sft_model(args, task, vocab, log=lambda s: print(s, flush=True))
    pool = make_dataset(task, args.pool, args.seed, "rl")
    greedy = DenoisePlan(task.response_len, temperature=0.0)
    print("pool greedy before", evaluate_task(model, task, pool, vocab, greedy)["accuracy"], flush=True)

    plan = DenoisePlan(task.response_len, temperature=args.temperature)
    state = TrainState(0, model, AdamState(), args.seed)
    settings = RLSettings(group_size=args.group_size, prompts_per_step=args.prompts_per_step, lr=args.lr,
                          probe_reps=0)
    algo = algorithm(args.algo, mc_samples=args.mc_samples)
    hist, t0 = [], time.time()
    for step in range(args.steps):
        state.step = step
        rec = rl_step(state, algo, task, pool, plan, vocab, settings)
        hist.append(rec["reward_mean"])
        if step % args.log_every == 0 or step == args.steps - 1:
            print(f"step {step} reward_ma {np.mean(hist[-args.log_every:]):.3f} grad_norm {rec['grad_norm']:.3g} "
                  f"{time.time() - t0:.0f}s", flush=True)
    print("pool greedy after", evaluate_task(model, task, pool, vocab, greedy)["accuracy"], flush=True)


if __name__ == "__main__":
    main()
