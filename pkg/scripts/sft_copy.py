"""Supervised fine-tuning on the copy task; prints held-out exact match per epoch.

    python scripts/sft_copy.py --n-train 4000 --epochs 10 --d-model 64
"""

import argparse
import time

import torch

from diffpost.alignment import SftExample, train_sft
from diffpost.evaluation import evaluate_task
from diffpost.model import ModelConfig, build_model
from diffpost.rollout import DenoisePlan
from diffpost.seq import default_vocab
from diffpost.tasks import Task, make_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=4000)
    ap.add_argument("--n-heldout", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--n-layers", type=int, default=2)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    vocab = default_vocab()
    task = Task("copy")
    ex = lambda insts: [SftExample(task.encode_prompt(i, vocab), task.reference_response(i, vocab)) for i in insts]
    train = ex(make_dataset(task, args.n_train, args.seed, "train"))
    heldout = make_dataset(task, args.n_heldout, args.seed, "heldout")
    model = build_model(ModelConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=4, max_len=32,
                                    init_seed=args.seed))
    plan = DenoisePlan(task.response_len, temperature=0.0)
    t0 = time.time()

    def on_epoch(epoch, report):
        acc = evaluate_task(model, task, heldout, vocab, plan, seed=args.seed)["accuracy"]
        print(f"epoch {epoch} train_loss {report.epoch_train_loss[-1]:.4f} heldout_acc {acc:.3f} "
              f"elapsed {time.time() - t0:.1f}s", flush=True)

    train_sft(model, train, vocab, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
              on_epoch=on_epoch)


if __name__ == "__main__":
    main()
