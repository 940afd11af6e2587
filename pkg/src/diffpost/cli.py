"""Command-line entry points: sft, rl, dpo, eval, estimate, gradcheck.

Every command takes ``--config FILE`` and any number of ``--set a.b=value``
overrides. Exit status: 0 success, 1 training aborted or a check failed,
2 invalid configuration, 3 refused checkpoint or output directory.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .alignment import (PreferencePair, SftExample, TrainingAborted as SftAborted, dpo_vrpo_loss,
                        sft_loss, train_dpo, train_sft)
from .checkpoint import CheckpointError, load_model, save_model
from .config import RunConfig, load_config
from .evaluation import evaluate_task
from .likelihood import EstimatorConfig, exact_elbo_oracle, variance_probe, MAX_ORACLE_LEN
from .metrics import (MetricsLog, RunDirError, RunLock, TimingLog, build_report, read_records,
                      write_curves, write_json)
from .model import ConfigError, ModelConfig, block_nelbo_term, build_model, grad_check, loss_and_grads, nelbo_term
from .optim import AdamState
from .rl import (AlgorithmSpec, RLSettings, TrainState, TrainingAborted, load_train_state, policy_loss,
                 save_train_state, train_rl)
from .rollout import DenoisePlan
from .seq import DomainError, RngStream, Vocab, default_vocab, scored_length
from .tasks import GenerationError, Task, make_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_REFUSED = 0, 1, 2, 3


class Setup:
    """Everything derived from a config before any artifact is written."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.digest = cfg.digest()
        self.vocab = default_vocab()
        if cfg.model.vocab_size != self.vocab.size:
            raise ConfigError(f"model.vocab_size must be {self.vocab.size} for the built-in vocabulary")
        try:
            self.task = Task(cfg.task.kind, dict(cfg.task.params))
        except GenerationError as e:
            raise ConfigError(str(e)) from e
        self.gen_len = cfg.plan.gen_len or self.task.response_len
        if self.gen_len < self.task.response_len:
            raise ConfigError(f"plan.gen_len must be 0 or >= {self.task.response_len}")
        m = cfg.model
        if m.attention == "block_causal" and m.block_len != cfg.plan.block_len:
            raise ConfigError("model.block_len and plan.block_len differ")
        region = self.gen_len if m.attention == "bidirectional" else m.block_len
        total = self.task.prompt_width + 1 + (self.gen_len if m.attention == "bidirectional"
                                              else math.ceil(self.gen_len / m.block_len) * m.block_len)
        if total > m.max_len:
            raise ConfigError(f"prompt plus response ({total}) exceeds model.max_len ({m.max_len})")
        steps = cfg.plan.steps or region
        if steps > region:
            raise ConfigError(f"plan.steps={steps} exceeds the {region} positions decoded per region")
        self.rollout_plan = DenoisePlan(steps, selection=cfg.plan.selection, temperature=cfg.plan.temperature)
        self.eval_plan = DenoisePlan(steps, selection=cfg.plan.selection, temperature=cfg.plan.eval_temperature)
        e = cfg.estimator
        self.est = EstimatorConfig(e.kind, e.mc_samples, e.fixed_t, e.weighted, cfg.plan.block_len)
        r = cfg.rl
        self.algo = AlgorithmSpec(f"{e.kind}_grpo", self.est,
                                  trajectory_rule="recorded" if e.kind == "trajectory" else "fresh",
                                  clip_eps=r.clip_eps, kl_coef=r.kl_coef, ratio_level=r.ratio_level,
                                  shared_noise=r.shared_noise)
        if min(r.group_size, r.prompts_per_step) < 1 or r.group_size < 2:
            raise ConfigError("rl.group_size must be >= 2 and rl.prompts_per_step >= 1")
        if cfg.init_checkpoint and not Path(cfg.init_checkpoint).exists():
            raise ConfigError(f"init_checkpoint {cfg.init_checkpoint} does not exist")

    def response(self, inst) -> np.ndarray:
        ref = self.task.reference_response(inst, self.vocab)
        return np.concatenate([ref, np.full(self.gen_len - len(ref), self.vocab.pad_id, dtype=np.int64)])

    def examples(self, insts) -> list[SftExample]:
        return [SftExample(self.task.encode_prompt(i, self.vocab), self.response(i)) for i in insts]

    def initial_model(self):
        if self.cfg.init_checkpoint:
            model, _ = load_model(self.cfg.init_checkpoint, self.cfg.model)
            return model
        return build_model(self.cfg.model)

    def heldout(self):
        return make_dataset(self.task, self.cfg.task.n_heldout, self.cfg.seed, "heldout")

    def evaluate(self, model) -> dict:
        return evaluate_task(model, self.task, self.heldout(), self.vocab, self.eval_plan, seed=self.cfg.seed,
                             gen_len=self.gen_len)


def _load(args) -> RunConfig:
    return load_config(args.config, args.set)


def _open_run(setup: Setup, command: str, resume: bool = False) -> Path:
    out = setup.cfg.resolved_output_dir(command)
    out.mkdir(parents=True, exist_ok=True)
    stamp = out / "config.yaml"
    if stamp.exists():
        old = stamp.read_text().split("\n", 1)[0]
        if resume and old != f"# digest {setup.digest}":
            raise RunDirError(f"{out} holds a run with a different config")
    stamp.write_text(f"# digest {setup.digest}\n" + setup.cfg.dumps())
    return out


def _finish(out: Path, command: str, curves: list[str], extra: dict) -> dict:
    records = read_records(out / "metrics.jsonl")
    report = build_report(records, command, extra)
    write_json(out / "report.json", report)
    write_curves(records, out / "curves.csv", curves)
    return report


# ---------------------------------------------------------------------------
# training commands


def cmd_sft(args) -> int:
    setup = Setup(_load(args))
    cfg = setup.cfg
    model = setup.initial_model()
    train = setup.examples(make_dataset(setup.task, cfg.task.n_train, cfg.seed, "train"))
    out = _open_run(setup, "sft")
    with RunLock(out):
        log = MetricsLog(out / "metrics.jsonl", setup.digest)
        timing = TimingLog(out / "timing.jsonl")
        t0 = time.perf_counter()
        heldout_ex = setup.examples(setup.heldout())

        def on_epoch(epoch, report):
            acc = setup.evaluate(model)
            log.write({"step": epoch, "train_loss": report.epoch_train_loss[-1],
                       "heldout_loss": report.epoch_heldout_loss[-1], "heldout_accuracy": acc["accuracy"],
                       "heldout_reward": acc["mean_reward"], "skipped": report.skipped})
            timing.write(epoch, time.perf_counter() - t0)
            save_model(out / "model.ckpt", model, {"run_digest": setup.digest, "epoch": epoch})

        try:
            train_sft(model, train, setup.vocab, epochs=cfg.sft.epochs, batch_size=cfg.sft.batch_size,
                      lr=cfg.sft.lr, seed=cfg.seed, heldout=heldout_ex, clip=cfg.sft.clip_grad, on_epoch=on_epoch)
        finally:
            log.close()
            timing.close()
        report = _finish(out, "sft", ["train_loss", "heldout_loss", "heldout_accuracy"],
                         {"final_eval": setup.evaluate(model)})
    print(json.dumps(report["final_eval"], sort_keys=True))
    return EXIT_OK


def cmd_rl(args) -> int:
    setup = Setup(_load(args))
    cfg = setup.cfg
    model = setup.initial_model()
    ref_model = None
    if cfg.rl.kl_coef > 0:
        ref_model = copy.deepcopy(model).requires_grad_(False)
    pool = make_dataset(setup.task, cfg.task.pool, cfg.seed, "rl")
    r = cfg.rl
    settings = RLSettings(r.group_size, r.prompts_per_step, r.steps, r.lr, r.clip_grad, r.eps_std,
                          r.probe_reps, r.workers, setup.gen_len)
    out = _open_run(setup, "rl", resume=args.resume)
    state_path = out / "state.ckpt"
    with RunLock(out):
        if args.resume and state_path.exists():
            state = load_train_state(state_path, model, setup.digest)
            if ref_model is not None:
                ref_model = setup.initial_model().requires_grad_(False)
        else:
            state = TrainState(0, model, AdamState(), cfg.seed)
        resume = args.resume and state.step > 0
        log = MetricsLog(out / "metrics.jsonl", setup.digest, resume_from=state.step if resume else None)
        timing = TimingLog(out / "timing.jsonl", resume=resume)
        t0 = time.perf_counter()

        def on_record(rec):
            log.write(rec)
            timing.write(rec["step"], time.perf_counter() - t0)

        try:
            train_rl(state, setup.algo, setup.task, pool, setup.rollout_plan, setup.vocab, settings,
                     ref_model=ref_model, on_record=on_record,
                     on_checkpoint=lambda s: save_train_state(state_path, s, setup.digest),
                     checkpoint_every=cfg.schedule.checkpoint_every, stop_after=args.stop_after)
        finally:
            log.close()
            timing.close()
        if state.step < settings.steps:
            print(f"stopped after step {state.step}", file=sys.stderr)
            return EXIT_OK
        save_train_state(state_path, state, setup.digest)
        save_model(out / "model.ckpt", model, {"run_digest": setup.digest})
        report = _finish(out, "rl", ["reward_mean", "reward_std", "loss", "est_var", "grad_norm"],
                         {"final_eval": setup.evaluate(model)})
    print(json.dumps(report["final_eval"], sort_keys=True))
    return EXIT_OK


def _reject(text: str) -> str:
    """A wrong answer of the same shape: reversed, or with its first
    character changed when reversal is a no-op."""
    bad = text[::-1]
    if bad == text:
        bad = ("b" if text[0] == "a" else "a") + text[1:]
    return bad


def preference_pairs(setup: Setup, n: int, split: str) -> list[PreferencePair]:
    out = []
    for inst in make_dataset(setup.task, n, setup.cfg.seed, split):
        prompt = setup.task.encode_prompt(inst, setup.vocab)
        chosen = setup.response(inst)
        rejected = setup.task.encode_response(_reject(inst.solution), setup.vocab)
        rejected = np.concatenate([rejected, np.full(len(chosen) - len(rejected), setup.vocab.pad_id)])
        out.append(PreferencePair(prompt, chosen, rejected.astype(np.int64)))
    return out


def load_pairs(path, vocab: Vocab) -> list[PreferencePair]:
    """Line-delimited {"prompt", "chosen", "rejected"} text records."""
    pairs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            enc = lambda s: np.concatenate([vocab.encode(s), [vocab.eos_id]]).astype(np.int64)
            prompt = np.concatenate([[vocab.bos_id], vocab.encode(rec["prompt"])]).astype(np.int64)
            pairs.append(PreferencePair(prompt, enc(rec["chosen"]), enc(rec["rejected"])))
    return pairs


def heldout_margin(model, ref_model, pairs, setup: Setup) -> float:
    with torch.no_grad():
        _, margins = dpo_vrpo_loss(model, ref_model, pairs, setup.vocab, RngStream(setup.cfg.seed, "dpo-heldout"),
                                   setup.cfg.dpo.beta, setup.est)
    return float(margins.mean())


def cmd_dpo(args) -> int:
    setup = Setup(_load(args))
    cfg = setup.cfg
    if setup.est.kind == "trajectory":
        raise ConfigError("preference optimization needs a Monte Carlo estimator")
    model = setup.initial_model()
    ref_model = copy.deepcopy(model).requires_grad_(False)
    if cfg.dpo.pairs_file:
        pairs = load_pairs(cfg.dpo.pairs_file, setup.vocab)
        n_held = min(cfg.dpo.n_heldout, len(pairs) // 5)
        pairs, held = pairs[n_held:], pairs[:n_held]
    else:
        pairs = preference_pairs(setup, cfg.dpo.n_pairs, "dpo")
        held = preference_pairs(setup, cfg.dpo.n_heldout, "dpo-heldout")
    out = _open_run(setup, "dpo")
    with RunLock(out):
        log = MetricsLog(out / "metrics.jsonl", setup.digest)
        timing = TimingLog(out / "timing.jsonl")
        t0 = time.perf_counter()
        every = cfg.schedule.eval_every

        def on_step(rec):
            if held and every and (rec["step"] + 1) % every == 0:
                rec["heldout_margin"] = heldout_margin(model, ref_model, held, setup)
            log.write(rec)
            timing.write(rec["step"], time.perf_counter() - t0)

        try:
            train_dpo(model, ref_model, pairs, setup.vocab, steps=cfg.dpo.steps, batch_size=cfg.dpo.batch_size,
                      lr=cfg.dpo.lr, seed=cfg.seed, beta=cfg.dpo.beta, est=setup.est, on_step=on_step)
        finally:
            log.close()
            timing.close()
        save_model(out / "model.ckpt", model, {"run_digest": setup.digest})
        extra = {"heldout_margin": heldout_margin(model, ref_model, held, setup) if held else None}
        report = _finish(out, "dpo", ["loss", "margin_mean", "heldout_margin"], extra)
    print(json.dumps({"heldout_margin": report["heldout_margin"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# read-only commands


def _emit(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if path:
        Path(path).write_text(text)
    sys.stdout.write(text)


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_eval(args) -> int:
    setup = Setup(_load(args))
    path = args.checkpoint or setup.cfg.init_checkpoint
    if not path:
        raise ConfigError("eval needs --checkpoint")
    model, _ = load_model(path, setup.cfg.model)
    result = setup.evaluate(model)
    _emit({"schema": 1, "command": "eval", "config_digest": setup.digest, "checkpoint_sha256": _file_sha(path),
           "task": setup.task.kind, "n": result["n"], "accuracy": result["accuracy"],
           "mean_reward": result["mean_reward"], "tags": result["tags"]}, args.report)
    return EXIT_OK


def _read_inputs(path, vocab: Vocab):
    items = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            prompt = np.concatenate([[vocab.bos_id], vocab.encode(rec["prompt"])]).astype(np.int64)
            response = np.concatenate([vocab.encode(rec["response"]), [vocab.eos_id]]).astype(np.int64)
            items.append((rec["prompt"], rec["response"], prompt, response))
    return items


def estimate_table(model, items, vocab: Vocab, est_base: EstimatorConfig, reps: int, seed: int,
                   oracle: bool) -> tuple[list[dict], list[str]]:
    kinds = [EstimatorConfig("one_step", fixed_t=1.0), EstimatorConfig("mc_elbo", 1),
             EstimatorConfig("mc_elbo", est_base.mc_samples), EstimatorConfig("coupled_pair")]
    if model.cfg.attention == "block_causal":
        kinds.append(EstimatorConfig("block_elbo", est_base.mc_samples, block_len=model.cfg.block_len))
    rows, warnings = [], []
    for n, (ptxt, rtxt, prompt, response) in enumerate(items):
        ref = None
        if oracle:
            if scored_length(response, vocab) > MAX_ORACLE_LEN:
                warnings.append(f"input {n}: response longer than {MAX_ORACLE_LEN} tokens, oracle omitted")
            else:
                ref = exact_elbo_oracle(model, prompt, response, vocab)
        for est in kinds:
            rec = variance_probe(model, est, prompt, response, vocab, RngStream(seed, "estimate", n, est.kind,
                                                                                est.n_samples), reps)
            rows.append({"input": n, "prompt": ptxt, "response": rtxt, "estimator": est.kind, "k": est.n_samples,
                         "mean": rec.mean, "var": rec.var, "se": rec.se, "oracle": ref,
                         "bias": None if ref is None else rec.mean - ref})
    return rows, warnings


def cmd_estimate(args) -> int:
    setup = Setup(_load(args))
    path = args.checkpoint or setup.cfg.init_checkpoint
    if path:
        model, _ = load_model(path, setup.cfg.model)
    else:
        model = build_model(setup.cfg.model)
    items = _read_inputs(args.input, setup.vocab)
    if args.reps < 2:
        raise ConfigError("--reps must be >= 2")
    rows, warnings = estimate_table(model, items, setup.vocab, setup.est, args.reps, setup.cfg.seed, args.oracle)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(json.dumps({"schema": 1, "config_digest": setup.digest, "rows": rows},
                                                sort_keys=True, indent=2) + "\n")
    fmt = lambda v: "-" if v is None else f"{v:.6g}"
    print(f"{'input':>5} {'estimator':<13} {'k':>3} {'mean':>12} {'var':>12} {'bias':>12}")
    for r in rows:
        print(f"{r['input']:>5} {r['estimator']:<13} {r['k']:>3} {fmt(r['mean']):>12} {fmt(r['var']):>12} "
              f"{fmt(r['bias']):>12}")
    return EXIT_OK


def gradcheck_losses(cfg: ModelConfig, vocab: Vocab, seed: int, block_len: int):
    """(name, model, loss_fn) for every loss the trainers differentiate."""
    import dataclasses
    rng = RngStream(seed, "gradcheck")
    P, R = 3, 2 * block_len
    low = max(vocab.reserved) + 1
    prompt = np.concatenate([[vocab.bos_id], rng.integers(low, cfg.vocab_size, P - 1)])
    resp = rng.integers(low, cfg.vocab_size, R)
    resp[-1] = vocab.eos_id
    other = resp.copy()
    other[0] = low + (resp[0] - low + 1) % (cfg.vocab_size - low)
    x0 = np.concatenate([prompt, resp])
    xt = x0.copy()
    xt[P::2] = vocab.mask_id
    bidir = build_model(dataclasses.replace(cfg, attention="bidirectional"))
    blockc = build_model(dataclasses.replace(cfg, attention="block_causal", block_len=block_len))
    blockc.load_state_dict(bidir.state_dict())
    ref = copy.deepcopy(bidir).requires_grad_(False)
    with torch.no_grad():
        for p in ref.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=torch.Generator().manual_seed(seed), dtype=p.dtype))
    xb = np.concatenate([x0[:block_len], x0[block_len:2 * block_len]])
    xb[block_len::2] = vocab.mask_id
    ex = [SftExample(prompt, resp), SftExample(prompt, other)]
    pair = [PreferencePair(prompt, resp, other)]
    est = EstimatorConfig("mc_elbo", 2)

    from .likelihood import draw_rows, evaluate
    rows = [draw_rows(est, prompt, r, vocab, RngStream(seed, "pg", i)) for i, r in enumerate((resp, other))]
    with torch.no_grad():
        old = np.array([float(s.value) for s in evaluate(bidir, rows)]) - 0.05
        ref_scores = np.array([float(s.value) for s in evaluate(ref, rows)])

    def policy(m):
        new = torch.stack([s.value for s in evaluate(m, rows)])
        return policy_loss(new, old, np.array([1.0, -1.0]), 0.2, 0.1, ref_scores)[0]

    return [
        ("nelbo", bidir, lambda m: nelbo_term(m, x0, xt, 0.4, vocab.mask_id, P)),
        ("block_nelbo", blockc, lambda m: block_nelbo_term(m, x0, 2, block_len, xb, 0.4, vocab.mask_id)),
        ("sft", bidir, lambda m: sft_loss(m, ex, vocab, RngStream(seed, "sft"))),
        ("preference", bidir, lambda m: dpo_vrpo_loss(m, ref, pair, vocab, RngStream(seed, "dpo"), 0.5, est)[0]),
        ("policy", bidir, policy),
    ]


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    if cfg.model.dtype != "float64":
        raise ConfigError("gradcheck refuses single precision; set model.dtype=float64")
    vocab = default_vocab()
    block_len = min(cfg.plan.block_len, 4)
    ok = True
    out = {"schema": 1, "config_digest": cfg.digest(), "tolerance": args.tolerance, "losses": {}}
    for name, model, fn in gradcheck_losses(cfg.model, vocab, cfg.seed, block_len):
        grads = None
        if args.corrupt_grad:
            _, grads = loss_and_grads(model, fn)
            grads = {k: g + 1e-2 for k, g in grads.items()}
        rep = grad_check(model, fn, tolerance=args.tolerance, seed=cfg.seed, grads=grads)
        ok &= rep.passed
        out["losses"][name] = {"passed": rep.passed, "max_rel_error": rep.max_rel_error}
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:<12s} max_rel_err={rep.max_rel_error:.3e}")
        if args.verbose:
            for line in rep.lines():
                print("    " + line)
    out["passed"] = bool(ok)
    if args.report:
        write_json(args.report, out)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffpost", description="post-training executor for diffusion LMs")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set rl.group_size=4")
        p.set_defaults(fn=fn)
        return p

    add("sft", cmd_sft, "supervised fine-tuning")
    p = add("rl", cmd_rl, "GRPO-style reinforcement learning")
    p.add_argument("--resume", action="store_true", help="continue from the run's last checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    add("dpo", cmd_dpo, "ELBO-based preference optimization")
    p = add("eval", cmd_eval, "held-out task accuracy")
    p.add_argument("--checkpoint")
    p.add_argument("--report", help="also write the report to this file")
    p = add("estimate", cmd_estimate, "compare likelihood estimators")
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True, help='JSONL records {"prompt": ..., "response": ...}')
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--oracle", action="store_true", help="add the exact ELBO column")
    p.add_argument("--report")
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check of every loss")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--report")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DomainError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, RunDirError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except (TrainingAborted, SftAborted) as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
