import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import diffpost.rl as rl
from conftest import random_head, tiny_cfg
from diffpost.likelihood import EstimatorConfig, evaluate
from diffpost.model import ConfigError, build_model
from diffpost.optim import AdamState
from diffpost.rl import (AlgorithmSpec, RLSettings, TrainState, TrainingAborted, algorithm, compute_advantages,
                         load_train_state, policy_loss, rl_step, rollout_group, run_group, save_train_state,
                         train_rl)
from diffpost.rollout import DenoisePlan
from diffpost.seq import RngStream, default_vocab
from diffpost.tasks import Task, make_dataset

V = default_vocab()
SUDOKU = Task("sudoku4", {"holes": 4, "fractional": True})   # partial credit: rewards vary from the start


@given(st.lists(st.floats(0, 1), min_size=2, max_size=16))
def test_advantages_are_centered(rewards):
    a = compute_advantages(rewards)
    if np.std(rewards) >= 1e-6:
        assert abs(a.sum()) < 1e-9
        assert np.std(a) == pytest.approx(1.0)
    else:
        assert np.all(a == 0)


def test_single_winner_advantages():
    a = compute_advantages([1, 0, 0, 0, 0, 0, 0, 0])
    assert abs(a[0] - math.sqrt(7)) < 1e-12
    assert np.all(np.abs(a[1:] + 1 / math.sqrt(7)) < 1e-12)


def test_group_needs_two_members():
    with pytest.raises(ValueError):
        compute_advantages([1.0])


def _reference_loss(new, old, adv, eps):
    r = np.exp(new - old)
    return -np.mean(np.minimum(r * adv, np.clip(r, 1 - eps, 1 + eps) * adv))


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2)), min_size=1, max_size=8))
def test_sequence_loss_matches_reference(items):
    new, old, adv = (np.array(c) for c in zip(*items))
    loss, info = policy_loss(torch.tensor(new), old, adv, 0.2)
    assert info["dropped"] == 0
    assert float(loss) == pytest.approx(_reference_loss(new, old, adv, 0.2), abs=1e-12)


def test_clipped_ratio_has_no_gradient():
    new = torch.tensor([1.0, -1.0], dtype=torch.float64, requires_grad=True)
    loss, _ = policy_loss(new, np.zeros(2), np.array([1.0, -1.0]), 0.2)
    loss.backward()
    assert torch.all(new.grad == 0)


def test_token_level_loss():
    new_tok = torch.tensor([[0.1, 0.0, -0.2], [0.0, 0.3, 0.0]], dtype=torch.float64)
    old_tok = np.array([[0.0, 0.0, 0.0], [0.0, 0.1, 0.0]])
    adv = np.array([1.0, -1.0])
    # position-wise ratios, averaged over the positions each response scores
    loss, _ = policy_loss(new_tok.sum(1), old_tok.sum(1), adv, 0.2, new_tokens=new_tok, old_tokens=old_tok)
    r0 = np.exp([0.1, -0.2])
    r1 = np.exp([0.2])
    want = -0.5 * (np.mean(np.minimum(r0, np.clip(r0, 0.8, 1.2))) +
                   np.mean(np.minimum(-r1, -np.clip(r1, 0.8, 1.2))))
    assert float(loss) == pytest.approx(want, abs=1e-12)


def test_non_finite_ratios_are_dropped():
    new = torch.tensor([0.0, 1000.0], dtype=torch.float64)
    loss, info = policy_loss(new, np.array([0.0, -1000.0]), np.array([1.0, 1.0]), 0.2)
    assert info["dropped"] == 1
    assert float(loss) == -1.0


def test_kl_term_vanishes_at_the_reference():
    new = torch.tensor([-3.0, -4.0], dtype=torch.float64)
    a, _ = policy_loss(new, new.numpy(), np.array([1.0, -1.0]), 0.2)
    b, _ = policy_loss(new, new.numpy(), np.array([1.0, -1.0]), 0.2, kl_coef=0.5, ref_scores=new.numpy())
    c, _ = policy_loss(new, new.numpy(), np.array([1.0, -1.0]), 0.2, kl_coef=0.5, ref_scores=new.numpy() - 1)
    assert float(a) == float(b)
    assert float(c) == pytest.approx(float(a) + 0.5 * (math.exp(-1) + 1 - 1))


def test_algorithm_spec_validation():
    with pytest.raises(ConfigError):
        algorithm("ppo")
    with pytest.raises(ConfigError):
        AlgorithmSpec("x", EstimatorConfig("trajectory"), trajectory_rule="fresh")
    with pytest.raises(ConfigError):
        AlgorithmSpec("x", EstimatorConfig("mc_elbo"), kl_coef=-1)
    with pytest.raises(ConfigError):
        AlgorithmSpec("x", EstimatorConfig("mc_elbo"), ratio_level="word")
    assert algorithm("elbo_grpo", mc_samples=4).likelihood.mc_samples == 4


def _model(attention="bidirectional", block_len=0):
    return random_head(build_model(tiny_cfg(d_model=16, max_len=48, attention=attention, block_len=block_len)),
                       scale=0.3)


NAMES = ["one_step_grpo", "coupled_grpo", "elbo_grpo", "trajectory_grpo"]


def test_plug_in_isolation():
    """Only the likelihood hook differs; rollouts, rewards and advantages do not."""
    m = _model()
    inst = make_dataset(SUDOKU, 1, 0, "g")[0]
    plan = DenoisePlan(17)
    groups = [run_group(m, algorithm(n, mc_samples=2), SUDOKU, inst, 4, plan, V, 0, 0, 0) for n in NAMES]
    for g in groups[1:]:
        for a, b in zip(groups[0].results, g.results):
            assert np.array_equal(a.raw, b.raw)
        assert np.array_equal(groups[0].rewards, g.rewards)
        assert np.array_equal(groups[0].advantages, g.advantages)


@pytest.mark.parametrize("name", NAMES + ["block_elbo_grpo"])
def test_shared_noise_ratio_identity(name):
    block = name == "block_elbo_grpo"
    m = _model("block_causal", 8) if block else _model()
    algo = algorithm(name, mc_samples=3)
    if block:
        algo = AlgorithmSpec(name, EstimatorConfig("block_elbo", 3, block_len=8))
    inst = make_dataset(SUDOKU, 1, 0, "g")[0]
    plan = DenoisePlan(8 if block else 17)
    g = run_group(m, algo, SUDOKU, inst, 4, plan, V, 0, 0, 0)
    new = np.array([float(s.value) for s in evaluate(m, g.rows)])
    assert np.all(np.abs(np.exp(new - g.old_scores) - 1) < 1e-10)
    assert np.all((g.rewards >= 0) & (g.rewards <= 1))


def test_rollout_workers_do_not_change_results():
    m = _model()
    inst = make_dataset(SUDOKU, 1, 0, "g")[0]
    prompt = SUDOKU.encode_prompt(inst, V)
    plan = DenoisePlan(17)
    runs = [rollout_group(m, SUDOKU, prompt, 3, plan, V, [RngStream(0, i) for i in range(3)], workers=w)
            for w in (0, 1, 2)]
    for r in runs[1:]:
        for a, b in zip(runs[0], r):
            assert np.array_equal(a.raw, b.raw)


def test_constant_rewards_do_not_move_parameters():
    m = _model()
    before = [p.detach().clone() for p in m.parameters()]
    state = TrainState(0, m, AdamState(), 0)
    copy_task = Task("copy", {"length": 3})       # an untrained model never gets a copy right
    pool = make_dataset(copy_task, 4, 0, "p")
    rec = rl_step(state, algorithm("one_step_grpo"), copy_task, pool, DenoisePlan(4), V,
                  RLSettings(group_size=4, prompts_per_step=2, probe_reps=0))
    assert rec["reward_std"] == 0.0
    assert rec["loss"] == 0.0
    assert rec["update_norm"] < 1e-12
    for a, p in zip(before, m.parameters()):
        assert torch.max(torch.abs(a - p)) < 1e-12


def _run(steps, stop_after=None, state=None):
    m = _model()
    state = state or TrainState(0, m, AdamState(), 7)
    recs = []
    pool = make_dataset(SUDOKU, 4, 0, "p")
    settings = RLSettings(group_size=3, prompts_per_step=2, steps=steps, lr=1e-3, probe_reps=2)
    train_rl(state, algorithm("elbo_grpo", mc_samples=2), SUDOKU, pool, DenoisePlan(17), V, settings,
             on_record=recs.append, stop_after=stop_after)
    return state, recs


def test_rl_changes_parameters_and_logs_each_step():
    state, recs = _run(3)
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert any(r["update_norm"] > 0 for r in recs)
    assert all(0 <= r["reward_mean"] <= 1 for r in recs)


def test_resume_reproduces_the_stream(tmp_path):
    _, full = _run(4)
    state, first = _run(4, stop_after=2)
    save_train_state(tmp_path / "s.ckpt", state, "d" * 64)
    restored = load_train_state(tmp_path / "s.ckpt", _model(), "d" * 64)
    assert restored.step == 2
    _, rest = _run(4, state=restored)
    assert first + rest == full


def test_resume_refuses_other_runs(tmp_path):
    state, _ = _run(1)
    save_train_state(tmp_path / "s.ckpt", state, "a" * 64)
    from diffpost.checkpoint import CheckpointError
    with pytest.raises(CheckpointError):
        load_train_state(tmp_path / "s.ckpt", _model(), "b" * 64)


def test_three_skipped_updates_abort(monkeypatch):
    calls = []

    def fake_step(state, *a, **k):
        calls.append(state.step)
        return {"step": state.step, "skipped": state.step >= 1}

    monkeypatch.setattr(rl, "rl_step", fake_step)
    with pytest.raises(TrainingAborted):
        train_rl(TrainState(0, _model(), AdamState(), 0), algorithm("one_step_grpo"), SUDOKU, [], DenoisePlan(1),
                 V, RLSettings(steps=10))
    assert calls == [0, 1, 2, 3]


def test_kl_needs_reference():
    with pytest.raises(ConfigError):
        train_rl(TrainState(0, _model(), AdamState(), 0), algorithm("one_step_grpo", kl_coef=0.1), SUDOKU, [],
                 DenoisePlan(1), V, RLSettings(steps=1))
