import itertools
import math

import numpy as np
import pytest
import torch

from conftest import content_tokens, random_head
from diffpost.likelihood import (EstimatorConfig, MAX_ORACLE_LEN, block_elbo, coupled_pair, draw_rows, evaluate,
                                 exact_elbo_oracle, mc_elbo, one_step, trajectory_logprob, trajectory_rows,
                                 variance_probe)
from diffpost.model import ConfigError, make_uniform
from diffpost.rollout import DenoisePlan, IntegrityError, sample_bdlm, sample_mdlm
from diffpost.seq import T_EPS, RngStream


def _pair(vocab, rng, n=5):
    prompt = np.concatenate([[vocab.bos_id], content_tokens(vocab, rng, 2)])
    response = np.concatenate([content_tokens(vocab, rng, n - 1), [vocab.eos_id]])
    return prompt, response


def brute_force_oracle(model, prompt, response, vocab, grid=4000):
    """Independent oracle: midpoint rule in t, explicit subset probabilities."""
    n = len(response)
    P = len(prompt)
    seq = np.concatenate([prompt, response])
    ts = T_EPS + (1 - T_EPS) * (np.arange(grid) + 0.5) / grid
    total = np.zeros(grid)
    for bits in itertools.product([0, 1], repeat=n):
        bits = np.array(bits)
        if not bits.any():
            continue
        x = seq.copy()
        x[P:][bits == 1] = vocab.mask_id
        with torch.no_grad():
            lp = torch.log_softmax(model(torch.from_numpy(x), P).double(), -1).numpy()
        s = sum(lp[P + i, seq[P + i]] for i in np.flatnonzero(bits))
        k = bits.sum()
        total += ts ** k * (1 - ts) ** (n - k) / ts * s
    return total.mean()


def test_oracle_matches_brute_force(make_model, vocab, np_rng):
    m = random_head(make_model())
    prompt, response = _pair(vocab, np_rng, 4)
    assert exact_elbo_oracle(m, prompt, response, vocab) == pytest.approx(
        brute_force_oracle(m, prompt, response, vocab), abs=2e-4)


def test_uniform_predictor_closed_form(make_model, vocab, np_rng):
    m = make_uniform(make_model())
    prompt, response = _pair(vocab, np_rng, 6)
    want = -6 * math.log(vocab.size)
    assert abs(exact_elbo_oracle(m, prompt, response, vocab) - want) < 1e-6
    assert float(one_step(m, prompt, response, vocab)) == pytest.approx(want, abs=1e-9)
    assert float(coupled_pair(m, prompt, response, vocab, RngStream(0))) == pytest.approx(want, abs=1e-9)


def test_oracle_length_guard(tiny_model, vocab, np_rng):
    prompt, response = _pair(vocab, np_rng, MAX_ORACLE_LEN + 1)
    with pytest.raises(ValueError):
        exact_elbo_oracle(tiny_model, prompt, response, vocab)


def test_one_step_equals_mc_elbo_k1_with_shared_stream(make_model, vocab, np_rng):
    m = random_head(make_model())
    prompt, response = _pair(vocab, np_rng)
    a = one_step(m, prompt, response, vocab, RngStream(4, "s"), fixed_t=None)
    b = mc_elbo(m, prompt, response, vocab, RngStream(4, "s"), k=1)
    assert float(a) == float(b)


def test_one_step_default_is_the_fully_masked_pass(make_model, vocab, np_rng):
    m = random_head(make_model())
    prompt, response = _pair(vocab, np_rng)
    x = np.concatenate([prompt, np.full(len(response), vocab.mask_id)])
    with torch.no_grad():
        lp = torch.log_softmax(m(torch.from_numpy(x), len(prompt)).double(), -1).numpy()
    want = sum(lp[len(prompt) + i, t] for i, t in enumerate(response))
    assert float(one_step(m, prompt, response, vocab)) == pytest.approx(want, abs=1e-10)


def test_positions_after_eos_do_not_count(vocab, np_rng):
    prompt, response = _pair(vocab, np_rng, 4)
    padded = np.concatenate([response, [vocab.pad_id] * 3])
    P = len(prompt)
    for est in (EstimatorConfig("mc_elbo", 4), EstimatorConfig("coupled_pair"), EstimatorConfig("one_step")):
        a = draw_rows(est, prompt, response, vocab, RngStream(0))
        b = draw_rows(est, prompt, padded, vocab, RngStream(0))
        assert np.all(b.coef[:, P + 4:] == 0)
        assert np.all(b.noisy[:, P + 4:] == vocab.pad_id)
        assert np.array_equal(a.coef, b.coef[:, :P + 4])


def test_coupled_pair_scores_each_token_once(vocab, np_rng):
    prompt, response = _pair(vocab, np_rng, 9)
    for seed in range(20):
        rows = draw_rows(EstimatorConfig("coupled_pair"), prompt, response, vocab, RngStream(seed))
        P = len(prompt)
        covered = (rows.coef[:, P:] > 0).sum(0)
        assert np.all(covered == 1)
        assert np.all(rows.noisy[:, :P] == prompt)
        # a position is scored exactly in the pass where it is masked
        assert np.array_equal(rows.coef > 0, rows.noisy == vocab.mask_id)


def test_coupled_pair_zero_variance_on_uniform(make_model, vocab, np_rng):
    m = make_uniform(make_model())
    prompt, response = _pair(vocab, np_rng)
    rec = variance_probe(m, EstimatorConfig("coupled_pair"), prompt, response, vocab, RngStream(0), 50)
    assert rec.var < 1e-20


def test_block_elbo_single_block_equals_mc_elbo(make_model, vocab, np_rng):
    prompt, response = _pair(vocab, np_rng, 6)
    bi = random_head(make_model())
    bc = make_model(attention="block_causal", block_len=6)
    bc.load_state_dict(bi.state_dict())
    a = block_elbo(bc, prompt, response, vocab, RngStream(2), k=8)
    b = mc_elbo(bi, prompt, response, vocab, RngStream(2), k=8)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_block_elbo_needs_block_model(tiny_model, vocab, np_rng):
    prompt, response = _pair(vocab, np_rng)
    with pytest.raises(ConfigError):
        block_elbo(tiny_model, prompt, response, vocab, RngStream(0))


def test_block_elbo_blocks_see_clean_prefix(make_model, vocab, np_rng):
    m = random_head(make_model(attention="block_causal", block_len=3))
    prompt, response = _pair(vocab, np_rng, 7)
    est = EstimatorConfig("block_elbo", 2, block_len=3)
    rows = draw_rows(est, prompt, response, vocab, RngStream(0))
    P = len(prompt)
    assert len(rows.noisy) == 2 * 3
    for r in range(len(rows.noisy)):
        b = r // 2
        assert not np.any(rows.noisy[r, P:P + 3 * b] == vocab.mask_id)
        assert np.all(rows.coef[r, P + 3 * (b + 1):] == 0)


def test_trajectory_logprob_matches_recorded(make_model, vocab):
    m = random_head(make_model())
    prompt = np.concatenate([[vocab.bos_id], vocab.encode("ab")])
    res = sample_mdlm(m, prompt, 7, DenoisePlan(3), vocab, RngStream(0))
    n = len(prompt) + (np.flatnonzero(res.raw == vocab.eos_id)[0] + 1 if np.any(res.raw == vocab.eos_id)
                       else len(res.raw))
    got = float(trajectory_logprob(m, res.trajectory, vocab))
    assert got == pytest.approx(res.trajectory.recorded_logprob(upto=n), abs=1e-10)


def test_trajectory_logprob_bdlm(make_model, vocab):
    m = random_head(make_model(attention="block_causal", block_len=4))
    prompt = np.concatenate([[vocab.bos_id], vocab.encode("ab")])
    res = sample_bdlm(m, prompt, 4, 3, DenoisePlan(2), vocab, RngStream(0))
    n = len(prompt) + (np.flatnonzero(res.raw == vocab.eos_id)[0] + 1 if np.any(res.raw == vocab.eos_id)
                       else len(res.raw))
    assert float(trajectory_logprob(m, res.trajectory, vocab)) == pytest.approx(
        res.trajectory.recorded_logprob(upto=n), abs=1e-10)


def test_one_step_trajectory_equals_one_step_estimator(make_model, vocab):
    m = random_head(make_model())
    prompt = np.concatenate([[vocab.bos_id], vocab.encode("ab")])
    res = sample_mdlm(m, prompt, 5, DenoisePlan(1), vocab, RngStream(0))
    assert float(trajectory_logprob(m, res.trajectory, vocab)) == pytest.approx(
        float(one_step(m, prompt, res.response, vocab)), abs=1e-10)


def test_corrupt_trajectory_rejected(make_model, vocab):
    m = random_head(make_model())
    prompt = np.concatenate([[vocab.bos_id], vocab.encode("ab")])
    traj = sample_mdlm(m, prompt, 5, DenoisePlan(2), vocab, RngStream(0)).trajectory
    traj.steps[1].positions[0] = traj.steps[0].positions[0]
    with pytest.raises(IntegrityError):
        trajectory_rows(traj, vocab)


def test_shared_rows_give_identical_scores(make_model, vocab, np_rng):
    m = random_head(make_model())
    prompt, response = _pair(vocab, np_rng)
    rows = draw_rows(EstimatorConfig("mc_elbo", 8), prompt, response, vocab, RngStream(0))
    a = evaluate(m, [rows])[0].value
    b = evaluate(m, [rows])[0].value
    assert torch.equal(a, b)


def test_evaluate_batches_match_single(make_model, vocab, np_rng):
    m = random_head(make_model())
    items = [_pair(vocab, np_rng, n) for n in (3, 5, 5)]
    rows = [draw_rows(EstimatorConfig("mc_elbo", 4), p, r, vocab, RngStream(i)) for i, (p, r) in enumerate(items)]
    together = evaluate(m, rows)
    for r, s in zip(rows, together):
        assert float(s.value) == pytest.approx(float(evaluate(m, [r])[0].value), abs=1e-12)


def test_mc_elbo_is_unbiased_for_the_oracle(make_model, vocab, np_rng):
    m = random_head(make_model())
    prompt, response = _pair(vocab, np_rng, 4)
    rec = variance_probe(m, EstimatorConfig("mc_elbo", 4), prompt, response, vocab, RngStream(0), 2000)
    ref = exact_elbo_oracle(m, prompt, response, vocab)
    assert abs(rec.mean - ref) < 4 * rec.se


def test_estimator_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig("nope")
    with pytest.raises(ConfigError):
        EstimatorConfig("mc_elbo", 0)
    with pytest.raises(ConfigError):
        EstimatorConfig("one_step", fixed_t=0.0)
