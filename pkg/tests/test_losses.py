import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordmoe import autodiff as ad
from ordmoe.autodiff import NumericError, Tensor, backward, finite_diff_check
from ordmoe.data import generate
from ordmoe.losses import (DegenerateScheduleError, RewardSchedule, avg_token_logprob, balance_loss,
                           compute_advantages, default_rewards, erl_loss, ntp_loss, total_loss)
from ordmoe.model import init_params, multi_tier_forward
from ordmoe.training import compute_losses
from ordmoe.verify import toy_config

SQRT_1_5 = math.sqrt(1.5)  # 0.5 / sqrt(1/6)


# -- avg_token_logprob -----------------------------------------------------------------

def test_avg_logprob_certain_token():
    assert avg_token_logprob(Tensor([0.0])).item() == 0.0


def test_avg_logprob_mean():
    assert avg_token_logprob(Tensor([-1.0, -2.0, -3.0])).item() == -2.0


def test_avg_logprob_masks_padding():
    assert avg_token_logprob(Tensor([-1.0, -9.0]), [False, True]).item() == -1.0


def test_avg_logprob_all_padding():
    with pytest.raises(ValueError):
        avg_token_logprob(Tensor([-1.0, -9.0]), [True, True])


def test_avg_logprob_batched_rows():
    out = avg_token_logprob(Tensor([[-1.0, -3.0], [-2.0, -8.0]]), [[False, False], [False, True]])
    np.testing.assert_array_equal(out.data, [-2.0, -2.0])


# -- advantages --------------------------------------------------------------------------

def test_advantages_three_tiers():
    a = compute_advantages(RewardSchedule([1.0, 0.5, 0.0]))
    np.testing.assert_allclose(a, [SQRT_1_5, 0.0, -SQRT_1_5], atol=1e-15)
    np.testing.assert_allclose(a, [1.22474, 0.0, -1.22474], atol=5e-6)


def test_advantages_scale_invariant():
    np.testing.assert_allclose(compute_advantages([2.0, 1.0, 0.0]), compute_advantages([1.0, 0.5, 0.0]),
                               atol=1e-15)


def test_advantages_two_tiers():
    np.testing.assert_array_equal(compute_advantages([1.0, 0.0]), [1.0, -1.0])


def test_advantages_degenerate():
    with pytest.raises(DegenerateScheduleError):
        compute_advantages([0.3, 0.3, 0.3])


def test_advantages_need_two_tiers():
    with pytest.raises(ValueError):
        compute_advantages([1.0])


def test_schedule_strictly_decreasing():
    with pytest.raises(ValueError):
        RewardSchedule([1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        RewardSchedule([0.0, 0.5, 1.0])


def test_sample_std_option():
    a = compute_advantages([1.0, 0.5, 0.0], population=False)
    np.testing.assert_allclose(a, [1.0, 0.0, -1.0], atol=1e-15)


def test_default_rewards():
    assert default_rewards(1) == [1.0]
    assert default_rewards(3) == [1.0, 0.5, 0.0]


schedules = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=8, unique=True).map(
    lambda v: sorted(v, reverse=True)).filter(lambda v: min(a - b for a, b in zip(v, v[1:])) > 1e-3)


@settings(max_examples=300, deadline=None)
@given(schedules)
def test_advantages_zero_mean_unit_std(rewards):
    a = compute_advantages(rewards)
    assert abs(a.mean()) <= 1e-12
    assert abs(a.std() - 1.0) <= 1e-10


@settings(max_examples=300, deadline=None)
@given(schedules, st.floats(0.01, 100), st.floats(-100, 100))
def test_advantages_affine_invariant(rewards, scale, shift):
    a = compute_advantages(rewards)
    b = compute_advantages([scale * r + shift for r in rewards])
    assert np.max(np.abs(a - b)) <= 1e-10


# -- erl ------------------------------------------------------------------------------------

def test_erl_three_tiers():
    a = np.array([1.22474, 0.0, -1.22474])
    assert erl_loss(Tensor([-1.0, -2.0, -3.0]), a).item() == pytest.approx(-2.44948, abs=1e-12)


def test_erl_two_tiers():
    assert erl_loss(Tensor([-1.0, -1.5]), [1.0, -1.0]).item() == -0.5


def test_erl_length_mismatch():
    with pytest.raises(ValueError):
        erl_loss(Tensor([-1.0, -2.0]), [1.0, 0.0, -1.0])


def test_erl_batch_mean():
    a = compute_advantages([1.0, 0.5, 0.0])
    rows = np.array([[-1.0, -2.0, -3.0], [-0.5, -0.5, -0.5]])
    want = np.mean([-(a @ r) for r in rows])
    assert erl_loss(Tensor(rows), a).item() == pytest.approx(want, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(schedules, st.floats(-50, 0, allow_nan=False))
def test_erl_exactly_zero_for_equal_tiers(rewards, level):
    a = compute_advantages(rewards)
    assert erl_loss(Tensor(np.full(len(rewards), level)), a).item() == 0.0


@settings(max_examples=300, deadline=None)
@given(schedules, st.integers(0, 2 ** 31))
def test_erl_gradient_signs(rewards, seed):
    a = compute_advantages(rewards)
    lbar = Tensor(-np.random.default_rng(seed).uniform(0, 5, len(rewards)), requires_grad=True)
    backward(erl_loss(lbar, a))
    assert lbar.grad[0] < 0 < lbar.grad[-1]
    # lower tiers get exactly -A_j; tier 1 gets sum_{j>1} A_j, which is -A_1 up to the float sum of A
    np.testing.assert_array_equal(lbar.grad[1:], -a[1:])
    assert lbar.grad[0] == a[1:].sum()
    assert abs(lbar.grad[0] + a[0]) <= abs(a.sum()) + 4 * np.finfo(float).eps


# -- ntp -----------------------------------------------------------------------------------------

def test_ntp_perfect_prediction():
    logits = np.full((3, 5), -1e4)
    targets = np.array([1, 4, 0])
    logits[np.arange(3), targets] = 1e4
    assert ntp_loss(Tensor(logits), targets).item() == pytest.approx(0.0, abs=1e-12)


def test_ntp_uniform():
    assert ntp_loss(Tensor(np.zeros((6, 4))), np.arange(6) % 4).item() == pytest.approx(math.log(4), abs=1e-15)


def test_ntp_is_negative_mean_logprob():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(7, 5))
    targets = rng.integers(0, 5, 7)
    pad = np.array([False, False, True, False, True, False, False])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    picked = Tensor(lp[np.arange(7), targets])
    assert ntp_loss(Tensor(logits), targets, pad).item() == pytest.approx(
        -avg_token_logprob(picked, pad).item(), abs=1e-14)


def test_ntp_all_padding():
    with pytest.raises(ValueError):
        ntp_loss(Tensor(np.zeros((2, 3))), [0, 1], [True, True])


# -- balance -------------------------------------------------------------------------------------

def test_balance_uniform_n4_k2():
    probs = np.full((4, 4), 0.25)
    assign = np.array([[0, 1], [2, 3], [0, 1], [2, 3]])
    assert balance_loss(Tensor(probs), assign).item() == 0.5


def test_balance_collapsed_is_larger():
    probs = np.zeros((4, 4))
    probs[:, 0] = 1.0
    assign = np.array([[0, 1]] * 4)
    val = balance_loss(Tensor(probs), assign).item()
    assert val == 1.0
    assert val > 0.5


def test_balance_single_token():
    assert balance_loss(Tensor([[0.9, 0.1]]), [[0]]).item() == pytest.approx(0.9, abs=1e-15)


def test_balance_empty():
    with pytest.raises(ValueError):
        balance_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 2), dtype=int))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 16), st.data())
def test_balance_uniform_is_k_over_n(n, data):
    k = data.draw(st.integers(1, n))
    reps = data.draw(st.integers(1, 4))
    L = n * reps
    assign = np.stack([(np.arange(k) + i) % n for i in range(L)])
    val = balance_loss(Tensor(np.full((L, n), 1.0 / n)), assign).item()
    # exact when 1/n is a binary fraction; otherwise n roundings of 1/n
    tol = 0.0 if n & (n - 1) == 0 else n * np.finfo(float).eps
    assert abs(val - k / n) <= tol


# -- total ----------------------------------------------------------------------------------------

def test_total_example():
    br = total_loss(Tensor(1.3863), Tensor(-2.4495), Tensor(0.5))
    assert br.total == pytest.approx(-0.5632, abs=1e-12)


def test_total_lambda_zero_is_sft_objective():
    br = total_loss(Tensor(1.3863), Tensor(-2.4495), Tensor(0.5), lambda_erl=0.0)
    assert br.total == 1.3863 + 0.5


def test_total_inactive_rank_term():
    br = total_loss(Tensor(1.3863), None, Tensor(0.5), lambda_erl=7.0)
    assert br.total == 1.3863 + 0.5 and br.erl == 0.0


def test_total_names_non_finite_component():
    with pytest.raises(NumericError, match="erl"):
        total_loss(Tensor(1.0), Tensor(np.nan), Tensor(0.5))
    with pytest.raises(NumericError, match="balance"):
        total_loss(Tensor(1.0), None, Tensor(np.inf))


@settings(max_examples=200, deadline=None)
@given(*[st.floats(-10, 10, allow_nan=False)] * 3, st.floats(0, 3), st.floats(0, 3))
def test_total_decomposition_identity(ntp, erl, bal, le, lb):
    br = total_loss(Tensor(ntp), Tensor(erl), Tensor(bal), le, lb)
    want = ntp + le * erl if le != 0.0 else ntp
    assert br.total == want + lb * bal


# -- every loss passes a finite-difference check on random toy models --------------------------------

def _toy_batch(seed):
    cfg, spec = toy_config(3, "full", "uniform", seed=seed)
    params = init_params(cfg)
    tokens, mask = generate(spec, 2, seed, "train").batch(slice(0, 2))
    return cfg, params, tokens, mask


def _component(name, cfg, params, tokens, mask):
    def fn():
        out = multi_tier_forward(params, tokens, mask, cfg, key=(0,))
        br = compute_losses(out, tokens, mask, cfg)
        if name == "total":
            return br.tensor
        if name == "ntp":
            return ntp_loss(out.tier1_logits[:, :-1, :], tokens[:, 1:], ~mask)
        if name == "balance":
            return balance_loss(out.routing[0].state.full_softmax, out.routing[0].selected)
        cols = [ad.reshape(t.avg_logprob, (-1, 1)) for t in out.tiers]
        return erl_loss(ad.concat(cols, axis=1), compute_advantages(cfg.rewards))
    return fn


@pytest.mark.parametrize("name", ["ntp", "erl", "balance", "total"])
def test_loss_gradients_over_20_seeds(name):
    worst = 0.0
    for seed in range(20):
        cfg, params, tokens, mask = _toy_batch(seed)
        # a handful of entries from each tensor keeps 20 seeds cheap
        rep = finite_diff_check(_component(name, cfg, params, tokens, mask), list(params.values()),
                                max_entries=3, seed=seed)
        assert rep.passed, f"seed {seed}: {rep}"
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-4
