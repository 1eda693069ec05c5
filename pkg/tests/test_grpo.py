from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deckgym.env import SlideEnv
from deckgym.grpo import (
    FEATURE_DIM,
    GrpoBatch,
    GrpoConfig,
    GrpoGroup,
    GrpoTrainer,
    NoiseModel,
    PolicyParams,
    TrainingDiverged,
    aggregate_noise,
    clipped_token_loss,
    completion_reward,
    compute_advantages,
    default_templates,
    finite_difference_check,
    format_window_table,
    grpo_loss,
    importance_ratio,
    log_softmax,
    loss_and_grad,
    random_batch,
    scripted_review_episode,
    snr,
    state_features,
    token_logprob,
)
from deckgym.rewards import ComponentWeights, aggregate_rewards

from conftest import make_brief


def test_advantages_k2_binary():
    a = compute_advantages([0.7, 0.3])
    assert a == pytest.approx([1, -1], abs=1e-3)
    assert a[0] == pytest.approx(0.2 / (0.2 + 1e-4), abs=1e-12)


def test_advantages_k4_hand_computed():
    assert compute_advantages([1, 2, 3, 4]) == pytest.approx([-1.342, -0.447, 0.447, 1.342], abs=1e-3)


def test_advantages_equal_and_invalid():
    assert np.all(compute_advantages([0.5, 0.5, 0.5]) == 0)
    with pytest.raises(ValueError):
        compute_advantages([1.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.1, 10), st.floats(-5, 5))
def test_advantage_affine_invariance(r, a, b):
    r = np.array(r)
    if r.std() < 1e-3:
        return
    lhs = compute_advantages(a * r + b, eps_adv=1e-12)
    assert lhs == pytest.approx(compute_advantages(r, eps_adv=1e-12), abs=1e-6)
    assert abs(lhs.mean()) < 1e-9


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_k2_dichotomy(x, y):
    a = compute_advantages([x, y])
    if x == y:
        assert np.all(a == 0)
    else:
        assert a[0] == pytest.approx(-a[1], abs=1e-12)
        sigma = abs(x - y) / 2
        assert abs(a[0]) == pytest.approx(sigma / (sigma + 1e-4), abs=1e-12)


def test_token_logprob_examples():
    assert token_logprob([0.0] * 4, 2) == pytest.approx(math.log(0.25), abs=1e-12)
    assert token_logprob([10.0, 0.0], 0) == pytest.approx(-4.54e-5, rel=1e-3)
    assert token_logprob([1000.0, 0.0], 1) == pytest.approx(-1000.0)
    z = np.array([0.3, -1.2, 2.5])
    assert token_logprob(z + 123.0, 1) == pytest.approx(token_logprob(z, 1), abs=1e-12)
    with pytest.raises(IndexError):
        token_logprob(z, 3)
    with pytest.raises(ValueError):
        token_logprob([np.inf, 0.0], 0)


def test_importance_ratio_examples():
    assert importance_ratio(-1.3, -1.3) == 1.0
    assert importance_ratio(math.log(2.0), 0.0) == pytest.approx(2.0, abs=1e-15)


def test_fresh_snapshot_ratios_are_one():
    W, batch = random_batch(off_policy=0.0)
    logp = np.take_along_axis(log_softmax(batch.features @ W.T), batch.actions[..., None], axis=-1)[..., 0]
    assert np.all(importance_ratio(logp, batch.old_logprobs) == 1.0)
    # on-policy loss reduces to minus the mean advantage over completions
    assert grpo_loss(W, batch) == pytest.approx(-batch.advantages.mean(), abs=1e-12)


@pytest.mark.parametrize("rho,adv,expected", [(1.0, 1.0, -1.0), (1.5, 1.0, -1.2), (0.5, -1.0, 0.8)])
def test_clip_examples(rho, adv, expected):
    assert clipped_token_loss(rho, adv, 0.2) == pytest.approx(expected, abs=1e-15)


def test_clip_rejects_bad_eps():
    with pytest.raises(ValueError):
        clipped_token_loss(1.0, 1.0, 1.0)


@settings(max_examples=300)
@given(st.floats(0, 50), st.floats(-50, 50), st.floats(0.01, 0.99))
def test_clip_bound_where_it_holds(rho, adv, eps):
    """The (1+eps)|A| bound holds unless A < 0 and rho > 1+eps."""
    if adv < 0 and rho > 1 + eps:
        assert clipped_token_loss(rho, adv, eps) == pytest.approx(-rho * adv)
    else:
        assert abs(clipped_token_loss(rho, adv, eps)) <= (1 + eps) * abs(adv) + 1e-12


def test_clip_bound_counterexample():
    # negative advantage with a large ratio: the unclipped branch is the minimum
    assert clipped_token_loss(3.0, -1.0, 0.2) == 3.0 > 1.2


def _single(adv_rewards=(1.0, 0.0), L=2, pad=0):
    x = np.zeros((2, L + pad, 3))
    x[:, :, 0] = 1.0
    acts = np.zeros((2, L + pad), dtype=int)
    acts[1] = 1
    masks = np.zeros((2, L + pad))
    masks[:, :L] = 1.0
    W = np.zeros((4, 3))
    old = np.take_along_axis(log_softmax(x @ W.T), acts[..., None], axis=-1)[..., 0]
    rewards = np.array(adv_rewards)
    g = GrpoGroup(x[:, 0], x, acts, masks, rewards, compute_advantages(rewards), old)
    return W, GrpoBatch.from_groups([g])


def test_loss_single_completion_on_policy():
    W, batch = _single()
    batch.advantages[:] = [1.0, 1.0]
    assert grpo_loss(W, batch) == pytest.approx(-1.0, abs=1e-15)


def test_padding_leaves_loss_unchanged():
    W, a = _single(pad=0)
    _, b = _single(pad=3)
    assert grpo_loss(W, a) == grpo_loss(W, b)
    np.testing.assert_allclose(loss_and_grad(W, a).grad, loss_and_grad(W, b).grad, atol=1e-15)


def test_all_zero_mask_excluded(caplog):
    W, batch = _single()
    batch.masks[1] = 0.0
    terms = loss_and_grad(W, batch)
    assert terms.excluded == 1 and "excluding" in caplog.text


def test_kl_zero_at_reference():
    W, batch = random_batch(seed=3)
    t0 = loss_and_grad(W, batch)
    t1 = loss_and_grad(W, batch, beta=0.1, ref_weights=W.copy())
    assert t1.kl == pytest.approx(0.0, abs=1e-12) and t1.loss == pytest.approx(t0.loss, abs=1e-12)
    with pytest.raises(ValueError):
        loss_and_grad(W, batch, beta=0.1)


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference(seed):
    W, batch = random_batch(seed=seed, V=10, D=12)
    assert W.size >= 100
    assert finite_difference_check(W, batch, h=1e-5, n_coords=120) <= 1e-4
    ref = W + 0.3 * np.random.default_rng(seed).standard_normal(W.shape)
    assert finite_difference_check(W, batch, h=1e-5, n_coords=120, beta=0.5, ref_weights=ref) <= 1e-4
    assert finite_difference_check(W, batch, h=1e-5, n_coords=120, beta=0.1, ref_weights=W.copy()) <= 1e-4


def test_zero_advantage_gradient_vanishes():
    W, batch = random_batch(seed=1)
    batch.advantages[:] = 0.0
    assert np.all(loss_and_grad(W, batch).grad == 0)


def test_completion_reward_graduated():
    brief = make_brief()
    assert completion_reward("I think we should start with research.", brief) == -2.0
    assert completion_reward('{"tool":"edit_slide","slide_idx":5}', brief) == -1.0
    call = '{"tool": "create_outline", "sections": [{"title": "Intro", "bullet_points": ["EV"]}]}'
    env = SlideEnv()
    env.reset(brief)
    env.step(call)
    expected = aggregate_rewards(env.state, env.config.judge()).aggregate
    assert completion_reward(call, brief) == expected >= 0


def test_noise_calculators():
    w = ComponentWeights()
    sig = {"aesthetic_html": 0.1, "aesthetic_visual": 0.1, "spec_reconstruction": 0.1}
    assert aggregate_noise(w, {c: sig.get(c, 0.0) for c in w.as_dict()}) == pytest.approx(0.029, abs=1e-3)
    assert aggregate_noise(w, dict.fromkeys(w.as_dict(), 0.0)) == 0.0
    assert snr(0.2, 0.1) == pytest.approx(4.0, abs=1e-12)
    assert snr(0.2, 0.0) == math.inf
    nm = NoiseModel((0.0, 0.0), (1.0, 1.0), 0.2, 0.0)
    assert nm.snr_is_infinite and nm.aggregate_sigma == 0.0
    with pytest.raises(ValueError):
        NoiseModel((-0.1,), (1.0,))


def test_policy_shapes():
    p = PolicyParams.init()
    assert len(p.template_vocab) == 64 == len(default_templates())
    assert p.feature_dim == FEATURE_DIM == 16
    probs = p.probs(np.ones(FEATURE_DIM))
    assert probs == pytest.approx(np.full(64, 1 / 64))
    with pytest.raises(ValueError):
        PolicyParams(p.template_vocab, np.full((64, 16), np.nan))


def test_templates_expand_to_valid_calls():
    env = SlideEnv()
    env.reset(make_brief())
    for t in default_templates():
        call = t.expand(env.state)
        assert call.tool == t.tool
    assert state_features(env.state).shape == (FEATURE_DIM,)


def test_positive_advantage_raises_probability():
    x = np.zeros((2, 1, 3))
    x[:, :, 0] = 1.0
    acts = np.array([[2], [5]])
    W = np.zeros((8, 3))
    old = np.take_along_axis(log_softmax(x @ W.T), acts[..., None], axis=-1)[..., 0]
    r = np.array([1.0, 0.0])
    batch = GrpoBatch.from_groups([GrpoGroup(x[:, 0], x, acts, np.ones((2, 1)), r, compute_advantages(r), old)])
    W2 = W - 0.01 * loss_and_grad(W, batch).grad
    p0, p1 = np.exp(log_softmax(W @ x[0, 0])), np.exp(log_softmax(W2 @ x[0, 0]))
    assert p1[2] > p0[2] and p1[5] < p0[5]


def test_constant_reward_leaves_parameters_unchanged():
    cfg = GrpoConfig(steps=3, episodes_per_step=2, seed=1)
    t = GrpoTrainer(PolicyParams.init(scale=0.1), [make_brief()], cfg, reward_fn=lambda s, c: 0.5)
    before = t.policy.weights.copy()
    log = t.train()
    assert np.array_equal(before, t.policy.weights) and len(log.records) == 3


def test_training_is_seeded():
    def run():
        cfg = GrpoConfig(steps=4, episodes_per_step=2, seed=7, arg_error_rate=0.5)
        return [r.to_dict() for r in GrpoTrainer(PolicyParams.init(), [make_brief()], cfg).train().records]

    assert run() == run()


def test_non_finite_loss_aborts_with_dump():
    cfg = GrpoConfig(steps=2, episodes_per_step=1, seed=0)
    t = GrpoTrainer(PolicyParams.init(), [make_brief()], cfg, reward_fn=lambda s, c: math.nan)
    with pytest.raises(TrainingDiverged) as exc:
        t.train()
    assert exc.value.dump["step"] == 0 and "weights" in exc.value.dump


def test_log_and_window_table(tmp_path):
    cfg = GrpoConfig(steps=4, episodes_per_step=2, seed=0)
    log = GrpoTrainer(PolicyParams.init(), [make_brief()], cfg).train()
    lines = log.write_jsonl(tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 4 and '"p_review_deck"' in lines[0]
    windows = log.windows(2)
    assert [(w["start"], w["end"]) for w in windows] == [(0, 1), (2, 3)]
    table = format_window_table(windows)
    assert table.splitlines()[0].split() == ["Steps", "Avg", "Min", "Max", "P(review)"]


def test_config_validation():
    for bad in ({"K": 1}, {"eps_clip": 1.0}, {"beta": -1}, {"learning_rate": 0}, {"reward_mode": "x"}):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


def test_scripted_review_episode():
    s = scripted_review_episode(make_brief())
    assert s.turns == 35 and s.slides == 0 and not s.completed
    assert s.aggregate_quality == 0.0
    assert s.cumulative_reward == pytest.approx(0.35, abs=1e-12)
