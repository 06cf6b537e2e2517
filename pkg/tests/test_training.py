"""Targets, loss, gradients, SGD, the replay buffer, and the outer loop."""

import numpy as np
import pytest

from smcplan import (
    ContractError,
    LossConfig,
    Model,
    PlannerConfig,
    ReplayBuffer,
    TrainConfig,
    TransitionRecord,
    collect_segment,
    grad,
    load_checkpoint,
    loss,
    make_absorbing_zero,
    make_chain,
    make_gridworld,
    make_two_arm,
    outer_targets,
    save_checkpoint,
    sgd_step,
    train,
)
from smcplan import rng as rng_mod


def record(state, action, reward, policy, value, terminal=False):
    return TransitionRecord(state, action, reward, np.asarray(policy, dtype=float), value, terminal)


def random_model(n_states, n_actions, seed):
    rng = np.random.default_rng(seed)
    return Model(
        policy_logits=rng.normal(size=(n_states, n_actions)),
        v_table=rng.normal(size=n_states),
        q_table=rng.normal(size=(n_states, n_actions)),
    )


def random_batch(model, seed, size=6):
    rng = np.random.default_rng(seed)
    n_states, n_actions = model.policy_logits.shape
    batch = []
    for _ in range(size):
        s = int(rng.integers(n_states))
        a = int(rng.integers(n_actions))
        policy = rng.dirichlet(np.ones(n_actions))
        batch.append((record(s, a, rng.normal(), policy, rng.normal()), rng.normal()))
    return batch


# ---------------------------------------------------------------- targets


def test_single_terminal_transition_bootstraps_zero():
    recs = [record(0, 1, 2.5, [0.5, 0.5], 9.0, terminal=True)]
    for lam in (0.0, 0.5, 1.0):
        assert outer_targets(recs, 0.9, lam).tolist() == [2.5]


def test_lambda_zero_gives_one_step_targets():
    recs = [
        record(0, 0, 1.0, [1.0], 5.0),
        record(1, 0, 2.0, [1.0], 7.0),
        record(2, 0, 3.0, [1.0], 9.0, terminal=True),
    ]
    targets = outer_targets(recs, 0.5, 0.0, tail_value=0.0)
    assert targets.tolist() == [1.0 + 0.5 * 7.0, 2.0 + 0.5 * 9.0, 3.0]


def test_lambda_one_accumulates_rewards():
    recs = [
        record(0, 0, 1.0, [1.0], 0.0),
        record(1, 0, 2.0, [1.0], 0.0),
        record(2, 0, 3.0, [1.0], 0.0, terminal=True),
    ]
    assert outer_targets(recs, 1.0, 1.0).tolist() == [6.0, 5.0, 3.0]


def test_tail_value_bootstraps_truncated_segment():
    recs = [record(0, 0, 1.0, [1.0], 4.0)]
    assert outer_targets(recs, 1.0, 1.0, tail_value=2.0).tolist() == [3.0]


def test_outer_targets_reject_empty():
    with pytest.raises(ContractError):
        outer_targets([], 1.0, 0.5)


# ---------------------------------------------------------------- loss/grad


def test_loss_zero_when_all_coefficients_vanish():
    model = random_model(3, 2, seed=0)
    cfg = LossConfig(c_v=0.0, c_pi=0.0, c_ent=0.0)
    assert loss(model, random_batch(model, 1), cfg) == 0.0


def test_loss_at_perfect_model():
    # model matches targets and search policy exactly: only the entropy
    # terms remain, (c_pi - c_ent) * H of the search policy
    target_policy = np.array([0.7, 0.3])
    target_value = 1.3
    logits = np.log(target_policy)
    model = Model(
        policy_logits=np.stack([logits, logits]),
        v_table=np.full(2, target_value),
        q_table=np.full((2, 2), target_value),
    )
    cfg = LossConfig(c_v=0.5, c_pi=1.0, c_ent=0.1)
    batch = [(record(0, 1, 0.0, target_policy, 0.0), target_value)]
    entropy = -(target_policy * np.log(target_policy)).sum()
    assert loss(model, batch, cfg) == pytest.approx(
        (cfg.c_pi - cfg.c_ent) * entropy, abs=1e-12
    )


def test_loss_mean_invariant_to_duplication():
    model = random_model(4, 3, seed=2)
    cfg = LossConfig()
    batch = random_batch(model, 3, size=1)
    assert loss(model, batch, cfg) == pytest.approx(loss(model, batch * 2, cfg))


def _flatten(grads):
    return np.concatenate(
        [grads.policy_logits.ravel(), grads.v_table.ravel(), grads.q_table.ravel()]
    )


def _numeric_grad(model, batch, cfg, h=1e-5):
    def perturb(setter):
        base = model.copy()
        setter(base, +h)
        up = loss(base, batch, cfg)
        base = model.copy()
        setter(base, -h)
        down = loss(base, batch, cfg)
        return (up - down) / (2 * h)

    out = Model.zeros(*model.policy_logits.shape)
    n_states, n_actions = model.policy_logits.shape
    for s in range(n_states):
        for a in range(n_actions):
            def bump_logit(m, d, s=s, a=a):
                m.policy_logits[s, a] += d

            def bump_q(m, d, s=s, a=a):
                m.q_table[s, a] += d

            out.policy_logits[s, a] = perturb(bump_logit)
            out.q_table[s, a] = perturb(bump_q)
        def bump_v(m, d, s=s):
            m.v_table[s] += d

        out.v_table[s] = perturb(bump_v)
    return out


@pytest.mark.parametrize("trial", range(50))
def test_gradient_matches_finite_differences(trial):
    model = random_model(3, 2, seed=100 + trial)
    cfg = LossConfig(c_v=0.6, c_pi=1.1, c_ent=0.2)
    batch = random_batch(model, 200 + trial, size=4)
    analytic = _flatten(grad(model, batch, cfg))
    numeric = _flatten(_numeric_grad(model, batch, cfg))
    scale = np.maximum(np.abs(numeric), 1.0)
    assert (np.abs(analytic - numeric) / scale).max() <= 1e-6


def test_policy_gradient_stationary_at_search_policy():
    search = np.array([0.6, 0.4])
    model = Model(
        policy_logits=np.stack([np.log(search), np.zeros(2)]),
        v_table=np.zeros(2),
        q_table=np.zeros((2, 2)),
    )
    cfg = LossConfig(c_v=0.0, c_pi=1.0, c_ent=0.0)
    batch = [(record(0, 0, 0.0, search, 0.0), 0.0)]
    grads = grad(model, batch, cfg)
    assert np.abs(grads.policy_logits[0]).max() <= 1e-12
    assert np.abs(grads.policy_logits[1]).max() == 0.0  # unvisited row


def test_unvisited_states_get_zero_gradient():
    model = random_model(5, 2, seed=7)
    cfg = LossConfig()
    batch = [(record(2, 1, 1.0, [0.5, 0.5], 0.3), 0.8)]
    grads = grad(model, batch, cfg)
    for s in (0, 1, 3, 4):
        assert np.abs(grads.policy_logits[s]).max() == 0.0
        assert grads.v_table[s] == 0.0
        assert np.abs(grads.q_table[s]).max() == 0.0


# ---------------------------------------------------------------- sgd


def test_sgd_zero_gradient_is_identity():
    model = random_model(3, 2, seed=9)
    cfg = LossConfig(lr=0.5)
    from smcplan.training import ModelGrads

    zeros = ModelGrads(np.zeros((3, 2)), np.zeros(3), np.zeros((3, 2)))
    out = sgd_step(model, zeros, cfg)
    assert (out.policy_logits == model.policy_logits).all()
    assert (out.v_table == model.v_table).all()


def test_sgd_zero_learning_rate_is_identity():
    model = random_model(3, 2, seed=10)
    cfg = LossConfig(lr=0.0)
    grads = grad(model, random_batch(model, 11), cfg)
    out = sgd_step(model, grads, cfg)
    assert (out.policy_logits == model.policy_logits).all()


def test_sgd_norm_rescaling():
    # all-ones gradient over 3*2 + 3 + 3*2 = 15 entries has norm
    # sqrt(15) > 1; with clip_norm=1 every entry becomes 1/sqrt(15)
    from smcplan.training import ModelGrads

    model = Model.zeros(3, 2)
    ones = ModelGrads(np.ones((3, 2)), np.ones(3), np.ones((3, 2)))
    cfg = LossConfig(lr=1.0, clip_abs=10.0, clip_norm=1.0)
    out = sgd_step(model, ones, cfg)
    expected = -1.0 / np.sqrt(15.0)
    assert np.abs(out.policy_logits - expected).max() <= 1e-12
    assert np.abs(out.v_table - expected).max() <= 1e-12


def test_sgd_elementwise_clip_applies_before_norm():
    from smcplan.training import ModelGrads

    model = Model.zeros(1, 1)
    grads = ModelGrads(np.array([[100.0]]), np.array([0.0]), np.array([[0.0]]))
    cfg = LossConfig(lr=1.0, clip_abs=2.0, clip_norm=10.0)
    out = sgd_step(model, grads, cfg)
    assert out.policy_logits[0, 0] == -2.0


def test_loss_decreases_on_frozen_batch():
    model = random_model(4, 3, seed=21)
    cfg = LossConfig(c_v=0.5, c_pi=1.0, c_ent=0.05, lr=0.05)
    batch = random_batch(model, 22, size=8)
    losses = [loss(model, batch, cfg)]
    for _ in range(100):
        model = sgd_step(model, grad(model, batch, cfg), cfg)
        losses.append(loss(model, batch, cfg))
    diffs = np.diff(losses)
    assert (diffs <= 1e-9).mean() >= 0.95
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------- buffer


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=10)
    records = [record(0, 0, float(i), [1.0], 0.0) for i in range(14)]
    buf.add_segment(records, list(range(14)))
    assert len(buf) == 10
    kept_targets = {t for _, t in buf._items}
    assert kept_targets == set(range(4, 14))


def test_buffer_sampling_is_uniform_ish():
    buf = ReplayBuffer(capacity=4)
    buf.add_segment([record(0, 0, 0.0, [1.0], 0.0)] * 4, [0, 1, 2, 3])
    draws = [t for _, t in buf.sample(4000, rng_mod.stream(5))]
    counts = np.bincount(draws, minlength=4)
    assert counts.min() > 800


# ---------------------------------------------------------------- loop


def test_collect_segment_two_arm_single_step():
    mdp = make_two_arm()
    model = Model.zeros(2, 2)
    cfg = PlannerConfig(k=8, depth=2)
    records, tail = collect_segment(mdp, model, cfg, horizon=5, seed=0)
    assert len(records) == 1
    assert records[0].terminal
    assert tail == 0.0


def test_collect_segment_rejects_zero_horizon():
    mdp = make_two_arm()
    with pytest.raises(ContractError):
        collect_segment(mdp, Model.zeros(2, 2), PlannerConfig(k=2, depth=1), 0, seed=0)


def test_collect_segment_deterministic():
    mdp = make_chain(4)
    model = Model.zeros(5, 2)
    cfg = PlannerConfig(k=4, depth=3, resample_period=2)
    a, tail_a = collect_segment(mdp, model, cfg, horizon=6, seed=31)
    b, tail_b = collect_segment(mdp, model, cfg, horizon=6, seed=31)
    assert [r.state for r in a] == [r.state for r in b]
    assert [r.action for r in a] == [r.action for r in b]
    assert tail_a == tail_b


def test_collect_segment_bootstraps_nonterminal_tail():
    mdp = make_absorbing_zero(2)
    model = Model.zeros(1, 2)
    model.v_table[0] = 0.7
    cfg = PlannerConfig(k=4, depth=2, sigma=1.0)  # value comes straight from the model
    records, tail = collect_segment(mdp, model, cfg, horizon=3, seed=0)
    assert len(records) == 3
    assert tail == pytest.approx(0.7)


@pytest.mark.parametrize(
    "mdp",
    [make_two_arm(), make_chain(3), make_absorbing_zero(3), make_gridworld(2, 2)],
)
def test_train_single_iteration_smoke(mdp):
    cfg = TrainConfig(
        planner=PlannerConfig(k=4, depth=2, sigma=0.5, inference_mode="message_passing"),
        loss=LossConfig(),
        horizon=4,
        buffer_capacity=64,
        batch_size=8,
        updates_per_iteration=2,
    )
    result = train(mdp, cfg, iterations=1, seed=0)
    assert result.greedy_returns.shape == (1,)
    assert np.isfinite(result.losses).all()


def test_train_zero_reward_env_stays_high_entropy():
    mdp = make_absorbing_zero(4)
    cfg = TrainConfig(
        planner=PlannerConfig(k=8, depth=3, inference_mode="message_passing", sigma=0.5),
        loss=LossConfig(c_ent=0.05, lr=0.2),
        horizon=6,
        buffer_capacity=128,
        batch_size=16,
        updates_per_iteration=4,
    )
    result = train(mdp, cfg, iterations=40, seed=1)
    pi = result.model.policy()[0]
    entropy = -(pi * np.log(pi)).sum()
    assert entropy >= 0.9 * np.log(4)


def test_train_is_seed_deterministic():
    mdp = make_chain(3)
    cfg = TrainConfig(
        planner=PlannerConfig(k=4, depth=2, sigma=0.5),
        loss=LossConfig(lr=0.1),
        horizon=4,
        buffer_capacity=64,
        batch_size=8,
        updates_per_iteration=2,
    )
    a = train(mdp, cfg, iterations=3, seed=7)
    b = train(mdp, cfg, iterations=3, seed=7)
    assert a.greedy_returns.tolist() == b.greedy_returns.tolist()
    assert (a.model.policy_logits == b.model.policy_logits).all()


def test_policy_return_trend_on_chain():
    # smoothed exact return of the stochastic policy trends upward over
    # a training run, within a 5%-of-optimal slack
    mdp = make_chain(5)
    cfg = TrainConfig(
        planner=PlannerConfig(
            k=4, depth=4, resample_period=3, alpha=0.1, temperature=0.1, sigma=0.5,
            proposal_mode="trust_region", inference_mode="message_passing",
            resample_mode="revived",
        ),
        loss=LossConfig(c_ent=0.03, gamma_outer=0.97, lr=0.2),
        horizon=16,
        buffer_capacity=256,
        batch_size=64,
        updates_per_iteration=16,
    )
    result = train(mdp, cfg, iterations=200, seed=2)
    window = 20
    kernel = np.ones(window) / window
    smoothed = np.convolve(result.policy_returns, kernel, mode="valid")
    slack = 0.05 * 1.0  # optimal return on this chain is 1
    assert (np.diff(smoothed) >= -slack).all()
    assert smoothed[-1] > smoothed[0]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = random_model(4, 3, seed=99)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, iteration=17, seed=123)
    loaded, iteration, seed = load_checkpoint(path)
    assert (loaded.policy_logits == model.policy_logits).all()
    assert (loaded.v_table == model.v_table).all()
    assert (loaded.q_table == model.q_table).all()
    assert (iteration, seed) == (17, 123)


def test_transition_record_validates_policy():
    with pytest.raises(ContractError):
        TransitionRecord(0, 0, 0.0, np.array([0.5, 0.4]), 0.0, False)
