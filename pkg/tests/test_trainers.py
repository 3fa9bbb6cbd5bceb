from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disciplinebench import market_sim as ms
from disciplinebench import policy_core as pc
from disciplinebench import trainers as tr

CFG = ms.MarketConfig()
TINY = tr.TrainConfig(total_steps=2048, batch_steps=1024, hidden=(16, 16), prior_episodes=120, prior_rounds=2,
                      dagger_rounds=1, dagger_episodes=60, fit=pc.FitConfig(hidden=(16, 16), max_epochs=3))


@pytest.fixture(scope="module")
def prior():
    traces, _ = tr.collect_prior_traces(CFG, TINY, seed=1)
    return tr.fit_prior(traces, CFG, TINY, seed=1).model


@pytest.fixture(scope="module")
def buffer(prior):
    rng = np.random.default_rng(0)
    width = ms.regime_width("CA", CFG)
    actor = pc.init_params((width, 16, 16, 7), rng)
    critic = pc.init_params((width, 16, 16, 1), rng, out_scale=1.0)
    return actor, tr.collect(actor, critic, CFG, "CA", 20, seed=3, prior=prior)


def _same(a: pc.PolicyParams, b: pc.PolicyParams) -> bool:
    return a.sizes == b.sizes and np.array_equal(a.flat(), b.flat())


def test_config_validation():
    with pytest.raises(ValueError):
        replace(TINY, beta=-1).validate()
    with pytest.raises(ValueError):
        replace(TINY, gamma=0.99).validate()


def test_zero_coefficients_are_bit_identical_to_ppo(prior):
    base = tr.train_ppo(CFG, TINY, seed=5)
    kl0 = tr.train_trace_prior(CFG, prior, replace(TINY, beta=0.0), seed=5)
    aux0 = tr.train_ppo_bc_aux(CFG, 0.0, TINY, seed=5)
    assert _same(base.actor, kl0.actor) and _same(base.critic, kl0.critic)
    assert _same(base.actor, aux0.actor)


def test_training_is_reproducible(prior):
    a = tr.train_trace_prior(CFG, prior, TINY, seed=8)
    b = tr.train_trace_prior(CFG, prior, TINY, seed=8)
    assert _same(a.actor, b.actor)
    c = tr.train_ppo(CFG, TINY, seed=9)
    assert not _same(a.actor, c.actor)


def test_full_distribution_kl_differs_from_sampled_ce(buffer):
    actor, buf = buffer
    idx = np.arange(256)
    kl_loss, kl_grad, _ = tr.actor_loss_and_grad(actor, buf, idx, TINY, beta=1.0, alpha=0.0)
    ce_loss, ce_grad, _ = tr.actor_loss_and_grad(actor, buf, idx, TINY, beta=0.0, alpha=1.0)
    assert abs(kl_loss - ce_loss) > 1e-6
    assert not np.allclose(kl_grad.flat(), ce_grad.flat())


def test_buffer_advantages_are_normalized(buffer):
    _, buf = buffer
    assert abs(buf.advantages.mean()) < 1e-6
    assert abs(buf.advantages.std() - 1.0) < 1e-6
    # undiscounted returns-to-go: the first step's return is the episode reward
    H = CFG.horizon
    assert np.allclose(buf.returns[::H], buf.rewards.reshape(-1, H).sum(axis=1))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 500), st.integers(0, 2**31 - 1), st.floats(0.01, 1000))
def test_advantage_normalization_property(n, seed, scale):
    adv = tr.normalize_advantages(np.random.default_rng(seed).normal(3.0, scale, size=n))
    assert abs(adv.mean()) < 1e-6
    assert abs(adv.std() - 1.0) < 1e-6


def test_constant_advantages_are_left_centered():
    assert np.all(tr.normalize_advantages(np.full(5, 2.0)) == 0.0)


def test_buffer_check_catches_length_mismatch(buffer):
    _, buf = buffer
    bad = replace(buf, logp=buf.logp[:-1])
    with pytest.raises(ValueError):
        bad.check()


def test_ctde_critic_sees_one_extra_input_and_actor_stays_deployable():
    res = tr.train_ctde_ppo(CFG, replace(TINY, total_steps=1024), seed=2)
    width = ms.regime_width("CA", CFG)
    assert res.actor.sizes[0] == width
    assert res.critic.sizes[0] == width + 1
    # the deployed actor's input is the CA observation, which ignores q_B
    s = ms.init_episode(CFG, 0)
    hidden = ms.SimState(s.tau, s.q_a, 3, s.m, s.h_a, s.h_b, s.history_a, s.history_b)
    assert np.array_equal(pc.forward(res.actor, ms.observe(s, "CA")), pc.forward(res.actor, ms.observe(hidden, "CA")))


def test_critic_features_append_rival_inventory():
    traces = ms.rollout(ms.FixedRMPolicy(), ms.FixedRMPolicy(), CFG, 3, seed=0)
    plain = tr.critic_features(traces, "CA", ctde=False)
    full = tr.critic_features(traces, "CA", ctde=True)
    assert np.array_equal(full[:, :-1], plain)
    assert np.allclose(full[:, -1], traces.q[:, :, 1].ravel() / CFG.capacity_b)


def test_huge_beta_pins_the_policy_to_the_prior(prior):
    res = tr.train_trace_prior(CFG, prior, replace(TINY, beta=1e4), seed=4)
    assert all(row["kl"] <= 0.01 for row in res.curve)


def test_kl_requires_a_prior():
    with pytest.raises(ValueError):
        tr._ppo(CFG, TINY, 0, beta=1.0, prior=None)


def test_non_finite_parameters_raise(prior):
    broken = prior.copy()
    broken.weights[0][0, 0] = np.nan
    with pytest.raises(tr.TrainingDivergence):
        tr.train_bc_warm_start(CFG, broken, TINY, seed=0)


def test_warm_start_shape_is_checked():
    wrong = pc.init_params((3, 16, 16, 7), np.random.default_rng(0))
    with pytest.raises(ValueError):
        tr.train_bc_warm_start(CFG, wrong, TINY, seed=0)


def test_prior_collection_rounds():
    traces, nlls = tr.collect_prior_traces(CFG, replace(TINY, prior_episodes=90, prior_rounds=3), seed=2)
    assert len(traces) == 90
    assert len(nlls) == 2
    assert sorted(traces.episode) == list(range(90))


def test_point_mass_prior_gives_deterministic_bc_policy():
    width = ms.regime_width("CA", CFG)
    params = pc.zero_params((width, 4, 7))
    params.biases[-1][:] = -50.0
    params.biases[-1][3] = 50.0
    traces = tr.evaluate(tr.make_bc_policy(params), CFG, 20, seed=0)
    assert np.all(traces.idx[:, :, 0] == 3)


def test_student_uses_only_its_own_history(prior):
    teacher = tr.train_trace_prior(CFG, prior, TINY, seed=6).actor
    res = tr.train_student(teacher, CFG, TINY, seed=6)
    assert res.regime == "NC"
    assert res.student.sizes[0] == ms.regime_width("NC", CFG)
    assert len(res.round_nll) == TINY.dagger_rounds + 1
    assert 0 <= res.selected_round <= TINY.dagger_rounds
    # student features are unchanged when Hotel B's prices and inventory are scrambled
    traces = ms.rollout(res.policy(), ms.FixedRMPolicy(), CFG, 5, seed=1)
    scrambled = replace(traces, idx=traces.idx.copy(), q=traces.q.copy())
    scrambled.idx[:, :, 1] = 6
    scrambled.q[:, :, 1] = 0
    assert np.array_equal(traces.features("NC", 0), scrambled.features("NC", 0))
    with pytest.raises(ValueError):
        tr.train_student(teacher, CFG, TINY, seed=6, student_regime="CA")


def test_zero_correction_rounds_is_plain_bc(prior):
    teacher = tr.train_trace_prior(CFG, prior, TINY, seed=6).actor
    res = tr.train_student(teacher, CFG, replace(TINY, dagger_rounds=0), seed=6)
    assert res.selected_round == 0 and len(res.round_nll) == 1


def test_seat_swap_negates_the_gap():
    rng = np.random.default_rng(11)
    nc = pc.init_params((ms.regime_width("NC", CFG), 8, 7), rng)
    ca = pc.init_params((ms.regime_width("CA", CFG), 8, 7), rng)
    res = {m.label: m for m in tr.run_deployment_matrix({"NC": [nc], "CA": [ca]}, CFG, [3], n_episodes=1500)}
    assert set(res) == {"NC vs NC", "CA vs CA", "NC vs CA", "CA vs NC"}
    a, b = res["NC vs CA"], res["CA vs NC"]
    # per-episode RevPAR sd is about 15-20, so the gap SE is well under 1.5 here
    assert abs(a.gap[0] + b.gap[0]) < 3.0
    with pytest.raises(ValueError):
        tr.run_deployment_matrix({"NC": [nc, nc], "CA": [ca]}, CFG, [1, 2])
