import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disciplinebench import bidding_sim as bs
from disciplinebench import diagnostics as dg
from disciplinebench import policy_core as pc
from disciplinebench.market_sim import ConfigError

CFG = bs.BidConfig()


@pytest.fixture(scope="module")
def prior():
    traces = bs.bid_rollout(bs.ExpertBidder(), CFG, 300, seed=1)
    return bs.fit_bid_prior(traces, pc.FitConfig(max_epochs=5), seed=0).model


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        bs.BidConfig(variant="nope").validate()
    with pytest.raises(ConfigError):
        bs.BidConfig.from_dict({"bogus": 1})
    assert bs.BidConfig.from_dict(CFG.to_dict()) == CFG
    assert CFG.with_variant("tight_budget").effective().budget == 18.0


def test_empty_budget_forces_no_bid():
    nxt, rec = bs.bid_step(bs.BidState(3, 0.0, 0.9, 0.1), 1.5, np.random.default_rng(0))
    assert rec.bid == 0.0 and rec.spend == 0.0 and rec.value == 0.0 and not rec.won
    assert nxt.a_prev == bs.NO_BID


def test_affordability_clamps_to_largest_affordable_bid():
    assert list(bs.affordable_index([4, 4, 4, 1], [2.0, 1.0, 0.5, 0.3], CFG)) == [4, 2, 0, -1]
    assert bs.aggressive_policy(bs.BidState(0, 30.0, 0.5, 0.5)) == 1.50
    assert bs.aggressive_policy(bs.BidState(0, 0.8, 0.5, 0.5)) == 0.70


def test_win_probability_increases_with_bid_monte_carlo():
    rng = np.random.default_rng(2)
    n = 100_000
    wins = {}
    for bid in (0.45, 1.50):
        st_ = bs.BidBatch(0, np.full(n, 30.0), np.full(n, 0.5), np.full(n, 0.5), np.full(n, -1))
        _, _, won, _, _ = bs.bid_batch_step(st_, np.full(n, CFG.bid_grid.index(bid)), CFG, rng)
        wins[bid] = won.mean()
    se = np.sqrt(0.25 / n)
    assert wins[1.50] - wins[0.45] > 8 * se
    assert wins[0.45] == pytest.approx(bs.win_probability(0.45, 0.5, CFG), abs=5 * se)


@pytest.mark.parametrize("variant", bs.BID_VARIANTS)
def test_budget_conservation(variant):
    cfg = CFG.with_variant(variant)
    tr = bs.bid_rollout(bs.AggressiveBidder(), cfg, 200, seed=3)
    b0 = cfg.effective().budget
    assert np.all(tr.spend.sum(axis=1) <= b0 + 1e-9)
    assert np.all(tr.budget_before >= 0)
    end = tr.budget_before[:, -1] - tr.spend[:, -1]
    assert np.allclose(end, b0 - tr.spend.sum(axis=1))
    assert np.all(tr.spend[tr.effective < 0] == 0)


def test_on_pace_median_context_bids_middle_bucket():
    assert bs.expert_policy(bs.BidState(10, 30.0 * (1 - 10 / 50), 0.5, 0.5)) == 0.95
    assert bs.expert_policy(bs.BidState(0, 30.0, 0.5, 0.5)) == 0.95


def test_expert_reacts_to_pacing():
    behind = bs.expert_policy(bs.BidState(25, 29.0, 0.5, 0.5))   # underspent
    ahead = bs.expert_policy(bs.BidState(25, 5.0, 0.5, 0.5))     # overspent
    assert behind > 0.95 > ahead


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 49), st.floats(0, 30), st.floats(0, 30), st.floats(0, 1), st.floats(0, 1), st.integers(-1, 4))
def test_partial_policies_ignore_the_budget(t, b1, b2, u, c, a_prev):
    p = _PRIOR_CACHE.setdefault("p", pc.init_params((4, 8, 5), np.random.default_rng(0)))
    s1, s2 = bs.BidState(t, b1, u, c, a_prev), bs.BidState(t, b2, u, c, a_prev)
    assert bs.argmax_imitation(p, s1) == bs.argmax_imitation(p, s2)
    assert bs.traceprior_sampling(p, s1, np.random.default_rng(5)) == bs.traceprior_sampling(p, s2, np.random.default_rng(5))


_PRIOR_CACHE: dict = {}


def test_rollouts_are_deterministic(prior):
    a = bs.bid_rollout(bs.PriorBidder(prior, greedy=False), CFG, 50, seed=4)
    b = bs.bid_rollout(bs.PriorBidder(prior, greedy=False), CFG, 50, seed=4)
    assert np.array_equal(a.effective, b.effective) and np.array_equal(a.spend, b.spend)


def test_shares_exclude_no_bid_steps():
    tr = bs.bid_rollout(bs.AggressiveBidder(), CFG.with_variant("tight_budget"), 100, seed=5)
    assert np.any(tr.effective < 0)
    shares = tr.bid_shares()
    assert shares.sum() == pytest.approx(1.0)
    valid = tr.effective[tr.effective >= 0]
    assert np.allclose(shares, np.bincount(valid, minlength=5) / valid.size)


def test_expert_beats_aggressive_on_value_and_pacing():
    ex = bs.bid_rollout(bs.ExpertBidder(), CFG, 500, seed=6)
    ag = bs.bid_rollout(bs.AggressiveBidder(), CFG, 500, seed=6)
    assert ex.value_per_step() > ag.value_per_step()
    assert dg.pacing_gap(ex.cum_spend_fraction()) < 0.5 * dg.pacing_gap(ag.cum_spend_fraction())


def test_argmax_collapses_toward_the_modal_bucket(prior):
    ex = bs.bid_rollout(bs.ExpertBidder(), CFG, 300, seed=7).bid_shares()
    am = bs.bid_rollout(bs.PriorBidder(prior, greedy=True), CFG, 300, seed=7).bid_shares()
    assert am[2] > ex[2]


def test_prior_labels_are_requested_buckets():
    tr = bs.bid_rollout(bs.ExpertBidder(), CFG, 20, seed=8)
    obs = tr.observations()
    assert obs.shape == (20 * CFG.horizon, 4)
    assert np.all(tr.requested >= 0)
    # the budget never appears among the partial features
    assert np.allclose(obs[:, 1], tr.u.ravel()) and np.allclose(obs[:, 2], tr.c.ravel())


def test_off_grid_bid_index_rejected():
    bb = bs.init_bids(CFG, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        bs.bid_batch_step(bb, [0, 5, 1], CFG, np.random.default_rng(0))
