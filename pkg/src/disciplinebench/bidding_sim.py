"""Hidden-budget bidding: a second partially observed economic task.

A campaign bids on ``T`` sequential opportunities from budget ``B0``. The
full state is (t, b, u, c, a_prev); partial bidders see (t, u, c, a_prev)
and never the remaining budget. Value per win is the opportunity quality u.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import policy_core as pc

BID_VARIANTS = ("default", "tight_budget", "high_competition", "volatile_quality")
NO_BID = -1


@dataclass(frozen=True)
class BidConfig:
    horizon: int = 50
    budget: float = 30.0
    bid_grid: tuple[float, ...] = (0.45, 0.70, 0.95, 1.20, 1.50)
    variant: str = "default"
    quality_beta: tuple[float, float] = (2.0, 2.0)
    competition_beta: tuple[float, float] = (2.0, 2.0)
    win_slope: float = 6.0
    win_offset: float = 0.4
    win_competition: float = 0.8
    # expert pacing rule: idx = 2 + round(qg*(u - 1/2) - pg*d + cg*(c - 1/2) + tilt)
    expert_quality_gain: float = 2.5
    expert_pace_gain: float = 25.0
    expert_competition_gain: float = -2.0
    expert_tilt: float = -0.15

    def __post_init__(self):
        object.__setattr__(self, "bid_grid", tuple(float(b) for b in self.bid_grid))
        object.__setattr__(self, "quality_beta", tuple(float(v) for v in self.quality_beta))
        object.__setattr__(self, "competition_beta", tuple(float(v) for v in self.competition_beta))

    def validate(self) -> "BidConfig":
        from .market_sim import ConfigError

        grid = np.asarray(self.bid_grid)
        if len(grid) < 2 or np.any(np.diff(grid) <= 0):
            raise ConfigError("bid grid must be strictly increasing")
        if self.budget <= 0:
            raise ConfigError("initial budget must be positive")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.variant not in BID_VARIANTS:
            raise ConfigError(f"unknown bidding variant {self.variant!r}")
        if min(self.quality_beta + self.competition_beta) <= 0:
            raise ConfigError("Beta parameters must be positive")
        return self

    @property
    def n_bids(self) -> int:
        return len(self.bid_grid)

    def effective(self) -> "BidConfig":
        """The config with the variant's one-knob change applied."""
        if self.variant == "tight_budget":
            return replace(self, budget=18.0)
        if self.variant == "high_competition":
            return replace(self, competition_beta=(3.0, 1.5))
        if self.variant == "volatile_quality":
            return replace(self, quality_beta=(0.7, 0.7))
        return self

    def with_variant(self, variant: str) -> "BidConfig":
        return replace(self, variant=variant).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BidConfig":
        from .market_sim import ConfigError

        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown bidding config keys: {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class BidState:
    t: int
    b: float
    u: float
    c: float
    a_prev: int = NO_BID


@dataclass(frozen=True)
class BidStepRecord:
    bid: float
    won: bool
    spend: float
    value: float
    budget_before: float


@dataclass
class BidBatch:
    t: int
    b: np.ndarray       # (n,) remaining budget
    u: np.ndarray
    c: np.ndarray
    a_prev: np.ndarray  # (n,) previous effective bid index, NO_BID if none

    @property
    def n(self) -> int:
        return len(self.b)


def draw_context(config: BidConfig, n: int, rng: np.random.Generator):
    cfg = config.effective()
    u = rng.beta(*cfg.quality_beta, size=n)
    c = rng.beta(*cfg.competition_beta, size=n)
    return u, c


def init_bids(config: BidConfig, n: int, rng: np.random.Generator) -> BidBatch:
    cfg = config.effective()
    u, c = draw_context(config, n, rng)
    return BidBatch(0, np.full(n, cfg.budget), u, c, np.full(n, NO_BID, dtype=np.int64))


def win_probability(bid, c, config: BidConfig) -> np.ndarray:
    x = config.win_slope * (np.asarray(bid, dtype=float) - (config.win_offset + config.win_competition * np.asarray(c)))
    return 1.0 / (1.0 + np.exp(-x))


def affordable_index(idx, budget, config: BidConfig) -> np.ndarray:
    """Clamp requested bids to the largest affordable grid value, NO_BID if none."""
    grid = np.asarray(config.bid_grid)
    idx = np.asarray(idx, dtype=np.int64)
    # largest k with grid[k] <= budget; -1 when even the lowest bid is too much
    cap = np.searchsorted(grid, np.asarray(budget) + 1e-12, side="right") - 1
    return np.minimum(idx, cap)


def bid_batch_step(bb: BidBatch, idx, config: BidConfig, rng: np.random.Generator):
    """Advance every episode one opportunity. Returns (next batch, effective
    index, win flags, spend, value)."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= config.n_bids):
        raise ValueError("bid off the grid")
    eff = affordable_index(idx, bb.b, config)
    grid = np.asarray(config.bid_grid)
    bid = np.where(eff >= 0, grid[np.maximum(eff, 0)], 0.0)
    draw = rng.random(bb.n)
    won = (eff >= 0) & (draw < win_probability(bid, bb.c, config))
    spend = np.where(won, bid, 0.0)
    value = np.where(won, bb.u, 0.0)
    b_next = np.maximum(bb.b - spend, 0.0)
    u, c = draw_context(config, bb.n, rng)
    nxt = BidBatch(bb.t + 1, b_next, u, c, eff)
    return nxt, eff, won, spend, value


def bid_step(state: BidState, bid: float, rng: np.random.Generator,
             config: BidConfig | None = None) -> tuple[BidState, BidStepRecord]:
    config = config or BidConfig()
    bb = BidBatch(state.t, np.array([state.b]), np.array([state.u]), np.array([state.c]),
                  np.array([state.a_prev]))
    idx = int(np.argmin(np.abs(np.asarray(config.bid_grid) - bid)))
    nxt, eff, won, spend, value = bid_batch_step(bb, [idx], config, rng)
    eff_bid = config.bid_grid[int(eff[0])] if eff[0] >= 0 else 0.0
    rec = BidStepRecord(eff_bid, bool(won[0]), float(spend[0]), float(value[0]), state.b)
    return BidState(nxt.t, float(nxt.b[0]), float(nxt.u[0]), float(nxt.c[0]), int(nxt.a_prev[0])), rec


# --- policies ------------------------------------------------------------

def partial_observation(bb: BidBatch, config: BidConfig) -> np.ndarray:
    """(t/T, u, c, a_prev) with the previous bid scaled to [0,1], -1 if none."""
    grid = np.asarray(config.bid_grid)
    prev = np.where(bb.a_prev >= 0,
                    (grid[np.maximum(bb.a_prev, 0)] - grid[0]) / (grid[-1] - grid[0]), -1.0)
    return np.column_stack([np.full(bb.n, bb.t / config.horizon), bb.u, bb.c, prev])


def expert_index(t, b, u, c, config: BidConfig) -> np.ndarray:
    """Full-state pacing rule; needs the hidden budget through d."""
    cfg = config.effective()
    d = (cfg.budget - np.asarray(b)) / cfg.budget - np.asarray(t) / cfg.horizon
    z = (cfg.expert_quality_gain * (np.asarray(u) - 0.5) - cfg.expert_pace_gain * d
         + cfg.expert_competition_gain * (np.asarray(c) - 0.5) + cfg.expert_tilt)
    mid = (cfg.n_bids - 1) // 2
    return np.clip(mid + np.round(z).astype(np.int64), 0, cfg.n_bids - 1)


class ExpertBidder:
    name = "expert"

    def act(self, bb: BidBatch, config: BidConfig, rng) -> np.ndarray:
        return expert_index(bb.t, bb.b, bb.u, bb.c, config)


class AggressiveBidder:
    """Outcome-only: always the top bucket (affordability clamps it later)."""

    name = "aggressive"

    def act(self, bb, config, rng):
        return np.full(bb.n, config.n_bids - 1, dtype=np.int64)


class PriorBidder:
    """Partial-observation imitation of the expert from a fitted prior."""

    def __init__(self, prior: pc.PolicyParams, greedy: bool):
        self.prior = prior
        self.greedy = greedy
        self.name = "argmax" if greedy else "sampling"

    def act(self, bb, config, rng):
        probs = pc.forward(self.prior, partial_observation(bb, config))
        draws = pc.sample(probs, rng)
        return pc.argmax(probs) if self.greedy else draws


def expert_policy(state: BidState, config: BidConfig | None = None) -> float:
    config = config or BidConfig()
    return config.bid_grid[int(expert_index(state.t, state.b, state.u, state.c, config))]


def aggressive_policy(state: BidState, config: BidConfig | None = None) -> float:
    config = config or BidConfig()
    k = int(affordable_index(config.n_bids - 1, state.b, config))
    return config.bid_grid[k] if k >= 0 else 0.0


def _single_obs(state: BidState, config: BidConfig) -> np.ndarray:
    bb = BidBatch(state.t, np.array([state.b]), np.array([state.u]), np.array([state.c]),
                  np.array([state.a_prev]))
    return partial_observation(bb, config)


def argmax_imitation(prior: pc.PolicyParams, state: BidState, config: BidConfig | None = None) -> float:
    config = config or BidConfig()
    return config.bid_grid[int(pc.argmax(pc.forward(prior, _single_obs(state, config)))[0])]


def traceprior_sampling(prior: pc.PolicyParams, state: BidState, rng: np.random.Generator,
                        config: BidConfig | None = None) -> float:
    config = config or BidConfig()
    return config.bid_grid[int(pc.sample(pc.forward(prior, _single_obs(state, config)), rng)[0])]


# --- traces --------------------------------------------------------------

@dataclass
class BidTraceSet:
    """Columnar bidding traces, arrays of shape (n, T)."""

    config: BidConfig
    seed: int
    t_obs: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    a_prev: np.ndarray = field(repr=False)
    requested: np.ndarray = field(repr=False)
    effective: np.ndarray = field(repr=False)
    won: np.ndarray = field(repr=False)
    spend: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)
    budget_before: np.ndarray = field(repr=False)
    domain: str = "bidding"

    def __len__(self) -> int:
        return self.spend.shape[0]

    def observations(self) -> np.ndarray:
        cfg = self.config
        bb = BidBatch(0, np.zeros(self.u.size), self.u.ravel(), self.c.ravel(), self.a_prev.ravel())
        obs = partial_observation(bb, cfg)
        obs[:, 0] = self.t_obs.ravel() / cfg.horizon
        return obs

    def cum_spend_fraction(self) -> np.ndarray:
        return np.cumsum(self.spend, axis=1) / self.config.effective().budget

    def value_per_step(self) -> float:
        return float(self.value.sum(axis=1).mean() / self.config.horizon)

    def bid_shares(self) -> np.ndarray:
        """Shares of effective bids over the grid; no-bid steps are left out."""
        eff = self.effective[self.effective >= 0]
        counts = np.bincount(eff, minlength=self.config.n_bids).astype(float)
        return counts / max(counts.sum(), 1.0)


def bid_rollout(policy, config: BidConfig, n_episodes: int, seed: int) -> BidTraceSet:
    config.validate()
    env_rng, act_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), 0xB1D]).spawn(2))
    T = config.horizon
    shape = (n_episodes, T)
    cols = {k: np.zeros(shape, dtype=np.int64) for k in ("t_obs", "a_prev", "requested", "effective")}
    cols.update({k: np.zeros(shape) for k in ("u", "c", "spend", "value", "budget_before")})
    cols["won"] = np.zeros(shape, dtype=bool)
    bb = init_bids(config, n_episodes, env_rng)
    for t in range(T):
        req = np.asarray(policy.act(bb, config, act_rng), dtype=np.int64)
        cols["t_obs"][:, t] = t
        cols["u"][:, t], cols["c"][:, t], cols["a_prev"][:, t] = bb.u, bb.c, bb.a_prev
        cols["budget_before"][:, t] = bb.b
        cols["requested"][:, t] = req
        bb, eff, won, spend, value = bid_batch_step(bb, req, config, env_rng)
        cols["effective"][:, t], cols["won"][:, t] = eff, won
        cols["spend"][:, t], cols["value"][:, t] = spend, value
    return BidTraceSet(config, int(seed), **cols)


def fit_bid_prior(traces: BidTraceSet, fit: pc.FitConfig | None = None, seed: int = 0) -> pc.FitResult:
    """Supervised P(expert bucket | partial observation); labels are the
    buckets the expert asked for."""
    return pc.fit_classifier(traces.observations(), traces.requested.ravel(), traces.config.n_bids,
                             fit, seed=seed)
