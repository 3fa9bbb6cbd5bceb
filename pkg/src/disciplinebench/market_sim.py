"""Two-hotel finite-horizon selling POMDP.

Hotel A is the learner, Hotel B runs a deterministic Fixed RM rule driven by
its own remaining inventory, time and market condition. Guests arrive as a
Poisson stream per step and choose A, B or the outside option by
multinomial logit; a sold-out hotel drops out of the choice set.

The engine is batched: a :class:`BatchState` carries ``n`` independent
episodes side by side. The single-episode helpers (``init_episode``,
``demand_step``, ``advance``, ``observe`` ...) wrap the batched code with
``n == 1`` so there is exactly one implementation of the dynamics.

Sides are indexed 0 (Hotel A) and 1 (Hotel B). Prices are carried as grid
indices internally; ``PAD`` marks a missing lag.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import policy_core as pc

PAD = -1
PAD_VALUE = -1.0
CONDITIONS = ("low", "mid", "high")
VARIANTS = ("default", "low_demand", "high_demand", "high_rate_rm", "high_occ_rm")
OBJECTIVES = ("revpar", "margin")
REGIMES = ("NC", "CA", "teacher", "student", "oracle")

_VARIANT_DEMAND_SCALE = {"low_demand": 0.75, "high_demand": 1.30}
_VARIANT_FLOOR_SHIFT = {"high_rate_rm": 1, "high_occ_rm": -1}


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


@dataclass(frozen=True)
class MarketConfig:
    horizon: int = 30
    capacity_a: int = 100
    capacity_b: int = 100
    price_grid: tuple[float, ...] = (100.0, 120.0, 140.0, 160.0, 180.0, 200.0, 220.0)
    variant: str = "default"
    # demand: Poisson arrivals per step by market condition, logit choice
    arrival_rates: tuple[float, float, float] = (4.0, 5.5, 7.0)
    condition_probs: tuple[float, float, float] = (0.3, 0.4, 0.3)
    utility_intercept: float = 1.2
    price_sensitivity: float = 1.5
    price_anchor: float = 100.0
    objective: str = "revpar"
    cost_anchor: float = 100.0
    lag_depth: int = 3
    # booking pace
    target_occupancy: float = 0.77
    pace_cap: float = 3.0
    # Fixed RM rule
    rm_base_index: tuple[int, int, int] = (0, 1, 2)
    rm_floor_index: tuple[int, int, int] = (0, 1, 1)
    rm_gain: float = 20.0
    rm_checkpoint: int = 5
    rm_checkpoint_phase: float = 0.5

    def __post_init__(self):
        # normalize sequences so configs loaded from YAML/JSON hash identically
        for name in ("price_grid", "arrival_rates", "condition_probs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("rm_base_index", "rm_floor_index"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self) -> "MarketConfig":
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.capacity_a < 1 or self.capacity_b < 1:
            raise ConfigError("capacities must be >= 1")
        g = self.price_grid
        if len(g) < 2 or any(b <= a for a, b in zip(g[:-1], g[1:])):
            raise ConfigError("price_grid must be strictly increasing with >= 2 entries")
        if len(self.arrival_rates) != 3 or min(self.arrival_rates) <= 0:
            raise ConfigError("arrival_rates must be three positive rates (low, mid, high)")
        p = self.condition_probs
        if len(p) != 3 or min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
            raise ConfigError("condition_probs must be a distribution over (low, mid, high)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.lag_depth < 1:
            raise ConfigError("lag_depth must be >= 1")
        if not 0 < self.target_occupancy <= 1:
            raise ConfigError("target_occupancy must lie in (0, 1]")
        top = len(g) - 1
        for name in ("rm_base_index", "rm_floor_index"):
            idx = getattr(self, name)
            if len(idx) != 3 or min(idx) < 0 or max(idx) > top:
                raise ConfigError(f"{name} must hold three grid indices")
        if self.rm_checkpoint < 1:
            raise ConfigError("rm_checkpoint must be >= 1")
        return self

    # --- variant-adjusted calibration ---
    @property
    def n_prices(self) -> int:
        return len(self.price_grid)

    def effective_arrival_rates(self) -> np.ndarray:
        return np.asarray(self.arrival_rates) * _VARIANT_DEMAND_SCALE.get(self.variant, 1.0)

    def effective_floor(self) -> np.ndarray:
        shift = _VARIANT_FLOOR_SHIFT.get(self.variant, 0)
        return np.clip(np.asarray(self.rm_floor_index) + shift, 0, self.n_prices - 1)

    def capacity(self, side: int) -> int:
        return self.capacity_a if side == 0 else self.capacity_b

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "MarketConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown market config keys: {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        try:
            cfg = cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def fingerprint(self) -> str:
        return fingerprint_of(self.to_dict())

    def with_variant(self, variant: str) -> "MarketConfig":
        return replace(self, variant=variant).validate()


def fingerprint_of(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- state ----------------------------------------------------------------

@dataclass
class BatchState:
    """``n`` episodes at the same step. Arrays are indexed [episode, side]."""

    tau: int
    q: np.ndarray        # (n, 2) remaining rooms
    sold: np.ndarray     # (n, 2) cumulative rooms sold
    m: np.ndarray        # (n,) market condition index
    h: np.ndarray        # (n, 2) booking-pace ratio
    hist: np.ndarray     # (n, 2, L) last-L price indices, newest first, PAD if missing

    @property
    def n(self) -> int:
        return len(self.m)


@dataclass(frozen=True)
class SimState:
    tau: int
    q_a: int
    q_b: int
    m: int
    h_a: float
    h_b: float
    history_a: tuple[int, ...]
    history_b: tuple[int, ...]

    @classmethod
    def from_batch(cls, bs: BatchState, i: int = 0) -> "SimState":
        return cls(int(bs.tau), int(bs.q[i, 0]), int(bs.q[i, 1]), int(bs.m[i]),
                   float(bs.h[i, 0]), float(bs.h[i, 1]),
                   tuple(int(v) for v in bs.hist[i, 0]), tuple(int(v) for v in bs.hist[i, 1]))

    def to_batch(self, config: MarketConfig) -> BatchState:
        sold = np.array([[config.capacity_a - self.q_a, config.capacity_b - self.q_b]])
        return BatchState(
            tau=self.tau,
            q=np.array([[self.q_a, self.q_b]]),
            sold=sold,
            m=np.array([self.m]),
            h=np.array([[self.h_a, self.h_b]], dtype=float),
            hist=np.array([[self.history_a, self.history_b]], dtype=int),
        )


def init_batch(config: MarketConfig, n: int, rng: np.random.Generator) -> BatchState:
    L = config.lag_depth
    m = rng.choice(3, size=n, p=np.asarray(config.condition_probs))
    q = np.tile([config.capacity_a, config.capacity_b], (n, 1)).astype(np.int64)
    return BatchState(
        tau=config.horizon,
        q=q,
        sold=np.zeros((n, 2), dtype=np.int64),
        m=m.astype(np.int64),
        h=np.ones((n, 2)),
        hist=np.full((n, 2, L), PAD, dtype=np.int64),
    )


def init_episode(config: MarketConfig, seed: int) -> SimState:
    config.validate()
    return SimState.from_batch(init_batch(config, 1, np.random.default_rng(seed)))


# --- Fixed RM ------------------------------------------------------------

def fixed_rm_index(tau, q, m, config: MarketConfig, capacity: int | None = None) -> np.ndarray:
    """Grid index chosen by the Fixed RM rule.

    The pace target is re-read at booking checkpoints of ``rm_checkpoint``
    steps. Selling ahead of the checkpoint target raises the index, lagging
    lowers it, never below the market-condition floor.
    """
    cap = config.capacity_b if capacity is None else capacity
    H = config.horizon
    C = config.rm_checkpoint
    elapsed_steps = H - np.asarray(tau)
    block = elapsed_steps // C
    checkpoint = np.minimum((block + config.rm_checkpoint_phase) * C / H, 1.0)
    sellthrough = (cap - np.asarray(q)) / cap
    deviation = sellthrough - config.target_occupancy * checkpoint
    m = np.asarray(m)
    raw = np.asarray(config.rm_base_index)[m] + np.round(config.rm_gain * deviation).astype(np.int64)
    return np.clip(raw, config.effective_floor()[m], config.n_prices - 1)


def fixed_rm_price(state: SimState, config: MarketConfig) -> float:
    """Hotel B's price for a single state (pure in tau, q_B, m; h_B follows)."""
    idx = fixed_rm_index(state.tau, state.q_b, state.m, config)
    return config.price_grid[int(idx)]


# --- demand --------------------------------------------------------------

def choice_weights(idx, config: MarketConfig) -> np.ndarray:
    price = np.asarray(config.price_grid)[idx]
    u = config.utility_intercept - config.price_sensitivity * (price - config.price_anchor) / 100.0
    return np.exp(u)


def demand_batch(q: np.ndarray, idx_a, idx_b, m, config: MarketConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Rooms sold per hotel this step, shape (n, 2).

    Arrivals are processed one at a time; stream usage depends only on the
    arrival counts, so two policies facing the same seed see the same guests.
    """
    n = len(m)
    arrivals = rng.poisson(config.effective_arrival_rates()[np.asarray(m)])
    wa = choice_weights(idx_a, config)
    wb = choice_weights(idx_b, config)
    y = np.zeros((n, 2), dtype=np.int64)
    rem_a = q[:, 0].copy()
    rem_b = q[:, 1].copy()
    for k in range(int(arrivals.max(initial=0))):
        u = rng.random(n)
        active = arrivals > k
        ea = np.where(rem_a > 0, wa, 0.0)
        eb = np.where(rem_b > 0, wb, 0.0)
        x = u * (1.0 + ea + eb)
        buy_a = active & (x < ea)
        buy_b = active & (x >= ea) & (x < ea + eb)
        y[:, 0] += buy_a
        y[:, 1] += buy_b
        rem_a -= buy_a
        rem_b -= buy_b
    return y


def demand_step(state: SimState, p_a: float, p_b: float, rng: np.random.Generator,
                config: MarketConfig | None = None) -> tuple[int, int]:
    config = config or MarketConfig()
    ia, ib = price_index(p_a, config), price_index(p_b, config)
    bs = state.to_batch(config)
    y = demand_batch(bs.q, np.array([ia]), np.array([ib]), bs.m, config, rng)
    return int(y[0, 0]), int(y[0, 1])


def price_index(price: float, config: MarketConfig) -> int:
    grid = config.price_grid
    for i, p in enumerate(grid):
        if abs(p - price) < 1e-9:
            return i
    raise ValueError(f"price {price} is not on the grid {grid}")


# --- transition ----------------------------------------------------------

def pace_ratio(sold, capacity, tau, config: MarketConfig) -> np.ndarray:
    elapsed = (config.horizon - tau) / config.horizon
    if elapsed <= 0:
        return np.ones(np.shape(sold))
    h = np.asarray(sold) / (capacity * elapsed * config.target_occupancy)
    return np.clip(h, 0.0, config.pace_cap)


def advance_batch(bs: BatchState, idx_a, idx_b, y: np.ndarray, config: MarketConfig) -> BatchState:
    if np.any(y < 0) or np.any(y > bs.q):
        raise ValueError("infeasible sales: exceed remaining inventory")
    if bs.tau <= 0:
        raise ValueError("episode already finished")
    q = bs.q - y
    sold = bs.sold + y
    tau = bs.tau - 1
    caps = np.array([config.capacity_a, config.capacity_b])
    h = np.column_stack([pace_ratio(sold[:, s], caps[s], tau, config) for s in (0, 1)])
    new = np.array(np.column_stack([idx_a, idx_b]), dtype=np.int64)
    hist = np.concatenate([new[:, :, None], bs.hist[:, :, :-1]], axis=2)
    return BatchState(tau, q, sold, bs.m.copy(), h, hist)


def advance(state: SimState, p_a: float, p_b: float, y_a: int, y_b: int,
            config: MarketConfig | None = None) -> SimState:
    config = config or MarketConfig()
    bs = state.to_batch(config)
    out = advance_batch(bs, [price_index(p_a, config)], [price_index(p_b, config)],
                        np.array([[y_a, y_b]]), config)
    return SimState.from_batch(out)


# --- observations --------------------------------------------------------

def regime_width(regime: str, config: MarketConfig) -> int:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    return 4 + config.lag_depth + (1 if regime == "oracle" else 0)


def encode_price_index(idx, config: MarketConfig) -> np.ndarray:
    grid = np.asarray(config.price_grid)
    idx = np.asarray(idx)
    span = grid[-1] - grid[0]
    val = (grid[np.clip(idx, 0, None)] - grid[0]) / span
    return np.where(idx == PAD, PAD_VALUE, val)


def observe_batch(bs: BatchState, regime: str, config: MarketConfig, side: int = 0) -> np.ndarray:
    """Observation rows for every episode, from ``side``'s point of view.

    NC/student: own state + own last-L prices. CA/teacher: own state + rival
    last-L prices. oracle: CA plus the rival's remaining-inventory share.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    own, rival = side, 1 - side
    n = bs.n
    cols = [
        np.full(n, bs.tau / config.horizon),
        bs.q[:, own] / config.capacity(own),
        bs.m / 2.0,
        bs.h[:, own],
    ]
    lag_side = own if regime in ("NC", "student") else rival
    lags = encode_price_index(bs.hist[:, lag_side, :], config)
    obs = np.column_stack(cols + [lags])
    if regime == "oracle":
        obs = np.column_stack([obs, bs.q[:, rival] / config.capacity(rival)])
    return obs


def observe(state: SimState, regime: str, config: MarketConfig | None = None, side: int = 0) -> np.ndarray:
    config = config or MarketConfig()
    return observe_batch(state.to_batch(config), regime, config, side)[0]


# --- reward --------------------------------------------------------------

def reward(p_a, y_a, config: MarketConfig, capacity: int | None = None):
    cap = config.capacity_a if capacity is None else capacity
    p = np.asarray(p_a, dtype=float)
    if config.objective == "margin":
        return (p - config.cost_anchor) * np.asarray(y_a) / cap
    return p * np.asarray(y_a) / cap


# --- policies ------------------------------------------------------------

class PricingPolicy(Protocol):
    def act(self, bs: BatchState, side: int, config: MarketConfig,
            rng: np.random.Generator) -> np.ndarray: ...


class FixedRMPolicy:
    """The Fixed RM rule applied to the acting hotel's own inventory."""

    name = "fixed_rm"

    def act(self, bs, side, config, rng):
        return fixed_rm_index(bs.tau, bs.q[:, side], bs.m, config, capacity=config.capacity(side))


class UniformPolicy:
    name = "uniform"

    def act(self, bs, side, config, rng):
        return rng.integers(0, config.n_prices, size=bs.n)


class NetworkPolicy:
    """Samples (or takes the mode of) a softmax network on one regime."""

    def __init__(self, params: pc.PolicyParams, regime: str, greedy: bool = False, name: str = "network"):
        self.params = params
        self.regime = regime
        self.greedy = greedy
        self.name = name

    def distribution(self, bs, side, config):
        return pc.forward(self.params, observe_batch(bs, self.regime, config, side))

    def act(self, bs, side, config, rng):
        probs = self.distribution(bs, side, config)
        # draw even when greedy so stream usage does not depend on the mode
        draws = pc.sample(probs, rng)
        return pc.argmax(probs) if self.greedy else draws


# --- traces --------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    t: int
    p_a: float
    p_b: float
    y_a: int
    y_b: int
    r_a: float
    state: SimState


@dataclass(frozen=True)
class EpisodeTrace:
    config_fingerprint: str
    seed: int
    episode: int
    steps: tuple[StepRecord, ...]
    terminal_q_a: int
    terminal_q_b: int


STEP_ARRAYS = ("q", "h", "idx", "y", "r")


@dataclass
class TraceSet:
    """Columnar store of pricing episodes; iterate to get :class:`EpisodeTrace`.

    Per-step arrays have shape (n, H) or (n, H, 2) for the two sides; states
    are recorded before the step's action.
    """

    config: MarketConfig
    seed: np.ndarray      # (n,) rollout seed for each episode
    episode: np.ndarray   # (n,) episode index within its rollout
    m: np.ndarray         # (n,)
    q: np.ndarray         # (n, H, 2)
    h: np.ndarray         # (n, H, 2)
    idx: np.ndarray       # (n, H, 2) price indices
    y: np.ndarray         # (n, H, 2)
    r: np.ndarray         # (n, H, 2) per-side reward under config.objective
    terminal_q: np.ndarray  # (n, 2)
    domain: str = "pricing"

    def __len__(self) -> int:
        return len(self.m)

    @property
    def horizon(self) -> int:
        return self.q.shape[1]

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def prices(self, side: int) -> np.ndarray:
        return np.asarray(self.config.price_grid)[self.idx[:, :, side]]

    def lag_indices(self, side: int) -> np.ndarray:
        """(n, H, L) indices of ``side``'s previous prices, PAD before t=0."""
        n, H = self.idx.shape[:2]
        L = self.config.lag_depth
        out = np.full((n, H, L), PAD, dtype=np.int64)
        for k in range(1, min(L, H - 1) + 1):
            out[:, k:, k - 1] = self.idx[:, :-k, side]
        return out

    def features(self, regime: str, side: int = 0) -> np.ndarray:
        """Observations of every recorded step, flattened to (n*H, width)."""
        cfg = self.config
        own, rival = side, 1 - side
        n, H = self.idx.shape[:2]
        tau = cfg.horizon - np.arange(H)
        cols = [
            np.broadcast_to(tau / cfg.horizon, (n, H)),
            self.q[:, :, own] / cfg.capacity(own),
            np.broadcast_to(self.m[:, None] / 2.0, (n, H)),
            self.h[:, :, own],
        ]
        lag_side = own if regime in ("NC", "student") else rival
        lags = encode_price_index(self.lag_indices(lag_side), cfg)
        parts = [np.stack(cols, axis=2), lags]
        if regime == "oracle":
            parts.append((self.q[:, :, rival] / cfg.capacity(rival))[:, :, None])
        elif regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}")
        return np.concatenate(parts, axis=2).reshape(n * H, -1)

    def labels(self, side: int) -> np.ndarray:
        return self.idx[:, :, side].reshape(-1)

    def subset(self, mask) -> "TraceSet":
        mask = np.asarray(mask)
        return TraceSet(self.config, self.seed[mask], self.episode[mask], self.m[mask], self.q[mask],
                        self.h[mask], self.idx[mask], self.y[mask], self.r[mask],
                        self.terminal_q[mask], self.domain)

    @classmethod
    def concat(cls, sets: Sequence["TraceSet"]) -> "TraceSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        cfg = sets[0].config
        if any(s.config != cfg for s in sets):
            raise ValueError("cannot concatenate traces from different configs")
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])  # noqa: E731
        return cls(cfg, cat("seed"), cat("episode"), cat("m"), cat("q"), cat("h"), cat("idx"),
                   cat("y"), cat("r"), cat("terminal_q"), sets[0].domain)

    def episode_trace(self, i: int) -> EpisodeTrace:
        cfg = self.config
        grid = cfg.price_grid
        H = self.horizon
        steps = []
        lags = [self.lag_indices(0)[i], self.lag_indices(1)[i]]
        for t in range(H):
            st = SimState(cfg.horizon - t, int(self.q[i, t, 0]), int(self.q[i, t, 1]), int(self.m[i]),
                          float(self.h[i, t, 0]), float(self.h[i, t, 1]),
                          tuple(int(v) for v in lags[0][t]), tuple(int(v) for v in lags[1][t]))
            steps.append(StepRecord(t, grid[self.idx[i, t, 0]], grid[self.idx[i, t, 1]],
                                    int(self.y[i, t, 0]), int(self.y[i, t, 1]),
                                    float(self.r[i, t, 0]), st))
        return EpisodeTrace(self.fingerprint, int(self.seed[i]), int(self.episode[i]), tuple(steps),
                            int(self.terminal_q[i, 0]), int(self.terminal_q[i, 1]))

    def __iter__(self) -> Iterator[EpisodeTrace]:
        for i in range(len(self)):
            yield self.episode_trace(i)


def rollout(policy_a: PricingPolicy, policy_b: PricingPolicy, config: MarketConfig,
            n_episodes: int, seed: int, chunk_size: int = 500) -> TraceSet:
    """Play ``n_episodes`` episodes between two policies.

    Episodes are simulated in fixed chunks; chunk ``k`` draws from its own
    stream spawned from ``(seed, k)``, with separate streams for demand and
    for each side's action sampling. Results therefore depend only on
    ``(policies, config, seed, chunk_size)``.
    """
    config.validate()
    chunks = []
    for k, start in enumerate(range(0, n_episodes, chunk_size)):
        n = min(chunk_size, n_episodes - start)
        ss = np.random.SeedSequence([int(seed), k])
        env_rng, rng_a, rng_b = (np.random.default_rng(s) for s in ss.spawn(3))
        chunk = _play_chunk(policy_a, policy_b, config, n, env_rng, rng_a, rng_b)
        chunk.seed[:] = seed
        chunk.episode[:] = np.arange(start, start + n)
        chunks.append(chunk)
    return TraceSet.concat(chunks)


def _check_actions(idx, n, config, who):
    idx = np.asarray(idx)
    if idx.shape != (n,) or not np.issubdtype(idx.dtype, np.integer) \
            or idx.min(initial=0) < 0 or idx.max(initial=0) >= config.n_prices:
        raise ValueError(f"{who} emitted an off-grid action")
    return idx.astype(np.int64)


def _play_chunk(policy_a, policy_b, config, n, env_rng, rng_a, rng_b) -> TraceSet:
    H = config.horizon
    bs = init_batch(config, n, env_rng)
    q = np.zeros((n, H, 2), dtype=np.int64)
    h = np.zeros((n, H, 2))
    idx = np.zeros((n, H, 2), dtype=np.int64)
    y = np.zeros((n, H, 2), dtype=np.int64)
    r = np.zeros((n, H, 2))
    grid = np.asarray(config.price_grid)
    for t in range(H):
        ia = _check_actions(policy_a.act(bs, 0, config, rng_a), n, config, "policy_a")
        ib = _check_actions(policy_b.act(bs, 1, config, rng_b), n, config, "policy_b")
        sales = demand_batch(bs.q, ia, ib, bs.m, config, env_rng)
        q[:, t], h[:, t] = bs.q, bs.h
        idx[:, t, 0], idx[:, t, 1] = ia, ib
        y[:, t] = sales
        r[:, t, 0] = reward(grid[ia], sales[:, 0], config, config.capacity_a)
        r[:, t, 1] = reward(grid[ib], sales[:, 1], config, config.capacity_b)
        bs = advance_batch(bs, ia, ib, sales, config)
    return TraceSet(config, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), bs.m.copy(),
                    q, h, idx, y, r, bs.q.copy())


# --- persistence ---------------------------------------------------------

def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_traces(path, traces: TraceSet) -> Path:
    """One JSON object per episode; arrays hold the ordered step records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fp = traces.fingerprint
    cfg = traces.config.to_dict()
    lines = []
    for i in range(len(traces)):
        rec = {
            "domain": traces.domain,
            "config_fingerprint": fp,
            "config": cfg if i == 0 else None,
            "seed": int(traces.seed[i]),
            "episode": int(traces.episode[i]),
            "m": int(traces.m[i]),
            "steps": {
                "q_a": traces.q[i, :, 0].tolist(), "q_b": traces.q[i, :, 1].tolist(),
                "h_a": traces.h[i, :, 0].tolist(), "h_b": traces.h[i, :, 1].tolist(),
                "p_a": traces.prices(0)[i].tolist(), "p_b": traces.prices(1)[i].tolist(),
                "y_a": traces.y[i, :, 0].tolist(), "y_b": traces.y[i, :, 1].tolist(),
                "r_a": traces.r[i, :, 0].tolist(), "r_b": traces.r[i, :, 1].tolist(),
            },
            "terminal_q_a": int(traces.terminal_q[i, 0]),
            "terminal_q_b": int(traces.terminal_q[i, 1]),
        }
        lines.append(json.dumps(rec, separators=(",", ":")) + "\n")
    data = "".join(lines).encode("utf-8")
    # fixed header (no name, zero mtime) so identical traces give identical bytes
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)
    return path


def read_traces(path, config: MarketConfig | None = None) -> TraceSet:
    path = Path(path)
    rows = []
    with _open_text(path, "r") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"{path} holds no episodes")
    if rows[0].get("domain") != "pricing":
        raise ValueError(f"{path} is not a pricing trace file")
    if config is None:
        config = MarketConfig.from_dict(rows[0]["config"])
    if config.fingerprint() != rows[0]["config_fingerprint"]:
        raise ValueError("trace file fingerprint does not match the config")
    grid = config.price_grid

    def col(key, dtype):
        return np.array([r["steps"][key] for r in rows], dtype=dtype)

    to_idx = np.vectorize(lambda p: price_index(p, config))
    idx = np.stack([to_idx(col("p_a", float)), to_idx(col("p_b", float))], axis=2).astype(np.int64)
    return TraceSet(
        config,
        np.array([r["seed"] for r in rows], dtype=np.int64),
        np.array([r["episode"] for r in rows], dtype=np.int64),
        np.array([r["m"] for r in rows], dtype=np.int64),
        np.stack([col("q_a", np.int64), col("q_b", np.int64)], axis=2),
        np.stack([col("h_a", float), col("h_b", float)], axis=2),
        idx,
        np.stack([col("y_a", np.int64), col("y_b", np.int64)], axis=2),
        np.stack([col("r_a", float), col("r_b", float)], axis=2),
        np.array([[r["terminal_q_a"], r["terminal_q_b"]] for r in rows], dtype=np.int64),
    )
