"""The learner ladder for the pricing benchmark.

One PPO core serves every RL variant. Reward-only PPO, CTDE PPO, PPO with
a sampled-action BC auxiliary and Trace-Prior KL-regularized PPO differ only
in the extra logit-gradient terms and in what the critic sees:

    loss = clip_surrogate(normalized advantages)
           + beta  * KL(pi(.|o) || prior(.|o))      # full distribution
           + alpha * CE(pi(.|o), a_B)               # sampled Hotel B action
           - entropy_coef * H(pi(.|o))

With beta = alpha = 0 the extra terms are skipped outright, so those paths
are bit-identical to plain PPO for the same seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as dg
from . import policy_core as pc
from .market_sim import (
    FixedRMPolicy,
    MarketConfig,
    NetworkPolicy,
    TraceSet,
    UniformPolicy,
    regime_width,
    rollout,
)


class TrainingDivergence(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 30.0
    alpha: float = 0.0
    clip: float = 0.2
    epochs: int = 4
    batch_steps: int = 4096
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    gamma: float = 1.0
    lr: float = 3e-4
    max_grad_norm: float = 5.0
    total_steps: int = 300_000
    hidden: tuple[int, ...] = (64, 64)
    value_scale: float = 100.0
    regime: str = "CA"
    # start the KL-anchored actor at the prior; forward KL from a random init
    # stalls once the policy has committed to the wrong mode in some states
    prior_init: bool = True
    # data budgets for the supervised stages
    prior_episodes: int = 5000
    prior_rounds: int = 5
    dagger_rounds: int = 4
    dagger_episodes: int = 1000
    student_holdout: float = 0.1
    fit: pc.FitConfig = field(default_factory=pc.FitConfig)
    probe_fit: pc.FitConfig = dg.PROBE_FIT

    def validate(self) -> "TrainConfig":
        if self.beta < 0 or self.alpha < 0:
            raise ValueError("beta and alpha must be non-negative")
        if self.gamma != 1.0:
            raise ValueError("the finite-horizon objective uses gamma = 1")
        if self.batch_steps < 1 or self.total_steps < 1 or self.minibatch < 1:
            raise ValueError("batch sizes and budgets must be positive")
        return self


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    critic_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    rival_actions: np.ndarray
    prior: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def check(self) -> None:
        n = len(self.actions)
        for name in ("obs", "critic_obs", "rewards", "logp", "values", "returns", "advantages",
                     "rival_actions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} has the wrong length")
        if self.prior is not None and len(self.prior) != n:
            raise ValueError("buffer field prior has the wrong length")
        if not np.all(np.isfinite(self.advantages)):
            raise TrainingDivergence("non-finite advantages")


@dataclass
class TrainResult:
    actor: pc.PolicyParams
    critic: pc.PolicyParams
    regime: str
    curve: list[dict] = field(default_factory=list)

    def policy(self, greedy: bool = False) -> NetworkPolicy:
        return NetworkPolicy(self.actor, self.regime, greedy=greedy)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    sd = adv.std()
    return adv / sd if sd > 0 else adv


def _stage_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), 0x5050]).spawn(n)]


def _update_seed(seed: int, update: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xC011, update]).generate_state(1)[0])


def critic_features(traces: TraceSet, regime: str, ctde: bool) -> np.ndarray:
    """Critic inputs: the actor observation, plus q_B/Q_B under CTDE."""
    obs = traces.features(regime, 0)
    if not ctde:
        return obs
    return np.column_stack([obs, traces.q[:, :, 1].reshape(-1) / traces.config.capacity_b])


def collect(actor: pc.PolicyParams, critic: pc.PolicyParams, config: MarketConfig, regime: str,
            n_envs: int, seed: int, ctde: bool = False, prior: pc.PolicyParams | None = None,
            value_scale: float = 100.0) -> RolloutBuffer:
    """Play ``n_envs`` full episodes of the learner (Hotel A) against Fixed RM."""
    traces = rollout(NetworkPolicy(actor, regime), FixedRMPolicy(), config, n_envs, seed)
    obs = traces.features(regime, 0)
    cobs = critic_features(traces, regime, ctde)
    actions = traces.labels(0)
    probs = pc.forward(actor, obs)
    logp = np.log(np.maximum(probs[np.arange(len(actions)), actions], pc.LOG_FLOOR))
    r = traces.r[:, :, 0]
    returns = np.cumsum(r[:, ::-1], axis=1)[:, ::-1].reshape(-1)
    values = pc.predict_value(critic, cobs) * value_scale
    buf = RolloutBuffer(
        obs=obs, critic_obs=cobs, actions=actions, rewards=r.reshape(-1), logp=logp,
        values=values, returns=returns, advantages=normalize_advantages(returns - values),
        rival_actions=traces.labels(1),
        prior=pc.forward(prior, obs) if prior is not None else None,
    )
    buf.check()
    return buf


def _entropy_logit_grad(logits):
    n = logits.shape[0]
    logp = pc.log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    # d(-H)/dz = p * (log p + H)
    return ent.mean(), p * (logp + ent[:, None]) / n


def actor_loss_and_grad(actor: pc.PolicyParams, batch: RolloutBuffer, idx, train: TrainConfig,
                        beta: float, alpha: float):
    """Combined actor loss on a minibatch and its parameter gradient."""
    acts = pc.forward_cache(actor, batch.obs[idx])
    logits = acts[-1]
    loss, dlogits = pc.clipped_surrogate_logit_grad(
        logits, batch.actions[idx], batch.logp[idx], batch.advantages[idx], train.clip)
    info = {"surrogate": loss}
    if beta > 0:
        kl, g = pc.kl_logit_grad(logits, batch.prior[idx])
        loss += beta * kl
        dlogits = dlogits + beta * g
        info["kl"] = kl
    if alpha > 0:
        ce, g = pc.cross_entropy_logit_grad(logits, batch.rival_actions[idx])
        loss += alpha * ce
        dlogits = dlogits + alpha * g
        info["ce"] = ce
    if train.entropy_coef > 0:
        ent, g = _entropy_logit_grad(logits)
        loss -= train.entropy_coef * ent
        dlogits = dlogits + train.entropy_coef * g
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite actor loss {loss}")
    return loss, pc.backprop(actor, acts, dlogits), info


def _ppo(config: MarketConfig, train: TrainConfig, seed: int, *, ctde: bool = False,
         beta: float = 0.0, prior: pc.PolicyParams | None = None, alpha: float = 0.0,
         init_actor: pc.PolicyParams | None = None) -> TrainResult:
    config.validate()
    train.validate()
    if beta > 0 and prior is None:
        raise ValueError("a KL penalty needs a fitted prior")
    regime = train.regime
    width = regime_width(regime, config)
    init_rng, batch_rng = _stage_rngs(seed, 2)
    sizes = (width,) + tuple(train.hidden) + (config.n_prices,)
    actor = pc.init_params(sizes, init_rng)
    if init_actor is not None:
        if init_actor.sizes != actor.sizes:
            raise ValueError("warm-start actor has the wrong shape")
        actor = init_actor.copy()
    critic = pc.init_params((width + int(ctde),) + tuple(train.hidden) + (1,), init_rng, out_scale=1.0)
    opt_a = pc.Adam(actor, lr=train.lr, max_grad_norm=train.max_grad_norm)
    opt_c = pc.Adam(critic, lr=train.lr, max_grad_norm=train.max_grad_norm)
    n_envs = max(1, train.batch_steps // config.horizon)
    n_updates = max(1, math.ceil(train.total_steps / (n_envs * config.horizon)))
    curve = []
    kl_prior = prior if beta > 0 else None
    for update in range(n_updates):
        buf = collect(actor, critic, config, regime, n_envs, _update_seed(seed, update), ctde=ctde,
                      prior=kl_prior, value_scale=train.value_scale)
        target = buf.returns / train.value_scale
        n = len(buf)
        stats = {"update": update, "episode_reward": float(buf.rewards.sum() / n_envs)}
        losses = []
        for _ in range(train.epochs):
            order = batch_rng.permutation(n)
            for start in range(0, n, train.minibatch):
                idx = order[start:start + train.minibatch]
                loss, grad, info = actor_loss_and_grad(actor, buf, idx, train, beta, alpha)
                opt_a.step(grad)
                cacts = pc.forward_cache(critic, buf.critic_obs[idx])
                err = cacts[-1][:, 0] - target[idx]
                vloss = train.value_coef * float((err ** 2).mean())
                if not np.isfinite(vloss):
                    raise TrainingDivergence(f"non-finite value loss at update {update}")
                dv = (2.0 * train.value_coef / len(idx)) * err[:, None]
                opt_c.step(pc.backprop(critic, cacts, dv))
                losses.append(loss)
        probs = pc.forward(actor, buf.obs)
        stats["loss"] = float(np.mean(losses))
        stats["entropy"] = float(pc.entropy(probs).mean())
        if buf.prior is not None:
            stats["kl"] = float(pc.kl_divergence(probs, np.maximum(buf.prior, pc.LOG_FLOOR)).mean())
        if not actor.is_finite():
            raise TrainingDivergence(f"non-finite actor parameters at update {update}")
        curve.append(stats)
    return TrainResult(actor, critic, regime, curve)


def train_ppo(config: MarketConfig, train: TrainConfig, seed: int) -> TrainResult:
    """Reward-only PPO: no prior, no trace labels."""
    return _ppo(config, train, seed)


def train_ctde_ppo(config: MarketConfig, train: TrainConfig, seed: int) -> TrainResult:
    """Reward-only PPO whose critic also sees the rival's inventory share.

    The returned actor still consumes only the deployable regime.
    """
    return _ppo(config, train, seed, ctde=True)


def train_trace_prior(config: MarketConfig, prior: pc.PolicyParams, train: TrainConfig,
                      seed: int) -> TrainResult:
    """PPO on Hotel A reward minus ``beta`` times the full-distribution
    KL(pi || prior) at every visited observation. With ``beta == 0`` this is
    exactly ``train_ppo``."""
    if train.beta == 0:
        return _ppo(config, train, seed)
    init = prior if train.prior_init else None
    return _ppo(config, train, seed, beta=train.beta, prior=prior, init_actor=init)


def train_ppo_bc_aux(config: MarketConfig, alpha: float, train: TrainConfig, seed: int,
                     warm_start: pc.PolicyParams | None = None) -> TrainResult:
    """PPO plus ``alpha`` times cross-entropy on the Hotel B price realized at
    the same step (a sampled label, not a distribution)."""
    return _ppo(config, train, seed, alpha=alpha, init_actor=warm_start)


def train_bc_warm_start(config: MarketConfig, bc_actor: pc.PolicyParams, train: TrainConfig,
                        seed: int) -> TrainResult:
    """Initialize the actor from a BC fit, then fine-tune on reward alone."""
    return _ppo(config, train, seed, init_actor=bc_actor)


# --- supervised stages ---------------------------------------------------

@dataclass
class PriorFit:
    model: pc.PolicyParams
    heldout_nll: float
    traces: TraceSet
    regime: str


def collect_prior_traces(config: MarketConfig, train: TrainConfig, seed: int
                         ) -> tuple[TraceSet, list[float]]:
    """Fixed RM traces for the market prior.

    Round 0 pairs Fixed RM with a uniform-random Hotel A. Every later round
    refits the prior on everything collected so far and lets it drive Hotel
    A, so the prior is trained on the joint state distribution it induces
    when sampled. Returns the pooled traces and each refit's held-out NLL.
    """
    rounds = max(1, train.prior_rounds)
    sizes = np.full(rounds, train.prior_episodes // rounds)
    sizes[: train.prior_episodes % rounds] += 1
    sets, nlls = [], []
    driver = UniformPolicy()
    start = 0
    for r, n in enumerate(sizes):
        if n == 0:
            continue
        if r > 0:
            pooled = TraceSet.concat(sets)
            fit = pc.fit_classifier(pooled.features(train.regime, 0), pooled.labels(1),
                                    config.n_prices, train.fit, seed=seed + r)
            nlls.append(fit.heldout_nll)
            driver = NetworkPolicy(fit.model, train.regime)
        part = rollout(driver, FixedRMPolicy(), config, int(n), seed * 7919 + r)
        part.episode[:] += start
        start += int(n)
        sets.append(part)
    return TraceSet.concat(sets), nlls


def fit_prior(traces: TraceSet, config: MarketConfig, train: TrainConfig, seed: int,
              regime: str | None = None) -> PriorFit:
    """Supervised estimate of P(Hotel B price | Hotel A observation)."""
    regime = regime or train.regime
    if len(traces) == 0:
        raise ValueError("prior fitting needs traces")
    res = pc.fit_classifier(traces.features(regime, 0), traces.labels(1), config.n_prices,
                            train.fit, seed=seed)
    return PriorFit(res.model, res.heldout_nll, traces, regime)


def train_bc(traces: TraceSet, regime: str, train: TrainConfig, seed: int) -> pc.PolicyParams:
    if len(traces) == 0:
        raise ValueError("BC needs at least one trace")
    res = pc.fit_classifier(traces.features(regime, 0), traces.labels(1), traces.config.n_prices,
                            train.fit, seed=seed)
    return res.model


def make_bc_policy(prior: pc.PolicyParams, regime: str = "CA") -> NetworkPolicy:
    """BC-only stochastic copy: sample Hotel A's price from the prior."""
    return NetworkPolicy(prior, regime, name="bc_only")


# --- corrected-history student ---------------------------------------------

@dataclass
class StudentResult:
    student: pc.PolicyParams
    selected_round: int
    round_nll: list[float]
    dataset_size: int
    regime: str = "NC"

    def policy(self) -> NetworkPolicy:
        return NetworkPolicy(self.student, self.regime, name="student")


def train_student(teacher: pc.PolicyParams, config: MarketConfig, train: TrainConfig, seed: int,
                  teacher_regime: str = "CA", student_regime: str = "NC") -> StudentResult:
    """Corrected-history DAgger.

    Round 0 labels the teacher's own rollouts with its sampled actions.
    Each later round rolls the current student, asks the frozen teacher for
    its distribution on the teacher view of every visited state, draws a hard
    label, aggregates and refits. Episodes are split once into train and
    held-out; the student with the lowest held-out NLL on the final pooled
    held-out set is returned.
    """
    if student_regime not in ("NC", "student"):
        raise ValueError("the student must act on its own corrected history")
    label_rng, split_rng = _stage_rngs(seed + 104729, 2)
    K = config.n_prices
    teacher_policy = NetworkPolicy(teacher, teacher_regime)
    X_tr, y_tr, X_ho, y_ho = [], [], [], []
    models: list[pc.PolicyParams] = []
    student = None
    for rnd in range(train.dagger_rounds + 1):
        actor = teacher_policy if rnd == 0 else NetworkPolicy(student, student_regime)
        traces = rollout(actor, FixedRMPolicy(), config, train.dagger_episodes, seed * 1000 + rnd)
        X = traces.features(student_regime, 0)
        if rnd == 0:
            labels = traces.labels(0)
        else:
            labels = pc.sample(pc.forward(teacher, traces.features(teacher_regime, 0)), label_rng)
        held = np.repeat(split_rng.random(len(traces)) < train.student_holdout, config.horizon)
        X_tr.append(X[~held]); y_tr.append(labels[~held])
        X_ho.append(X[held]); y_ho.append(labels[held])
        res = pc.fit_classifier(np.concatenate(X_tr), np.concatenate(y_tr), K, train.fit,
                                seed=seed + rnd, init=student,
                                holdout=(np.concatenate(X_ho), np.concatenate(y_ho)))
        student = res.model
        models.append(student)
    Xh, yh = np.concatenate(X_ho), np.concatenate(y_ho)
    nlls = [pc.mean_nll(m, Xh, yh) for m in models]
    best = int(np.argmin(nlls))
    return StudentResult(models[best], best, nlls, int(sum(len(y) for y in y_tr)), student_regime)


# --- evaluation and the deployment matrix ----------------------------------

def evaluate(policy, config: MarketConfig, n_episodes: int, seed: int, opponent=None) -> TraceSet:
    """Roll ``policy`` as Hotel A against Fixed RM (or ``opponent``)."""
    return rollout(policy, opponent or FixedRMPolicy(), config, n_episodes, seed)


MATCHUPS = (("NC", "NC"), ("CA", "CA"), ("NC", "CA"), ("CA", "NC"))


@dataclass
class MatchupResult:
    label: str
    hotel0: str
    hotel1: str
    seeds: list[int]
    revpar: np.ndarray   # (n_seeds, 2)
    occupancy: np.ndarray
    adr: np.ndarray
    l1: np.ndarray       # (n_seeds,)
    modal_bucket: np.ndarray  # (2,) modal grid index over all seeds

    @property
    def gap(self) -> np.ndarray:
        return self.revpar[:, 0] - self.revpar[:, 1]


def run_deployment_matrix(policies: dict[str, list[pc.PolicyParams]], config: MarketConfig,
                          seeds, n_episodes: int = 2000) -> list[MatchupResult]:
    """Frozen learned-vs-learned matchups on a shared simulator.

    ``policies`` maps the regime label (NC student, CA teacher) to one frozen
    network per seed. Each hotel observes its own regime from its own side.
    """
    from . import diagnostics as dg

    seeds = list(seeds)
    for label, nets in policies.items():
        if len(nets) != len(seeds):
            raise ValueError(f"need one {label} policy per seed")
    out = []
    K = config.n_prices
    for a, b in MATCHUPS:
        if a not in policies or b not in policies:
            continue
        rev, occ, adr, l1 = [], [], [], []
        counts = np.zeros((2, K))
        for i, s in enumerate(seeds):
            tr = rollout(NetworkPolicy(policies[a][i], a, name=a), NetworkPolicy(policies[b][i], b, name=b),
                         config, n_episodes, s)
            m0, m1 = dg.business_metrics(tr, 0), dg.business_metrics(tr, 1)
            rev.append([m0.revpar, m1.revpar])
            occ.append([m0.occupancy, m1.occupancy])
            adr.append([m0.adr or np.nan, m1.adr or np.nan])
            h0, h1 = dg.price_histogram(tr, 0), dg.price_histogram(tr, 1)
            l1.append(dg.l1_distance(h0, h1))
            counts[0] += np.bincount(tr.idx[:, :, 0].ravel(), minlength=K)
            counts[1] += np.bincount(tr.idx[:, :, 1].ravel(), minlength=K)
        out.append(MatchupResult(f"{a} vs {b}", a, b, seeds, np.array(rev), np.array(occ),
                                 np.array(adr), np.array(l1), counts.argmax(axis=1)))
    return out


def with_budget(train: TrainConfig, total_steps: int) -> TrainConfig:
    return replace(train, total_steps=total_steps)
