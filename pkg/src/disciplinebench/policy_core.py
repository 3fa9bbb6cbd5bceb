"""Softmax MLP policies and classifiers over a discrete action grid.

Everything here is plain numpy with hand-derived gradients. The three
objectives used by the learners (cross-entropy, PPO clipped surrogate and
forward KL to a fixed prior) all reduce to a gradient with respect to the
logits, which is then pushed through the network by :func:`backprop`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-12
MODEL_MAGIC = b"DBPM"
MODEL_VERSION = 1


@dataclass
class PolicyParams:
    """Weights of a tanh MLP whose last layer emits logits (or a value)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        new = self.copy()
        pos = 0
        for a in new.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        return new

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# The trace prior and every supervised probe share the policy architecture.
PriorModel = PolicyParams


def init_params(sizes, rng: np.random.Generator, out_scale: float = 0.01) -> PolicyParams:
    """Glorot-normal hidden layers; the output layer starts near zero so the
    initial policy is close to uniform."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / (n_in + n_out))
        if i == len(sizes) - 2:
            std *= out_scale
        weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return PolicyParams(weights, biases)


def zero_params(sizes) -> PolicyParams:
    sizes = tuple(int(s) for s in sizes)
    return PolicyParams(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def _as_batch(params: PolicyParams, obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.n_inputs:
        raise ValueError(
            f"observation has width {x.shape[-1]}, network expects {params.n_inputs}"
        )
    return x, single


def forward_cache(params: PolicyParams, x: np.ndarray) -> list[np.ndarray]:
    """Layer activations [input, h1, ..., raw output] for a 2-D batch."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def backprop(params: PolicyParams, acts: list[np.ndarray], dout: np.ndarray) -> PolicyParams:
    """Gradient of a scalar loss given d loss / d output for every row."""
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = dout
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return PolicyParams(gw, gb)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, obs) -> np.ndarray:
    """Action probabilities for one observation or a batch of them."""
    x, single = _as_batch(params, obs)
    probs = softmax(forward_cache(params, x)[-1])
    return probs[0] if single else probs


def predict_value(params: PolicyParams, obs) -> np.ndarray:
    x, single = _as_batch(params, obs)
    v = forward_cache(params, x)[-1][:, 0]
    return v[0] if single else v


# --- distribution helpers -------------------------------------------------

def entropy(dist) -> np.ndarray:
    p = np.asarray(dist, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def normalized_entropy(dist) -> np.ndarray:
    p = np.asarray(dist, dtype=float)
    return entropy(p) / np.log(p.shape[-1])


def kl_divergence(p, q) -> np.ndarray:
    """KL(p || q) in nats; 0 ln 0 = 0 and mass on a zero of q gives inf."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def sample(dist, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; one uniform per row keeps stream usage fixed."""
    p = np.asarray(dist, dtype=float)
    single = p.ndim == 1
    p2 = p[None, :] if single else p
    cdf = np.cumsum(p2, axis=1)
    u = rng.random(p2.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    idx = np.minimum(idx, p2.shape[1] - 1)
    return idx[0] if single else idx


def argmax(dist) -> np.ndarray:
    """Mode of each row; ties go to the lowest grid index."""
    return np.argmax(np.asarray(dist, dtype=float), axis=-1)


def log_prob(params: PolicyParams, obs, action) -> np.ndarray:
    x, single = _as_batch(params, obs)
    a = np.atleast_1d(np.asarray(action, dtype=int))
    lp = log_softmax(forward_cache(params, x)[-1])[np.arange(len(a)), a]
    return lp[0] if single else lp


# --- objectives as logit gradients ----------------------------------------
# Each returns (mean loss, d mean loss / d logits).

def cross_entropy_logit_grad(logits, actions, weights=None):
    n = logits.shape[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    loss = -(w * logp[rows, actions]).sum() / n
    grad = probs * w[:, None]
    grad[rows, actions] -= w
    return loss, grad / n


def kl_logit_grad(logits, prior_probs):
    """Forward KL(pi_theta || prior) summed over the whole grid."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    logq = np.log(np.maximum(prior_probs, LOG_FLOOR))
    diff = logp - logq
    kl = (probs * diff).sum(axis=1)
    grad = probs * (diff - kl[:, None])
    return kl.mean(), grad / n


def clipped_surrogate_logit_grad(logits, actions, old_logp, advantages, clip):
    """PPO clipped objective, returned as a loss (negated surrogate)."""
    n = logits.shape[0]
    rows = np.arange(n)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    ratio = np.exp(logp_all[rows, actions] - old_logp)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    loss = -np.minimum(unclipped, clipped).mean()
    # gradient flows only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    coef = np.where(active, -advantages * ratio, 0.0)
    grad = -probs * coef[:, None]
    grad[rows, actions] += coef
    return loss, grad / n


def parameter_grad(params: PolicyParams, obs, logit_grad_fn, *args):
    x, _ = _as_batch(params, obs)
    acts = forward_cache(params, x)
    loss, dlogits = logit_grad_fn(acts[-1], *args)
    return loss, backprop(params, acts, dlogits)


def grad_log_prob(params: PolicyParams, obs, action) -> PolicyParams:
    """d log pi(action | obs) / d params for a single observation."""
    x, _ = _as_batch(params, obs)
    acts = forward_cache(params, x)
    probs = softmax(acts[-1])
    dlogits = -probs
    dlogits[0, int(action)] += 1.0
    return backprop(params, acts, dlogits)


def grad_kl(params: PolicyParams, obs, prior_dist) -> PolicyParams:
    """d KL(pi(.|obs) || prior_dist) / d params, averaged over the batch."""
    prior = np.atleast_2d(np.asarray(prior_dist, dtype=float))
    return parameter_grad(params, obs, kl_logit_grad, prior)[1]


def add_scaled(acc: PolicyParams, other: PolicyParams, scale: float = 1.0) -> PolicyParams:
    return PolicyParams(
        [a + scale * b for a, b in zip(acc.weights, other.weights)],
        [a + scale * b for a, b in zip(acc.biases, other.biases)],
    )


def global_norm(grads: PolicyParams) -> float:
    return float(np.sqrt(sum(float((a * a).sum()) for a in grads.arrays())))


class Adam:
    """Adam with optional global-norm clipping; updates params in place."""

    def __init__(self, params: PolicyParams, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
                 max_grad_norm: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, grads: PolicyParams) -> float:
        norm = global_norm(grads)
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params.arrays(), grads.arrays(), self.m, self.v):
            g = g * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# --- supervised fitting ---------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-3
    batch_size: int = 256
    max_epochs: int = 40
    patience: int = 5
    holdout_fraction: float = 0.1
    max_grad_norm: float = 5.0
    lr_decay: float = 1.0        # per-epoch multiplier
    plateau_factor: float = 0.5  # extra multiplier after an epoch without improvement


@dataclass
class FitResult:
    model: PolicyParams
    heldout_nll: float
    train_nll: float
    epochs: int
    history: list[float] = field(default_factory=list)


def mean_nll(model: PolicyParams, X, y) -> float:
    p = forward(model, X)
    y = np.asarray(y, dtype=int)
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], LOG_FLOOR)).mean())


def fit_classifier(X, y, n_classes: int, config: FitConfig | None = None,
                   seed: int = 0, init: PolicyParams | None = None,
                   holdout: tuple[np.ndarray, np.ndarray] | None = None) -> FitResult:
    """Mini-batch Adam on mean cross-entropy with held-out early stopping.

    When ``holdout`` is given it is used as the validation set and all of
    ``(X, y)`` is used for training; otherwise a random fraction is held out.
    The returned model is the best epoch by held-out NLL.
    """
    config = config or FitConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_classifier needs a non-empty 2-D feature matrix")
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels must lie on the action grid")
    rng = np.random.default_rng(seed)
    if holdout is not None:
        X_tr, y_tr = X, y
        X_ho, y_ho = np.asarray(holdout[0], float), np.asarray(holdout[1], int)
    else:
        order = rng.permutation(len(X))
        n_ho = int(round(config.holdout_fraction * len(X)))
        if len(X) >= 2:
            n_ho = min(max(n_ho, 1), len(X) - 1)
        else:
            n_ho = 0
        ho, tr = order[:n_ho], order[n_ho:]
        X_tr, y_tr = X[tr], y[tr]
        X_ho, y_ho = (X[ho], y[ho]) if n_ho else (X_tr, y_tr)

    sizes = (X.shape[1],) + tuple(config.hidden) + (n_classes,)
    model = init.copy() if init is not None else init_params(sizes, rng)
    opt = Adam(model, lr=config.lr, max_grad_norm=config.max_grad_norm)
    best = model.copy()
    best_nll = mean_nll(model, X_ho, y_ho)
    history = [best_nll]
    stale = 0
    epochs = 0
    n = len(X_tr)
    for epoch in range(config.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, g = parameter_grad(model, X_tr[idx], cross_entropy_logit_grad, y_tr[idx])
            opt.step(g)
        nll = mean_nll(model, X_ho, y_ho)
        history.append(nll)
        opt.lr *= config.lr_decay
        if nll < best_nll - 1e-6:
            best_nll, best, stale = nll, model.copy(), 0
        else:
            stale += 1
            opt.lr *= config.plateau_factor
            if stale >= config.patience:
                break
    return FitResult(best, best_nll, mean_nll(best, X_tr, y_tr), epochs, history)


# --- serialization --------------------------------------------------------

def model_to_bytes(params: PolicyParams) -> bytes:
    sizes = params.sizes
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(sizes))]
    out.append(struct.pack(f"<{len(sizes)}I", *sizes))
    for a in params.arrays():
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def model_from_bytes(blob: bytes) -> PolicyParams:
    if blob[:4] != MODEL_MAGIC:
        raise ValueError("not a model file")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    sizes = struct.unpack_from(f"<{n}I", blob, 12)
    pos = 12 + 4 * n
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=a * b, offset=pos).reshape(a, b)
        pos += 8 * a * b
        bias = np.frombuffer(blob, dtype="<f8", count=b, offset=pos)
        pos += 8 * b
        weights.append(w.astype(float))
        biases.append(bias.astype(float))
    if pos != len(blob):
        raise ValueError("trailing bytes in model file")
    return PolicyParams(weights, biases)


def save_model(path, params: PolicyParams) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(params))
    return path


def load_model(path) -> PolicyParams:
    return model_from_bytes(Path(path).read_bytes())
