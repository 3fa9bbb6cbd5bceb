"""Trace diagnostics: business metrics, histogram distances, seed CIs,
state slices, hidden-state aliasing cells, the oracle-inventory probe,
bidding pacing gap and the discipline-stability check.

Logs are natural; 0 ln 0 is taken as 0.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import policy_core as pc
from .market_sim import TraceSet

LOG_FLOOR = 1e-12


# --- histograms ----------------------------------------------------------

def normalize(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=float)
    total = c.sum()
    if total <= 0:
        raise ValueError("histogram has no mass")
    return c / total


def histogram(indices, n_bins: int) -> np.ndarray:
    """Shares of each grid index."""
    idx = np.asarray(indices).ravel()
    return normalize(np.bincount(idx, minlength=n_bins)[:n_bins])


def _pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"histograms live on different grids: {p.shape} vs {q.shape}")
    return p, q


def l1_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.abs(p - q).sum())


def js_divergence(p, q) -> float:
    p, q = _pair(p, q)
    mix = 0.5 * (p + q)
    # mix > 0 wherever p or q is, so neither KL term can blow up
    return float(0.5 * pc.kl_divergence(p, mix) + 0.5 * pc.kl_divergence(q, mix))


def brier(probs, labels) -> float:
    """Mean multi-class Brier score, sum over classes (range [0, 2])."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(labels, dtype=int).ravel()
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


# --- confidence intervals ------------------------------------------------

@dataclass(frozen=True)
class CIStat:
    n: int
    mean: float
    half_width: float

    @property
    def low(self) -> float:
        return self.mean - self.half_width

    @property
    def high(self) -> float:
        return self.mean + self.half_width

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


def seed_ci(values, level: float = 0.95) -> CIStat:
    """Two-sided Student-t interval across seeds."""
    v = np.asarray(values, dtype=float).ravel()
    if len(v) < 2:
        raise ValueError("a seed CI needs at least two values")
    sd = v.std(ddof=1)
    t = stats.t.ppf(0.5 + level / 2.0, df=len(v) - 1)
    return CIStat(len(v), float(v.mean()), float(t * sd / np.sqrt(len(v))))


def paired_ci(a, b, level: float = 0.95) -> CIStat:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired CI needs equally many values per arm")
    return seed_ci(a - b, level)


def ci_separated(a: CIStat, b: CIStat) -> bool:
    """True when the two intervals do not overlap."""
    return a.high < b.low or b.high < a.low


# --- business metrics ----------------------------------------------------

@dataclass(frozen=True)
class BusinessMetrics:
    revpar: float
    occupancy: float
    adr: float | None
    n_episodes: int


def business_metrics(traces: TraceSet | list[TraceSet], side: int = 0) -> BusinessMetrics:
    """RevPAR = episode revenue / capacity, averaged over episodes (and seeds
    when several trace sets are given); ADR is sold-weighted."""
    sets = traces if isinstance(traces, (list, tuple)) else [traces]
    if not sets or sum(len(s) for s in sets) == 0:
        raise ValueError("business metrics need at least one episode")
    revenue = sold = cap_total = 0.0
    n = 0
    for tr in sets:
        cap = tr.config.capacity(side)
        revenue += float((tr.prices(side) * tr.y[:, :, side]).sum())
        sold += float(tr.y[:, :, side].sum())
        cap_total += cap * len(tr)
        n += len(tr)
    adr = revenue / sold if sold > 0 else None
    return BusinessMetrics(revenue / cap_total, sold / cap_total, adr, n)


def episode_revpar(traces: TraceSet, side: int = 0) -> np.ndarray:
    return (traces.prices(side) * traces.y[:, :, side]).sum(axis=1) / traces.config.capacity(side)


def delta_out(metrics_pi: BusinessMetrics, metrics_b: BusinessMetrics) -> float:
    return abs(metrics_pi.revpar - metrics_b.revpar)


def price_histogram(traces: TraceSet, side: int) -> np.ndarray:
    return histogram(traces.idx[:, :, side], traces.config.n_prices)


# --- state slices ----------------------------------------------------------

SLICES = ("early_high", "early_low", "late_high", "late_low")


def slice_masks(traces: TraceSet, side: int = 0) -> dict[str, np.ndarray]:
    """Early/late horizon x high/low own-inventory masks over (n, H) steps."""
    H = traces.horizon
    t = np.broadcast_to(np.arange(H), traces.idx.shape[:2])
    early = t < H / 2.0
    high = traces.q[:, :, side] / traces.config.capacity(side) >= 0.5
    return {
        "early_high": early & high,
        "early_low": early & ~high,
        "late_high": ~early & high,
        "late_low": ~early & ~high,
    }


@dataclass(frozen=True)
class SliceRow:
    name: str
    l1: float | None
    js: float | None
    n_pi: int
    n_b: int
    flagged: bool


def sliced_l1(traces_pi: TraceSet, traces_b: TraceSet, side_pi: int = 0, side_b: int = 1,
              min_samples: int = 30, slice_side: int = 0) -> list[SliceRow]:
    """Per-slice price-bucket L1/JS plus an ``overall`` row.

    Slices are defined on ``slice_side``'s state in each trace set; slices
    short of ``min_samples`` on either side are flagged and left empty.
    """
    K = traces_pi.config.n_prices
    rows = []
    mp = slice_masks(traces_pi, slice_side)
    mb = slice_masks(traces_b, slice_side)
    mp["overall"] = np.ones(traces_pi.idx.shape[:2], dtype=bool)
    mb["overall"] = np.ones(traces_b.idx.shape[:2], dtype=bool)
    for name in ("overall",) + SLICES:
        a = traces_pi.idx[:, :, side_pi][mp[name]]
        b = traces_b.idx[:, :, side_b][mb[name]]
        if len(a) < min_samples or len(b) < min_samples:
            rows.append(SliceRow(name, None, None, len(a), len(b), True))
            continue
        pa, pb = histogram(a, K), histogram(b, K)
        rows.append(SliceRow(name, l1_distance(pa, pb), js_divergence(pa, pb), len(a), len(b), False))
    return rows


# --- aliasing cells --------------------------------------------------------

@dataclass(frozen=True)
class AliasingBinning:
    tau_bin_steps: int = 5
    inventory_bins: int = 10
    pace_edges: tuple[float, float] = (0.9, 1.1)
    rival_inventory_bins: int = 20
    min_samples: int = 30
    substantive_share: float = 0.05


@dataclass(frozen=True)
class AliasingReport:
    total_steps: int
    eligible_cells: int
    eligible_step_share: float
    multi_action_cell_share: float
    substantive_cell_share: float
    substantive_step_share: float
    weighted_norm_entropy: float


def _bin(x, n_bins):
    return np.minimum((np.asarray(x) * n_bins).astype(np.int64), n_bins - 1)


def cell_keys(traces: TraceSet, binning: AliasingBinning = AliasingBinning(),
              include_rival_inventory: bool = False, side: int = 0) -> np.ndarray:
    """Integer cell id per step from the side-visible state, shape (n*H,)."""
    cfg = traces.config
    n, H = traces.idx.shape[:2]
    t = np.broadcast_to(np.arange(H), (n, H))
    lo, hi = binning.pace_edges
    h = traces.h[:, :, side]
    parts = [
        (t // binning.tau_bin_steps, -(-H // binning.tau_bin_steps)),
        (_bin(traces.q[:, :, side] / cfg.capacity(side), binning.inventory_bins), binning.inventory_bins),
        (np.broadcast_to(traces.m[:, None], (n, H)), 3),
        (np.where(h < lo, 0, np.where(h > hi, 2, 1)), 3),
    ]
    if include_rival_inventory:
        rival = 1 - side
        parts.append((_bin(traces.q[:, :, rival] / cfg.capacity(rival), binning.rival_inventory_bins),
                      binning.rival_inventory_bins))
    key = np.zeros((n, H), dtype=np.int64)
    for values, size in parts:
        key = key * size + values
    return key.ravel()


def aliasing_from_keys(keys, actions, n_actions: int,
                       binning: AliasingBinning = AliasingBinning()) -> AliasingReport:
    keys = np.asarray(keys).ravel()
    actions = np.asarray(actions).ravel()
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.zeros((len(uniq), n_actions))
    np.add.at(counts, (inv, actions), 1)
    sizes = counts.sum(axis=1)
    elig = sizes >= binning.min_samples
    total = int(sizes.sum())
    c = counts[elig]
    w = sizes[elig]
    if len(c) == 0:
        return AliasingReport(total, 0, 0.0, 0.0, 0.0, 0.0, 0.0)
    shares = c / w[:, None]
    multi = (c > 0).sum(axis=1) >= 2
    substantive = (shares >= binning.substantive_share).sum(axis=1) >= 2
    ent = pc.normalized_entropy(shares)
    return AliasingReport(
        total_steps=total,
        eligible_cells=int(elig.sum()),
        eligible_step_share=float(w.sum() / total),
        multi_action_cell_share=float(multi.mean()),
        substantive_cell_share=float(substantive.mean()),
        substantive_step_share=float(w[substantive].sum() / w.sum()),
        weighted_norm_entropy=float((w * ent).sum() / w.sum()),
    )


def aliasing_cells(traces: TraceSet | list[TraceSet], binning: AliasingBinning = AliasingBinning(),
                   include_rival_inventory: bool = False, observer: int = 0) -> AliasingReport:
    """Group the observer's visited steps into coarse visible cells and ask
    how many benchmark (rival) actions each cell holds."""
    sets = traces if isinstance(traces, (list, tuple)) else [traces]
    keys = np.concatenate([cell_keys(t, binning, include_rival_inventory, observer) for t in sets])
    acts = np.concatenate([t.labels(1 - observer) for t in sets])
    return aliasing_from_keys(keys, acts, sets[0].config.n_prices, binning)


# --- predictor reports ---------------------------------------------------------

@dataclass(frozen=True)
class PredictorReport:
    nll: float
    accuracy: float
    brier: float
    true_class_prob: float
    norm_entropy: float
    n: int


def predictor_report(probs, labels) -> PredictorReport:
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(labels, dtype=int).ravel()
    true_p = p[np.arange(len(y)), y]
    return PredictorReport(
        nll=float(-np.log(np.maximum(true_p, LOG_FLOOR)).mean()),
        accuracy=float((pc.argmax(p) == y).mean()),
        brier=brier(p, y),
        true_class_prob=float(true_p.mean()),
        norm_entropy=float(pc.normalized_entropy(p).mean()),
        n=len(y),
    )


# The rival's rule is a fine staircase in (tau, q_B); a short default fit
# smooths it away, so the probe trains longer on standardized inputs.
PROBE_FIT = pc.FitConfig(batch_size=1024, lr=2e-2, lr_decay=0.97, plateau_factor=1.0,
                         max_epochs=100, patience=15)


def oracle_probe(traces: TraceSet, fit: pc.FitConfig | None = None, seed: int = 0,
                 heldout_fraction: float = 0.2, observer: int = 0
                 ) -> tuple[PredictorReport, PredictorReport]:
    """Fit the rival's current price from CA-visible features, with and
    without the rival's remaining-inventory share, on a shared
    episode-level split. Features are z-scored with training-split moments.
    Returns (observable, oracle) held-out reports."""
    fit = fit or PROBE_FIT
    rng = np.random.default_rng(seed)
    n, H = traces.idx.shape[:2]
    held = np.zeros(n, dtype=bool)
    held[rng.permutation(n)[: max(1, int(round(heldout_fraction * n)))]] = True
    step_held = np.repeat(held, H)
    y = traces.labels(1 - observer)
    K = traces.config.n_prices
    reports = []
    for regime in ("CA", "oracle"):
        X = traces.features(regime, observer)
        mu, sd = X[~step_held].mean(axis=0), X[~step_held].std(axis=0)
        X = (X - mu) / np.where(sd > 0, sd, 1.0)
        res = pc.fit_classifier(X[~step_held], y[~step_held], K, fit, seed=seed)
        reports.append(predictor_report(pc.forward(res.model, X[step_held]), y[step_held]))
    return reports[0], reports[1]


# --- bidding ---------------------------------------------------------------------

def pacing_gap(cum_spend_fraction) -> float:
    """Mean over episodes of (1/T) sum_{t=1..T} |spent_t / B0 - t/T|.

    Column ``t-1`` holds the fraction of budget spent after ``t`` steps.
    """
    s = np.atleast_2d(np.asarray(cum_spend_fraction, dtype=float))
    T = s.shape[1]
    sched = np.arange(1, T + 1) / T
    return float(np.abs(s - sched).mean(axis=1).mean())


# --- discipline stability --------------------------------------------------------

TRACE_VARIABLES = ("price", "occupancy", "adr", "inventory", "sales")


@dataclass(frozen=True)
class Tolerances:
    outcome: float = 2.0
    price: float = 0.10
    other: float = 0.15

    def for_variable(self, name: str) -> float:
        return self.price if name == "price" else self.other


@dataclass
class StabilityCheck:
    epsilon_out: float
    epsilon_z: dict[str, float]
    slices: tuple[str, ...]
    variables: tuple[str, ...]
    delta_out: float
    distances: dict[tuple[str, str], float | None]
    verdicts: dict[tuple[str, str], bool] = field(default_factory=dict)
    outcome_pass: bool = False

    @property
    def passed(self) -> bool:
        return self.outcome_pass and all(self.verdicts.values())

    def failures(self) -> list[tuple[str, str]]:
        return [k for k, ok in self.verdicts.items() if not ok]


def _variable_values(traces: TraceSet, side: int, name: str):
    """(values per step (n, H), bin edges or grid size) for one trace variable."""
    cfg = traces.config
    cap = cfg.capacity(side)
    H = traces.horizon
    if name == "price":
        return traces.idx[:, :, side], cfg.n_prices
    if name == "inventory":
        return _bin(traces.q[:, :, side] / cap, 10), 10
    if name == "occupancy":
        # running occupancy before the step
        occ = (cap - traces.q[:, :, side]) / cap
        return _bin(occ, 10), 10
    if name == "sales":
        y = traces.y[:, :, side]
        return np.minimum(y, 10), 11
    if name == "adr":
        # running ADR snapped to the price grid via midpoints; undefined before the first sale
        rev = np.cumsum(traces.prices(side) * traces.y[:, :, side], axis=1)
        sold = np.cumsum(traces.y[:, :, side], axis=1)
        grid = np.asarray(cfg.price_grid)
        mids = (grid[:-1] + grid[1:]) / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            adr = np.where(sold > 0, rev / np.maximum(sold, 1), np.nan)
        binned = np.where(np.isnan(adr), -1, np.searchsorted(mids, np.nan_to_num(adr)))
        return binned, len(grid)
    raise ValueError(f"unknown trace variable {name!r}")


def stability_check(traces_pi: TraceSet, traces_b: TraceSet, tolerances: Tolerances = Tolerances(),
                    side_pi: int = 0, side_b: int = 1,
                    variables: tuple[str, ...] = TRACE_VARIABLES, min_samples: int = 30) -> StabilityCheck:
    """Outcome gap plus per-(variable, slice) L1 against the benchmark.

    A (variable, slice) cell whose slice is too sparse on either side is not
    scored; it passes vacuously so that loosening tolerances stays monotone.
    """
    mpi = business_metrics(traces_pi, side_pi)
    mb = business_metrics(traces_b, side_b)
    d_out = delta_out(mpi, mb)
    masks_pi = slice_masks(traces_pi, side_pi)
    masks_b = slice_masks(traces_b, side_b)
    masks_pi["overall"] = np.ones(traces_pi.idx.shape[:2], bool)
    masks_b["overall"] = np.ones(traces_b.idx.shape[:2], bool)
    slices = ("overall",) + SLICES
    eps = {z: tolerances.for_variable(z) for z in variables}
    check = StabilityCheck(tolerances.outcome, eps, slices, tuple(variables), d_out, {})
    check.outcome_pass = d_out <= tolerances.outcome
    for z in variables:
        vp, kp = _variable_values(traces_pi, side_pi, z)
        vb, _ = _variable_values(traces_b, side_b, z)
        for c in slices:
            a = vp[masks_pi[c]]
            b = vb[masks_b[c]]
            a, b = a[a >= 0], b[b >= 0]
            if len(a) < min_samples or len(b) < min_samples:
                check.distances[(z, c)] = None
                check.verdicts[(z, c)] = True
                continue
            d = l1_distance(histogram(a, kp), histogram(b, kp))
            check.distances[(z, c)] = d
            check.verdicts[(z, c)] = d <= eps[z]
    return check


def group_counts(keys, actions, n_actions) -> dict:
    """Brute-force cell -> action counts; used by tests as an oracle."""
    out: dict = defaultdict(lambda: np.zeros(n_actions))
    for k, a in zip(np.asarray(keys).ravel(), np.asarray(actions).ravel()):
        out[int(k)][int(a)] += 1
    return dict(out)
