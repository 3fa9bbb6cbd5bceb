"""Experiment driver: plans, the learner ladder, variants, the bidding suite,
and deterministic report tables.

A run directory holds ``manifest.yaml``, ``config.yaml``, ``traces/``,
``checkpoints/``, ``curves/``, ``raw/`` (per-seed JSON records) and
``reports/`` (CSV tables). Tables are rebuilt from ``raw/`` alone, so
``report`` never re-simulates.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import bidding_sim as bs
from . import diagnostics as dg
from . import policy_core as pc
from . import trainers as tr
from .market_sim import (
    VARIANTS,
    ConfigError,
    FixedRMPolicy,
    MarketConfig,
    NetworkPolicy,
    UniformPolicy,
    read_traces,
    rollout,
    write_traces,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHOD_STAGES = ("ppo", "ctde_ppo", "bc_only", "bc_warm_start", "ppo_bc_aux_0.1", "ppo_bc_aux_1.0",
                 "teacher", "student")
LADDER_STAGES = ("calibration", "prior") + METHOD_STAGES + ("deployment",)
DOMAINS = ("pricing", "bidding")
BID_POLICIES = ("expert", "aggressive", "argmax", "sampling")


class StageError(RuntimeError):
    """A stage failed; the partial manifest has already been written."""

    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


def stage_seed(seed: int, *names) -> int:
    """Deterministic per-stage seed; independent of which other stages run."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def parse_seeds(text: str) -> tuple[int, ...]:
    """'1..10', '1,2,5' or '3' -> tuple of ints."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError("empty seed list")
    return tuple(out)


# --- plan ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    experiment_id: str = "pricing-default"
    domain: str = "pricing"
    variant: str = "default"
    stages: tuple[str, ...] = LADDER_STAGES
    seeds: tuple[int, ...] = tuple(range(1, 11))
    out_dir: str = "runs/default"
    tolerances: dg.Tolerances = field(default_factory=dg.Tolerances)
    market: MarketConfig = field(default_factory=MarketConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    bidding: bs.BidConfig = field(default_factory=bs.BidConfig)
    eval_episodes: int = 2000
    calibration_episodes: int = 2000
    deploy_episodes: int = 2000
    variants: tuple[str, ...] = VARIANTS
    bid_variants: tuple[str, ...] = bs.BID_VARIANTS
    bid_prior_episodes: int = 2000
    bid_eval_episodes: int = 2000
    workers: int = 1

    def validate(self) -> "ExperimentPlan":
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        unknown = [s for s in self.stages if s not in LADDER_STAGES]
        if unknown:
            raise ConfigError(f"unknown ladder stages: {unknown}")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("plan seeds must be distinct")
        for v in (self.variant,) + tuple(self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown market variant {v!r}")
        for v in self.bid_variants:
            if v not in bs.BID_VARIANTS:
                raise ConfigError(f"unknown bidding variant {v!r}")
        for name in ("eval_episodes", "calibration_episodes", "deploy_episodes",
                     "bid_prior_episodes", "bid_eval_episodes", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.market.with_variant(self.variant)
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.bidding.validate()
        return self

    def ordered_stages(self) -> tuple[str, ...]:
        return tuple(s for s in LADDER_STAGES if s in self.stages)

    @property
    def market_config(self) -> MarketConfig:
        return self.market.with_variant(self.variant)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("experiment_id", "domain", "variant", "out_dir",
                                            "eval_episodes", "calibration_episodes", "deploy_episodes",
                                            "bid_prior_episodes", "bid_eval_episodes", "workers")}
        d["stages"] = list(self.stages)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        d["bid_variants"] = list(self.bid_variants)
        d["tolerances"] = asdict(self.tolerances)
        train = asdict(self.train)
        train["hidden"] = list(self.train.hidden)
        for key in ("fit", "probe_fit"):
            train[key]["hidden"] = list(getattr(self.train, key).hidden)
        return {"plan": d, "market": _plain(self.market.to_dict()), "train": _plain(train),
                "bidding": _plain(self.bidding.to_dict())}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        doc = dict(doc or {})
        unknown = set(doc) - {"plan", "market", "train", "bidding"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        plan = dict(doc.get("plan") or {})
        fields_ = set(cls.__dataclass_fields__) - {"market", "train", "bidding", "tolerances"}
        bad = set(plan) - fields_ - {"tolerances"}
        if bad:
            raise ConfigError(f"unknown plan keys: {sorted(bad)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in plan.items() if k != "tolerances"}
        if "seeds" in kw and isinstance(kw["seeds"], str):
            kw["seeds"] = parse_seeds(kw["seeds"])
        try:
            if "tolerances" in plan:
                kw["tolerances"] = dg.Tolerances(**plan["tolerances"])
            base = MarketConfig().to_dict()
            base.update(doc.get("market") or {})
            kw["market"] = MarketConfig.from_dict(base)
            kw["train"] = _train_from_dict(doc.get("train") or {})
            kw["bidding"] = bs.BidConfig.from_dict({**bs.BidConfig().to_dict(), **(doc.get("bidding") or {})})
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        """Hash of everything that changes results (the output path does not)."""
        doc = self.to_dict()
        doc["plan"].pop("out_dir")
        doc["plan"].pop("workers")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    """Tuples to lists, recursively, for YAML/JSON."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _train_from_dict(data: dict) -> tr.TrainConfig:
    data = dict(data)
    fits = {key: dict(data.pop(key, {}) or {}) for key in ("fit", "probe_fit")}
    unknown = set(data) - set(tr.TrainConfig.__dataclass_fields__)
    base = {"fit": asdict(pc.FitConfig()), "probe_fit": asdict(dg.PROBE_FIT)}
    for key, fit in fits.items():
        unknown |= {f"{key}.{k}" for k in set(fit) - set(pc.FitConfig.__dataclass_fields__)}
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    if "hidden" in data:
        data["hidden"] = tuple(data["hidden"])
    for key, fit in fits.items():
        fit = {**base[key], **fit}
        fit["hidden"] = tuple(fit["hidden"])
        data[key] = pc.FitConfig(**fit)
    return tr.TrainConfig(**data)


def preset(name: str) -> ExperimentPlan:
    """Named configs: ``default`` (full 10-seed budgets) and ``ci`` (3 seeds x 50k steps)."""
    if name == "default":
        return ExperimentPlan()
    if name == "ci":
        return ExperimentPlan(
            experiment_id="pricing-ci", seeds=(1, 2, 3), eval_episodes=500,
            calibration_episodes=500, deploy_episodes=500, bid_prior_episodes=500, bid_eval_episodes=500,
            train=tr.TrainConfig(total_steps=50_000, prior_episodes=1500, prior_rounds=3,
                                 dagger_rounds=2, dagger_episodes=300),
        )
    raise ConfigError(f"unknown preset {name!r}")


def load_plan(path_or_preset: str | None) -> ExperimentPlan:
    if path_or_preset in (None, "", "default", "ci"):
        return preset(path_or_preset or "default")
    path = Path(path_or_preset)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return ExperimentPlan.from_dict(doc or {})


# --- manifest ------------------------------------------------------------

@dataclass
class RunManifest:
    experiment_id: str
    domain: str
    config_fingerprint: str
    tool_version: str
    seeds: list[int]
    stages: list[str]
    checkpoints: dict[str, str] = field(default_factory=dict)
    reports: dict[str, str] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)
    traces: dict[str, str] = field(default_factory=dict)
    curves: dict[str, str] = field(default_factory=dict)
    table_hashes: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    wall_clock_s: float = 0.0

    def files(self) -> dict[str, str]:
        out = {}
        for group in (self.checkpoints, self.reports, self.raw, self.traces, self.curves):
            out.update(group)
        return out

    def fingerprints(self) -> dict[str, str]:
        """Everything except timing: equal for identical reruns."""
        return {"config": self.config_fingerprint, **self.table_hashes}

    def write(self, root: Path) -> Path:
        root = Path(root)
        missing = [p for p in self.files().values() if not (root / p).exists()]
        if missing:
            raise RuntimeError(f"manifest references missing files: {missing[:3]}")
        path = root / "manifest.yaml"
        path.write_text(yaml.safe_dump(asdict(self), sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.yaml"
        return cls(**yaml.safe_load(path.read_text()))


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- per-seed pricing work -------------------------------------------------

def _metric_record(traces, stage: str, seed: int, tol: dg.Tolerances) -> dict:
    a, b = dg.business_metrics(traces, 0), dg.business_metrics(traces, 1)
    ha, hb = dg.price_histogram(traces, 0), dg.price_histogram(traces, 1)
    check = dg.stability_check(traces, traces, tol, side_pi=0, side_b=1)
    slices = dg.sliced_l1(traces, traces, 0, 1)
    return {
        "kind": "method", "method": stage, "seed": seed,
        "revpar_a": a.revpar, "revpar_b": b.revpar, "occ_a": a.occupancy, "occ_b": b.occupancy,
        "adr_a": a.adr, "adr_b": b.adr, "l1": dg.l1_distance(ha, hb), "js": dg.js_divergence(ha, hb),
        "delta_out": dg.delta_out(a, b), "hist_a": ha.tolist(), "hist_b": hb.tolist(),
        "stability_pass": check.passed, "outcome_pass": check.outcome_pass,
        "failures": ["/".join(k) for k in check.failures()],
        "slices": [asdict(r) for r in slices],
    }


class _SeedRun:
    """All pricing stages for one experiment seed, with lazy dependencies."""

    def __init__(self, plan: ExperimentPlan, seed: int, root: Path):
        self.plan = plan
        self.seed = seed
        self.root = root
        self.config = plan.market_config
        self.train = plan.train
        self.records: list[dict] = []
        self.files: dict[str, dict[str, str]] = {"checkpoints": {}, "traces": {}, "curves": {}}
        self._memo: dict[str, object] = {}
        self.eval_seed = stage_seed(seed, "eval")

    def s(self, *names) -> int:
        return stage_seed(self.seed, *names)

    def _save_model(self, stage: str, params: pc.PolicyParams) -> None:
        rel = f"checkpoints/{stage}/seed{self.seed}.bin"
        pc.save_model(self.root / rel, params)
        self.files["checkpoints"][f"{stage}/seed{self.seed}"] = rel

    def _save_curve(self, stage: str, curve: list[dict]) -> None:
        rel = f"curves/{stage}_seed{self.seed}.jsonl"
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in curve))
        self.files["curves"][f"{stage}/seed{self.seed}"] = rel

    def evaluate(self, stage: str, policy):
        traces = tr.evaluate(policy, self.config, self.plan.eval_episodes, self.eval_seed)
        self.records.append(_metric_record(traces, stage, self.seed, self.plan.tolerances))
        self._memo[f"eval:{stage}"] = traces
        return traces

    # dependencies
    def prior(self) -> tr.PriorFit:
        if "prior" not in self._memo:
            traces, nlls = tr.collect_prior_traces(self.config, self.train, self.s("prior-data"))
            fit = tr.fit_prior(traces, self.config, self.train, self.s("prior-fit"))
            self._memo["prior"] = fit
            self._memo["prior_nlls"] = nlls
        return self._memo["prior"]

    def teacher(self) -> tr.TrainResult:
        if "teacher" not in self._memo:
            self._memo["teacher"] = tr.train_trace_prior(self.config, self.prior().model, self.train,
                                                          self.s("teacher"))
        return self._memo["teacher"]

    def student(self) -> tr.StudentResult:
        if "student" not in self._memo:
            self._memo["student"] = tr.train_student(self.teacher().actor, self.config, self.train,
                                                     self.s("student") % 100_000)
        return self._memo["student"]

    # stages
    def run(self, stage: str) -> None:
        getattr(self, "stage_" + stage.replace(".", "_"))()

    def stage_calibration(self):
        traces = rollout(FixedRMPolicy(), FixedRMPolicy(), self.config, self.plan.calibration_episodes,
                         self.s("calibration"))
        rel = f"traces/calibration_seed{self.seed}.jsonl.gz"
        write_traces(self.root / rel, traces)
        self.files["traces"][f"calibration/seed{self.seed}"] = rel
        for key, with_q in (("visible", False), ("visible+q_B", True)):
            rep = dg.aliasing_cells(traces, include_rival_inventory=with_q)
            self.records.append({"kind": "aliasing", "seed": self.seed, "key": key, **asdict(rep)})
        obs, orc = dg.oracle_probe(traces, self.train.probe_fit, seed=self.s("probe") % 100_000)
        for name, rep in (("observable", obs), ("oracle", orc)):
            self.records.append({"kind": "probe", "seed": self.seed, "features": name, **asdict(rep)})
        self.evaluate("fixed_rm", FixedRMPolicy())
        self.evaluate("uniform", UniformPolicy())

    def stage_prior(self):
        fit = self.prior()
        self._save_model("prior", fit.model)
        self.records.append({"kind": "prior", "seed": self.seed, "heldout_nll": fit.heldout_nll,
                             "round_nll": list(self._memo["prior_nlls"])})

    def _rl(self, stage: str, fn):
        res = fn()
        self._save_model(stage, res.actor)
        self._save_curve(stage, res.curve)
        self.evaluate(stage, res.policy())

    def stage_ppo(self):
        self._rl("ppo", lambda: tr.train_ppo(self.config, self.train, self.s("ppo")))

    def stage_ctde_ppo(self):
        self._rl("ctde_ppo", lambda: tr.train_ctde_ppo(self.config, self.train, self.s("ctde_ppo")))

    def stage_bc_only(self):
        prior = self.prior().model
        self._save_model("bc_only", prior)
        self.evaluate("bc_only", tr.make_bc_policy(prior, self.train.regime))

    def stage_bc_warm_start(self):
        self._rl("bc_warm_start", lambda: tr.train_bc_warm_start(
            self.config, self.prior().model, self.train, self.s("bc_warm_start")))

    def stage_ppo_bc_aux_0_1(self):
        self._rl("ppo_bc_aux_0.1", lambda: tr.train_ppo_bc_aux(self.config, 0.1, self.train, self.s("aux", 0.1)))

    def stage_ppo_bc_aux_1_0(self):
        self._rl("ppo_bc_aux_1.0", lambda: tr.train_ppo_bc_aux(self.config, 1.0, self.train, self.s("aux", 1.0)))

    def stage_teacher(self):
        res = self.teacher()
        self._save_model("teacher", res.actor)
        self._save_curve("teacher", res.curve)
        self.evaluate("teacher", res.policy())

    def stage_student(self):
        st = self.student()
        self._save_model("student", st.student)
        traces = self.evaluate("student", st.policy())
        teacher_traces = self._memo.get("eval:teacher") or tr.evaluate(
            self.teacher().policy(), self.config, self.plan.eval_episodes, self.eval_seed)
        mt = dg.business_metrics(teacher_traces, 0)
        self.records.append({
            "kind": "student", "seed": self.seed, "selected_round": st.selected_round,
            "round_nll": st.round_nll, "dataset_size": st.dataset_size,
            "teacher_revpar": mt.revpar, "teacher_occ": mt.occupancy, "teacher_adr": mt.adr,
            "l1_student_teacher": dg.l1_distance(dg.price_histogram(traces, 0),
                                                 dg.price_histogram(teacher_traces, 0)),
        })

    def stage_deployment(self):
        nets = {"NC": [self.student().student], "CA": [self.teacher().actor]}
        for m in tr.run_deployment_matrix(nets, self.config, [self.s("deploy")], self.plan.deploy_episodes):
            self.records.append({
                "kind": "deployment", "seed": self.seed, "matchup": m.label, "hotel0": m.hotel0,
                "hotel1": m.hotel1, "revpar_0": float(m.revpar[0, 0]), "revpar_1": float(m.revpar[0, 1]),
                "occ_0": float(m.occupancy[0, 0]), "occ_1": float(m.occupancy[0, 1]),
                "adr_0": float(m.adr[0, 0]), "adr_1": float(m.adr[0, 1]), "l1": float(m.l1[0]),
                "modal_0": int(m.modal_bucket[0]), "modal_1": int(m.modal_bucket[1]),
            })


def _run_pricing_seed(plan: ExperimentPlan, seed: int, root: Path, stages: tuple[str, ...]):
    run = _SeedRun(plan, seed, root)
    for stage in stages:
        log.info("seed %d: stage %s", seed, stage)
        run.run(stage)
    return run.records, run.files


def _write_raw(root: Path, name: str, records: list[dict]) -> str:
    rel = f"raw/{name}.json"
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, sort_keys=True, indent=0))
    return rel


def _map_seeds(fn, plan: ExperimentPlan, args_list):
    """Yield results in submission order, so finished work is kept on failure."""
    if plan.workers > 1 and len(args_list) > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            yield from pool.map(fn, *zip(*args_list))
    else:
        for args in args_list:
            yield fn(*args)


def _new_manifest(plan: ExperimentPlan, stages) -> RunManifest:
    return RunManifest(plan.experiment_id, plan.domain, plan.fingerprint(), __version__,
                       list(plan.seeds), list(stages))


def _prepare(plan: ExperimentPlan) -> Path:
    plan.validate()
    root = Path(plan.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(yaml.safe_dump(plan.to_dict(), sort_keys=True))
    return root


def _finish(manifest: RunManifest, root: Path, started: float) -> RunManifest:
    write_reports(manifest, root)
    manifest.status = "complete"
    manifest.wall_clock_s = round(time.time() - started, 3)
    manifest.write(root)
    return manifest


def _fail(manifest: RunManifest, root: Path, started: float, exc: Exception, where: str):
    manifest.status = "partial"
    manifest.error = f"{type(exc).__name__} in {where}: {exc}"
    manifest.wall_clock_s = round(time.time() - started, 3)
    # keep only files that made it to disk
    for group in (manifest.checkpoints, manifest.reports, manifest.raw, manifest.traces, manifest.curves):
        for k in [k for k, p in group.items() if not (root / p).exists()]:
            del group[k]
    manifest.write(root)
    raise StageError(manifest.error, manifest) from exc


def run_ladder(plan: ExperimentPlan) -> RunManifest:
    """Every selected ladder stage, for every seed, then the report tables."""
    started = time.time()
    root = _prepare(plan)
    stages = plan.ordered_stages()
    manifest = _new_manifest(plan, stages)
    results = _map_seeds(_run_pricing_seed, plan, [(plan, s, root, stages) for s in plan.seeds])
    try:
        for seed, (records, files) in zip(plan.seeds, results):
            manifest.raw[f"ladder/seed{seed}"] = _write_raw(root, f"ladder_seed{seed}", records)
            manifest.checkpoints.update(files["checkpoints"])
            manifest.traces.update(files["traces"])
            manifest.curves.update(files["curves"])
    except Exception as exc:  # noqa: BLE001 - recorded in the partial manifest
        _fail(manifest, root, started, exc, "ladder")
    return _finish(manifest, root, started)


def _variant_seed(plan: ExperimentPlan, variant: str, seed: int, root: Path):
    vplan = replace(plan, variant=variant)
    run = _SeedRun(vplan, seed, root)
    teacher = run.evaluate("teacher", run.teacher().policy())
    student = run.evaluate("student", run.student().policy())
    mt, ms = dg.business_metrics(teacher, 0), dg.business_metrics(student, 0)
    return [{
        "kind": "variant", "variant": variant, "seed": seed,
        "teacher_l1": run.records[0]["l1"], "student_l1": run.records[1]["l1"],
        "student_gap": ms.revpar - mt.revpar,
        "student_teacher_l1": dg.l1_distance(dg.price_histogram(student, 0), dg.price_histogram(teacher, 0)),
    }]


def run_variants(plan: ExperimentPlan) -> RunManifest:
    """Teacher and student retrained on each market variant."""
    started = time.time()
    root = _prepare(plan)
    manifest = _new_manifest(plan, ["variants"])
    args = [(plan, v, s, root) for v in plan.variants for s in plan.seeds]
    try:
        for (_, v, s, _), recs in zip(args, _map_seeds(_variant_seed, plan, args)):
            manifest.raw[f"variants/{v}/seed{s}"] = _write_raw(root, f"variant_{v}_seed{s}", recs)
    except Exception as exc:  # noqa: BLE001
        _fail(manifest, root, started, exc, "variants")
    return _finish(manifest, root, started)


# --- bidding ------------------------------------------------------------------

def _bidding_seed(plan: ExperimentPlan, variant: str, seed: int):
    cfg = plan.bidding.with_variant(variant)
    fit_traces = bs.bid_rollout(bs.ExpertBidder(), cfg, plan.bid_prior_episodes, stage_seed(seed, variant, "bid-prior"))
    prior = bs.fit_bid_prior(fit_traces, plan.train.fit, seed=stage_seed(seed, variant, "bid-fit") % 100_000).model
    eval_seed = stage_seed(seed, variant, "bid-eval")
    policies = {"expert": bs.ExpertBidder(), "aggressive": bs.AggressiveBidder(),
                "argmax": bs.PriorBidder(prior, greedy=True), "sampling": bs.PriorBidder(prior, greedy=False)}
    traces = {k: bs.bid_rollout(p, cfg, plan.bid_eval_episodes, eval_seed) for k, p in policies.items()}
    ref = traces["expert"].bid_shares()
    out = []
    for name, t in traces.items():
        shares = t.bid_shares()
        out.append({"kind": "bidding", "variant": variant, "seed": seed, "policy": name,
                    "value_per_step": t.value_per_step(), "pacing_gap": dg.pacing_gap(t.cum_spend_fraction()),
                    "l1": dg.l1_distance(shares, ref), "js": dg.js_divergence(shares, ref),
                    "shares": shares.tolist()})
    return out


def run_bidding_suite(plan: ExperimentPlan) -> RunManifest:
    started = time.time()
    plan = replace(plan, domain="bidding")
    root = _prepare(plan)
    manifest = _new_manifest(plan, ["bidding"])
    args = [(plan, v, s) for v in plan.bid_variants for s in plan.seeds]
    try:
        for (_, v, s), recs in zip(args, _map_seeds(_bidding_seed, plan, args)):
            manifest.raw[f"bidding/{v}/seed{s}"] = _write_raw(root, f"bidding_{v}_seed{s}", recs)
    except Exception as exc:  # noqa: BLE001
        _fail(manifest, root, started, exc, "bidding")
    return _finish(manifest, root, started)


# --- tables -----------------------------------------------------------------------

TABLE_COLUMNS = {
    "ladder": ["method", "n_seeds", "revpar_a", "revpar_a_hw", "revpar_b", "revpar_b_hw", "occ_a", "occ_a_hw",
               "occ_b", "adr_a", "adr_a_hw", "adr_b", "l1", "l1_hw", "js", "js_hw", "delta_out",
               "stability_pass_share"],
    "ladder_seeds": ["method", "seed", "revpar_a", "revpar_b", "occ_a", "occ_b", "adr_a", "adr_b", "l1", "js",
                     "delta_out", "stability_pass"],
    "price_buckets": ["method", "side"] + [f"bucket_{k}" for k in range(7)],
    "slices": ["method", "slice", "l1", "js", "n_scored", "n_flagged"],
    "stability": ["method", "seed", "passed", "outcome_pass", "delta_out", "n_failed", "failed_components"],
    "aliasing": ["seed", "key", "total_steps", "eligible_cells", "eligible_step_share", "multi_action_cell_share",
                 "substantive_cell_share", "substantive_step_share", "weighted_norm_entropy"],
    "oracle_probe": ["features", "n_seeds", "nll", "nll_hw", "accuracy", "accuracy_hw", "brier",
                     "true_class_prob", "norm_entropy"],
    "oracle_probe_seeds": ["seed", "features", "nll", "accuracy", "brier", "true_class_prob", "norm_entropy", "n"],
    "student": ["metric", "teacher_mean", "student_mean", "student_low", "student_high", "teacher_inside"],
    "deployment": ["matchup", "hotel0", "hotel1", "n_seeds", "revpar_0", "revpar_1", "gap", "gap_hw", "occ_0",
                   "occ_1", "adr_0", "adr_1", "l1", "modal_0", "modal_1"],
    "variants": ["variant", "n_seeds", "teacher_l1_vs_b", "teacher_l1_hw", "student_l1_vs_b", "student_l1_hw",
                 "student_revpar_gap_vs_teacher", "gap_hw", "student_teacher_l1"],
    "bidding": ["variant", "policy", "n_seeds", "value_per_step", "value_hw", "pacing_gap", "pacing_hw", "l1",
                "l1_hw", "js", "js_hw"] + [f"share_{k}" for k in range(5)],
}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if not np.isfinite(x) else f"{float(x):.6f}"
    return str(x)


def _ci(values) -> tuple[float, float | None]:
    v = [x for x in values if x is not None]
    if not v:
        return float("nan"), None
    if len(v) < 2:
        return float(np.mean(v)), None
    c = dg.seed_ci(v)
    return c.mean, c.half_width


def _mean(values):
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None


def _group(records, kind, *keys):
    out: dict = {}
    for r in records:
        if r["kind"] == kind:
            out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def build_tables(records: list[dict]) -> dict[str, list[list]]:
    """Aggregate raw per-seed records into table rows (order-independent)."""
    records = sorted(records, key=lambda r: json.dumps(r, sort_keys=True))
    t: dict[str, list[list]] = {}
    order = {m: i for i, m in enumerate(("fixed_rm", "uniform") + METHOD_STAGES)}
    methods = _group(records, "method", "method")
    keys = sorted(methods, key=lambda k: order.get(k[0], 99))
    if keys:
        t["ladder"], t["ladder_seeds"], t["price_buckets"], t["slices"], t["stability"] = [], [], [], [], []
    for key in keys:
        rs = sorted(methods[key], key=lambda r: r["seed"])
        row = [key[0], len(rs)]
        for col in ("revpar_a", "revpar_b", "occ_a", "occ_b", "adr_a", "adr_b", "l1", "js"):
            m, hw = _ci([r[col] for r in rs])
            row += [m] if col in ("occ_b", "adr_b") else [m, hw]
        row += [_mean([r["delta_out"] for r in rs]), float(np.mean([r["stability_pass"] for r in rs]))]
        t["ladder"].append(row)
        for side in ("a", "b"):
            t["price_buckets"].append([key[0], side] + list(np.mean([r[f"hist_{side}"] for r in rs], axis=0)))
        for r in rs:
            t["ladder_seeds"].append([key[0], r["seed"]] + [r[c] for c in (
                "revpar_a", "revpar_b", "occ_a", "occ_b", "adr_a", "adr_b", "l1", "js", "delta_out",
                "stability_pass")])
            t["stability"].append([key[0], r["seed"], r["stability_pass"], r["outcome_pass"], r["delta_out"],
                                   len(r["failures"]), ";".join(r["failures"])])
        for name in ("overall",) + dg.SLICES:
            rows = [s for r in rs for s in r["slices"] if s["name"] == name]
            scored = [s for s in rows if not s["flagged"]]
            t["slices"].append([key[0], name, _mean([s["l1"] for s in scored]), _mean([s["js"] for s in scored]),
                                len(scored), len(rows) - len(scored)])
    alias = [r for r in records if r["kind"] == "aliasing"]
    if alias:
        t["aliasing"] = [[r[c] for c in TABLE_COLUMNS["aliasing"]]
                         for r in sorted(alias, key=lambda r: (r["seed"], r["key"]))]
    probe = _group(records, "probe", "features")
    if probe:
        t["oracle_probe"], t["oracle_probe_seeds"] = [], []
        for feat in ("observable", "oracle"):
            rs = sorted(probe.get((feat,), []), key=lambda r: r["seed"])
            if not rs:
                continue
            nll, nll_hw = _ci([r["nll"] for r in rs])
            acc, acc_hw = _ci([r["accuracy"] for r in rs])
            t["oracle_probe"].append([feat, len(rs), nll, nll_hw, acc, acc_hw, _mean([r["brier"] for r in rs]),
                                      _mean([r["true_class_prob"] for r in rs]),
                                      _mean([r["norm_entropy"] for r in rs])])
            for r in rs:
                t["oracle_probe_seeds"].append([r[c] for c in TABLE_COLUMNS["oracle_probe_seeds"]])
    students = sorted((r for r in records if r["kind"] == "student"), key=lambda r: r["seed"])
    if students and ("student",) in methods:
        srs = {r["seed"]: r for r in methods[("student",)]}
        t["student"] = []
        for metric, s_col, t_col in (("revpar", "revpar_a", "teacher_revpar"), ("occupancy", "occ_a", "teacher_occ"),
                                     ("adr", "adr_a", "teacher_adr"), ("l1_vs_teacher", None, "l1_student_teacher")):
            if s_col is None:
                m, hw = _ci([r[t_col] for r in students])
                t["student"].append([metric, None, m, m - (hw or 0.0), m + (hw or 0.0), None])
                continue
            tm = _mean([r[t_col] for r in students])
            sm, hw = _ci([srs[r["seed"]][s_col] for r in students if r["seed"] in srs])
            inside = None if hw is None else bool(sm - hw <= tm <= sm + hw)
            t["student"].append([metric, tm, sm, None if hw is None else sm - hw,
                                 None if hw is None else sm + hw, inside])
    deploy = _group(records, "deployment", "matchup", "hotel0", "hotel1")
    if deploy:
        t["deployment"] = []
        for key in sorted(deploy):
            rs = sorted(deploy[key], key=lambda r: r["seed"])
            r0, r1 = [r["revpar_0"] for r in rs], [r["revpar_1"] for r in rs]
            gap_hw = dg.paired_ci(r0, r1).half_width if len(rs) > 1 else None
            modal = lambda col: int(np.bincount([r[col] for r in rs]).argmax())  # noqa: E731
            t["deployment"].append([key[0], key[1], key[2], len(rs), _mean(r0), _mean(r1),
                                    float(np.mean(r0) - np.mean(r1)), gap_hw, _mean([r["occ_0"] for r in rs]),
                                    _mean([r["occ_1"] for r in rs]), _mean([r["adr_0"] for r in rs]),
                                    _mean([r["adr_1"] for r in rs]), _mean([r["l1"] for r in rs]),
                                    modal("modal_0"), modal("modal_1")])
    variants = _group(records, "variant", "variant")
    if variants:
        t["variants"] = []
        for key in sorted(variants, key=lambda k: VARIANTS.index(k[0])):
            rs = variants[key]
            tl, tl_hw = _ci([r["teacher_l1"] for r in rs])
            sl, sl_hw = _ci([r["student_l1"] for r in rs])
            g, g_hw = _ci([r["student_gap"] for r in rs])
            t["variants"].append([key[0], len(rs), tl, tl_hw, sl, sl_hw, g, g_hw,
                                  _mean([r["student_teacher_l1"] for r in rs])])
    bidding = _group(records, "bidding", "variant", "policy")
    if bidding:
        t["bidding"] = []
        vorder = sorted({k[0] for k in bidding}, key=bs.BID_VARIANTS.index)
        for v in vorder + ["all"]:
            for pol in BID_POLICIES:
                if v == "all":
                    # per-seed average across variants, then a CI over seeds
                    per_seed: dict = {}
                    for (vv, pp), rs in bidding.items():
                        if pp == pol:
                            for r in rs:
                                per_seed.setdefault(r["seed"], []).append(r)
                    rs = [{c: float(np.mean([x[c] for x in group], axis=0)) if c != "shares"
                           else np.mean([x[c] for x in group], axis=0).tolist()
                           for c in ("value_per_step", "pacing_gap", "l1", "js", "shares")}
                          for _, group in sorted(per_seed.items())]
                else:
                    rs = bidding.get((v, pol), [])
                if not rs:
                    continue
                row = [v, pol, len(rs)]
                for col in ("value_per_step", "pacing_gap", "l1", "js"):
                    row += list(_ci([r[col] for r in rs]))
                row += list(np.mean([r["shares"] for r in rs], axis=0))
                t["bidding"].append(row)
    return t


def render_table(name: str, rows: list[list], fingerprint: str, seeds) -> str:
    buf = io.StringIO()
    buf.write(f"# table={name} schema=v{SCHEMA_VERSION} fingerprint={fingerprint} "
              f"seeds={';'.join(str(s) for s in seeds)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS[name])
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def read_table(path) -> tuple[dict, list[dict]]:
    """(header metadata, rows as dicts of strings)."""
    lines = Path(path).read_text().splitlines()
    meta = dict(part.split("=", 1) for part in lines[0].lstrip("# ").split())
    rows = list(csv.DictReader(lines[1:]))
    return meta, rows


def load_records(manifest: RunManifest, root: Path) -> list[dict]:
    records = []
    for rel in manifest.raw.values():
        records.extend(json.loads((root / rel).read_text()))
    return records


def write_reports(manifest: RunManifest, root: Path) -> dict[str, str]:
    tables = build_tables(load_records(manifest, root))
    manifest.reports.clear()
    manifest.table_hashes.clear()
    (root / "reports").mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        rel = f"reports/{name}.csv"
        (root / rel).write_text(render_table(name, rows, manifest.config_fingerprint, manifest.seeds))
        manifest.reports[name] = rel
        manifest.table_hashes[name] = _sha(root / rel)
    summary = root / "reports" / "summary.yaml"
    summary.write_text(yaml.safe_dump({"experiment_id": manifest.experiment_id,
                                       "config_fingerprint": manifest.config_fingerprint,
                                       "seeds": manifest.seeds, "tables": sorted(tables)}, sort_keys=True))
    manifest.reports["summary"] = "reports/summary.yaml"
    manifest.table_hashes["summary"] = _sha(summary)
    return dict(manifest.reports)


def report(manifest_path) -> RunManifest:
    """Rebuild every table from a manifest's raw records; no simulation."""
    path = Path(manifest_path)
    root = path if path.is_dir() else path.parent
    manifest = RunManifest.read(path)
    write_reports(manifest, root)
    manifest.write(root)
    return manifest


def _diagnose_seed(plan: ExperimentPlan, seed: int, path: Path | None, which: tuple[str, ...]):
    if path is None:
        traces = rollout(FixedRMPolicy(), FixedRMPolicy(), plan.market_config, plan.calibration_episodes,
                         stage_seed(seed, "calibration"))
    else:
        traces = read_traces(path, plan.market_config)
    out = []
    if "aliasing" in which:
        for key, with_q in (("visible", False), ("visible+q_B", True)):
            out.append({"kind": "aliasing", "seed": seed, "key": key,
                        **asdict(dg.aliasing_cells(traces, include_rival_inventory=with_q))})
    if "oracle" in which:
        obs, orc = dg.oracle_probe(traces, plan.train.probe_fit, seed=stage_seed(seed, "probe") % 100_000)
        for name, rep in (("observable", obs), ("oracle", orc)):
            out.append({"kind": "probe", "seed": seed, "features": name, **asdict(rep)})
    return out


def run_diagnostics(plan: ExperimentPlan, which: tuple[str, ...] = ("aliasing", "oracle"),
                    traces_dir: str | None = None) -> RunManifest:
    """Aliasing and/or oracle-probe tables, from trace files when given
    (``seed<k>.jsonl.gz`` or ``calibration_seed<k>.jsonl.gz``), else from
    fresh Fixed RM self-play."""
    started = time.time()
    root = _prepare(plan)
    manifest = _new_manifest(plan, [f"diagnose-{w}" for w in which])
    paths: dict[int, Path | None] = {s: None for s in plan.seeds}
    if traces_dir is not None:
        for s in plan.seeds:
            found = [p for p in (Path(traces_dir) / f"seed{s}.jsonl.gz",
                                 Path(traces_dir) / f"calibration_seed{s}.jsonl.gz") if p.exists()]
            if not found:
                raise ConfigError(f"no trace file for seed {s} in {traces_dir}")
            paths[s] = found[0]
    try:
        for s, recs in zip(plan.seeds, _map_seeds(_diagnose_seed, plan,
                                                  [(plan, s, paths[s], which) for s in plan.seeds])):
            manifest.raw[f"diagnostics/seed{s}"] = _write_raw(root, f"diagnostics_seed{s}", recs)
    except Exception as exc:  # noqa: BLE001
        _fail(manifest, root, started, exc, "diagnostics")
    return _finish(manifest, root, started)


def simulate(plan: ExperimentPlan, episodes: int, policy_a: str = "fixed_rm") -> RunManifest:
    """Write Hotel A (``policy_a``) vs Fixed RM traces, one file per seed."""
    started = time.time()
    if policy_a not in ("fixed_rm", "uniform"):
        raise ConfigError(f"unknown simulate policy {policy_a!r}")
    root = _prepare(plan)
    manifest = _new_manifest(plan, ["simulate"])
    pol = FixedRMPolicy() if policy_a == "fixed_rm" else UniformPolicy()
    for s in plan.seeds:
        traces = rollout(pol, FixedRMPolicy(), plan.market_config, episodes, stage_seed(s, "calibration"))
        rel = f"traces/seed{s}.jsonl.gz"
        write_traces(root / rel, traces)
        manifest.traces[f"simulate/seed{s}"] = rel
    manifest.status = "complete"
    manifest.wall_clock_s = round(time.time() - started, 3)
    manifest.write(root)
    return manifest
