from dataclasses import replace

import pytest

from disciplinebench import harness as h
from disciplinebench import policy_core as pc
from disciplinebench import trainers as tr

TINY_TRAIN = tr.TrainConfig(total_steps=1024, batch_steps=1024, hidden=(16, 16), prior_episodes=120,
                            prior_rounds=2, dagger_rounds=1, dagger_episodes=60,
                            fit=pc.FitConfig(hidden=(16, 16), max_epochs=3),
                            probe_fit=pc.FitConfig(hidden=(16, 16), max_epochs=3))


def tiny_plan(out_dir, **kw) -> h.ExperimentPlan:
    base = h.ExperimentPlan(experiment_id="tiny", seeds=(1, 2), out_dir=str(out_dir), eval_episodes=60,
                            calibration_episodes=150, deploy_episodes=60, bid_prior_episodes=80,
                            bid_eval_episodes=60, variants=("default", "low_demand"),
                            bid_variants=("default", "tight_budget"), train=TINY_TRAIN)
    return replace(base, **kw)


@pytest.fixture
def make_plan(tmp_path):
    def make(name="run", **kw):
        return tiny_plan(tmp_path / name, **kw)
    return make


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = sorted(getattr(mod, "RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
