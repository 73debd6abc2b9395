"""Full-size runs of the shipped default configuration"""

import json
import os
import time

import pytest

import app
from config import DEFAULT_RUN_CONFIG, load_run_config
from picking.common import EXIT_OK
from pipeline_core import PipelineCore

SEED = "1"
AB_BUDGET_SECONDS = 600.0

pytestmark = pytest.mark.slow


def workers():
    return str(max(os.cpu_count() or 1, 1))


def shipped(*args):
    return app.main(["--config", str(DEFAULT_RUN_CONFIG), "--seed", SEED, "--threads", workers(), *args])


@pytest.fixture(scope="module")
def shipped_run(tmp_path_factory):
    """Scenes, logged picks, dataset and the default GBDT chain from the shipped config"""
    root = tmp_path_factory.mktemp("shipped")
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(root)
        for command in ("gen-scenes", "collect-picks", "gen-dataset", "train"):
            assert shipped(command) == EXIT_OK
        yield root


def test_refinement_cuts_missed_picks(shipped_run, monkeypatch):
    monkeypatch.chdir(shipped_run)
    start = time.perf_counter()
    assert shipped("abtest") == EXIT_OK
    elapsed = time.perf_counter() - start

    report = json.loads((shipped_run / "out" / "reports" / "ab_report.json").read_text())
    control, treatment = report["control"], report["treatment"]
    assert control["inducts"] == treatment["inducts"] == 50_000
    assert treatment["missed"] < control["missed"]
    assert report["significant"]
    assert report["relative_missed_reduction"] >= 0.10
    assert elapsed <= AB_BUDGET_SECONDS, f"A/B run took {elapsed:.0f} s"


def test_gbdt_leads_mlp_over_three_dataset_seeds(shipped_run, monkeypatch):
    monkeypatch.chdir(shipped_run)
    config = load_run_config(DEFAULT_RUN_CONFIG, {"threads": int(workers())}, int(SEED))
    comparison, table = PipelineCore(config).compare(n_datasets=3)
    assert all(len(rows) == 3 for rows in comparison.runs.values())
    assert comparison.leads("gbdt", "mlp", tolerance=1.05), table
