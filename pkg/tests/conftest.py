import hashlib
import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

from igc.ablate import BASE_ARMS, arm_matrix, final_rows, run_dir
from igc.cli import main as cli_main
from igc.config import RunConfig
from igc.train import read_metrics

ARTIFACTS = Path(os.environ.get("IGC_ACCEPTANCE_DIR", Path(__file__).resolve().parent.parent / "artifacts"))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ablation():
    """Final metrics rows per (arm, seed) from the cached default-config ablation."""
    cfg = RunConfig()
    out = ["--out", str(ARTIFACTS)]
    for cmd in (["gen-data"], ["pretrain"], ["ablate"]):
        assert cli_main(cmd + out) == 0, f"igc {cmd[0]} failed"
    base = ARTIFACTS / "base" / "base.ckpt"
    base_hash = hashlib.sha256(base.read_bytes()).hexdigest()
    rows, dirs = [], {}
    for arm in arm_matrix(cfg, BASE_ARMS):
        for seed in cfg.train.seeds:
            d, _ = run_dir(ARTIFACTS / "ablate", cfg, arm, seed, base_hash)
            rows += read_metrics(d / "metrics.csv")
            dirs[arm.name, seed] = d
    return cfg, final_rows(rows), dirs
