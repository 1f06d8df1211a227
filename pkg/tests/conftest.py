import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance criterion -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a pipeline small enough to run in seconds; 20 per class leaves 3 per class in the retrain split
TINY_CONFIG = {
    "harness": {"synth": {"n_per_class": 20}, "retrain": {"epochs": 2}},
    "train": {"epochs": 2},
    "attribution": {"ig_steps": 4, "sg_samples": 2, "shap_samples": 2},
}


def run_tiny(root, seed=0):
    import json

    from saliency_audit.pipeline import run

    root.mkdir(parents=True, exist_ok=True)
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY_CONFIG))
    return run(root / "run", seed, config)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    run_tiny(root)
    return root / "run"
