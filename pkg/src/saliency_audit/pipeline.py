"""Run every CLI stage in order for one seed."""

from __future__ import annotations

import time
from pathlib import Path

from .cli import main as cli

STAGES = ("gen-data", "train", "attribute", "evaluate", "overlap", "retrain", "report")


def stage_args(out: Path) -> dict:
    out = Path(out)
    ckpt, attr_dir = out / "model/model.samc", out / "attr"
    return {
        "gen-data": ["--out", out / "data"],
        "train": ["--manifest", out / "data/manifest.jsonl", "--out", out / "model"],
        "attribute": ["--checkpoint", ckpt, "--manifest", out / "model/test.jsonl", "--out", attr_dir, "--ig-check"],
        "evaluate": ["--checkpoint", ckpt, "--attributions", attr_dir, "--out", out / "eval"],
        "overlap": ["--checkpoint", ckpt, "--attributions", attr_dir, "--out", out / "overlap"],
        "retrain": ["--checkpoint", ckpt, "--attributions", attr_dir, "--out", out / "retrain"],
        "report": ["--out", out / "report", out / "eval/metrics.csv", out / "retrain/retrain.csv"],
    }


def run(out, seed: int, config=None, jobs: int = 1) -> dict:
    """Run all stages into ``out``; return wall-clock seconds per stage."""
    common = ["--seed", str(seed), "--jobs", str(jobs)] + (["--config", str(config)] if config else [])
    timings = {}
    for stage, args in stage_args(out).items():
        t0 = time.perf_counter()
        code = cli([stage] + [str(a) for a in args] + common)
        timings[stage] = time.perf_counter() - t0
        if code != 0:
            raise RuntimeError(f"{stage} exited with {code}")
    return timings
