"""Command-line pipeline: gen-data, train, attribute, evaluate, overlap, retrain, report.

Every command takes ``--out DIR`` and writes the fully resolved run config to
``DIR/config.json`` next to its artifacts. Exit codes: 0 success, 1 usage or
config error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import dsp, harness, metrics, overlap
from .autonn import Classifier, ModelConfig, TrainConfig, TrainingDiverged, train
from .io import FormatError, atomic_write_text, canonical_json, read_tensor, read_wav, write_tensor, write_wav

log = logging.getLogger("saliency_audit")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad arguments, config or inputs (exit code 1)."""


# run config

@dataclass(frozen=True)
class MetricsConfig:
    batch: int = 32

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass(frozen=True)
class OverlapConfig:
    tau: float = 0.5
    mode: str = "intersection"
    include_self: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.mode not in overlap.MODES:
            raise ValueError(f"mode must be one of {overlap.MODES}")


@dataclass(frozen=True)
class HarnessConfig:
    synth: harness.SynthConfig = field(default_factory=harness.SynthConfig)
    split: harness.SplitSpec = field(default_factory=harness.SplitSpec)
    retrain: TrainConfig = field(default_factory=TrainConfig)
    mask_input: str = "map"

    def __post_init__(self):
        if self.mask_input not in harness.MASK_INPUTS:
            raise ValueError(f"mask_input must be one of {harness.MASK_INPUTS}")


# the base classifier trains faster than the mask classifiers; see README
BASE_TRAIN = TrainConfig(learning_rate=0.02)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    mel: dsp.MelConfig = field(default_factory=dsp.MelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = BASE_TRAIN
    attribution: attr.AttributionConfig = field(default_factory=attr.AttributionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    overlap: OverlapConfig = field(default_factory=OverlapConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    # seeds inside sections are all derived from the root seed
    def seeded(self):
        s = self.seed
        return replace(
            self,
            train=replace(self.train, seed=s),
            attribution=replace(self.attribution, seed=s),
            harness=replace(
                self.harness,
                synth=replace(self.harness.synth, seed=s, sample_rate=self.stft.sample_rate),
                split=replace(self.harness.split, seed=s),
                retrain=replace(self.harness.retrain, seed=s),
            ),
        )


SECTIONS = ("dsp", "model", "train", "attribution", "metrics", "overlap", "harness")
_HIDDEN = {
    TrainConfig: ("seed",),
    attr.AttributionConfig: ("seed",),
    harness.SynthConfig: ("seed", "sample_rate"),
    harness.SplitSpec: ("seed",),
    ModelConfig: ("stft", "mel", "waveform_input", "n_classes"),
}


def _build(cls, data, where: str, **fixed):
    if not isinstance(data, dict):
        raise UsageError(f"config section {where} must be an object")
    allowed = {f.name for f in fields(cls)} - set(_HIDDEN.get(cls, ())) - set(fixed)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs, **fixed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where}: {exc}") from None


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise UsageError("seed must be a non-negative integer")
    dsp_doc = doc.get("dsp", {})
    if not isinstance(dsp_doc, dict) or set(dsp_doc) - {"stft", "mel"}:
        raise UsageError("dsp section takes only 'stft' and 'mel'")
    stft = _build(dsp.StftConfig, dsp_doc.get("stft", {}), "dsp.stft")
    mel = _build(dsp.MelConfig, dsp_doc.get("mel", {}), "dsp.mel")
    model = _build(ModelConfig, doc.get("model", {}), "model", stft=stft, mel=mel)
    h = doc.get("harness", {})
    if not isinstance(h, dict):
        raise UsageError("config section harness must be an object")
    unknown = sorted(set(h) - {"synth", "split", "retrain", "mask_input"})
    if unknown:
        raise UsageError(f"unknown key(s) in harness: {', '.join(unknown)}")
    hcfg = _build(HarnessConfig, {"mask_input": h.get("mask_input", "map")}, "harness",
                  synth=_build(harness.SynthConfig, h.get("synth", {}), "harness.synth",
                               sample_rate=stft.sample_rate),
                  split=_build(harness.SplitSpec, h.get("split", {}), "harness.split"),
                  retrain=_build(TrainConfig, h.get("retrain", {}), "harness.retrain"))
    train_doc = doc.get("train", {})
    if not isinstance(train_doc, dict):
        raise UsageError("config section train must be an object")
    train_doc = {**{k: v for k, v in asdict(BASE_TRAIN).items() if k != "seed"}, **train_doc}
    return RunConfig(
        seed=seed,
        stft=stft,
        mel=mel,
        model=model,
        train=_build(TrainConfig, train_doc, "train"),
        attribution=_build(attr.AttributionConfig, doc.get("attribution", {}), "attribution"),
        metrics=_build(MetricsConfig, doc.get("metrics", {}), "metrics"),
        overlap=_build(OverlapConfig, doc.get("overlap", {}), "overlap"),
        harness=hcfg,
    )


def _section(obj) -> dict:
    hidden = _HIDDEN.get(type(obj), ())
    return {k: v for k, v in asdict(obj).items() if k not in hidden}


def resolved(rc: RunConfig) -> dict:
    """The canonical JSON document that reproduces ``rc`` when parsed."""
    model = _section(rc.model)
    model["conv"] = [asdict(c) for c in rc.model.conv]
    return {
        "seed": rc.seed,
        "dsp": {"stft": asdict(rc.stft), "mel": asdict(rc.mel)},
        "model": model,
        "train": _section(rc.train),
        "attribution": _section(rc.attribution),
        "metrics": asdict(rc.metrics),
        "overlap": asdict(rc.overlap),
        "harness": {
            "synth": _section(rc.harness.synth),
            "split": _section(rc.harness.split),
            "retrain": _section(rc.harness.retrain),
            "mask_input": rc.harness.mask_input,
        },
    }


def load_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {args.config}: {exc}") from None
    rc = parse_run_config(doc)
    over = {}
    if getattr(args, "tau", None) is not None:
        over["tau"] = args.tau
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    if getattr(args, "include_self", False):
        over["include_self"] = True
    if over:
        try:
            rc = replace(rc, overlap=replace(rc.overlap, **over))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        rc = replace(rc, seed=args.seed)
    return rc.seeded()


# file helpers

def _rel(path, start) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")


def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing manifest: {path}")
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from None


def _jsonl(records) -> str:
    return "".join(canonical_json(r) + "\n" for r in records)


def _rebase(records, src_dir: Path, dst_dir: Path) -> list[dict]:
    out = []
    for r in records:
        r = dict(r)
        for key in ("wav", "ground_truth"):
            r[key] = _rel(src_dir / r[key], dst_dir)
        out.append(r)
    return out


def _clean_json(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    return obj


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(_clean_json(obj), sort_keys=True, indent=1) + "\n")


def _echo(out: Path, command: str, rc: RunConfig, inputs: dict) -> None:
    _write_json(out / "config.json", {"command": command, "inputs": inputs, "config": resolved(rc)})


def _load_model(path) -> Classifier:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing checkpoint: {path}")
    try:
        return Classifier.load(path)
    except FormatError as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def _load_wave(manifest_dir: Path, record: dict, sample_rate: int) -> np.ndarray:
    wave, sr = read_wav(manifest_dir / record["wav"])
    if sr != sample_rate:
        raise UsageError(f"{record['wav']}: sample rate {sr} differs from config {sample_rate}")
    return wave


def _methods(arg, available=None) -> list[str]:
    if arg in (None, "all"):
        return list(available if available is not None else attr.METHODS)
    names = [m.strip() for m in arg.split(",") if m.strip()]
    bad = [m for m in names if m not in attr.METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; valid: {', '.join(attr.METHODS)}")
    return names


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# gen-data

def _gen_one(job):
    synth, stft, index = job
    return harness.generate_sample(synth, index, stft)


def cmd_gen_data(args, rc: RunConfig) -> None:
    out = Path(args.out)
    synth = rc.harness.synth
    samples = _map(_gen_one, [(synth, rc.stft, i) for i in range(2 * synth.n_per_class)], args.jobs)
    records = []
    for s in samples:
        wav_path = f"wav/{s.sample_id}.wav"
        gt_path = f"gt/{s.sample_id}.satn"
        write_wav(out / wav_path, s.waveform, synth.sample_rate)
        write_tensor(out / gt_path, s.ground_truth.astype(np.float32))
        records.append(harness.manifest_record(s, wav_path, gt_path))
    atomic_write_text(out / "manifest.jsonl", _jsonl(records))
    _echo(out, "gen-data", rc, {})
    log.info("wrote %d samples to %s", len(records), out)


# train

def _history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "loss", "train_acc", "val_acc"))
    for row in history:
        w.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['train_acc']:.6f}", f"{row['val_acc']:.6f}"])
    return buf.getvalue()


def cmd_train(args, rc: RunConfig) -> None:
    manifest = Path(args.manifest)
    records = _read_jsonl(manifest)
    out = Path(args.out)
    waves = np.stack([_load_wave(manifest.parent, r, rc.stft.sample_rate) for r in records])
    labels = np.array([r["label"] for r in records])
    parts = harness.split(labels, rc.harness.split)
    split_records = {}
    for name, idx in zip(("train", "val", "test"), parts):
        split_records[name] = _rebase([records[i] for i in idx], manifest.parent, out)
    tr, va, te = parts
    model = Classifier(rc.model, seed=rc.seed).calibrate(waves[tr])
    t0 = time.perf_counter()
    model, history = train(model, waves[tr], labels[tr], rc.train, val=(waves[va], labels[va]))
    log.info("trained %d epochs in %.1f s", rc.train.epochs, time.perf_counter() - t0)
    test_acc = float(np.mean(model.predict(waves[te]) == labels[te])) if len(te) else float("nan")
    model.save(out / "model.samc")
    atomic_write_text(out / "history.csv", _history_csv(history))
    for name, recs in split_records.items():
        atomic_write_text(out / f"{name}.jsonl", _jsonl(recs))
    _write_json(out / "summary.json", {
        "n_train": len(tr),
        "n_val": len(va),
        "n_test": len(te),
        "epochs": len(history),
        "final_val_acc": history[-1]["val_acc"] if history else None,
        "test_acc": test_acc,
    })
    _echo(out, "train", rc, {"manifest": args.manifest})
    log.info("test accuracy %.3f", test_acc)


# attribute

def _attribute_one(job):
    model_bytes, record, manifest_dir, methods, cfg, ig_check = job
    model = Classifier.from_bytes(model_bytes).astype(np.float64)
    wave = _load_wave(Path(manifest_dir), record, model.cfg.stft.sample_rate)
    mag, phase = dsp.stft(wave, model.cfg.stft)
    key = int(record["seed"][-1])
    maps = {m: attr.attribute(m, model, mag, phase, cfg=cfg, key=key) for m in methods}
    residual = None
    if ig_check and "ig" in maps:
        a = maps["ig"]
        ex = attr.Explained(model, phase, len(wave))
        c = a.target_class
        delta = float(ex.logits(mag)[c] - ex.logits(np.zeros_like(mag))[c])
        total = float(a.raw.sum())
        residual = (c, total, delta, abs(total - delta))
    return maps, residual


def cmd_attribute(args, rc: RunConfig) -> None:
    methods = _methods(args.methods)
    model = _load_model(args.checkpoint)
    if not model.cfg.waveform_input:
        raise UsageError("attributions need a waveform-input checkpoint")
    manifest = Path(args.manifest)
    records = _read_jsonl(manifest)
    out = Path(args.out)
    cfg = rc.attribution
    jobs = [(model.to_bytes(), r, str(manifest.parent), methods, cfg, args.ig_check) for r in records]
    results = _map(_attribute_one, jobs, args.jobs)
    rows = []
    for r, (maps, residual) in zip(records, results):
        sid = r["sample_id"]
        for m, a in maps.items():
            write_tensor(out / m / f"{sid}.satn", a.raw)
            _write_json(out / m / f"{sid}.json", {
                "sample_id": sid,
                "method": m,
                "target_class": a.target_class,
                "label": r["label"],
                "config": _section(cfg),
                "seed": cfg.seed,
            })
        if residual is not None:
            c, total, delta, res = residual
            ok = res <= 1e-3 * abs(delta) + 1e-6
            rows.append([sid, c, f"{total:.9g}", f"{delta:.9g}", f"{res:.3e}",
                         f"{res / abs(delta) if delta else float('inf'):.3e}", int(ok)])
    if args.ig_check and "ig" in methods:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sample_id", "target_class", "sum_raw", "logit_delta", "residual", "relative", "within_tolerance"))
        w.writerows(rows)
        atomic_write_text(out / "ig_residuals.csv", buf.getvalue())
    _write_json(out / "index.json", {
        "manifest": _rel(manifest.resolve(), out.resolve()),
        "methods": methods,
        "samples": [r["sample_id"] for r in records],
    })
    _echo(out, "attribute", rc, {"checkpoint": args.checkpoint, "manifest": args.manifest, "ig_check": args.ig_check})


# loading attributions for evaluate / overlap / retrain

@dataclass
class AttributionSet:
    records: list
    samples: list  # metrics.EvalSample with a placeholder mask
    maps: dict  # method -> list of normalized maps
    targets: dict  # method -> list of target classes
    manifest_dir: Path


def load_attributions(path, methods_arg, model: Classifier) -> AttributionSet:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise UsageError(f"no attribution index at {index_path}")
    index = json.loads(index_path.read_text())
    methods = _methods(methods_arg, index["methods"])
    manifest = (root / index["manifest"]).resolve()
    records = _read_jsonl(manifest)
    samples, maps, targets = [], {m: [] for m in methods}, {m: [] for m in methods}
    for r in records:
        sid = r["sample_id"]
        wave = _load_wave(manifest.parent, r, model.cfg.stft.sample_rate)
        mag, phase = dsp.stft(wave, model.cfg.stft)
        for m in methods:
            t_path = root / m / f"{sid}.satn"
            if not t_path.is_file():
                raise UsageError(f"missing attribution for method {m!r}, sample {sid}")
            raw = read_tensor(t_path).astype(np.float64)
            if raw.shape != mag.shape:
                raise UsageError(f"{t_path}: shape {raw.shape} does not match spectrogram {mag.shape}")
            maps[m].append(attr.normalize(raw))
            targets[m].append(json.loads((root / m / f"{sid}.json").read_text())["target_class"])
        samples.append(metrics.EvalSample(sid, mag, phase, int(r["label"]), np.zeros_like(mag), len(wave)))
    return AttributionSet(records, samples, maps, targets, manifest.parent)


def _localization_csv(aset: AttributionSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_id", "method", "label", "target_class", "correct", "score", "gt_fraction"))
    gts = []
    for r in aset.records:
        gts.append(read_tensor(aset.manifest_dir / r["ground_truth"]) > 0.5)
    for m, maps in aset.maps.items():
        for r, a, gt, c in zip(aset.records, maps, gts, aset.targets[m]):
            score = harness.localization_score(a, gt)
            w.writerow([r["sample_id"], m, r["label"], c, int(c == r["label"]),
                        f"{score:.6f}", f"{gt.mean():.6f}"])
    return buf.getvalue()


def cmd_evaluate(args, rc: RunConfig) -> None:
    model = _load_model(args.checkpoint).astype(np.float64)
    aset = load_attributions(args.attributions, args.methods, model)
    out = Path(args.out)
    probs_orig = metrics.original_probs(model, aset.samples, rc.metrics.batch)
    reports = []
    for m, maps in aset.maps.items():
        res = metrics.run_masked(model, aset.samples, maps, probs_orig=probs_orig, batch=rc.metrics.batch)
        reports.append(metrics.metric_report(m, res, maps))
    atomic_write_text(out / "metrics.csv", metrics.report_csv({"0": reports}))
    atomic_write_text(out / "localization.csv", _localization_csv(aset))
    _echo(out, "evaluate", rc, {"checkpoint": args.checkpoint, "attributions": args.attributions})


def cmd_overlap(args, rc: RunConfig) -> None:
    model = _load_model(args.checkpoint).astype(np.float64)
    aset = load_attributions(args.attributions, args.methods, model)
    oc = rc.overlap
    if len(aset.maps) < 2 and not oc.include_self:
        raise UsageError("overlap needs at least two methods")
    records = overlap.overlap_study(model, aset.samples, aset.maps, oc.tau, oc.mode, oc.include_self,
                                    rc.metrics.batch)
    out = Path(args.out)
    atomic_write_text(out / "scatter.csv", overlap.scatter_csv(records))
    _write_json(out / "summary.json", {**overlap.summarize(records), "tau": oc.tau})
    _echo(out, "overlap", rc, {"checkpoint": args.checkpoint, "attributions": args.attributions})


def cmd_retrain(args, rc: RunConfig) -> None:
    model = _load_model(args.checkpoint)
    aset = load_attributions(args.attributions, args.methods, model)
    eval_set = [
        harness.ExplainedSample(s.sample_id, s.label, s.x_f, {m: aset.maps[m][i] for m in aset.maps})
        for i, s in enumerate(aset.samples)
    ]
    report = harness.retrain_on_explanations(model, eval_set, list(aset.maps), rc.harness.retrain,
                                             rc.harness.split, rc.harness.mask_input)
    out = Path(args.out)
    atomic_write_text(out / "retrain.csv", report.to_csv())
    _echo(out, "retrain", rc, {"checkpoint": args.checkpoint, "attributions": args.attributions})


def cmd_report(args, rc: RunConfig) -> None:
    parts = []
    for p in args.inputs:
        path = Path(p)
        if not path.is_file():
            raise UsageError(f"missing CSV: {path}")
        parts.append(f"## {path.parent.name}/{path.name}\n{path.read_text()}")
    atomic_write_text(Path(args.out) / "report.txt", "\n".join(parts))
    _echo(Path(args.out), "report", rc, {"inputs": list(args.inputs)})


# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saliency-audit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.set_defaults(func=fn)
        return sp

    command("gen-data", cmd_gen_data, "generate the synthetic corpus")
    sp = command("train", cmd_train, "split the corpus and train the base classifier")
    sp.add_argument("--manifest", required=True)
    sp = command("attribute", cmd_attribute, "compute attribution maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--methods", default="all", help="comma-separated list or 'all'")
    sp.add_argument("--ig-check", action="store_true", help="write per-sample IG completeness residuals")
    for name, fn, help_ in (
        ("evaluate", cmd_evaluate, "faithfulness and conciseness metrics"),
        ("overlap", cmd_overlap, "pairwise overlap study"),
        ("retrain", cmd_retrain, "retrain classifiers on the explanations"),
    ):
        sp = command(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--attributions", required=True)
        sp.add_argument("--methods", default=None, help="comma-separated subset of the stored methods")
        if name == "overlap":
            sp.add_argument("--tau", type=float)
            sp.add_argument("--mode", choices=overlap.MODES)
            sp.add_argument("--include-self", action="store_true")
    sp = command("report", cmd_report, "concatenate CSV outputs into one summary")
    sp.add_argument("inputs", nargs="+")
    return p


def _setup_logging():
    level = os.environ.get("SALIENCY_AUDIT_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        rc = load_run_config(args)
        args.func(args, rc)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, attr.NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
