"""Command-line entry point: ``aqa <generate|train|eval|feedback|sweep-stride>``.

Every command reads an optional JSON experiment file (``--config``); flags
given on the command line override its fields. Exit codes: 0 success,
1 usage, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evalkit, feedback
from .pipelines import PIPELINES, PipelineConfig, fit_pipeline, load_pipeline, save_pipeline
from .synthbench import SPLIT_PRESETS, generate_dataset, load_dataset, save_dataset
from .videoclips import num_clips

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """One experiment. ``pipeline_config`` holds ``PipelineConfig`` fields."""

    pipeline: str = "c3d-svr"
    preset: str | None = None
    data: str | None = None
    model: str | None = None
    out: str | None = None
    seed: int = 0
    synth: dict = field(default_factory=dict)
    pipeline_config: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    strides: list = field(default_factory=lambda: [16, 8, 4])
    sample: str | None = None
    head: str = "exec"
    on_train: bool = False
    wall_clock: bool = False

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise UsageError(f"unknown pipeline {self.pipeline!r}; choose from {', '.join(PIPELINES)}")
        if self.preset is not None and self.preset not in SPLIT_PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {', '.join(SPLIT_PRESETS)}")
        if not 0 <= self.seed < 2**64:
            raise UsageError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.head not in ("exec", "diff", "overall"):
            raise UsageError(f"unknown head {self.head!r}")
        if any(int(s) < 1 for s in self.strides):
            raise UsageError("strides must be positive")

    def pipeline_cfg(self) -> PipelineConfig:
        try:
            return PipelineConfig.from_dict({**self.pipeline_config, "name": self.pipeline})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad pipeline_config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw)


def _require(value, what: str):
    if value is None:
        raise UsageError(f"missing {what}")
    return value


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "--out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _dataset(cfg: ExperimentConfig):
    path = Path(_require(cfg.data, "--data"))
    if not (path / "manifest.json").is_file():
        raise DataError(f"no dataset manifest at {path}")
    return load_dataset(path)


def _model(cfg: ExperimentConfig):
    path = Path(_require(cfg.model, "--model"))
    if not (path / "pipeline.json").is_file():
        raise DataError(f"no trained model at {path}")
    try:
        return load_pipeline(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"model at {path} is incomplete: {exc}") from exc


def _preset_name(cfg: ExperimentConfig, dataset) -> str:
    if cfg.preset:
        return cfg.preset
    split = dataset.manifest.get("config", {}).get("split")
    return split if isinstance(split, str) else "custom"


def _predictions_csv(dataset, ids, pred) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "true_exec", "pred_exec", "true_diff", "pred_diff", "true_overall", "pred_overall"])
    for k, sid in enumerate(ids):
        lab = dataset.labels[sid]
        row = [sid]
        for h in ("exec", "diff", "overall"):
            row += [f"{lab.get(h):.6f}", f"{pred[h][k]:.6f}" if h in pred else ""]
        w.writerow(row)
    return buf.getvalue()


def _table_for(fitted, dataset, ids, preset: str) -> evalkit.ResultTable:
    pred = fitted.predict(dataset, ids)
    truth = {h: np.array([dataset.labels[i].get(h) for i in ids]) for h in ("exec", "diff", "overall")}
    rho = evalkit.score_predictions(pred, truth)
    status = "ok" if all(v is not None for h, v in rho.items() if h in pred) else "undefined"
    row = evalkit.ResultRow(fitted.config.name, preset, fitted.seed, rho["exec"], rho["diff"], rho["overall"],
                            0, status)
    return evalkit.ResultTable([row])


# --- commands --------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    synth = dict(cfg.synth)
    if cfg.preset:
        kind, n, _ = SPLIT_PRESETS[cfg.preset]
        synth.setdefault("kind", kind)
        synth.setdefault("n", n)
        synth.setdefault("split", cfg.preset)
    n = synth.pop("n", None)
    if n is None:
        raise UsageError("dataset size missing: give --preset or synth.n")
    if int(n) < 2:
        raise UsageError(f"dataset size must be at least 2, got {n}")
    for key in ("complexity_range", "deduction_range", "split"):
        if isinstance(synth.get(key), list):
            synth[key] = tuple(synth[key])
    try:
        ds = generate_dataset(int(n), seed=cfg.seed, **synth)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    out = _out_dir(cfg)
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def cmd_train(cfg: ExperimentConfig) -> Path:
    dataset = _dataset(cfg)
    pcfg = cfg.pipeline_cfg()
    train_ids = dataset.split[0]
    fitted = fit_pipeline(dataset, train_ids, pcfg, cfg.seed)
    out = _out_dir(cfg)
    try:
        save_pipeline(fitted, out)
    except OSError as exc:
        raise DataError(f"cannot write model to {out}: {exc}") from exc
    table = _table_for(fitted, dataset, train_ids, _preset_name(cfg, dataset))
    _write(out / "train_results.csv", table.to_csv(include_wall=False))
    return out


def cmd_eval(cfg: ExperimentConfig) -> Path:
    """Score the saved model on the test split, then run the repeated-split protocol.

    Protocol repeats keep the model's feature extractor frozen (it plays the
    pre-trained network) and retrain everything downstream of it per split.
    """
    dataset = _dataset(cfg)
    fitted = _model(cfg)
    preset = _preset_name(cfg, dataset)
    out = _out_dir(cfg)
    ids = dataset.split[0] if cfg.on_train else dataset.split[1]
    _write(out / "predictions.csv", _predictions_csv(dataset, ids, fitted.predict(dataset, ids)))

    plan_kw = dict(cfg.plan)
    plan_kw.setdefault("repeats", 6 if fitted.config.uses_lstm else 200)
    if cfg.on_train:
        plan_kw.update(fixed=True, evaluate_on_train=True)
    if "seeds" not in plan_kw:
        plan_kw["seeds"] = [cfg.seed + r for r in range(plan_kw["repeats"])]
    try:
        plan = evalkit.SplitPlan(**plan_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad split plan: {exc}") from exc
    cache: dict = {}

    def fit(ds, train, config, seed):
        return fit_pipeline(ds, train, config, seed, featnet=fitted.featnet, feature_cache=cache)

    table = evalkit.run_protocol(dataset, fitted.config, plan, preset, fit=fit)
    _write(out / "results.csv", table.to_csv(include_wall=cfg.wall_clock))
    _write(out / "summary.csv", evalkit.summary_csv(evalkit.summarize(table)))
    return out


def cmd_feedback(cfg: ExperimentConfig) -> Path:
    dataset = _dataset(cfg)
    fitted = _model(cfg)
    if fitted.seq is None:
        raise UsageError("the c3d-svr pipeline averages clip features into one vector, so it has no per-clip "
                         "score evolution to inspect; train c3d-lstm or c3d-lstm-svr for feedback")
    sid = _require(cfg.sample, "--sample")
    if sid not in dataset.labels:
        raise UsageError(f"unknown sample id {sid!r}")
    report = feedback.detect_errors(fitted.evolution(dataset, sid), cfg.head, sid)
    out = _out_dir(cfg)
    _write(out / f"feedback_{sid}.json", report.to_json() + "\n")
    _write(out / f"feedback_{sid}.txt", report.to_text())
    return out


def cmd_sweep_stride(cfg: ExperimentConfig) -> Path:
    """Train and test the configured pipeline once per clip stride on the dataset's own split."""
    dataset = _dataset(cfg)
    base = cfg.pipeline_cfg()
    train, test = dataset.split
    truth = {h: np.array([dataset.labels[i].get(h) for i in test]) for h in ("exec", "diff", "overall")}
    frames = max(s.num_frames for s in dataset.specs.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stride", "n_clips", "rho_exec", "rho_diff", "rho_overall"])
    for stride in sorted({int(s) for s in cfg.strides}, reverse=True):
        pcfg = PipelineConfig.from_dict({**base.to_dict(), "stride": stride})
        fitted = fit_pipeline(dataset, train, pcfg, cfg.seed)
        rho = evalkit.score_predictions(fitted.predict(dataset, test), truth)
        w.writerow([stride, num_clips(base.pad_to or frames, base.clip_len, stride)] +
                   ["" if rho[h] is None else f"{rho[h]:.6f}" for h in ("exec", "diff", "overall")])
    out = _out_dir(cfg)
    _write(out / "stride_sweep.csv", buf.getvalue())
    return out


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "feedback": cmd_feedback, "sweep-stride": cmd_sweep_stride}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aqa", description="Action quality assessment experiments on clip features.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--pipeline", choices=PIPELINES)
        p.add_argument("--preset", choices=sorted(SPLIT_PRESETS))
        if name != "generate":
            p.add_argument("--data", help="dataset directory")
        else:
            p.add_argument("--n", type=int, help="number of samples (overrides the preset)")
        if name in ("eval", "feedback"):
            p.add_argument("--model", help="trained model directory")
        if name == "eval":
            p.add_argument("--repeats", type=int)
            p.add_argument("--on-train", action="store_true", default=None,
                           help="score on the training split (memorisation check)")
            p.add_argument("--wall-clock", action="store_true", default=None,
                           help="record wall times in results.csv (breaks byte-identical reruns)")
        if name == "feedback":
            p.add_argument("--sample", help="sample id")
            p.add_argument("--head", choices=["exec", "diff", "overall"])
        if name == "sweep-stride":
            p.add_argument("--strides", help="comma-separated strides, e.g. 16,8,4")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for key in ("seed", "out", "pipeline", "preset", "data", "model", "sample", "head", "on_train", "wall_clock"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "n", None) is not None:
        cfg.synth = {**cfg.synth, "n": args.n}
    if getattr(args, "repeats", None) is not None:
        cfg.plan = {**cfg.plan, "repeats": args.repeats}
    if getattr(args, "strides", None):
        try:
            cfg.strides = [int(s) for s in args.strides.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad --strides: {args.strides}") from exc
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"aqa {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"aqa {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"aqa {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
