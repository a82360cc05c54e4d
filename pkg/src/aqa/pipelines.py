"""The three scoring frameworks built from the pieces in this package.

``c3d-svr``
    clip features -> normalised temporal average -> SVR
``c3d-lstm``
    clip features -> LSTM per head -> fc regression per step
``c3d-lstm-svr``
    clip features -> LSTM per head -> SVR on the last hidden state; the
    overall-score SVR sees the hidden states of every LSTM side by side

All three share the same feature extractor. Unless a pre-trained extractor is
handed in, it is warmed up on the training split with a throwaway linear head
on clip-averaged features and then frozen.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import featnet as fn
from . import seqscore as sq
from . import svr
from .scores import combine_score
from .videoclips import CLIP_LEN, augment, center_crop, pad_video, segment_clips

PIPELINES = ("c3d-svr", "c3d-lstm", "c3d-lstm-svr")

# Offsets added to the master seed so each stage can be rerun on its own.
SEED_FEATNET, SEED_WARMUP, SEED_LSTM_INIT, SEED_LSTM_TRAIN, SEED_SVR = 0, 101, 202, 303, 404


@dataclass
class PipelineConfig:
    name: str = "c3d-svr"
    crop: tuple[int, int] = (24, 24)
    clip_len: int = CLIP_LEN
    stride: int = CLIP_LEN
    pad_to: int | None = None
    featnet_layers: list | None = None
    warmup_iterations: int = 1000
    warmup_lr: float = 0.05
    flip_prob: float = 0.0
    max_shift: int = 0
    norm: str = "l2"
    mode: str = "incremental"
    iterations: int | None = None
    learning_rate: float = 0.01
    finetune_iterations: int | None = None
    finetune_learning_rate: float | None = None
    diff_targets: str = "incremental"
    hidden: int = 32
    num_layers: int = 1
    arrangement: str = "parallel"
    kernel: str = "rbf"
    gamma: float | None = None
    svr_C: list = field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    svr_eps: list = field(default_factory=lambda: [0.01, 0.05])
    svr_targets: str = "all"  # "overall" alone or "all" (exec, diff and overall)
    use_difficulty: bool = False

    def __post_init__(self):
        if self.name not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.name!r}; expected one of {PIPELINES}")
        self.crop = tuple(self.crop)
        if self.svr_targets not in ("overall", "all"):
            raise ValueError(f"svr_targets must be 'overall' or 'all', got {self.svr_targets!r}")
        if self.mode not in ("final", "incremental"):
            raise ValueError(f"unknown training mode {self.mode!r}")

    @property
    def uses_lstm(self) -> bool:
        return self.name != "c3d-svr"

    def schedule(self, seed: int) -> sq.TrainSchedule:
        if self.mode == "incremental":
            return sq.TrainSchedule.incremental(
                iterations=1000 if self.iterations is None else self.iterations,
                finetune_iterations=2000 if self.finetune_iterations is None else self.finetune_iterations,
                learning_rate=self.learning_rate, finetune_learning_rate=self.finetune_learning_rate,
                diff_targets=self.diff_targets, seed=seed)
        return sq.TrainSchedule.final(iterations=10_000 if self.iterations is None else self.iterations,
                                      learning_rate=self.learning_rate, diff_targets=self.diff_targets,
                                      seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


def _pad_len(dataset, config: PipelineConfig) -> int:
    if config.pad_to is not None:
        return config.pad_to
    lengths = {s.num_frames for s in dataset.specs.values()} if hasattr(dataset, "specs") else set()
    return max(lengths) if lengths else dataset.sample(dataset.ids[0]).num_frames


def clips_for(dataset, sid: str, config: PipelineConfig, pad_len: int, aug_seed: int | None = None):
    """Clip stack ``(N, C, L, h, w)`` of one sample; augmented when ``aug_seed`` is given."""
    s = pad_video(dataset.sample(sid), pad_len)
    if aug_seed is None:
        s = center_crop(s, config.crop)
    else:
        s = augment(s, aug_seed, config.crop, config.flip_prob, config.max_shift)
    return segment_clips(s, config.clip_len, config.stride).clips


def warmup_featnet(dataset, train_ids, config: PipelineConfig, seed: int):
    pad_len = _pad_len(dataset, config)
    C = dataset.sample(train_ids[0]).frames.shape[0]
    net = fn.build_featnet(config.featnet_layers, (C, config.clip_len) + config.crop, seed + SEED_FEATNET)
    if config.warmup_iterations <= 0:
        return net, np.zeros(0)
    labels = [dataset.labels[i] for i in train_ids]
    scale = sq.score_scale_for(labels)
    targets = np.array([[l.execution / scale["exec"], l.difficulty / scale["diff"]] for l in labels])
    augmenting = config.flip_prob > 0 or config.max_shift > 0
    if augmenting:
        def make(sid):
            return lambda it: clips_for(dataset, sid, config, pad_len, aug_seed=seed * 1_000_003 + it)
        sets = [make(sid) for sid in train_ids]
    else:
        sets = [clips_for(dataset, sid, config, pad_len) for sid in train_ids]
    return fn.train_featnet(net, sets, targets, config.warmup_iterations, config.warmup_lr, seed + SEED_WARMUP)


@dataclass
class FittedPipeline:
    config: PipelineConfig
    featnet: fn.FeatNetParams
    pad_len: int
    seq: sq.SeqScorerParams | None = None
    svrs: dict[str, svr.SvrModel] = field(default_factory=dict)
    seed: int = 0
    loss_trace: np.ndarray | None = None
    warmup_trace: np.ndarray | None = None
    feature_cache: dict = field(default_factory=dict, repr=False)

    def featnet_fingerprint(self) -> str:
        h = hashlib.sha256(self.featnet.config_hash.encode())
        for name, arr in sorted(self.featnet.as_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def features(self, dataset, sid: str) -> np.ndarray:
        if not hasattr(self, "_fp"):
            self._fp = self.featnet_fingerprint()
        # ids repeat across datasets, so the key carries the sample's generating spec
        origin = dataset.specs.get(sid) if hasattr(dataset, "specs") else None
        if origin is None:
            origin = (id(dataset), sid)
        key = (self._fp, self.config.crop, self.config.clip_len, self.config.stride, self.pad_len, sid, origin)
        if key not in self.feature_cache:
            clips = clips_for(dataset, sid, self.config, self.pad_len)
            self.feature_cache[key] = fn.extract_features(self.featnet, clips).features
        return self.feature_cache[key]

    def svr_input(self, dataset, sid: str, head: str) -> np.ndarray:
        if self.config.uses_lstm:
            hidden = sq.final_hidden(self.seq, self.features(dataset, sid))
            if head == "overall":
                x = np.concatenate([hidden[n] for n in self.seq.lstm_names])
            else:
                x = hidden[self.seq.lstm_name(head)]
        else:
            x = fn.aggregate_average(self.features(dataset, sid), self.config.norm)
        if self.config.use_difficulty:
            x = np.append(x, dataset.labels[sid].difficulty)
        return x

    def evolution(self, dataset, sid: str) -> sq.ScoreEvolution:
        if self.seq is None:
            raise ValueError("the c3d-svr pipeline averages clips away and has no score evolution")
        return sq.predict_evolution(self.seq, self.features(dataset, sid), _rule(dataset, sid), sid)

    def predict(self, dataset, ids, use_svr: bool = True) -> dict[str, np.ndarray]:
        ids = list(ids)
        rules = [_rule(dataset, i) for i in ids]
        if self.config.name == "c3d-lstm" or (self.seq is not None and not use_svr):
            evs = [self.evolution(dataset, i) for i in ids]
            ex = np.array([e.final_execution for e in evs])
            di = np.array([e.final_difficulty for e in evs])
            return {"exec": ex, "diff": di,
                    "overall": np.array([combine_score(a, b, r) for a, b, r in zip(ex, di, rules)])}
        out = {}
        for head, model in self.svrs.items():
            out[head] = svr.predict_svr(model, np.stack([self.svr_input(dataset, i, head) for i in ids]))
        if "overall" not in out:
            out["overall"] = np.array([combine_score(a, b, r) for a, b, r in zip(out["exec"], out["diff"], rules)])
        return out


def _rule(dataset, sid):
    return dataset.labels[sid].rule


def fit_pipeline(dataset, train_ids, config: PipelineConfig, seed: int = 0,
                 featnet: fn.FeatNetParams | None = None, feature_cache: dict | None = None) -> FittedPipeline:
    """Train ``config`` on ``train_ids``.

    A supplied ``featnet`` is used as-is (frozen, like a pre-trained
    extractor) and ``feature_cache`` lets repeated fits share its features.
    """
    train_ids = list(train_ids)
    pad_len = _pad_len(dataset, config)
    warm = None
    if featnet is None:
        featnet, warm = warmup_featnet(dataset, train_ids, config, seed)
    fitted = FittedPipeline(config, featnet, pad_len, seed=seed, warmup_trace=warm,
                            feature_cache=feature_cache if feature_cache is not None else {})
    labels = [dataset.labels[i] for i in train_ids]
    if config.uses_lstm:
        seqs = [fitted.features(dataset, i) for i in train_ids]
        params = sq.init_seqscore(featnet.feature_dim, config.hidden, config.num_layers, config.arrangement,
                                  seed + SEED_LSTM_INIT, sq.score_scale_for(labels))
        res = sq.train(seqs, labels, params, config.schedule(seed + SEED_LSTM_TRAIN))
        fitted.seq, fitted.loss_trace = res.params, res.loss_trace
    if config.name != "c3d-lstm":
        heads = ["overall"] if config.svr_targets == "overall" else ["exec", "diff", "overall"]
        kernel = svr.KernelSpec(config.kernel, config.gamma)
        for k, head in enumerate(heads):
            X = np.stack([fitted.svr_input(dataset, i, head) for i in train_ids])
            y = np.array([l.get(head) for l in labels])
            fitted.svrs[head], _ = svr.fit_svr_grid(X, y, kernel, config.svr_C, config.svr_eps,
                                                    seed=seed + SEED_SVR + k)
    return fitted


def save_pipeline(fitted: FittedPipeline, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fn.save_featnet(fitted.featnet, directory / "featnet")
    if fitted.seq is not None:
        sched = fitted.config.schedule(fitted.seed + SEED_LSTM_TRAIN)
        sq.save_seqscore(fitted.seq, directory / "seqscore", sched, fitted.loss_trace, fitted.seed)
    for head, model in fitted.svrs.items():
        svr.save_svr(model, directory / f"svr_{head}")
    if fitted.warmup_trace is not None and fitted.warmup_trace.size:
        sq.write_loss_trace(directory / "warmup_trace.csv", fitted.warmup_trace)
    meta = {"config": fitted.config.to_dict(), "seed": fitted.seed, "pad_len": fitted.pad_len,
            "svr_heads": sorted(fitted.svrs)}
    (directory / "pipeline.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return directory


def load_pipeline(directory) -> FittedPipeline:
    directory = Path(directory)
    meta = json.loads((directory / "pipeline.json").read_text())
    config = PipelineConfig.from_dict(meta["config"])
    fitted = FittedPipeline(config, fn.load_featnet(directory / "featnet"), meta["pad_len"], seed=meta["seed"])
    if (directory / "seqscore").exists():
        fitted.seq = sq.load_seqscore(directory / "seqscore")
    for head in meta["svr_heads"]:
        fitted.svrs[head] = svr.load_svr(directory / f"svr_{head}")
    return fitted
