"""LSTM score regression over clip features.

One LSTM per score head by default (execution and difficulty), each followed
by a fully-connected layer mapping the hidden state at every step to a score.
Two supervision schemes are provided:

* final-label training: Euclidean loss on the last step only;
* incremental-label training: every step ``c`` is pulled towards
  ``(c / N) * s_F``, followed by final-label fine-tuning at a lower rate.

Scores are divided by ``score_scale`` (the training-set maximum per head)
before training and multiplied back at prediction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .scores import ScoreLabel, combine_score

HEADS = ("exec", "diff")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- single LSTM layer ---------------------------------------------------------

def lstm_layer_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray):
    """Run one layer over ``X`` of shape ``(N, D)`` from a zero state.

    ``W`` is ``(4H, D + H)`` and ``b`` is ``(4H,)`` with gate blocks ordered
    input, forget, output, candidate. Returns ``(hs, cs, cache)``.
    """
    X = np.asarray(X, dtype=np.float64)
    H = b.size // 4
    if W.shape != (4 * H, X.shape[1] + H):
        raise tc.ShapeError(f"lstm: weight {W.shape} incompatible with input width {X.shape[1]} and H={H}")
    N = X.shape[0]
    hs, cs = np.zeros((N, H)), np.zeros((N, H))
    gates = np.zeros((N, 4 * H))
    h, c = np.zeros(H), np.zeros(H)
    for t in range(N):
        a = W @ np.concatenate([X[t], h]) + b
        i, f, o = sigmoid(a[:H]), sigmoid(a[H:2 * H]), sigmoid(a[2 * H:3 * H])
        g = np.tanh(a[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t] = np.concatenate([i, f, o, g])
        hs[t], cs[t] = h, c
    return hs, cs, (X, hs, cs, gates)


def lstm_layer_backward(W: np.ndarray, cache, dH: np.ndarray):
    """BPTT for one layer given ``dL/dh_t`` for every step; returns ``(dW, db, dX)``."""
    X, hs, cs, gates = cache
    N, D = X.shape
    H = hs.shape[1]
    dW, db, dX = np.zeros_like(W), np.zeros(4 * H), np.zeros_like(X)
    dh_next, dc_next = np.zeros(H), np.zeros(H)
    for t in range(N - 1, -1, -1):
        i, f, o, g = np.split(gates[t], 4)
        tc_ = np.tanh(cs[t])
        c_prev = cs[t - 1] if t > 0 else np.zeros(H)
        h_prev = hs[t - 1] if t > 0 else np.zeros(H)
        dh = dH[t] + dh_next
        dc = dh * o * (1 - tc_ ** 2) + dc_next
        da = np.concatenate([dc * g * i * (1 - i), dc * c_prev * f * (1 - f),
                             dh * tc_ * o * (1 - o), dc * i * (1 - g ** 2)])
        z = np.concatenate([X[t], h_prev])
        dW += np.outer(da, z)
        db += da
        dz = W.T @ da
        dX[t], dh_next = dz[:D], dz[D:]
        dc_next = dc * f
    return dW, db, dX


# --- parameters ----------------------------------------------------------------

@dataclass
class SeqScorerParams:
    values: dict[str, np.ndarray]
    feature_dim: int
    hidden: int = 32
    num_layers: int = 1
    arrangement: str = "parallel"  # or "shared": one LSTM feeding both heads
    score_scale: dict[str, float] = field(default_factory=lambda: {h: 1.0 for h in HEADS})

    def lstm_name(self, head: str) -> str:
        return head if self.arrangement == "parallel" else "shared"

    @property
    def lstm_names(self) -> list[str]:
        return list(HEADS) if self.arrangement == "parallel" else ["shared"]

    def with_values(self, values) -> "SeqScorerParams":
        return replace(self, values=dict(values))


def init_seqscore(feature_dim: int, hidden: int = 32, num_layers: int = 1, arrangement: str = "parallel",
                  seed: int = 0, score_scale: dict[str, float] | None = None) -> SeqScorerParams:
    """Glorot-uniform gate weights, zero biases except forget gates at 1.0."""
    if arrangement not in ("parallel", "shared"):
        raise ValueError(f"unknown arrangement {arrangement!r}")
    if num_layers not in (1, 2):
        raise ValueError("num_layers must be 1 or 2")
    rng = np.random.default_rng(seed)
    names = list(HEADS) if arrangement == "parallel" else ["shared"]
    values = {}
    for name in names:
        d_in = feature_dim
        for layer in range(num_layers):
            W = tc.glorot_uniform(rng, (4 * hidden, d_in + hidden), d_in + hidden, 4 * hidden)
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0
            values[f"lstm.{name}.{layer}.W"], values[f"lstm.{name}.{layer}.b"] = W, b
            d_in = hidden
    for head in HEADS:
        values[f"head.{head}.w"] = tc.glorot_uniform(rng, (1, hidden), hidden, 1)
        values[f"head.{head}.b"] = np.zeros(1)
    return SeqScorerParams(values, feature_dim, hidden, num_layers, arrangement,
                           dict(score_scale) if score_scale else {h: 1.0 for h in HEADS})


def _check_features(params: SeqScorerParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.feature_dim:
        raise tc.ShapeError(f"features of shape {X.shape} do not match feature_dim {params.feature_dim}")
    return X


def lstm_forward(params: SeqScorerParams, feats) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Top-layer hidden and cell states ``(hs, cs)`` of every LSTM, keyed by name."""
    X = _check_features(params, getattr(feats, "features", feats))
    out = {}
    for name in params.lstm_names:
        inp = X
        for layer in range(params.num_layers):
            hs, cs, _ = lstm_layer_forward(params.values[f"lstm.{name}.{layer}.W"],
                                           params.values[f"lstm.{name}.{layer}.b"], inp)
            inp = hs
        out[name] = (hs, cs)
    return out


def _forward(params: SeqScorerParams, X):
    caches, tops = {}, {}
    for name in params.lstm_names:
        inp, layer_caches = X, []
        for layer in range(params.num_layers):
            hs, _, cache = lstm_layer_forward(params.values[f"lstm.{name}.{layer}.W"],
                                              params.values[f"lstm.{name}.{layer}.b"], inp)
            layer_caches.append(cache)
            inp = hs
        caches[name], tops[name] = layer_caches, inp
    preds = {h: (tops[params.lstm_name(h)] @ params.values[f"head.{h}.w"].T)[:, 0] + params.values[f"head.{h}.b"][0]
             for h in HEADS}
    return preds, tops, caches


def sequence_loss(params: SeqScorerParams, X, targets: dict[str, np.ndarray],
                  weights: np.ndarray, need_input_grad: bool = False):
    """Weighted per-step Euclidean loss summed over heads, with gradients.

    ``targets[h]`` and ``weights`` have one entry per clip (normalised units).
    Returns ``(loss, grads, dX)``; ``dX`` is None unless requested.
    """
    X = _check_features(params, X)
    preds, tops, caches = _forward(params, X)
    loss, grads = 0.0, {}
    dtop = {name: np.zeros_like(tops[name]) for name in params.lstm_names}
    for h in HEADS:
        lh, diff = tc.euclidean_loss(preds[h] * np.sqrt(weights), targets[h] * np.sqrt(weights))
        loss += lh
        d = diff * np.sqrt(weights)  # dL/dpred
        top = tops[params.lstm_name(h)]
        grads[f"head.{h}.w"] = (d @ top)[None, :]
        grads[f"head.{h}.b"] = np.array([d.sum()])
        dtop[params.lstm_name(h)] += np.outer(d, params.values[f"head.{h}.w"][0])
    dX = np.zeros_like(X) if need_input_grad else None
    for name in params.lstm_names:
        g = dtop[name]
        for layer in range(params.num_layers - 1, -1, -1):
            W = params.values[f"lstm.{name}.{layer}.W"]
            dW, db, g = lstm_layer_backward(W, caches[name][layer], g)
            grads[f"lstm.{name}.{layer}.W"], grads[f"lstm.{name}.{layer}.b"] = dW, db
        if need_input_grad:
            dX += g
    return loss, grads, dX


# --- labels and schedules ------------------------------------------------------

def intermediate_label(c: int, N: int, s_final: float) -> float:
    """Score accumulated by the end of clip ``c`` (1-based): ``(c / N) * s_F``."""
    if not 1 <= c <= N:
        raise ValueError(f"clip index {c} outside 1..{N}")
    return c / N * s_final


def incremental_targets(N: int, s_final: float) -> np.ndarray:
    return np.array([intermediate_label(c, N, s_final) for c in range(1, N + 1)])


@dataclass
class TrainSchedule:
    mode: str = "final"
    iterations: int = 10_000
    learning_rate: float = 1e-4
    finetune_iterations: int = 0
    finetune_learning_rate: float | None = None
    seed: int = 0
    diff_targets: str = "incremental"  # "constant": difficulty head sees s_F at every step

    def __post_init__(self):
        if self.mode not in ("final", "incremental"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.finetune_learning_rate is None:
            self.finetune_learning_rate = 0.1 * self.learning_rate
        if self.finetune_learning_rate <= 0:
            raise ValueError("fine-tune learning rate must be positive")
        if self.mode == "final" and self.finetune_iterations:
            raise ValueError("fine-tune iterations apply only to incremental training")

    @classmethod
    def final(cls, **kw) -> "TrainSchedule":
        return cls(mode="final", **{"iterations": 10_000, **kw})

    @classmethod
    def incremental(cls, **kw) -> "TrainSchedule":
        return cls(mode="incremental", **{"iterations": 1_000, "finetune_iterations": 2_000, **kw})

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    params: SeqScorerParams
    loss_trace: np.ndarray
    monitor: list[tuple[int, float]] = field(default_factory=list)
    featnet: object | None = None


def score_scale_for(labels: Sequence[ScoreLabel]) -> dict[str, float]:
    return {"exec": max(max(l.execution for l in labels), 1e-12),
            "diff": max(max(l.difficulty for l in labels), 1e-12)}


def _targets(params: SeqScorerParams, label: ScoreLabel, N: int, incremental: bool, diff_mode: str):
    ex = label.execution / params.score_scale["exec"]
    di = label.difficulty / params.score_scale["diff"]
    if not incremental:
        return {"exec": np.full(N, ex), "diff": np.full(N, di)}
    return {"exec": incremental_targets(N, ex),
            "diff": incremental_targets(N, di) if diff_mode == "incremental" else np.full(N, di)}


def final_label_loss(params: SeqScorerParams, sequences, labels) -> float:
    """Mean last-step Euclidean loss over a dataset (normalised units)."""
    total = 0.0
    for X, lab in zip(sequences, labels):
        preds, _, _ = _forward(params, _check_features(params, X))
        for h in HEADS:
            t = lab.get(h) / params.score_scale[h]
            total += 0.5 * (preds[h][-1] - t) ** 2
    return total / len(sequences)


def _run_phase(params, sequences, labels, iterations, lr, incremental, diff_mode, rng, trace, monitor,
               monitor_every, it0, featnet=None, clip_sets=None, stop_below=None):
    from .featnet import featnet_backward, featnet_forward

    fvalues = featnet.as_dict() if featnet is not None else None
    values = params.values
    order = np.array([], dtype=int)
    for k in range(iterations):
        if order.size == 0:
            order = rng.permutation(len(labels))
        i, order = order[0], order[1:]
        if featnet is not None:
            net = featnet.with_values(fvalues)
            X, fcache = featnet_forward(net, clip_sets[i])
        else:
            X = sequences[i]
        N = X.shape[0]
        weights = np.ones(N) if incremental else np.eye(N)[-1]
        cur = params.with_values(values)
        loss, grads, dX = sequence_loss(cur, X, _targets(cur, labels[i], N, incremental, diff_mode),
                                        weights, need_input_grad=featnet is not None)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it0 + k}")
        trace.append(loss)
        values = tc.sgd_step(values, grads, lr)
        if featnet is not None:
            fgrads, _ = featnet_backward(net, fcache, dX)
            fvalues = tc.sgd_step(fvalues, fgrads, lr)
        if monitor_every and (it0 + k + 1) % monitor_every == 0:
            cur = params.with_values(values)
            seqs = sequences if featnet is None else _featurize(featnet.with_values(fvalues), clip_sets)
            monitor.append((it0 + k + 1, final_label_loss(cur, seqs, labels)))
            if stop_below is not None and monitor[-1][1] <= stop_below:
                break
    new_featnet = featnet.with_values(fvalues) if featnet is not None else None
    return params.with_values(values), new_featnet


def _reached(monitor, stop_below) -> bool:
    return stop_below is not None and bool(monitor) and monitor[-1][1] <= stop_below


def iterations_to_loss(result: TrainResult, threshold: float) -> int | None:
    """First monitored iteration whose training-set last-step loss is <= ``threshold``."""
    for it, loss in result.monitor:
        if loss <= threshold:
            return it
    return None


def _featurize(featnet, clip_sets):
    from .featnet import featnet_forward
    return [featnet_forward(featnet, c)[0] for c in clip_sets]


def train_final_label(sequences, labels: Sequence[ScoreLabel], params: SeqScorerParams,
                      schedule: TrainSchedule, monitor_every: int = 0,
                      featnet=None, clip_sets=None, stop_below: float | None = None) -> TrainResult:
    """SGD on the last-step Euclidean loss, one sample per iteration.

    ``sequences[i]`` is the ``(N_i, feature_dim)`` clip-feature matrix of sample
    ``i``. Passing ``featnet`` and ``clip_sets`` instead trains the extractor
    jointly, recomputing features from raw clips at every step.

    With ``monitor_every`` set, the mean last-step loss over the whole training
    set is recorded every that many iterations; ``stop_below`` ends training
    the first time a recorded value reaches it.
    """
    if len(labels) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(schedule.seed)
    trace, monitor = [], []
    if monitor_every:
        monitor.append((0, final_label_loss(params, sequences if featnet is None else _featurize(featnet, clip_sets), labels)))
    params, featnet = _run_phase(params, sequences, labels, schedule.iterations, schedule.learning_rate,
                                 False, schedule.diff_targets, rng, trace, monitor, monitor_every, 0,
                                 featnet, clip_sets, stop_below)
    return TrainResult(params, np.array(trace), monitor, featnet)


def train_incremental_label(sequences, labels: Sequence[ScoreLabel], params: SeqScorerParams,
                            schedule: TrainSchedule, monitor_every: int = 0,
                            featnet=None, clip_sets=None, stop_below: float | None = None) -> TrainResult:
    """Per-step intermediate targets, then final-label fine-tuning at the lower rate."""
    if schedule.mode != "incremental":
        raise ValueError("schedule mode must be 'incremental'")
    if len(labels) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(schedule.seed)
    trace, monitor = [], []
    if monitor_every:
        monitor.append((0, final_label_loss(params, sequences if featnet is None else _featurize(featnet, clip_sets), labels)))
    params, featnet = _run_phase(params, sequences, labels, schedule.iterations, schedule.learning_rate,
                                 True, schedule.diff_targets, rng, trace, monitor, monitor_every, 0,
                                 featnet, clip_sets, stop_below)
    if not _reached(monitor, stop_below):
        params, featnet = _run_phase(params, sequences, labels, schedule.finetune_iterations,
                                     schedule.finetune_learning_rate, False, schedule.diff_targets, rng,
                                     trace, monitor, monitor_every, len(trace), featnet, clip_sets,
                                     stop_below)
    return TrainResult(params, np.array(trace), monitor, featnet)


def train(sequences, labels, params, schedule, **kw) -> TrainResult:
    fn = train_incremental_label if schedule.mode == "incremental" else train_final_label
    return fn(sequences, labels, params, schedule, **kw)


# --- prediction ----------------------------------------------------------------

@dataclass
class ScoreEvolution:
    """Cumulative predicted scores after each clip (1-based clip indices)."""

    clips: np.ndarray
    execution: np.ndarray
    difficulty: np.ndarray
    rule: str = "product"
    sample_id: str = ""

    def __len__(self):
        return self.clips.size

    @property
    def final_execution(self) -> float:
        return float(self.execution[-1])

    @property
    def final_difficulty(self) -> float:
        return float(self.difficulty[-1])

    @property
    def final_overall(self) -> float:
        return combine_score(self.final_execution, self.final_difficulty, self.rule)

    def series(self, head: str = "exec") -> np.ndarray:
        if head == "exec":
            return self.execution
        if head == "diff":
            return self.difficulty
        if head == "overall":
            return np.array([combine_score(e, d, self.rule) for e, d in zip(self.execution, self.difficulty)])
        raise ValueError(f"unknown head {head!r}")


def predict_evolution(params: SeqScorerParams, feats, rule: str = "product", sample_id: str = "") -> ScoreEvolution:
    X = _check_features(params, getattr(feats, "features", feats))
    preds, _, _ = _forward(params, X)
    return ScoreEvolution(np.arange(1, X.shape[0] + 1),
                          preds["exec"] * params.score_scale["exec"],
                          preds["diff"] * params.score_scale["diff"], rule,
                          sample_id or getattr(feats, "sample_id", ""))


def final_hidden(params: SeqScorerParams, feats) -> dict[str, np.ndarray]:
    """Top-layer hidden state after the last clip, per LSTM (the SVR input)."""
    return {name: hs[-1] for name, (hs, _) in lstm_forward(params, feats).items()}


# --- persistence ---------------------------------------------------------------

def save_seqscore(params: SeqScorerParams, directory, schedule: TrainSchedule | None = None,
                  loss_trace=None, seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in params.values.items():
        tc.save_tensor(directory / f"{name}.aqtn", arr)
    manifest = {"hidden": params.hidden, "feature_dim": params.feature_dim, "num_layers": params.num_layers,
                "arrangement": params.arrangement, "heads": list(HEADS), "score_scale": params.score_scale,
                "schedule": schedule.to_dict() if schedule else None, "seed": seed,
                "loss_trace": "loss_trace.csv" if loss_trace is not None else None}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if loss_trace is not None:
        write_loss_trace(directory / "loss_trace.csv", loss_trace)


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace, start=1):
            w.writerow([i, repr(float(v))])


def load_seqscore(directory) -> SeqScorerParams:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    shell = init_seqscore(m["feature_dim"], m["hidden"], m["num_layers"], m["arrangement"])
    values = {name: tc.load_tensor(directory / f"{name}.aqtn") for name in shell.values}
    return replace(shell, values=values, score_scale=m["score_scale"])
