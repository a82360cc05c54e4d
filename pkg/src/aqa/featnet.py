"""Small 3D-conv feature network producing one vector per clip.

A stand-in for the C3D FC6 extractor. The layer chain is configurable; the
default is two conv/ReLU/pool stages followed by a 64-unit fc layer with ReLU.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import LayerParams, ShapeError
from .videoclips import ClipSequence

DEFAULT_LAYERS = [
    {"type": "conv3d", "out": 8, "kernel": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool3d", "kernel": 2},
    {"type": "conv3d", "out": 16, "kernel": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool3d", "kernel": 2},
    {"type": "fc", "out": 64},
    {"type": "relu"},
]
DEFAULT_INPUT = (1, 16, 24, 24)


@dataclass
class FeatNetParams:
    layers: list[LayerParams]
    input_shape: tuple[int, int, int, int]
    feature_dim: int
    config: list[dict]
    seed: int = 0

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"layers": self.config, "input": list(self.input_shape)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.weights is not None:
                out[f"{i}.{layer.kind}.w"] = layer.weights
                out[f"{i}.{layer.kind}.b"] = layer.biases
        return out

    def with_values(self, values: dict[str, np.ndarray]) -> "FeatNetParams":
        layers = []
        for i, layer in enumerate(self.layers):
            key = f"{i}.{layer.kind}"
            if layer.weights is None:
                layers.append(layer)
            else:
                layers.append(LayerParams(layer.kind, values[key + ".w"], values[key + ".b"],
                                          layer.kernel, layer.stride, layer.pad))
        return FeatNetParams(layers, self.input_shape, self.feature_dim, self.config, self.seed)


@dataclass
class ClipFeatures:
    features: np.ndarray  # (num_clips, feature_dim)
    sample_id: str = ""

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def _triple(v):
    return (int(v),) * 3 if np.isscalar(v) else tuple(int(a) for a in v)


def build_featnet(config: Sequence[dict] | None = None, input_shape=DEFAULT_INPUT,
                  seed: int = 0) -> FeatNetParams:
    """Initialise a layer chain and check it shape-propagates end to end."""
    config = [dict(c) for c in (DEFAULT_LAYERS if config is None else config)]
    rng = np.random.default_rng(seed)
    shape: tuple[int, ...] = tuple(input_shape)
    layers = []
    for i, cfg in enumerate(config):
        kind = cfg.get("type")
        try:
            if kind == "conv3d":
                if len(shape) != 4:
                    raise ShapeError(f"conv3d needs a (C,T,H,W) input, got {shape}")
                k, s, p = _triple(cfg.get("kernel", 3)), _triple(cfg.get("stride", 1)), _triple(cfg.get("pad", 0))
                out_c = int(cfg["out"])
                spatial = tc.conv3d_output_shape(shape[1:], k, s, p)
                fan_in, fan_out = shape[0] * int(np.prod(k)), out_c * int(np.prod(k))
                w = tc.glorot_uniform(rng, (out_c, shape[0]) + k, fan_in, fan_out)
                layers.append(LayerParams("conv3d", w, np.zeros(out_c), k, s, p))
                shape = (out_c,) + spatial
            elif kind == "maxpool3d":
                if len(shape) != 4:
                    raise ShapeError(f"maxpool3d needs a (C,T,H,W) input, got {shape}")
                k = _triple(cfg.get("kernel", 2))
                s = _triple(cfg.get("stride", cfg.get("kernel", 2)))
                shape = (shape[0],) + tc.conv3d_output_shape(shape[1:], k, s, 0)
                layers.append(LayerParams("maxpool3d", kernel=k, stride=s))
            elif kind == "fc":
                fan_in, out = int(np.prod(shape)), int(cfg["out"])
                w = tc.glorot_uniform(rng, (out, fan_in), fan_in, out)
                layers.append(LayerParams("fc", w, np.zeros(out)))
                shape = (out,)
            elif kind == "relu":
                layers.append(LayerParams("relu"))
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        except (ShapeError, ValueError, KeyError) as exc:
            raise ShapeError(f"layer {i} ({kind}): {exc}") from exc
    if len(shape) != 1:
        raise ShapeError(f"final layer output must be a flat vector, got shape {shape}")
    return FeatNetParams(layers, tuple(input_shape), shape[0], config, seed)


def featnet_forward(params: FeatNetParams, clips: np.ndarray):
    """Run a batch ``(N, C, L, H, W)`` of clips; returns ``(features, cache)``."""
    x = np.asarray(clips, dtype=np.float64)
    if x.shape[1:] != params.input_shape:
        raise ShapeError(f"clip shape {x.shape[1:]} does not match network input {params.input_shape}")
    cache = []
    for layer in params.layers:
        cache.append(x)
        if layer.kind == "conv3d":
            x = tc.conv3d_forward(x, layer.weights, layer.biases, layer.stride, layer.pad)
        elif layer.kind == "maxpool3d":
            x = tc.maxpool3d_forward(x, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            x = tc.relu_forward(x)
        elif layer.kind == "fc":
            x = tc.fc_forward(x.reshape(x.shape[0], -1), layer.weights, layer.biases)
    return x, cache


def featnet_backward(params: FeatNetParams, cache, upstream: np.ndarray, need_input: bool = False):
    """Back-propagate ``upstream`` (``(N, feature_dim)``); returns ``(grads, grad_clips)``.

    ``grad_clips`` is None unless ``need_input`` is set.
    """
    grads = {}
    g = np.asarray(upstream, dtype=np.float64)
    for i in range(len(params.layers) - 1, -1, -1):
        layer, x = params.layers[i], cache[i]
        if layer.kind == "conv3d":
            g, dw, db = tc.conv3d_backward(x, layer.weights, g, layer.stride, layer.pad, input_grad=i > 0 or need_input)
            grads[f"{i}.conv3d.w"], grads[f"{i}.conv3d.b"] = dw, db
        elif layer.kind == "maxpool3d":
            g = tc.maxpool3d_backward(x, g, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            g = tc.relu_backward(x, g)
        elif layer.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            g, dw, db = tc.fc_backward(flat, layer.weights, g)
            grads[f"{i}.fc.w"], grads[f"{i}.fc.b"] = dw, db
            g = g.reshape(x.shape)
    return grads, g


def extract_features(params: FeatNetParams, clips: ClipSequence | np.ndarray,
                     batch_size: int = 64) -> ClipFeatures:
    """One feature vector per clip, in clip order."""
    arr = clips.clips if isinstance(clips, ClipSequence) else np.asarray(clips)
    sid = clips.sample_id if isinstance(clips, ClipSequence) else ""
    outs = [featnet_forward(params, arr[i:i + batch_size])[0] for i in range(0, len(arr), batch_size)]
    return ClipFeatures(np.concatenate(outs, axis=0), sid)


def aggregate_average(feats: ClipFeatures | np.ndarray, norm: str = "l2") -> np.ndarray:
    """Mean over clips followed by L2 (or L1) normalisation; zero stays zero."""
    f = feats.features if isinstance(feats, ClipFeatures) else np.asarray(feats, dtype=np.float64)
    if f.shape[0] == 0:
        raise ValueError("cannot average an empty feature list")
    mean = f.mean(axis=0)
    if norm == "l2":
        scale = np.sqrt(np.sum(mean * mean))
    elif norm == "l1":
        scale = np.sum(np.abs(mean))
    else:
        raise ValueError(f"unknown normalisation {norm!r}")
    return mean / scale if scale > 0 else mean


def feature_sparsity(feats: ClipFeatures | np.ndarray) -> float:
    f = feats.features if isinstance(feats, ClipFeatures) else np.asarray(feats)
    return float(np.count_nonzero(f == 0) / f.size) if f.size else 0.0


def train_featnet(params: FeatNetParams, clip_sets: Sequence[np.ndarray], targets: np.ndarray,
                  iterations: int, learning_rate: float, seed: int = 0):
    """Warm up the extractor with a throwaway linear head on clip-averaged features.

    ``clip_sets[i]`` is the ``(N, C, L, H, W)`` clip stack of sample ``i`` (or a
    callable returning it, so callers can augment per draw); ``targets`` is
    ``(n, m)``. One SGD step per sample draw. Returns ``(params, loss_trace)``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    rng = np.random.default_rng(seed)
    D, m = params.feature_dim, targets.shape[1]
    head_w = tc.glorot_uniform(rng, (m, D), D, m)
    head_b = targets.mean(axis=0)
    values = params.as_dict()
    trace = []
    order = np.array([], dtype=int)
    for it in range(iterations):
        if order.size == 0:
            order = rng.permutation(len(clip_sets))
        i, order = order[0], order[1:]
        clips = clip_sets[i]
        clips = clips(it) if callable(clips) else clips
        net = params.with_values(values)
        feats, cache = featnet_forward(net, clips)
        pooled = feats.mean(axis=0)
        pred = head_w @ pooled + head_b
        loss, g = tc.euclidean_loss(pred, targets[i])
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite featnet warm-up loss at iteration {it}")
        trace.append(loss)
        g_pooled = head_w.T @ g
        grads, _ = featnet_backward(net, cache, np.tile(g_pooled / feats.shape[0], (feats.shape[0], 1)))
        head = tc.sgd_step({"w": head_w, "b": head_b}, {"w": np.outer(g, pooled), "b": g}, learning_rate)
        head_w, head_b = head["w"], head["b"]
        values = tc.sgd_step(values, grads, learning_rate)
    return params.with_values(values), np.array(trace)


def save_featnet(params: FeatNetParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in params.as_dict().items():
        tc.save_tensor(directory / f"{name}.aqtn", arr)
        shapes[name] = list(arr.shape)
    manifest = {"layers": params.config, "input_shape": list(params.input_shape),
                "feature_dim": params.feature_dim, "shapes": shapes, "seed": params.seed,
                "config_hash": params.config_hash}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_featnet(directory) -> FeatNetParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = build_featnet(manifest["layers"], tuple(manifest["input_shape"]), manifest["seed"])
    if params.config_hash != manifest["config_hash"]:
        raise ValueError("featnet manifest hash does not match its layer configuration")
    values = {name: tc.load_tensor(directory / f"{name}.aqtn") for name in params.as_dict()}
    return params.with_values(values)
