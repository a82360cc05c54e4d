"""Dense float64 layer operations with hand-written gradients.

Arrays are plain ``numpy.ndarray`` objects in float64. Volumes are laid out
as ``(C, T, H, W)`` or, batched, ``(N, C, T, H, W)``; every layer accepts
either form and returns the same form it was given.

Forward functions return outputs only. Backward functions take the forward
inputs again and recompute whatever they need, so no cache objects travel
between the two.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "LayerParams",
    "GradCheckReport",
    "glorot_uniform",
    "conv3d_output_shape",
    "conv3d_forward",
    "conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "fc_forward",
    "fc_backward",
    "relu_forward",
    "relu_backward",
    "euclidean_loss",
    "sgd_step",
    "grad_check",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class ShapeError(ValueError):
    """Raised when array extents are incompatible with an operation."""


@dataclass
class LayerParams:
    """Learnable weights of one layer plus its fixed hyperparameters."""

    kind: str
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    kernel: tuple[int, int, int] | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    pad: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.weights is not None and self.biases is not None:
            if self.biases.shape != (self.weights.shape[0],):
                raise ShapeError(
                    f"{self.kind}: bias length {self.biases.shape} does not match "
                    f"output channels {self.weights.shape[0]}"
                )


@dataclass
class GradCheckReport:
    layer: str
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-5


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ShapeError(f"{name}: expected (C,T,H,W) or (N,C,T,H,W) input, got shape {x.shape}")


def _unbatch(x: np.ndarray, batched: bool) -> np.ndarray:
    return x if batched else x[0]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def conv3d_output_shape(in_shape, kernel, stride=1, pad=0) -> tuple[int, int, int]:
    """Output ``(T, H, W)`` extents: ``floor((in + 2*pad - k) / stride) + 1`` per axis."""
    kernel, stride, pad = _triple(kernel), _triple(stride), _triple(pad)
    out = []
    for n, k, s, p in zip(in_shape, kernel, stride, pad):
        if s < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        if k > n + 2 * p:
            raise ShapeError(
                f"kernel extents {kernel} exceed padded input extents "
                f"{tuple(a + 2 * b for a, b in zip(in_shape, pad))}"
            )
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def _windows(xp: np.ndarray, kernel, stride) -> np.ndarray:
    # (N, C, To, Ho, Wo, kt, kh, kw)
    st, sh, sw = stride
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def conv3d_forward(x, weight, bias, stride=1, pad=0) -> np.ndarray:
    """3D cross-correlation plus bias.

    ``weight`` has shape ``(F, C, kt, kh, kw)`` and ``bias`` shape ``(F,)``.
    """
    xb, batched = _as_batch(x, "conv3d")
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: weight must be (F,C,kt,kh,kw), got {weight.shape}")
    F, C = weight.shape[:2]
    if xb.shape[1] != C:
        raise ShapeError(f"conv3d: input has {xb.shape[1]} channels, kernel expects {C}")
    if bias.shape != (F,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({F},)")
    kernel, stride, pad = weight.shape[2:], _triple(stride), _triple(pad)
    conv3d_output_shape(xb.shape[2:], kernel, stride, pad)
    pt, ph, pw = pad
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = _windows(xp, kernel, stride)
    out = np.tensordot(win, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, 4, 1) + bias[:, None, None, None]
    return _unbatch(np.ascontiguousarray(out), batched)


def conv3d_backward(x, weight, upstream, stride=1, pad=0, input_grad: bool = True):
    """Gradients of a conv3d layer: ``(grad_input, grad_weight, grad_bias)``.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    xb, batched = _as_batch(x, "conv3d")
    weight = np.asarray(weight, dtype=np.float64)
    stride, pad = _triple(stride), _triple(pad)
    kernel = weight.shape[2:]
    out_shape = (xb.shape[0], weight.shape[0]) + conv3d_output_shape(xb.shape[2:], kernel, stride, pad)
    up = np.asarray(upstream, dtype=np.float64)
    if not batched:
        up = up[None]
    if up.shape != out_shape:
        raise ShapeError(f"conv3d backward: upstream shape {up.shape} != output shape {out_shape}")
    pt, ph, pw = pad
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = _windows(xp, kernel, stride)
    grad_w = np.tensordot(up, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_b = up.sum(axis=(0, 2, 3, 4))

    if not input_grad:
        return None, grad_w, grad_b
    st, sh, sw = stride
    To, Ho, Wo = out_shape[2:]
    # (kt, kh, kw, N, C, To, Ho, Wo): column gradients, one slab per kernel tap
    dcol = np.tensordot(up, weight, axes=([1], [0]))
    dcol = np.ascontiguousarray(dcol.transpose(5, 6, 7, 0, 4, 1, 2, 3))
    dxp = np.zeros_like(xp)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                dxp[:, :,
                    a:a + st * (To - 1) + 1:st,
                    b:b + sh * (Ho - 1) + 1:sh,
                    c:c + sw * (Wo - 1) + 1:sw] += dcol[a, b, c]
    T, H, W = xb.shape[2:]
    dx = dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    return _unbatch(np.ascontiguousarray(dx), batched), grad_w, grad_b


def _pool_argmax(xb, kernel, stride):
    conv3d_output_shape(xb.shape[2:], kernel, stride, 0)
    win = _windows(xb, kernel, stride)
    flat = win.reshape(win.shape[:5] + (-1,))
    # np.argmax returns the first maximal entry, i.e. row-major tie breaking.
    idx = np.argmax(flat, axis=-1)
    return flat, idx


def maxpool3d_forward(x, kernel=2, stride=None) -> np.ndarray:
    xb, batched = _as_batch(x, "maxpool3d")
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    flat, idx = _pool_argmax(xb, kernel, stride)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return _unbatch(out, batched)


def maxpool3d_backward(x, upstream, kernel=2, stride=None) -> np.ndarray:
    """Route each upstream entry to the first maximal element of its window."""
    xb, batched = _as_batch(x, "maxpool3d")
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    _, idx = _pool_argmax(xb, kernel, stride)
    up = np.asarray(upstream, dtype=np.float64)
    if not batched:
        up = up[None]
    if up.shape != idx.shape:
        raise ShapeError(f"maxpool3d backward: upstream shape {up.shape} != output shape {idx.shape}")
    a, b, c = np.unravel_index(idx, kernel)
    n, ch, to, ho, wo = np.indices(idx.shape)
    dx = np.zeros_like(xb)
    np.add.at(dx, (n, ch, to * stride[0] + a, ho * stride[1] + b, wo * stride[2] + c), up)
    return _unbatch(dx, batched)


def fc_forward(x, weight, bias) -> np.ndarray:
    """Affine map ``x @ weight.T + bias``; ``weight`` is ``(out, in)``."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fc: input width {x.shape[-1:]} incompatible with weight {weight.shape}")
    if np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"fc: bias shape {np.shape(bias)} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def fc_backward(x, weight, upstream):
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != x.shape[:-1] + (weight.shape[0],):
        raise ShapeError(f"fc backward: upstream shape {up.shape} does not match output")
    x2 = x.reshape(-1, x.shape[-1])
    up2 = up.reshape(-1, up.shape[-1])
    return up @ weight, up2.T @ x2, up2.sum(axis=0)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    x = np.asarray(x)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != x.shape:
        raise ShapeError(f"relu backward: upstream shape {up.shape} != input shape {x.shape}")
    return up * (x > 0)


def euclidean_loss(pred, target) -> tuple[float, np.ndarray]:
    """Half squared distance and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"euclidean loss: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)), diff


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             learning_rate: float) -> dict[str, np.ndarray]:
    """Return ``p - lr * g`` for every named parameter.

    Raises ``FloatingPointError`` naming the offending entry if a gradient is
    not finite.
    """
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"sgd: gradient for {name!r} has shape {np.shape(g)}, param {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"sgd: non-finite gradient in layer {name!r}")
        out[name] = p - learning_rate * g
    return out


def grad_check(fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], layer: str = "layer", h: float = 1e-5,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients from ``fn`` with central differences.

    ``fn`` maps a dict of arrays to ``(loss, grads)``. Each named array is
    perturbed entry by entry (or on a random subset of ``max_entries``
    entries). Relative error is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = fn(base)
    errors: dict[str, float] = {}
    checked = 0
    for name, value in base.items():
        if name not in analytic:
            continue
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(value.size, max_entries, replace=False)
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, value.shape)
            orig = value[idx]
            value[idx] = orig + h
            fp, _ = fn(base)
            value[idx] = orig - h
            fm, _ = fn(base)
            value[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
            checked += 1
        errors[name] = worst
    return GradCheckReport(layer, max(errors.values(), default=0.0), errors, checked)


# --- AQTN tensor files --------------------------------------------------------

_MAGIC = b"AQTN"
_VERSION = 1


def tensor_to_bytes(a) -> bytes:
    a = np.asarray(a)
    if a.ndim > 255:
        raise ShapeError("AQTN supports rank <= 255")
    head = _MAGIC + struct.pack("<BB", _VERSION, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError("not an AQTN tensor (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported AQTN version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    payload = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    if len(buf) != offset + 4 * count:
        raise ValueError("AQTN payload length does not match header extents")
    return payload.astype(np.float64).reshape(shape)


def save_tensor(path, a) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
