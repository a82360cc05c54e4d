"""Video samples, zero padding, clip segmentation and training-time augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scores import EVENT_RULES, ScoreLabel
from .tensorcore import ShapeError, load_tensor, save_tensor

CLIP_LEN = 16


@dataclass
class VideoSample:
    """Frames as a ``(C, T, H, W)`` float64 array plus the judged scores.

    ``defects`` holds ``(clip, deduction)`` pairs with 1-based clip indices;
    it is empty for real footage and for defect-free synthetic events.
    """

    frames: np.ndarray
    labels: ScoreLabel
    sample_id: str = ""
    event_kind: str = "dive"
    defects: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be (C,T,H,W), got {self.frames.shape}")
        if self.frames.shape[0] not in (1, 3) or self.frames.shape[1] < 1:
            raise ShapeError(f"need C in {{1,3}} and T >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]


@dataclass
class ClipSequence:
    clips: np.ndarray  # (N, C, clip_len, H, W)
    clip_len: int = CLIP_LEN
    stride: int = CLIP_LEN
    sample_id: str = ""
    offsets: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return self.clips.shape[0]


def num_clips(num_frames: int, clip_len: int = CLIP_LEN, stride: int = CLIP_LEN) -> int:
    if clip_len > num_frames:
        raise ShapeError(f"clip_len {clip_len} exceeds video length {num_frames}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (num_frames - clip_len) // stride + 1


def pad_video(sample: VideoSample, target_len: int) -> VideoSample:
    """Append all-zero frames until the video has ``target_len`` frames."""
    T = sample.num_frames
    if target_len < T:
        raise ValueError(f"target length {target_len} is shorter than the video ({T} frames)")
    if target_len == T:
        return sample
    frames = np.pad(sample.frames, ((0, 0), (0, target_len - T), (0, 0), (0, 0)))
    return replace(sample, frames=frames)


def segment_clips(sample: VideoSample, clip_len: int = CLIP_LEN, stride: int = CLIP_LEN) -> ClipSequence:
    """Cut clips at offsets 0, stride, 2*stride, ...; a trailing partial clip is dropped."""
    n = num_clips(sample.num_frames, clip_len, stride)
    offsets = tuple(i * stride for i in range(n))
    clips = np.stack([sample.frames[:, o:o + clip_len] for o in offsets])
    return ClipSequence(clips, clip_len, stride, sample.sample_id, offsets)


def center_crop(sample: VideoSample, crop_hw: tuple[int, int]) -> VideoSample:
    H, W = sample.frames.shape[2:]
    ch, cw = crop_hw
    if ch > H or cw > W or ch < 1 or cw < 1:
        raise ShapeError(f"crop {crop_hw} does not fit frames of size {(H, W)}")
    y, x = (H - ch) // 2, (W - cw) // 2
    return replace(sample, frames=sample.frames[:, :, y:y + ch, x:x + cw])


def augment(sample: VideoSample, seed: int, crop_hw: tuple[int, int] | None = None,
            flip_prob: float = 0.0, max_shift: int = 0) -> VideoSample:
    """Random temporal shift, spatial crop and horizontal flip.

    The shift drops the first ``k`` frames (``k`` uniform in ``[0, max_shift]``)
    and re-pads with zeros at the end so the length is unchanged.
    """
    C, T, H, W = sample.frames.shape
    crop_hw = (H, W) if crop_hw is None else tuple(crop_hw)
    if not (1 <= crop_hw[0] <= H and 1 <= crop_hw[1] <= W):
        raise ShapeError(f"crop {crop_hw} does not fit frames of size {(H, W)}")
    if not 0 <= max_shift < T:
        raise ValueError(f"max_shift must lie in [0, {T - 1}], got {max_shift}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, max_shift + 1))
    y = int(rng.integers(0, H - crop_hw[0] + 1))
    x = int(rng.integers(0, W - crop_hw[1] + 1))
    flip = bool(rng.random() < flip_prob)

    frames = sample.frames[:, k:, y:y + crop_hw[0], x:x + crop_hw[1]]
    if flip:
        frames = frames[..., ::-1]
    if k:
        frames = np.pad(frames, ((0, 0), (0, k), (0, 0), (0, 0)))
    return replace(sample, frames=np.ascontiguousarray(frames))


def flip_width(sample: VideoSample) -> VideoSample:
    return replace(sample, frames=np.ascontiguousarray(sample.frames[..., ::-1]))


def sidecar(sample: VideoSample) -> dict:
    return {
        "id": sample.sample_id,
        "event_kind": sample.event_kind,
        "execution": sample.labels.execution,
        "difficulty": sample.labels.difficulty,
        "overall": sample.labels.overall,
        "defect_list": [{"clip": c, "deduction": d} for c, d in sample.defects],
    }


def label_from_sidecar(meta: dict) -> ScoreLabel:
    return ScoreLabel(meta["execution"], meta["difficulty"], meta["overall"],
                      EVENT_RULES[meta["event_kind"]])


def save_sample(directory, sample: VideoSample) -> None:
    directory = Path(directory)
    save_tensor(directory / f"{sample.sample_id}.aqtn", sample.frames)
    (directory / f"{sample.sample_id}.json").write_text(json.dumps(sidecar(sample), indent=1))


def load_sample(directory, sample_id: str) -> VideoSample:
    directory = Path(directory)
    meta = json.loads((directory / f"{sample_id}.json").read_text())
    frames = load_tensor(directory / f"{sample_id}.aqtn")
    defects = tuple((int(d["clip"]), float(d["deduction"])) for d in meta["defect_list"])
    return VideoSample(frames, label_from_sidecar(meta), meta["id"], meta["event_kind"], defects)
