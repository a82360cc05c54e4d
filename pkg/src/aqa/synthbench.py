"""Procedural synthetic events with known execution/difficulty scores.

Each event is a bright blob (the performer) moving over a dark background.
The number of horizontal oscillations ``k`` stands in for the routine's
complexity and sets the difficulty. Each injected defect deducts from the
execution score and leaves a visible trace confined to one clip: a kink in
the trajectory plus a noise burst around the performer (the splash).
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scores import EVENT_RULES, EXEC_MAX, ScoreLabel
from .videoclips import CLIP_LEN, VideoSample, load_sample, num_clips, save_sample

DEFAULT_FRAMES = {"dive": 151, "vault": 100}
DEFAULT_BASE = {"dive": 28.0, "vault": 9.5}
DEFAULT_DEDUCTIONS = {"dive": (1.0, 8.0), "vault": (0.5, 2.5)}

# name -> (event kind, sample count, train size)
SPLIT_PRESETS = {
    "mit-dive": ("dive", 159, 100),
    "unlv-dive": ("dive", 370, 300),
    "unlv-vault": ("vault", 176, 120),
}


def difficulty_table(k: int, kind: str = "dive") -> float:
    """Fixed, strictly increasing difficulty for complexity ``k``."""
    if k < 0:
        raise ValueError(f"complexity must be non-negative, got {k}")
    if kind == "dive":
        return round(2.0 + 0.3 * k, 6)
    if kind == "vault":
        return round(4.0 + 0.4 * k, 6)
    raise ValueError(f"unknown event kind {kind!r}")


@dataclass(frozen=True)
class EventSpec:
    kind: str = "dive"
    complexity: int = 0
    defects: tuple[tuple[int, float], ...] = ()
    base_execution: float = 28.0
    num_frames: int = 151
    height: int = 32
    width: int = 32
    channels: int = 1
    seed: int = 0

    @property
    def exec_max(self) -> float:
        return EXEC_MAX[self.kind]

    @property
    def rule(self) -> str:
        return EVENT_RULES[self.kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defects"] = [{"clip": c, "deduction": v} for c, v in self.defects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EventSpec":
        d = dict(d)
        d["defects"] = tuple((int(x["clip"]), float(x["deduction"])) for x in d.get("defects", ()))
        return cls(**d)


def execution_score(spec: EventSpec) -> float:
    raw = spec.base_execution - sum(d for _, d in spec.defects)
    return round(min(max(raw, 0.0), spec.exec_max) * 2) / 2


def label_for_spec(spec: EventSpec) -> ScoreLabel:
    return ScoreLabel.from_parts(execution_score(spec), difficulty_table(spec.complexity, spec.kind),
                                 spec.rule)


def oracle_score(entry) -> ScoreLabel:
    """Perfect-information score read straight from a manifest entry."""
    spec = entry if isinstance(entry, EventSpec) else EventSpec.from_dict(entry)
    return label_for_spec(spec)


def _trajectory(spec: EventSpec, t: np.ndarray, rng: np.random.Generator):
    T, H, W = spec.num_frames, spec.height, spec.width
    phase = rng.uniform(0, 2 * np.pi)
    amp = 0.22 * W
    s = t / max(T - 1, 1)
    osc = np.sin(2 * np.pi * spec.complexity * s + phase) - np.sin(phase)
    if spec.kind == "dive":
        y = 0.2 * H + 0.6 * H * s
        x = 0.5 * W + amp * osc
    else:
        x = 0.2 * W + 0.6 * W * s
        y = 0.6 * H - 0.25 * H * np.sin(np.pi * s) + 0.5 * amp * osc
    return y, x


def generate_event(spec: EventSpec) -> VideoSample:
    """Render the event described by ``spec``; bit-identical for a given spec."""
    T, H, W = spec.num_frames, spec.height, spec.width
    n_clips = num_clips(T, CLIP_LEN, CLIP_LEN)
    for clip, ded in spec.defects:
        if not 1 <= clip <= n_clips:
            raise ValueError(f"defect clip {clip} outside 1..{n_clips} for a {T}-frame event")
        if ded < 0:
            raise ValueError(f"deduction must be non-negative, got {ded}")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(T, dtype=np.float64)
    y, x = _trajectory(spec, t, rng)

    scale = 30.0 / spec.exec_max  # vault deductions look as large as dive ones
    # defect draws use their own stream so frames outside defect clips do not change
    defect_rng = np.random.default_rng([spec.seed, 1])
    burst = np.zeros(T)
    for clip, ded in spec.defects:
        lo, hi = (clip - 1) * CLIP_LEN + 2, clip * CLIP_LEN - 2
        env = np.sin(np.pi * (t[lo:hi] - lo + 0.5) / (hi - lo))
        sign = defect_rng.choice([-1.0, 1.0])
        x[lo:hi] += sign * 0.6 * ded * scale * env
        burst[lo:hi] += 0.08 * ded * scale * env

    sigma = 1.5 * W / 32
    yy = np.arange(H, dtype=np.float64)[None, :, None]
    xx = np.arange(W, dtype=np.float64)[None, None, :]
    d2 = (yy - y[:, None, None]) ** 2 + (xx - x[:, None, None]) ** 2
    frames = np.exp(-d2 / (2 * sigma ** 2))
    splash_env = np.exp(-d2 / (2 * (3 * sigma) ** 2))
    noise = rng.normal(size=(T, H, W))
    frames += burst[:, None, None] * splash_env * noise
    frames += 0.01 * rng.normal(size=(T, H, W))
    frames = np.repeat(frames[None], spec.channels, axis=0)
    return VideoSample(frames, label_for_spec(spec), "", spec.kind, tuple(spec.defects))


class _LazySamples(Sequence):
    """Samples rendered (or read from disk) on access; nothing held in memory."""

    def __init__(self, ids, loader):
        self._ids = list(ids)
        self._loader = loader

    def __len__(self):
        return len(self._ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return self._loader(self._ids[i])


@dataclass
class SynthDataset:
    ids: list[str]
    specs: dict[str, EventSpec]
    labels: dict[str, ScoreLabel]
    split: tuple[list[str], list[str]]
    manifest: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        train, test = self.split
        if set(train) & set(test):
            raise ValueError("train and test ids overlap")
        if set(train) | set(test) != set(self.ids):
            raise ValueError("split does not cover every sample id")

    def sample(self, sample_id: str) -> VideoSample:
        if self.root is not None:
            return load_sample(self.root, sample_id)
        s = generate_event(self.specs[sample_id])
        s.sample_id = sample_id
        return s

    @property
    def samples(self) -> Sequence[VideoSample]:
        return _LazySamples(self.ids, self.sample)

    @property
    def kind(self) -> str:
        return self.manifest.get("config", {}).get("kind", "dive")

    def __len__(self):
        return len(self.ids)


def _resolve_split(n: int, split) -> tuple[int, int]:
    if split is None:
        split = "mit-dive"
    if isinstance(split, str):
        _, total, train = SPLIT_PRESETS[split]
        if n == total:
            return train, n - train
        train = int(round(n * train / total))
    else:
        train, test = split
        if train + test != n:
            raise ValueError(f"split {train}+{test} does not match n={n}")
    train = min(max(train, 1), n - 1)
    return train, n - train


def generate_dataset(n: int, kind: str = "dive", complexity_range: tuple[int, int] = (0, 5),
                     defect_rate: float = 0.15, n_defects: int | None = None,
                     deduction_range: tuple[float, float] | None = None,
                     base_execution: float | None = None, num_frames: int | None = None,
                     frame_size: int = 32, split=None, seed: int = 0) -> SynthDataset:
    """Sample ``n`` event specs i.i.d. and split them into train/test.

    ``split`` is a preset name from ``SPLIT_PRESETS`` or a ``(train, test)``
    pair. With ``n_defects`` set every event gets exactly that many defects in
    distinct clips; otherwise each clip is defective with ``defect_rate``.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if kind not in EVENT_RULES:
        raise ValueError(f"unknown event kind {kind!r}")
    num_frames = num_frames or DEFAULT_FRAMES[kind]
    base = DEFAULT_BASE[kind] if base_execution is None else float(base_execution)
    lo, hi = DEFAULT_DEDUCTIONS[kind] if deduction_range is None else deduction_range
    halves = np.arange(round(lo * 2), round(hi * 2) + 1) / 2
    n_clips = num_clips(num_frames, CLIP_LEN, CLIP_LEN)
    train_n, _ = _resolve_split(n, split)

    rng = np.random.default_rng(seed)
    ids, specs, labels = [], {}, {}
    for i in range(n):
        k = int(rng.integers(complexity_range[0], complexity_range[1] + 1))
        if n_defects is not None:
            clips = np.sort(rng.choice(n_clips, size=n_defects, replace=False)) + 1
        else:
            clips = np.flatnonzero(rng.random(n_clips) < defect_rate) + 1
        defects = tuple((int(c), float(rng.choice(halves))) for c in clips)
        spec = EventSpec(kind, k, defects, base, num_frames, frame_size, frame_size, 1,
                         int(rng.integers(0, 2**31 - 1)))
        sid = f"{kind}-{i:04d}"
        ids.append(sid)
        specs[sid] = spec
        labels[sid] = label_for_spec(spec)
    order = rng.permutation(n)
    train = sorted(ids[j] for j in order[:train_n])
    test = sorted(ids[j] for j in order[train_n:])
    manifest = {
        "config": {
            "n": n, "kind": kind, "complexity_range": list(complexity_range),
            "defect_rate": defect_rate, "n_defects": n_defects,
            "deduction_range": [lo, hi], "base_execution": base,
            "num_frames": num_frames, "frame_size": frame_size,
            "split": split if isinstance(split, str) or split is None else list(split),
            "seed": seed,
        },
        "difficulty_table": {str(k): difficulty_table(k, kind)
                             for k in range(complexity_range[0], complexity_range[1] + 1)},
        "exec_max": EXEC_MAX[kind],
        "rule": EVENT_RULES[kind],
        "split": {"train": train, "test": test},
        "samples": {sid: specs[sid].to_dict() for sid in ids},
    }
    return SynthDataset(ids, specs, labels, (train, test), manifest)


def save_dataset(dataset: SynthDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid in dataset.ids:
        save_sample(directory, dataset.sample(sid))
    (directory / "manifest.json").write_text(json.dumps(dataset.manifest, indent=1, sort_keys=True))
    return directory


def load_dataset(directory) -> SynthDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    specs = {sid: EventSpec.from_dict(d) for sid, d in manifest["samples"].items()}
    ids = sorted(specs)
    labels = {sid: label_for_spec(s) for sid, s in specs.items()}
    split = (list(manifest["split"]["train"]), list(manifest["split"]["test"]))
    return SynthDataset(ids, specs, labels, split, manifest, root=directory)
