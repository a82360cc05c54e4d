"""Rank correlation, repeated-split protocols and result tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

RESULT_HEADER = ["framework", "preset", "seed", "rho_exec", "rho_diff", "rho_overall", "wall_ms", "status"]
SUMMARY_HEADER = ["framework", "preset", "stat", "rho_exec", "rho_diff", "rho_overall", "n_defined"]


def spearman_rho(pred, truth) -> float | None:
    """Pearson correlation of average ranks; ``None`` when undefined.

    Undefined means fewer than two points or a constant side (zero rank variance).
    """
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(truth, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        return None
    ra, rb = rankdata(a) - (a.size + 1) / 2, rankdata(b) - (b.size + 1) / 2
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        return None
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


@dataclass
class SplitPlan:
    """How to draw train/test splits for a protocol run.

    ``fixed=True`` reuses the dataset's own split on every repeat (the seed
    then only varies training). ``evaluate_on_train`` scores on the training
    ids, the memorisation sanity run.
    """

    repeats: int = 6
    train_size: int | None = None
    test_size: int | None = None
    seeds: list[int] = field(default_factory=list)
    fixed: bool = False
    evaluate_on_train: bool = False

    def __post_init__(self):
        if not self.seeds:
            self.seeds = list(range(self.repeats))
        if len(self.seeds) != self.repeats:
            raise ValueError(f"{self.repeats} repeats but {len(self.seeds)} seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("split seeds must be distinct")

    def draw(self, ids: list[str], dataset_split, seed: int) -> tuple[list[str], list[str]]:
        if self.fixed:
            train, test = list(dataset_split[0]), list(dataset_split[1])
        else:
            n = len(ids)
            tr = self.train_size if self.train_size is not None else len(dataset_split[0])
            te = self.test_size if self.test_size is not None else n - tr
            if tr + te > n or tr < 2 or te < 0:
                raise ValueError(f"plan {tr}+{te} does not fit a dataset of {n}")
            perm = np.random.default_rng(seed).permutation(n)
            train = sorted(ids[i] for i in perm[:tr])
            test = sorted(ids[i] for i in perm[tr:tr + te])
        if self.evaluate_on_train:
            test = list(train)
        return train, test


@dataclass
class ResultRow:
    framework: str
    preset: str
    seed: int
    rho_exec: float | None
    rho_diff: float | None
    rho_overall: float | None
    wall_ms: int = 0
    status: str = "ok"

    def cells(self) -> list[str]:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return [self.framework, self.preset, str(self.seed), fmt(self.rho_exec), fmt(self.rho_diff),
                fmt(self.rho_overall), str(self.wall_ms), self.status]


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def to_csv(self, include_wall: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in sorted(self.rows, key=lambda r: (r.framework, r.preset, r.seed)):
            cells = r.cells()
            if not include_wall:
                cells[6] = "0"
            w.writerow(cells)
        return buf.getvalue()

    def column(self, name: str, framework: str | None = None) -> list[float | None]:
        return [getattr(r, name) for r in self.rows if framework is None or r.framework == framework]


def summarize(table: ResultTable) -> list[dict]:
    """Mean and population std of each rho column per (framework, preset).

    Only defined entries count; a group with none defined gets ``None`` and a
    note in its ``n_defined`` field.
    """
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in table.rows:
        groups.setdefault((r.framework, r.preset), []).append(r)
    out = []
    for (fw, preset), rows in sorted(groups.items()):
        mean_row = {"framework": fw, "preset": preset, "stat": "mean"}
        std_row = {"framework": fw, "preset": preset, "stat": "std"}
        counts = []
        for col in ("rho_exec", "rho_diff", "rho_overall"):
            vals = np.array([getattr(r, col) for r in rows if getattr(r, col) is not None])
            counts.append(vals.size)
            mean_row[col] = float(vals.mean()) if vals.size else None
            std_row[col] = float(vals.std()) if vals.size else None
        mean_row["n_defined"] = std_row["n_defined"] = "/".join(map(str, counts))
        out += [mean_row, std_row]
    return out


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in summary:
        w.writerow([row[k] if not isinstance(row[k], float) else f"{row[k]:.6f}"
                    for k in SUMMARY_HEADER[:3]] +
                   ["" if row[c] is None else f"{row[c]:.6f}" for c in ("rho_exec", "rho_diff", "rho_overall")] +
                   [row["n_defined"]])
    return buf.getvalue()


def score_predictions(pred: dict[str, np.ndarray], truth: dict[str, np.ndarray]) -> dict[str, float | None]:
    return {h: (spearman_rho(pred[h], truth[h]) if h in pred else None)
            for h in ("exec", "diff", "overall")}


def run_protocol(dataset, framework, plan: SplitPlan, preset: str = "custom",
                 fit: Callable | None = None, clock: Callable[[], float] = time.perf_counter) -> ResultTable:
    """Train and score ``framework`` once per split seed.

    ``framework`` is a ``pipelines.PipelineConfig``. ``fit(dataset, train_ids,
    config, seed)`` must return an object with ``predict(dataset, ids)`` giving
    per-head score arrays; it defaults to ``pipelines.fit_pipeline``. A repeat
    that raises is recorded with its error in ``status`` and the run continues.
    """
    if fit is None:
        from .pipelines import fit_pipeline as fit
    table = ResultTable()
    for seed in plan.seeds:
        t0 = clock()
        try:
            train, test = plan.draw(list(dataset.ids), dataset.split, seed)
            model = fit(dataset, train, framework, seed)
            pred = model.predict(dataset, test)
            truth = {h: np.array([dataset.labels[i].get(h) for i in test]) for h in ("exec", "diff", "overall")}
            rho = score_predictions(pred, truth)
            status = "ok" if all(v is not None for h, v in rho.items() if h in pred) else "undefined"
            row = ResultRow(framework.name, preset, seed, rho["exec"], rho["diff"], rho["overall"],
                            int(1000 * (clock() - t0)), status)
        except Exception as exc:  # noqa: BLE001 - every failure becomes a row
            row = ResultRow(framework.name, preset, seed, None, None, None,
                            int(1000 * (clock() - t0)), f"error: {type(exc).__name__}: {exc}")
        table.rows.append(row)
    return table
