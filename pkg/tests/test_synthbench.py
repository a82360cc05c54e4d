from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqa import synthbench as sb
from aqa.evalkit import spearman_rho
from aqa.scores import ScoreLabel, combine_score
from aqa.tensorcore import load_tensor

GOLDEN = Path(__file__).parent / "data" / "golden_dive_k2.aqtn"


def test_difficulty_tables():
    assert sb.difficulty_table(0) == 2.0 and sb.difficulty_table(3) == 2.9
    assert sb.difficulty_table(0, "vault") == 4.0 and sb.difficulty_table(5, "vault") == 6.0
    for kind in ("dive", "vault"):
        vals = [sb.difficulty_table(k, kind) for k in range(12)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        sb.difficulty_table(-1)


def test_defect_free_event():
    spec = sb.EventSpec(num_frames=40, height=16, width=16, seed=1)
    s = sb.generate_event(spec)
    assert s.labels == ScoreLabel.from_parts(28.0, 2.0, "product")
    assert s.frames.shape == (1, 40, 16, 16)
    # one smooth blob: each frame has a single bright maximum near 1
    peaks = s.frames[0].reshape(40, -1).max(axis=1)
    assert np.all(peaks > 0.8) and np.all(peaks < 1.1)


def test_one_defect_costs_exactly_its_deduction():
    a = sb.EventSpec(base_execution=25.0, seed=3)
    b = sb.EventSpec(base_execution=25.0, defects=((5, 4.0),), seed=3)
    assert sb.execution_score(a) - sb.execution_score(b) == 4.0


def test_defect_changes_only_its_clip_region():
    a = sb.generate_event(sb.EventSpec(seed=4, num_frames=64, height=16, width=16))
    b = sb.generate_event(sb.EventSpec(seed=4, num_frames=64, height=16, width=16, defects=((2, 6.0),)))
    diff = np.abs(b.frames - a.frames)[0].reshape(64, -1).max(axis=1)
    changed = np.flatnonzero(diff > 0)
    assert changed.min() >= 18 and changed.max() < 30


def test_defect_clip_out_of_range_rejected():
    with pytest.raises(ValueError):
        sb.generate_event(sb.EventSpec(defects=((10, 1.0),)))
    with pytest.raises(ValueError):
        sb.generate_event(sb.EventSpec(defects=((0, 1.0),)))


def test_golden_file():
    spec = sb.EventSpec("dive", 2, ((1, 3.5),), 28.0, 32, 12, 12, 1, 2024)
    got = sb.generate_event(spec).frames.astype(np.float32)
    np.testing.assert_allclose(got, load_tensor(GOLDEN), rtol=0, atol=1e-6)


def test_generation_is_bit_identical():
    spec = sb.EventSpec("vault", 3, ((2, 1.5),), 9.5, 100, 16, 16, 3, 77)
    a, b = sb.generate_event(spec), sb.generate_event(spec)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.frames.shape[0] == 3 and a.labels.rule == "sum"


@settings(max_examples=80, deadline=None)
@given(kind=st.sampled_from(["dive", "vault"]), k=st.integers(0, 9), base=st.floats(0, 40),
       deds=st.lists(st.floats(0, 12), max_size=5))
def test_execution_rule_and_monotonicity(kind, k, base, deds):
    defects = tuple((i + 1, d) for i, d in enumerate(deds))
    spec = sb.EventSpec(kind, k, defects, base)
    lab = sb.label_for_spec(spec)
    ex = lab.execution
    assert 0 <= ex <= spec.exec_max and (2 * ex) == int(2 * ex)
    assert lab.overall == combine_score(ex, lab.difficulty, spec.rule)
    more = sb.EventSpec(kind, k, defects + ((6, 1.0),), base)
    assert sb.execution_score(more) <= ex
    assert sb.label_for_spec(sb.EventSpec(kind, k + 1, defects, base)).difficulty > lab.difficulty


@pytest.mark.parametrize("preset,n,train", [("mit-dive", 159, 100), ("unlv-dive", 370, 300), ("unlv-vault", 176, 120)])
def test_split_presets(preset, n, train):
    ds = sb.generate_dataset(n, sb.SPLIT_PRESETS[preset][0], split=preset, seed=0)
    assert len(ds.split[0]) == train and len(ds.split[1]) == n - train
    assert not set(ds.split[0]) & set(ds.split[1])
    assert set(ds.split[0]) | set(ds.split[1]) == set(ds.ids)


def test_dataset_determinism_and_oracle():
    a = sb.generate_dataset(60, seed=5, split=(40, 20))
    b = sb.generate_dataset(60, seed=5, split=(40, 20))
    assert a.manifest == b.manifest and a.labels == b.labels
    assert sb.generate_dataset(60, seed=6, split=(40, 20)).manifest != a.manifest
    truth = [a.labels[i].overall for i in a.ids]
    oracle = [sb.oracle_score(a.manifest["samples"][i]).overall for i in a.ids]
    assert oracle == truth
    assert spearman_rho(oracle, truth) == 1.0


def test_oracle_on_many_samples_and_defect_removal():
    ds = sb.generate_dataset(1000, seed=9, split=(800, 200), defect_rate=0.3)
    for sid in ds.ids:
        entry = ds.manifest["samples"][sid]
        assert sb.oracle_score(entry) == ds.labels[sid]
        clean = dict(entry, defects=[])
        assert sb.oracle_score(clean).execution == entry["base_execution"]


def test_fixed_defect_count_and_validation():
    ds = sb.generate_dataset(30, n_defects=1, seed=2, split=(20, 10))
    assert all(len(s.defects) == 1 for s in ds.specs.values())
    with pytest.raises(ValueError):
        sb.generate_dataset(1)
    with pytest.raises(ValueError):
        sb.generate_dataset(10, split=(5, 4))
    with pytest.raises(ValueError):
        sb.generate_dataset(10, kind="skate")


def test_save_load_dataset(tmp_path):
    ds = sb.generate_dataset(6, "vault", seed=4, split=(4, 2), frame_size=16)
    sb.save_dataset(ds, tmp_path)
    back = sb.load_dataset(tmp_path)
    assert back.ids == ds.ids and back.labels == ds.labels and back.split == ds.split
    s0, s1 = ds.sample(ds.ids[0]), back.sample(ds.ids[0])
    np.testing.assert_allclose(s1.frames, s0.frames, atol=1e-6)
    assert s1.defects == s0.defects and len(back.samples) == 6
    assert back.kind == "vault"
