import csv
import json

import numpy as np
import pytest

from aqa import cli, feedback
from aqa.evalkit import RESULT_HEADER, spearman_rho
from aqa.pipelines import load_pipeline
from aqa.synthbench import load_dataset

SMALL_SYNTH = {"n": 16, "num_frames": 48, "frame_size": 24, "split": [12, 4]}
FAST = {"warmup_iterations": 20, "hidden": 4, "svr_C": [10, 1000], "svr_eps": [0.01]}


def write_config(path, **kw):
    path.write_text(json.dumps(kw))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "gen.json", synth=SMALL_SYNTH)
    assert cli.main(["generate", "--config", cfg, "--seed", "5", "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def lstm_model(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("lstm")
    cfg = write_config(root / "t.json", pipeline="c3d-lstm",
                       pipeline_config={**FAST, "iterations": 300, "finetune_iterations": 300,
                                        "learning_rate": 0.02})
    assert cli.main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(root / "m")]) == 0
    return root / "m"


def test_generate_writes_manifest_and_split(data_dir):
    ds = load_dataset(data_dir)
    assert len(ds) == 16 and len(ds.split[0]) == 12
    assert (data_dir / "manifest.json").is_file()


def test_generate_is_reproducible(tmp_path, data_dir):
    cfg = write_config(tmp_path / "gen.json", synth=SMALL_SYNTH)
    assert cli.main(["generate", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (data_dir / "manifest.json").read_bytes()


def test_mit_dive_preset_sizes(tmp_path):
    cfg = write_config(tmp_path / "gen.json", synth={"num_frames": 16, "frame_size": 8})
    assert cli.main(["generate", "--config", cfg, "--preset", "mit-dive", "--out", str(tmp_path / "d")]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(m["samples"]) == 159
    assert len(m["split"]["train"]) == 100 and len(m["split"]["test"]) == 59


@pytest.mark.parametrize("n", [0, 1])
def test_too_small_dataset_is_usage_error(tmp_path, n):
    assert cli.main(["generate", "--n", str(n), "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE


def test_bad_subcommand_and_flag_exit_one():
    with pytest.raises(SystemExit) as e:
        cli.main(["fly"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--pipeline", "c3d-cnn"])
    assert e.value.code == cli.EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", pipline="c3d-svr")
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_USAGE


def test_missing_inputs_are_io_errors(tmp_path, data_dir):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m")]) == cli.EXIT_IO
    assert cli.main(["eval", "--data", str(data_dir), "--model", str(tmp_path / "nomodel"),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_IO


def test_unwritable_output_is_io_error(tmp_path, data_dir):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path / "gen.json", synth={**SMALL_SYNTH, "n": 2, "split": [1, 1]})
    assert cli.main(["generate", "--config", cfg, "--out", str(blocker / "sub")]) == cli.EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_three(tmp_path, data_dir):
    cfg = write_config(tmp_path / "t.json", pipeline="c3d-lstm",
                       pipeline_config={**FAST, "warmup_iterations": 0, "mode": "final", "iterations": 50,
                                        "learning_rate": 1e200})
    assert cli.main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "m")]) \
        == cli.EXIT_NUMERIC


def test_zero_iteration_train_keeps_initialisation(tmp_path, data_dir):
    cfg = write_config(tmp_path / "t.json", pipeline="c3d-lstm",
                       pipeline_config={**FAST, "warmup_iterations": 0, "mode": "final", "iterations": 0})
    for out in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--seed", "9", "--data", str(data_dir),
                         "--out", str(tmp_path / out)]) == 0
    from aqa import featnet, seqscore
    net = featnet.build_featnet(None, (1, 16, 24, 24), 9)
    a = load_pipeline(tmp_path / "a")
    for k, w in net.as_dict().items():
        np.testing.assert_allclose(a.featnet.as_dict()[k], w, rtol=1e-6, atol=1e-7)
    init = seqscore.init_seqscore(net.feature_dim, 4, seed=9 + 202, score_scale=a.seq.score_scale)
    for k, w in init.values.items():
        np.testing.assert_allclose(a.seq.values[k], w, rtol=1e-6, atol=1e-7)


def test_eval_memorised_model_on_train(tmp_path, data_dir):
    # a sharp kernel with a large C and thin tube interpolates the training set
    memorise = {**FAST, "gamma": 50.0, "svr_C": [10000], "svr_eps": [0.001]}
    cfg = write_config(tmp_path / "t.json", pipeline="c3d-svr", pipeline_config=memorise)
    assert cli.main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "m")]) == 0
    assert cli.main(["eval", "--data", str(data_dir), "--model", str(tmp_path / "m"), "--on-train",
                     "--repeats", "1", "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "predictions.csv")
    assert rows[0] == ["sample_id", "true_exec", "pred_exec", "true_diff", "pred_diff", "true_overall",
                       "pred_overall"]
    true, pred = [float(r[5]) for r in rows[1:]], [float(r[6]) for r in rows[1:]]
    assert len(rows) == 13 and spearman_rho(pred, true) >= 0.95
    res = read_csv(tmp_path / "e" / "results.csv")
    assert res[0] == RESULT_HEADER and float(res[1][5]) >= 0.95
    assert read_csv(tmp_path / "e" / "summary.csv")[0][:3] == ["framework", "preset", "stat"]


def test_eval_reruns_are_byte_identical(tmp_path, data_dir, lstm_model):
    for out in ("e1", "e2"):
        assert cli.main(["eval", "--data", str(data_dir), "--model", str(lstm_model), "--repeats", "2",
                         "--out", str(tmp_path / out)]) == 0
    for name in ("predictions.csv", "results.csv", "summary.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()


def test_feedback_report_files(tmp_path, data_dir, lstm_model):
    ds = load_dataset(data_dir)
    sid = ds.split[1][0]
    assert cli.main(["feedback", "--data", str(data_dir), "--model", str(lstm_model), "--sample", sid,
                     "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / f"feedback_{sid}.json").read_text())
    s = rep["scores"]
    deltas = [d["delta"] for d in rep["drops"] + rep["gains"]]
    assert sum(deltas) == pytest.approx(s[-1] - s[0], abs=1e-9)
    assert "largest drop" in (tmp_path / f"feedback_{sid}.txt").read_text()


def test_feedback_on_defect_free_sample_is_near_empty(data_dir, lstm_model):
    ds = load_dataset(data_dir)
    clean = [sid for sid in ds.ids if not ds.specs[sid].defects]
    model = load_pipeline(lstm_model)
    for sid in clean:
        rep = feedback.detect_errors(model.evolution(ds, sid), "exec", sid)
        final = rep.scores[-1]
        # at most one small dip against a rising execution ramp
        assert len(rep.drops) <= 1
        assert all(-d < 0.1 * final for _, d in rep.drops)


def test_feedback_rejects_svr_only_model(tmp_path, data_dir):
    cfg = write_config(tmp_path / "t.json", pipeline="c3d-svr", pipeline_config={**FAST, "warmup_iterations": 0})
    assert cli.main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "m")]) == 0
    assert cli.main(["feedback", "--data", str(data_dir), "--model", str(tmp_path / "m"),
                     "--sample", "dive-0000", "--out", str(tmp_path / "f")]) == cli.EXIT_USAGE


def test_sweep_stride_table(tmp_path, data_dir):
    cfg = write_config(tmp_path / "t.json", pipeline="c3d-svr", pipeline_config={**FAST, "warmup_iterations": 0})
    assert cli.main(["sweep-stride", "--config", cfg, "--data", str(data_dir), "--strides", "16,8",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "stride_sweep.csv")
    assert rows[0] == ["stride", "n_clips", "rho_exec", "rho_diff", "rho_overall"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("16", "3"), ("8", "5")]
