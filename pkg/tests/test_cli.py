import json
import pytest
import pandas as pd

from pyequicpi import *
from pyequicpi.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, run

from structures import amide_ligand, sdf_record


@pytest.fixture(autouse=True)
def detach_handlers():
    yield
    SysLog.reset()
    SysLog.set_loglevel(LoggingLevel.WARNING)


@pytest.fixture
def config_file(tmp_path, small_config_data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config_data), encoding="utf-8")
    return str(path)


@pytest.fixture
def poses_sdf(tmp_path):
    path = tmp_path / "poses.sdf"
    path.write_text(write_sdf([amide_ligand(z=1.0, name="clash"), amide_ligand(z=4.0, name="free")]), encoding="utf-8")
    return str(path)


@pytest.fixture
def protein_path(tmp_path, pocket_pdb):
    path = tmp_path / "target.pdb"
    path.write_text(pocket_pdb, encoding="utf-8")
    return str(path)


def _read_csv(path):
    with open(path, encoding="utf-8") as fp:
        header = fp.readline()
    return header, pd.read_csv(path, comment="#")


def test_help_exits_cleanly(capsys):
    assert run(["--help"]) == EXIT_OK
    assert "simulate-screen" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run(["fingerprint", "--bogus"]) == EXIT_VALIDATION
    assert run(["split", "--manifest", "m.csv", "--setting", "random"]) == EXIT_VALIDATION
    assert run(["--seed", "1"]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_missing_input_is_io_error(tmp_path, capsys):
    assert run(["fingerprint", "--sdf", str(tmp_path / "missing.sdf")]) == EXIT_IO
    assert run(["--config", str(tmp_path / "missing.json"), "--print-config"]) == EXIT_IO


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"bogus": 1}}), encoding="utf-8")
    assert run(["--config", str(path), "--print-config"]) == EXIT_VALIDATION


def test_malformed_sdf_is_validation_error(tmp_path):
    path = tmp_path / "bad.sdf"
    path.write_text(sdf_record("bad", [("C", 0.0, 0.0, 0.0)], extra_lines=["M  CHG  1   x   1"]), encoding="utf-8")
    assert run(["fingerprint", "--sdf", str(path)]) == EXIT_VALIDATION


def test_invalid_config_value(tmp_path, dataset_dir):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"learning_rate": -1.0}}), encoding="utf-8")
    assert run(["--config", str(path), "fingerprint", "--manifest", dataset_dir]) == EXIT_VALIDATION


def test_print_config_layers_sources(config_file, capsys):
    assert run(["--config", config_file, "--seed", "7", "--print-config"]) == EXIT_OK
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 7
    assert resolved["train"]["seed"] == 7
    assert resolved["train"]["steps"] == 3
    assert resolved["model"]["multiplicities"] == [4, 2, 1]
    assert resolved["split"]["compound_threshold"] == 0.4


def test_fingerprint_csv(dataset_dir, tmp_path):
    out = tmp_path / "fp.csv"
    assert run(["fingerprint", "--manifest", dataset_dir, "--nbits", "128", "--out", str(out)]) == EXIT_OK
    header, frame = _read_csv(out)
    assert header.startswith("# pyequicpi config_hash=")
    assert header.rstrip().endswith("seed=0")
    assert list(frame["id"]) == ["cpx0", "cpx1", "cpx2", "cpx3"]
    assert set(frame["nbits"]) == {128}
    assert all(len(h) == 32 for h in frame["hex"])


def test_fingerprint_from_sdf_to_stdout(poses_sdf, capsys):
    assert run(["fingerprint", "--sdf", poses_sdf, "--radius", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "id,radius,nbits,popcount,hex"
    assert lines[2].startswith("clash,1,2048,")


def test_build_graph_json(dataset_dir, config_file, tmp_path):
    out = tmp_path / "graphs.json"
    assert run(["--config", config_file, "build-graph", "--manifest", dataset_dir, "--out", str(out)]) == EXIT_OK
    data = json.loads(out.read_text(encoding="utf-8"))
    assert [g["complex_id"] for g in data["graphs"]] == ["cpx0", "cpx1", "cpx2", "cpx3"]
    assert len(data["provenance"]["config_hash"]) == 16
    kdtree = tmp_path / "graphs_kdtree.json"
    args = ["--config", config_file, "build-graph", "--manifest", dataset_dir, "--method", "kdtree"]
    assert run(args + ["--out", str(kdtree)]) == EXIT_OK
    assert json.loads(kdtree.read_text(encoding="utf-8"))["graphs"] == data["graphs"]


def test_score_vina(poses_sdf, protein_path, tmp_path):
    out = tmp_path / "vina.csv"
    assert run(["score-vina", "--ligand", poses_sdf, "--protein", protein_path, "--out", str(out)]) == EXIT_OK
    _, frame = _read_csv(out)
    assert list(frame["pose_id"]) == ["clash", "free"]
    assert frame["e_vina"][0] > 0.0 > frame["e_vina"][1]
    assert {"gauss1", "gauss2", "repulsion", "hydrophobic", "hbond"} <= set(frame.columns)


def test_rerank_writes_top_pose(poses_sdf, protein_path, tmp_path):
    out, top = tmp_path / "ranked.csv", tmp_path / "top.sdf"
    args = ["rerank", "--poses", poses_sdf, "--protein", protein_path, "--out", str(out), "--top-sdf", str(top)]
    assert run(args) == EXIT_OK
    _, frame = _read_csv(out)
    assert list(frame["pose_index"]) == [1, 0]
    assert list(frame["rank"]) == [0, 1]
    (best,) = parse_sdf(top.read_text(encoding="utf-8"))
    assert best.id == "free"


def test_rerank_threads_give_same_output(poses_sdf, protein_path, capsys):
    assert run(["rerank", "--poses", poses_sdf, "--protein", protein_path]) == EXIT_OK
    serial = capsys.readouterr().out
    assert run(["--threads", "2", "rerank", "--poses", poses_sdf, "--protein", protein_path]) == EXIT_OK
    parallel = capsys.readouterr().out
    assert parallel.splitlines()[1:] == serial.splitlines()[1:]


def test_split_json(dataset_dir, tmp_path):
    out = tmp_path / "split.json"
    args = ["split", "--manifest", dataset_dir, "--setting", "novel_compound", "--folds", "2", "--out", str(out)]
    assert run(args) == EXIT_OK
    data = json.loads(out.read_text(encoding="utf-8"))
    folds = data["assignment"]["folds"]
    assert len(folds) == 2
    assert sorted(r for f in folds for r in f) == ["cpx0", "cpx1", "cpx2", "cpx3"]
    assert data["leakage"]["setting"] == "novel_compound"
    assert data["provenance"]["config"]["split"]["folds"] == 2


def test_eval_json(tmp_path):
    pred = tmp_path / "pred.csv"
    pd.DataFrame(
        {
            "complex_id": ["a", "b", "c", "d"],
            "prediction": [0.9, 0.1, 0.5, 0.3],
            "label": [3.0, 0.0, 2.0, 1.0],
            "is_active": [1, 0, 0, 0],
        }
    ).to_csv(pred, index=False)
    out = tmp_path / "eval.json"
    assert run(["eval", "--pred", str(pred), "--metrics", "ci,spearman,ef25,bedroc", "--out", str(out)]) == EXIT_OK
    data = json.loads(out.read_text(encoding="utf-8"))
    metrics = data["report"]["metrics"]
    assert metrics["ci"] == 1.0
    assert metrics["ef25"] == pytest.approx(4.0)
    assert "bedroc80.5" in metrics
    assert data["metrics_requested"] == ["ci", "spearman", "ef25", "bedroc"]


def test_eval_negated_scores_and_groups(tmp_path, capsys):
    pred = tmp_path / "energies.csv"
    pd.DataFrame(
        {
            "id": ["a", "b", "c", "d"],
            "score": [-9.0, -5.0, -4.0, -8.0],
            "label": [2.0, 1.0, 1.0, 2.0],
            "target": ["t1", "t1", "t2", "t2"],
        }
    ).to_csv(pred, index=False)
    args = ["eval", "--pred", str(pred), "--metrics", "ci,ef1", "--negate-score", "--group-by", "target"]
    assert run(args) == EXIT_OK
    report = json.loads(capsys.readouterr().out)["report"]
    assert report["groups"]["t1"]["metrics"]["ci"] == 1.0
    assert report["summary"]["ci"]["n_groups"] == 2
    assert "ef1" in report["groups"]["t1"]["omitted"]


def test_eval_rejects_unknown_metric(tmp_path):
    pred = tmp_path / "pred.csv"
    pd.DataFrame({"id": ["a"], "score": [1.0]}).to_csv(pred, index=False)
    assert run(["eval", "--pred", str(pred), "--metrics", "auc"]) == EXIT_VALIDATION


def test_simulate_screen(capsys):
    args = ["--seed", "3", "simulate-screen", "--actives", "5", "--decoys", "45", "--trials", "4", "--ef", "1,10"]
    assert run(args) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["mode"] == "pooled"
    assert set(data["baseline"]["mean"]) == {"ef1", "ef10", "bedroc80.5"}
    assert data["baseline"]["seed"] == 3
    assert data["provenance"]["seed"] == 3


def test_simulate_screen_per_target(tmp_path, capsys):
    table = tmp_path / "targets.csv"
    table.write_text("target,actives,decoys\nt1,3,30\nt2,4,40\n", encoding="utf-8")
    assert run(["simulate-screen", "--per-target", str(table), "--trials", "3"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["mode"] == "per_target"
    assert len(data["baseline"]["per_target"]) == 2


def test_train_then_predict(dataset_dir, config_file, tmp_path, capsys):
    ckpt = tmp_path / "model.eqcp"
    loss_log = tmp_path / "loss.csv"
    args = ["--config", config_file, "train", "--manifest", dataset_dir, "--out", str(ckpt), "--loss-log", str(loss_log)]
    assert run(args) == EXIT_OK
    assert "final loss" in capsys.readouterr().out
    _, losses = _read_csv(loss_log)
    assert list(losses["step"]) == [0, 1, 2]

    checkpoint = load_checkpoint(ckpt)
    assert checkpoint.config["provenance"]["config"]["train"]["steps"] == 3

    outputs = []
    for threads in ("1", "2"):
        out = tmp_path / f"pred{threads}.csv"
        args = ["--threads", threads, "predict", "--manifest", dataset_dir, "--checkpoint", str(ckpt)]
        assert run(args + ["--with-labels", "--out", str(out)]) == EXIT_OK
        outputs.append(_read_csv(out)[1])
    pd.testing.assert_frame_equal(outputs[0], outputs[1])
    frame = outputs[0]
    assert list(frame["complex_id"]) == ["cpx0", "cpx1", "cpx2", "cpx3"]
    assert frame["label"][0] == pytest.approx(normalize_label(12.0))
    assert list(frame["is_active"]) == [True, False, False, True]


def test_train_is_reproducible(dataset_dir, config_file, tmp_path):
    paths = [tmp_path / "a.eqcp", tmp_path / "b.eqcp"]
    for path in paths:
        assert run(["--config", config_file, "train", "--manifest", dataset_dir, "--out", str(path)]) == EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()
