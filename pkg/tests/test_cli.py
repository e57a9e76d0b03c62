import csv
import json
import subprocess
import sys

import pytest

from finer.cli import ConfigError, UsageError, main, parse_config_text, parse_sequence
from finer.train import TrainConfig

HEAD = "student_id,question_id,correct\n"
# the toy sequence with source ids 10, 20, 30 for questions 0, 1, 2
TOY_CSV = HEAD + "a,10,1\na,10,0\na,20,0\na,30,1\na,10,0\n"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text(TOY_CSV)
    return path


@pytest.fixture
def toy_trie(tmp_path, toy_csv, capsys):
    out = tmp_path / "toy.trie"
    code, stats, _ = run(capsys, "build-trie", "--input", str(toy_csv), "--out", str(out), "--zbar", "3")
    assert code == 0
    return out, stats


def test_build_trie_stats(toy_trie):
    _, stats = toy_trie
    cells = [(10, 1), (10, 0), (20, 0), (30, 1), (10, 0)]
    distinct = {tuple(cells[i:j]) for i in range(5) for j in range(i + 1, 6)}
    assert len(distinct) == 14
    assert stats["nodes"] == 15  # every distinct substring plus the root
    assert stats["edges"] == 14
    assert stats["students"] == 1 and stats["cells"] == 5
    assert {"build_seconds", "max_depth", "xi", "zbar", "ibar"} <= set(stats)


def test_build_trie_is_deterministic(tmp_path, toy_csv, capsys):
    blobs = []
    for name in ("a.trie", "b.trie"):
        assert run(capsys, "build-trie", "--input", str(toy_csv), "--out", str(tmp_path / name))[0] == 0
        blobs.append((tmp_path / name).read_bytes())
    assert blobs[0] == blobs[1]


def test_missing_input_exits_2(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code, _, err = run(capsys, "build-trie", "--input", str(missing), "--out", str(tmp_path / "x"))
    assert code == 2
    assert "absent.csv" in err


def test_fetch_toy(toy_trie, capsys):
    path, _ = toy_trie
    code, out, _ = run(capsys, "fetch", "--trie", str(path), "--sequence", "10:1,10:0", "--target", "30")
    assert code == 0
    assert out["target"] == 30
    assert out["lengths"] == [1, 2]
    assert out["P"][1] == [0.0, 1.0, 0.0]
    assert out["F"][1] == [0, 1, 0]


def test_fetch_errors(toy_trie, capsys, tmp_path):
    path, _ = toy_trie
    assert run(capsys, "fetch", "--trie", str(path), "--sequence", "10:1", "--target", "99")[0] == 2
    assert run(capsys, "fetch", "--trie", str(path), "--sequence", "10:7", "--target", "10")[0] == 2
    bad = tmp_path / "bad.trie"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "fetch", "--trie", str(bad), "--sequence", "", "--target", "10")
    assert code == 2 and "magic" in err


def test_fetch_explain_schema(toy_trie, capsys):
    path, _ = toy_trie
    code, out, _ = run(capsys, "fetch", "--trie", str(path), "--sequence", "10:1,10:0", "--target", "30",
                       "--explain")
    assert code == 0
    ex = out["explain"]
    assert len(ex["D"]) == 2 and len(ex["D"][0]) == 2 and len(ex["D"][0][0]) == 3
    assert len(ex["att"]) == 2 and len(ex["att"][0]) == 3
    assert all(0 < v < 1 for row in ex["e_omega"] for v in row)
    assert len(ex["T"]) == 3


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["fetch"]) == 2
    assert main(["bench", "--data", "x.csv", "--mode", "fast"]) == 2
    capsys.readouterr()


def test_parse_sequence():
    assert parse_sequence("7:1, 7:0,3:1") == [(7, 1), (7, 0), (3, 1)]
    assert parse_sequence("") == []
    for bad in ("7", "7:x", "7:2"):
        with pytest.raises(UsageError):
            parse_sequence(bad)


def test_config_parsing():
    cfg = parse_config_text("# model\nd = 8\nlambda = 2\nlr = 5e-4  # slower\nsimilarity = false\nmonitor = loss\n")
    assert cfg == TrainConfig(d=8, lam=2, lr=5e-4, similarity=False, monitor="loss")
    with pytest.raises(ConfigError, match="'dd'"):
        parse_config_text("dd = 3")
    with pytest.raises(ConfigError, match="'lam'"):
        parse_config_text("lam = 3")
    with pytest.raises(ConfigError, match="'epochs'"):
        parse_config_text("epochs = many")
    with pytest.raises(ConfigError, match="ibar"):
        parse_config_text("ibar = 0")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")


def test_bad_config_file_exits_2(tmp_path, toy_csv, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--data", str(toy_csv), "--out", str(tmp_path / "m"), "--config", str(cfg))
    assert code == 2 and "learning_rate" in err


def test_synth_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        code, out, _ = run(capsys, "synth", "--out", str(path), "--students", "30", "--seed", "3")
        assert code == 0 and out["students"] == 30
    assert a.read_bytes() == b.read_bytes()


def test_train_eval_conflicts_pipeline(tmp_path, capsys):
    data = tmp_path / "synth.csv"
    model = tmp_path / "m.bin"
    cfg = tmp_path / "train.cfg"
    cfg.write_text("d = 8\nd_prime = 4\nepochs = 25\npatience = 5\n")
    assert run(capsys, "synth", "--out", str(data), "--students", "200", "--seed", "2")[0] == 0
    code, out, _ = run(capsys, "train", "--data", str(data), "--out", str(model), "--config", str(cfg))
    assert code == 0
    assert out["final_train_loss"] < out["initial_loss"]
    assert 1 <= out["best_epoch"] <= out["epochs_run"] <= 25
    for key in ("model", "trie", "curve", "plot"):
        assert (tmp_path / out[key].split("/")[-1]).exists()
    assert open(out["plot"], "rb").read(8) == b"\x89PNG\r\n\x1a\n"
    with open(out["curve"]) as fh:
        assert len(list(csv.DictReader(fh))) == out["epochs_run"]

    preds = tmp_path / "p.csv"
    code, ev, _ = run(capsys, "eval", "--model", str(model), "--data", str(data), "--predictions-out", str(preds))
    assert code == 0
    assert 0.0 <= ev["acc"] <= 1.0 and 0.0 <= ev["auc"] <= 1.0
    assert ev["n_samples"] == 200 * 23
    assert ev["conflict"]["n_scored_110"] == ev["conflict"]["n_110"]

    with open(preds) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["student_id", "position", "question_id", "correct", "probability"]
    assert len(rows) == ev["n_samples"]
    by_key = {(r["student_id"], int(r["position"])): r for r in rows}
    with open(data) as fh:
        raw = [r for r in csv.DictReader(fh) if r["student_id"] == rows[0]["student_id"]]
    k = int(rows[0]["position"])
    assert (raw[k]["question_id"], raw[k]["correct"]) == (rows[0]["question_id"], rows[0]["correct"])
    assert len(by_key) == len(rows)

    code, conf, _ = run(capsys, "conflicts", "--data", str(data), "--predictions", str(preds))
    assert code == 0
    assert conf["acc_110"] == ev["conflict"]["acc_110"]

    code, ex, _ = run(capsys, "fetch", "--trie", out["trie"], "--sequence", "", "--target", "0", "--explain",
                      "--model", str(model))
    assert code == 0 and ex["explain"]["weights"] == "model"


def test_bench_command(tmp_path, capsys):
    data = tmp_path / "s.csv"
    assert run(capsys, "synth", "--out", str(data), "--students", "40")[0] == 0
    code, out, _ = run(capsys, "bench", "--data", str(data), "--queries", "500", "--oracle-queries", "5",
                       "--csv", str(tmp_path / "b.csv"), "--plot", str(tmp_path / "b.png"))
    assert code == 0
    modes = [r["mode"] for r in out["results"]]
    assert modes == ["trie", "oracle"]
    assert out["results"][0]["mean_hops"] <= 3
    assert (tmp_path / "b.png").stat().st_size > 0


def test_predictions_file_errors(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text(TOY_CSV)
    bad = tmp_path / "p.csv"
    bad.write_text("student,pos,p\na,1,0.5\n")
    code, _, err = run(capsys, "conflicts", "--data", str(data), "--predictions", str(bad))
    assert code == 2 and "header" in err
    bad.write_text("student_id,position,probability\na,one,0.5\n")
    code, _, err = run(capsys, "conflicts", "--data", str(data), "--predictions", str(bad))
    assert code == 2 and "line 2" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "finer", "conflicts", "--data", str(tmp_path / "none.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "none.csv" in proc.stderr and proc.stdout == ""
