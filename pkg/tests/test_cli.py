import json

import pytest

from mmevent.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, RunConfig, read_config_file, run

SMALL = ["--n-docs", "4", "--d-x", "8", "--d-y", "8", "--d-z", "8"]
JMMT = ["--d-model", "16", "--heads", "2", "--layers", "1", "--epochs", "1", "--bins", "20", "--lr", "1e-3"]


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["synth", "--seed", "7", "--out", "c.jsonl"] + SMALL) == EXIT_OK
    return tmp_path


def manifest(path):
    return json.loads((path.parent / (path.name + ".manifest.json")).read_text())


def test_synth_deterministic(work):
    assert run(["synth", "--seed", "7", "--out", "c2.jsonl"] + SMALL) == EXIT_OK
    assert (work / "c.jsonl").read_bytes() == (work / "c2.jsonl").read_bytes()
    m = manifest(work / "c.jsonl")
    assert m["seed"] == 7 and m["config"]["n_docs"] == 4 and "c.jsonl" in m["outputs"]


def test_unknown_flag_exit_1(work, capsys):
    assert run(["synth", "--out", "x.jsonl", "--bogus", "3"]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_no_subcommand(capsys):
    assert run(["frobnicate"]) == EXIT_CONFIG
    assert run([]) == EXIT_CONFIG


def test_invalid_value_exit_1(work):
    assert run(["train-coref", "--corpus", "c.jsonl", "--out", "m.npz", "--lr", "-1"]) == EXIT_CONFIG
    assert run(["train-coref", "--corpus", "c.jsonl"]) == EXIT_CONFIG


def test_missing_input_exit_2(work, capsys):
    assert run(["score", "--gold", "missing.jsonl", "--pred", "missing.jsonl"]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_corrupt_corpus_exit_2(work):
    (work / "bad.jsonl").write_text("{not json\n")
    assert run(["train-coref", "--corpus", "bad.jsonl", "--out", "m.npz"]) == EXIT_DATA


def test_missing_checkpoint_exit_2(work):
    assert run(["pipeline", "--corpus", "c.jsonl", "--coref-checkpoint", "no.npz", "--jmmt-checkpoint", "no.npz"]) == EXIT_DATA


def test_numeric_failure_exit_3(work, monkeypatch):
    import mmevent.coref as coref

    def boom(*a, **k):
        raise coref.CorefDivergenceError(0, 4, float("nan"))

    monkeypatch.setattr(coref, "train_coref", boom)
    assert run(["train-coref", "--corpus", "c.jsonl", "--out", "m.npz"]) == EXIT_NUMERIC


def test_config_file_and_flag_precedence(work):
    (work / "run.cfg").write_text("# comment\nseed = 3\nn_docs=2\nd_x = 8\nd_y=8\nd_z=8\n")
    assert run(["synth", "--config", "run.cfg", "--seed", "5", "--out", "k.jsonl"]) == EXIT_OK
    m = manifest(work / "k.jsonl")
    assert m["seed"] == 5 and m["config"]["n_docs"] == 2
    (work / "bad.cfg").write_text("no_such_key = 1\n")
    assert run(["synth", "--config", "bad.cfg", "--out", "k.jsonl"]) == EXIT_CONFIG


def test_read_config_file_types(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr=0.01\nmulti_instance=true\nepochs=none\n")
    assert read_config_file(p) == {"lr": 0.01, "multi_instance": True, "epochs": None}


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.beam_width, cfg.lr, cfg.threshold, cfg.frames_t, cfg.per_frame_k, cfg.bins) == (5, 1e-4, 0.13, 3, 5, 1000)


def test_train_commands_reproducible(work):
    for out in ("a.npz", "b.npz"):
        assert run(["train-coref", "--corpus", "c.jsonl", "--out", out, "--max-steps", "5", "--lr", "1e-2"]) == EXIT_OK
    assert (work / "a.npz").read_bytes() == (work / "b.npz").read_bytes()
    assert manifest(work / "a.npz")["loss_trace"] == manifest(work / "b.npz")["loss_trace"]
    for out in ("ja.npz", "jb.npz"):
        assert run(["train-jmmt", "--corpus", "c.jsonl", "--out", out] + JMMT) == EXIT_OK
    assert (work / "ja.npz").read_bytes() == (work / "jb.npz").read_bytes()
    assert manifest(work / "ja.npz")["loss_trace"] == manifest(work / "jb.npz")["loss_trace"]


@pytest.fixture
def trained(work):
    assert run(["train-coref", "--corpus", "c.jsonl", "--out", "coref.npz", "--max-steps", "20", "--lr", "1e-2"]) == EXIT_OK
    assert run(["train-jmmt", "--corpus", "c.jsonl", "--out", "jmmt.npz"] + JMMT) == EXIT_OK
    return work


def test_score_prints_table(trained, capsys):
    assert run(["predict-jmmt", "--corpus", "c.jsonl", "--checkpoint", "jmmt.npz", "--out", "p.jsonl", "--beam-width", "2"]) == EXIT_OK
    capsys.readouterr()
    assert run(["score", "--setting", "multimedia", "--gold", "c.jsonl", "--pred", "p.jsonl"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Multimedia Evaluation" in out and "P     R     F1" in out


def test_coref_commands(trained, capsys):
    assert run(["tune-threshold", "--corpus", "c.jsonl", "--checkpoint", "coref.npz", "--out", "t.json"]) == EXIT_OK
    thr = json.loads((trained / "t.json").read_text())["threshold"]
    assert -1 <= thr <= 1
    assert run(["predict-coref", "--corpus", "c.jsonl", "--checkpoint", "coref.npz", "--out", "l.jsonl",
                "--threshold", str(thr)]) == EXIT_OK
    assert run(["score", "--setting", "coref", "--gold", "c.jsonl", "--pred", "l.jsonl", "--out", "r.json"]) == EXIT_OK
    assert "accuracy" in json.loads((trained / "r.json").read_text())["coref"]["mention"]


def test_pipeline_gold_pairs_match_standalone(trained):
    assert run(["pipeline", "--corpus", "c.jsonl", "--coref-checkpoint", "coref.npz", "--jmmt-checkpoint", "jmmt.npz",
                "--beam-width", "2", "--out", "pipe.json"]) == EXIT_OK
    assert run(["predict-jmmt", "--corpus", "c.jsonl", "--checkpoint", "jmmt.npz", "--out", "p.jsonl", "--beam-width", "2"]) == EXIT_OK
    assert run(["report", "--gold", "c.jsonl", "--pred", "p.jsonl", "--out", "r.json"]) == EXIT_OK
    pipe = json.loads((trained / "pipe.json").read_text())
    rep = json.loads((trained / "r.json").read_text())
    for s in ("text", "video", "multimedia"):
        assert pipe["gold_pairs"][s] == rep[s]
        assert pipe["predicted_pairs"][s]["indicative"] is True
    assert pipe["predicted_pairs_indicative"] is True


def test_pipeline_with_no_predicted_links(trained):
    assert run(["pipeline", "--corpus", "c.jsonl", "--coref-checkpoint", "coref.npz", "--jmmt-checkpoint", "jmmt.npz",
                "--threshold", "1.0", "--beam-width", "1", "--out", "pipe.json"]) == EXIT_OK
    pred = json.loads((trained / "pipe.json").read_text())["predicted_pairs"]
    for s in ("text", "video", "multimedia"):
        assert pred[s]["mention"]["tp"] == 0 and pred[s]["mention"]["fp"] == 0
    assert pred["coref"]["mention"]["fp"] == 0 and pred["coref"]["mention"]["tp"] == 0


def test_inputs_not_mutated(trained):
    before = (trained / "c.jsonl").read_bytes()
    run(["predict-jmmt", "--corpus", "c.jsonl", "--checkpoint", "jmmt.npz", "--out", "p.jsonl", "--beam-width", "1"])
    assert (trained / "c.jsonl").read_bytes() == before
