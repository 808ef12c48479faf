import json
import subprocess
import sys

import numpy as np
import pytest

from spoofguard.cli import main, manifest_argv, parse_args
from spoofguard.lfcc import read_feature_dump
from spoofguard.metrics import eer, evaluate_report
from spoofguard.signal_io import TrialRecord, read_protocol, read_scores, write_protocol, write_scores

from oracles import three_system_case

SMALL = ["--n-bonafide", "8", "--n-spoof", "24", "--utterance-len", "4000"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    d = {k: root / k for k in ("data", "feat", "train", "scores", "eval")}
    assert run("synth-data", "--out", d["data"], *SMALL) == 0
    assert run("extract", "--data", d["data"], "--out", d["feat"]) == 0
    assert run("train", "--data", d["data"], "--features", d["feat"], "--out", d["train"], "--epochs", 3,
               "--batch-size", 8) == 0
    assert run("score", "--checkpoint", d["train"] / "model.ckpt", "--data", d["data"], "--features", d["feat"],
               "--out", d["scores"]) == 0
    assert run("evaluate", "--scores", d["scores"] / "scores.txt", "--protocol", d["data"] / "protocol.txt",
               "--out", d["eval"]) == 0
    return d


def test_defaults_follow_la_train_ratio():
    _, args = parse_args(["synth-data"])
    assert (args.n_bonafide, args.n_spoof, args.utterance_len) == (258, 2280, 64600)


def test_default_outputs_chain():
    _, synth = parse_args(["synth-data"])
    _, ext = parse_args(["extract"])
    _, tr = parse_args(["train"])
    _, sc = parse_args(["score"])
    _, ev = parse_args(["evaluate"])
    assert ext.data == synth.out and tr.data == synth.out and tr.features == ext.out
    assert sc.checkpoint.startswith(tr.out) and ev.scores.startswith(sc.out)


def test_synth_outputs(pipeline):
    recs = read_protocol(pipeline["data"] / "protocol.txt")
    assert len(recs) == 32 and sum(r.is_bonafide for r in recs) == 8
    assert len(list((pipeline["data"] / "wav").glob("*.wav"))) == 32


def test_synth_same_seed_same_protocol(pipeline, tmp_path):
    assert run("synth-data", "--out", tmp_path / "again", *SMALL) == 0
    assert (tmp_path / "again" / "protocol.txt").read_bytes() == (pipeline["data"] / "protocol.txt").read_bytes()


def test_non_empty_dir_refused(tmp_path, capsys):
    (tmp_path / "junk").write_text("x")
    assert run("synth-data", "--out", tmp_path, *SMALL) == 1
    assert "E_INPUT" in capsys.readouterr().err
    assert run("synth-data", "--out", tmp_path, "--force", *SMALL) == 0


def test_every_command_writes_one_manifest(pipeline):
    for key, command in [("data", "synth-data"), ("feat", "extract"), ("train", "train"),
                         ("scores", "score"), ("eval", "evaluate")]:
        m = json.loads((pipeline[key] / "manifest.json").read_text())
        assert m["command"] == command and m["seed"] == 0 and m["version"]
        assert all(p.startswith(str(pipeline[key])) for p in m["outputs"])


def test_extract_dims(pipeline):
    feats = read_feature_dump(pipeline["feat"] / "features.bin")
    assert len(feats) == 32
    # 4000 samples: 1 + (4000 - 320) // 160 frames
    assert {f.shape for f in feats.values()} == {(60, 24)}


def test_extract_deterministic_with_threads(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SPOOFGUARD_THREADS", "3")
    assert run("extract", "--data", pipeline["data"], "--out", tmp_path) == 0
    assert (tmp_path / "features.bin").read_bytes() == (pipeline["feat"] / "features.bin").read_bytes()


def test_corrupt_wav_named(pipeline, tmp_path, capsys):
    data = tmp_path / "data"
    assert run("synth-data", "--out", data, *SMALL) == 0
    victim = sorted((data / "wav").glob("*.wav"))[3]
    victim.write_bytes(b"RIFF not really")
    assert run("extract", "--data", data, "--out", tmp_path / "f") == 1
    assert victim.name in capsys.readouterr().err


def test_missing_utterances_listed(pipeline, tmp_path, capsys):
    recs = read_protocol(pipeline["data"] / "protocol.txt")
    data = tmp_path / "data"
    (data / "wav").mkdir(parents=True)
    write_protocol(data / "protocol.txt", recs[:2] + [TrialRecord("S", "ghost_01", "A01", "spoof")])
    for r in recs[:2]:
        (data / "wav" / f"{r.utterance_id}.wav").write_bytes((pipeline["data"] / "wav" / f"{r.utterance_id}.wav").read_bytes())
    assert run("extract", "--data", data, "--out", tmp_path / "f") == 1
    err = capsys.readouterr().err
    assert "E_INPUT" in err and "ghost_01" in err


def _train(pipeline, out, *extra):
    return run("train", "--data", pipeline["data"], "--features", pipeline["feat"], "--out", out,
               "--epochs", 2, "--batch-size", 8, "--no-plots", *extra)


def test_ohem_off_equals_full_fraction(pipeline, tmp_path):
    assert _train(pipeline, tmp_path / "a", "--ohem", "off") == 0
    assert _train(pipeline, tmp_path / "b", "--fraction", "1.0", "--ohem-scope", "all_samples") == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_on_the_fly_features_match_dump(pipeline, tmp_path):
    assert _train(pipeline, tmp_path / "a") == 0
    assert run("train", "--data", pipeline["data"], "--features", tmp_path / "nowhere", "--out", tmp_path / "b",
               "--epochs", 2, "--batch-size", 8, "--no-plots") == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


@pytest.mark.parametrize("bad", ["0", "1.5", "-0.2", "abc"])
def test_invalid_fraction_is_usage_error(bad, capsys):
    with pytest.raises(SystemExit) as exc:
        parse_args(["train", "--fraction", bad])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_config_errors_before_compute(pipeline, tmp_path, capsys):
    assert _train(pipeline, tmp_path / "t", "--batch-size", "3") == 1
    assert "E_CONFIG" in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


def test_train_stats_csv(pipeline):
    lines = (pipeline["train"] / "stats.csv").read_text().splitlines()
    assert lines[0] == "epoch,batch,loss_selected,loss_discarded,n_selected"
    # 32 utterances, batch 8, 3 epochs
    assert len(lines) == 1 + 12
    assert (pipeline["train"] / "training_loss.png").exists()


def test_raw_res2net_tiny_preset(pipeline, tmp_path):
    assert run("train", "--model", "raw-res2net", "--raw-preset", "tiny", "--data", pipeline["data"],
               "--out", tmp_path / "t", "--epochs", 1, "--batch-size", 16, "--no-plots") == 0
    assert run("score", "--checkpoint", tmp_path / "t" / "model.ckpt", "--data", pipeline["data"],
               "--out", tmp_path / "s") == 0
    scores = read_scores(tmp_path / "s" / "scores.txt")
    assert len(scores) == 32 and all(np.isfinite(list(scores.values())))


def test_score_matches_protocol_ids(pipeline):
    scores = read_scores(pipeline["scores"] / "scores.txt")
    assert sorted(scores) == sorted(r.utterance_id for r in read_protocol(pipeline["data"] / "protocol.txt"))


def test_evaluate_matches_library(pipeline):
    scores = read_scores(pipeline["scores"] / "scores.txt")
    rep = evaluate_report(scores, read_protocol(pipeline["data"] / "protocol.txt"))
    assert (pipeline["eval"] / "report.json").read_text() == rep.to_json()
    assert (pipeline["eval"] / "report.txt").read_text() == rep.to_table()


def test_evaluate_data_files(pipeline):
    det = (pipeline["eval"] / "det.tsv").read_text().splitlines()
    assert det[0] == "threshold\tp_miss\tp_fa" and len(det) > 2
    bars = (pipeline["eval"] / "per_attack.tsv").read_text().splitlines()
    assert bars[0] == "attack\teer_percent"
    assert [b.split("\t")[0] for b in bars[1:]] == ["A01", "A02", "A03", "A04", "A05", "A06"]
    for name in ("det.png", "per_attack.png"):
        assert (pipeline["eval"] / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_evaluate_perfect_scores(pipeline, tmp_path, capsys):
    recs = read_protocol(pipeline["data"] / "protocol.txt")
    write_scores(tmp_path / "s.txt", {r.utterance_id: (1.0 if r.is_bonafide else -1.0) for r in recs})
    assert run("evaluate", "--scores", tmp_path / "s.txt", "--protocol", pipeline["data"] / "protocol.txt",
               "--out", tmp_path / "e", "--no-plots") == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["eer_percent"] == 0.0
    assert "0.00" in capsys.readouterr().out
    assert not (tmp_path / "e" / "det.png").exists()


def test_evaluate_errors(pipeline, tmp_path, capsys):
    assert run("evaluate", "--scores", pipeline["scores"] / "scores.txt", "--protocol", tmp_path / "nope.txt",
               "--out", tmp_path / "e") == 1
    assert "nope.txt" in capsys.readouterr().err
    write_scores(tmp_path / "s.txt", {"stranger_9": 0.5})
    assert run("evaluate", "--scores", tmp_path / "s.txt", "--protocol", pipeline["data"] / "protocol.txt",
               "--out", tmp_path / "e2") == 1
    assert "stranger_9" in capsys.readouterr().err


def test_tdcf_override(pipeline, tmp_path):
    args = ["evaluate", "--scores", pipeline["scores"] / "scores.txt", "--protocol",
            pipeline["data"] / "protocol.txt", "--no-plots"]
    assert run(*args, "--out", tmp_path / "a", "--tdcf", "asv_p_miss=0.1") == 0
    assert run(*args, "--out", tmp_path / "b", "--tdcf", "bogus=1") == 1


def _write_systems(tmp_path):
    ids, is_bona, systems = three_system_case(seed=0)
    keys = [TrialRecord("S", u, "-" if b else "A01", "bonafide" if b else "spoof") for u, b in zip(ids, is_bona)]
    paths = []
    for i, s in enumerate(systems):
        paths.append(tmp_path / f"s{i}.txt")
        write_scores(paths[-1], s)
    return keys, systems, paths


def test_fuse_three_systems(tmp_path):
    keys, systems, paths = _write_systems(tmp_path)
    assert run("fuse", "--scores", *paths, "--weights", "1,1,1", "--out", tmp_path / "f") == 0
    fused = read_scores(tmp_path / "f" / "scores.txt")
    assert eer(fused, keys)[0] <= min(eer(s, keys)[0] for s in systems)
    m = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert m["weights"] == [1.0, 1.0, 1.0] and len(m["inputs"]) == 3


def test_fuse_self_keeps_eer(tmp_path):
    keys, systems, paths = _write_systems(tmp_path)
    assert run("fuse", "--scores", paths[0], paths[0], "--out", tmp_path / "f") == 0
    assert eer(read_scores(tmp_path / "f" / "scores.txt"), keys)[0] == eer(systems[0], keys)[0]


def test_fuse_usage_errors(tmp_path):
    _, _, paths = _write_systems(tmp_path)
    with pytest.raises(SystemExit) as exc:
        run("fuse", "--scores", paths[0], "--out", tmp_path / "f")
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("fuse", "--scores", *paths, "--weights", "1,2", "--out", tmp_path / "g")


def test_fuse_id_mismatch(tmp_path, capsys):
    write_scores(tmp_path / "a.txt", {"x": 1.0, "y": 2.0})
    write_scores(tmp_path / "b.txt", {"x": 1.0, "z": 2.0})
    assert run("fuse", "--scores", tmp_path / "a.txt", tmp_path / "b.txt", "--out", tmp_path / "f") == 1
    assert "E_IDS" in capsys.readouterr().err


def test_config_file(pipeline, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 1\nbatch-size=8\nohem=off\nno_plots=true\n")
    base = ["train", "--data", pipeline["data"], "--features", pipeline["feat"], "--config", cfg]
    _, args = parse_args([str(a) for a in base + ["--epochs", "2"]])
    assert (args.epochs, args.batch_size, args.ohem, args.no_plots) == (2, 8, False, True)
    assert run(*base, "--out", tmp_path / "t") == 0
    assert not (tmp_path / "t" / "training_loss.png").exists()


@pytest.mark.parametrize("text", ["epochs=1\nwibble=3\n", "epochs\n", "fraction=0\n"])
def test_bad_config_file(text, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("train", "--config", cfg, "--out", tmp_path / "t") == 1
    assert "E_CONFIG" in capsys.readouterr().err


@pytest.mark.parametrize("key", ["data", "feat", "train", "scores", "eval"])
def test_rerun_from_manifest(pipeline, key, tmp_path):
    manifest = json.loads((pipeline[key] / "manifest.json").read_text())
    assert run(*manifest_argv(manifest), "--out", tmp_path / "re") == 0
    primary = {"data": "protocol.txt", "feat": "features.bin", "train": "model.ckpt", "scores": "scores.txt",
               "eval": "report.json"}[key]
    assert (tmp_path / "re" / primary).read_bytes() == (pipeline[key] / primary).read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "spoofguard", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
