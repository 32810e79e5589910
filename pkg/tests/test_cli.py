import csv
import json

import numpy as np
import pytest

from melgraph import cli
from melgraph.audio_io import write_wav
from melgraph.gtransformer import GTransformer, load_checkpoint
from melgraph.training import load_dataset, predict

TINY = ["--preset", "scaled", "--set", "model.dim=8", "--set", "model.depth=1", "--set", "model.heads=2",
        "--set", "model.head_hidden=16", "--set", "train.epochs=2", "--set", "train.decay_epoch=1",
        "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--splits", "3,1,1", "--seed", "5", "--out", str(root / "data")]) == 0
    manifest = str(root / "data" / "manifest.csv")
    assert cli.main(["train", "--manifest", manifest, "--out", str(root / "run"), "--seed", "2"] + TINY) == 0
    return root, manifest, str(root / "run" / "best.gtck")


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["nonsense"]) == 1
    assert cli.main(["synth", "--bogus"]) == 1
    assert cli.main(["gradcheck", "--preset", "huge"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF\x00\x00")
    assert cli.main(["hinich", str(bad)]) == 2


def test_config_precedence_and_unknown_keys(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("train.lr0 = 0.01  # from the file\ntrain.epochs = 7\n")
    cfg = cli.resolve_config(str(cfg_file), {"train.epochs": 9})
    assert cfg["train.lr0"] == 0.01 and cfg["train.epochs"] == 9
    assert cfg["train.batch_size"] == 16
    cfg_file.write_text("train.lr = 0.01\n")
    with pytest.raises(cli.UsageError):
        cli.resolve_config(str(cfg_file))
    with pytest.raises(cli.UsageError):
        cli.resolve_config(None, {"model.width": 3})
    assert cli.parse_value("2,3,5") == [2, 3, 5]
    assert cli.parse_value("true") is True and cli.parse_value("1.5e-3") == 1.5e-3


def test_unknown_key_via_cli_exits_1(run, tmp_path):
    _, manifest, _ = run
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path), "--set", "train.foo=1"]) == 1


def test_model_config_from_preset():
    cfg = cli.default_run_config()
    assert cli.build_model_config(cfg, 5).dim == 96
    cfg["model.preset"] = "scaled"
    cfg["model.depth"] = 4
    m = cli.build_model_config(cfg, 4)
    assert (m.dim, m.depth, m.stem_channels, m.k_schedule) == (32, 4, [4, 8, 16, 32, 32], [2, 4, 6, 8])


def test_train_outputs(run):
    root, _, ckpt = run
    resolved = (root / "run" / "config.resolved").read_text()
    assert "model.dim = 8" in resolved and "train.epochs = 2" in resolved and "seed = 2" in resolved
    rows = list(csv.DictReader(open(root / "run" / "history.csv")))
    assert len(rows) == 2
    model, meta = load_checkpoint(ckpt)
    assert model.cfg.n_classes == 4 and meta["seed"] == 2 and "stats" in meta
    assert (root / "run" / "run.log").exists()


def test_eval_matches_library(run, tmp_path):
    root, manifest, ckpt = run
    out = tmp_path / "m.json"
    assert cli.main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    model, meta = load_checkpoint(ckpt)
    from melgraph.features import FeatureStats
    splits, _ = load_dataset(manifest, FeatureStats(meta["stats"]["mean"], meta["stats"]["std"]))
    expected = float(np.mean(predict(model, splits["test"].X) == splits["test"].y))
    assert report["oa"] == expected and report["n"] == 4 and report["seed"] == 2
    assert set(report) >= {"oa", "aa", "kappa", "f1", "per_class", "confusion", "config_hash"}


def test_predict_rows_and_reproducible(run, tmp_path):
    root, _, ckpt = run
    rng = np.random.default_rng(0)
    wav = tmp_path / "x.wav"
    write_wav(str(wav), 0.1 * rng.standard_normal(16000 * 11), 16000)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["predict", str(wav), "--checkpoint", ckpt, "--out", str(a)]) == 0
    assert cli.main(["predict", str(wav), "--checkpoint", ckpt, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(open(a)))
    assert len(rows) == 2
    for r in rows:
        p = [float(r[f"p{c}"]) for c in range(4)]
        assert abs(sum(p) - 1) < 1e-6 and int(r["class"]) == int(np.argmax(p))


def test_export(run, tmp_path):
    root, _, ckpt = run
    wav = tmp_path / "x.wav"
    write_wav(str(wav), 0.1 * np.random.default_rng(1).standard_normal(16000 * 5), 16000)
    assert cli.main(["export", str(wav), "--checkpoint", ckpt, "--kind", "attention", "--block", "1",
                     "--out", str(tmp_path / "att")]) == 0
    maps = [np.loadtxt(tmp_path / "att" / f"attention_block1_head{h}.csv", delimiter=",") for h in (1, 2)]
    assert all(m.shape == (256, 256) and np.allclose(m.sum(1), 1, atol=1e-6) for m in maps)
    assert cli.main(["export", str(wav), "--checkpoint", ckpt, "--kind", "graph", "--block", "1",
                     "--out", str(tmp_path / "g")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "g" / "graph_block1.csv")))
    assert len(rows) == 256 * 2
    assert cli.main(["export", str(wav), "--checkpoint", ckpt, "--kind", "graph", "--block", "1",
                     "--center", "300", "--out", str(tmp_path / "g")]) == 1
    assert cli.main(["export", str(wav), "--checkpoint", ckpt, "--block", "2", "--out", str(tmp_path)]) == 1


def test_synth_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["synth", "--n-per-class", "1", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    for name in ("manifest.csv", "A_0000.wav", "D_0000.wav", "config.resolved"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_hinich_window_count(tmp_path):
    wav = tmp_path / "n.wav"
    write_wav(str(wav), np.random.default_rng(0).standard_normal(16000 * 20) * 0.1, 16000)
    out = tmp_path / "h.csv"
    assert cli.main(["hinich", str(wav), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 40
    assert all(0.0 <= float(r["pfa"]) <= 1.0 for r in rows)


def test_featurize(run, tmp_path):
    _, manifest, _ = run
    assert cli.main(["featurize", "--manifest", manifest, "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "stats.json").exists()


def test_gradcheck_tiny_passes(tmp_path):
    assert cli.main(["gradcheck", "--preset", "tiny", "--max-coords", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_error"] < 1e-4
