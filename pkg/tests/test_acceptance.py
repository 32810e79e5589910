"""End-to-end acceptance checks, one test per criterion.

Each outcome is reported as a PASS/FAIL line in the terminal summary
(see conftest.py).  Criteria 6, 7 and 10 train models and take most of
the runtime; they share one synthetic dataset built on first use.
"""

import csv
import time

import numpy as np
import pytest

from melgraph import autodiff as ad
from melgraph import cli
from melgraph import evaluation as ev
from melgraph.audio_io import write_wav
from melgraph.features import mel_spectrogram
from melgraph.gradcheck import run_gradcheck
from melgraph.gtransformer import (GTransformer, ModelConfig, default_k_schedule, graph_edges, knn_graph,
                                   load_checkpoint, write_attention_csv, write_graph_csv)
from melgraph.hinich import hinich_test
from melgraph.synthgen import DEFAULT_PRESET, gen_dataset, gen_sample
from melgraph.training import TrainConfig, fit, load_dataset, predict

from hinich_signals import qpc

DATA_SEED = 0
SPLITS = (50, 10, 10)
ABLATION_EPOCHS = 15
ABLATION_SEEDS = (0, 1, 2)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def scaled_config(**kw):
    return ModelConfig.scaled(dim=32, depth=4, heads=4, k_schedule=[2, 3, 5, 8], n_classes=4, **kw)


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    manifest = gen_dataset(DEFAULT_PRESET, sum(SPLITS), DATA_SEED, str(out), splits=SPLITS)
    splits, stats = load_dataset(manifest)
    return splits, stats, manifest


def data(splits, name):
    return splits[name].X, splits[name].y


# ------------------------------------------------------------------ 1

@criterion(1, "shape contract")
def test_shape_contract(record_property):
    x = gen_sample(DEFAULT_PRESET[0], seconds=5.0, seed=1).samples
    model = GTransformer(ModelConfig(n_classes=5), seed=0)
    start = time.perf_counter()
    spec = mel_spectrogram(x)
    cap = {}
    with ad.no_grad():
        logits = model.forward(spec, capture=cap)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{elapsed:.2f} s")
    assert spec.shape == (512, 128)
    assert cap["stem5"][1:] == (96, 32, 8)
    assert cap["nodes"][1:] == (256, 96)
    assert cap["head.hidden"][1:] == (512, 1, 1)
    assert logits.shape == (1, 5)
    assert elapsed < 1.0


# ------------------------------------------------------------------ 2

@criterion(2, "parameter count within 5% of 2.05 M")
def test_parameter_count(record_property):
    n = ev.param_count(GTransformer(ModelConfig()))
    dev = (n - 2.05e6) / 2.05e6
    record_property("detail", f"{n} parameters, {dev:+.1%}")
    assert abs(dev) <= 0.05


# ------------------------------------------------------------------ 3

@criterion(3, "finite-difference gradient verification")
def test_gradient_verification(record_property):
    start = time.perf_counter()
    report = run_gradcheck(dim=32, depth=2, heads=4, seed=0, max_coords=3)
    elapsed = time.perf_counter() - start
    worst_prim = max(report["primitives"], key=report["primitives"].get)
    worst_param = max(report["model"], key=report["model"].get)
    record_property("detail", f"max rel err {report['max_rel_error']:.2e}, worst primitive {worst_prim}, "
                              f"worst parameter {worst_param}, {elapsed:.0f} s")
    assert report["max_rel_error"] < 1e-4
    assert elapsed < 300


# ------------------------------------------------------------------ 4

def brute_knn(x, k):
    n = len(x)
    out = np.empty((n, k), dtype=int)
    for i in range(n):
        d = np.sum((x - x[i]) ** 2, axis=1)
        d[i] = np.inf
        out[i] = np.lexsort((np.arange(n), d))[:k]
    return out


@criterion(4, "KNN equals brute force")
def test_knn_oracle(record_property):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    ties = 0
    for trial in range(100):
        k = (1, 2, 4, 8)[trial % 4]
        if trial % 3 == 2:
            x = rng.integers(0, 2, (256, 4)).astype(np.float64)  # coarse grid, massive ties
        else:
            x = rng.standard_normal((256, int(rng.integers(2, 33))))
        if trial % 2:
            src = rng.integers(0, 256, 40)
            dst = rng.integers(0, 256, 40)
            x[dst] = x[src]  # duplicated rows
        ties += len(x) - len(np.unique(x, axis=0))
        g = knn_graph(x, k)
        assert np.array_equal(g.neighbor_idx, brute_knn(x, k)), f"trial {trial}"
    elapsed = time.perf_counter() - start
    record_property("detail", f"100 sets, {ties} duplicated rows, {elapsed:.1f} s")
    assert elapsed < 60


# ------------------------------------------------------------------ 5

@criterion(5, "K schedule")
def test_k_schedule(record_property):
    ks = default_k_schedule(8)
    record_property("detail", str(ks))
    assert ks == [2, 2, 3, 4, 5, 6, 7, 8]
    assert ks[3] == 4 and ks[7] == 8
    assert ModelConfig().k_schedule == ks


# ------------------------------------------------------------------ 8

@criterion(8, "Hinich level, power and window count")
def test_hinich_level_power(record_property, tmp_path):
    start = time.perf_counter()
    level = np.mean([hinich_test(np.random.default_rng(s).standard_normal(8000)).pfa >= 0.05
                     for s in range(100)])
    power = np.mean([hinich_test(qpc(s)).pfa < 0.01 for s in range(100)])
    wav = tmp_path / "ship.wav"
    write_wav(str(wav), gen_sample(DEFAULT_PRESET[2], seconds=20.0, seed=8).samples, 16000)
    out = tmp_path / "hinich.csv"
    assert cli.main(["hinich", str(wav), "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    elapsed = time.perf_counter() - start
    record_property("detail", f"Gaussian accept {level:.2f}, QPC reject {power:.2f}, "
                              f"{len(rows)} rows, {elapsed:.0f} s")
    assert level >= 0.90
    assert power >= 0.95
    assert len(rows) == 40
    assert elapsed < 120


# ------------------------------------------------------------------ 9

@criterion(9, "metric oracles and label-permutation invariance")
def test_metric_oracles(record_property):
    cm = np.array([[8, 2], [3, 7]])
    assert abs(ev.oa(cm) - 0.75) <= 1e-12
    assert abs(ev.aa(cm) - 0.75) <= 1e-12
    assert abs(ev.kappa(cm) - 0.5) <= 1e-12
    assert abs(ev.f1(cm) - (16 / 21 + 14 / 19) / 2) <= 1e-12
    cm3 = np.array([[5, 1, 0], [2, 3, 1], [0, 0, 4]])
    # oa 12/16; recalls 5/6, 1/2, 1; pe = (6*7 + 6*4 + 4*5) / 256
    pe = (6 * 7 + 6 * 4 + 4 * 5) / 256
    assert abs(ev.oa(cm3) - 0.75) <= 1e-12
    assert abs(ev.aa(cm3) - (5 / 6 + 0.5 + 1) / 3) <= 1e-12
    assert abs(ev.kappa(cm3) - (0.75 - pe) / (1 - pe)) <= 1e-12
    assert abs(ev.f1(cm3) - (10 / 13 + 6 / 10 + 8 / 9) / 3) <= 1e-12

    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        m = rng.integers(0, 20, (c, c))
        m[np.arange(c), np.arange(c)] += 1  # every class present, AA without exclusions
        p = rng.permutation(c)
        mp = m[np.ix_(p, p)]
        for f in (ev.oa, ev.aa, ev.kappa, ev.f1):
            worst = max(worst, abs(f(m) - f(mp)))
    record_property("detail", f"max permutation drift {worst:.1e}")
    assert worst <= 1e-12


# ------------------------------------------------------------------ 11

@criterion(11, "interpretability exports")
def test_interpretability_exports(record_property, tmp_path):
    model = GTransformer(ModelConfig(n_classes=5), seed=11)
    spec = mel_spectrogram(gen_sample(DEFAULT_PRESET[3], seed=11).samples)
    worst = 0.0
    for block in (1, 8):
        paths = write_attention_csv(model.attention_maps(spec, block), str(tmp_path), block)
        assert len(paths) == 8
        for p in paths:
            a = np.loadtxt(p, delimiter=",")
            assert a.shape == (256, 256)
            worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1.0))))
    counts = []
    for block in range(1, 9):
        path = tmp_path / f"graph_block{block}.csv"
        write_graph_csv(graph_edges(model, spec, block), str(path))
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        per_center = {}
        for r in rows:
            key = (r["center_t"], r["center_f"])
            per_center[key] = per_center.get(key, 0) + 1
        assert len(per_center) == 256
        assert set(per_center.values()) == {model.cfg.k_schedule[block - 1]}
        counts.append(len(rows) // 256)
    record_property("detail", f"max row-sum error {worst:.1e}, edges per node {counts}")
    assert worst <= 1e-5
    assert counts == [2, 2, 3, 4, 5, 6, 7, 8]


# ------------------------------------------------------------------ 6

@pytest.mark.slow
@criterion(6, "synthetic end-to-end training")
def test_synthetic_end_to_end(record_property, synthetic):
    splits, _, _ = synthetic
    cfg = TrainConfig(lr0=1.5e-3, decay_epoch=45, epochs=60, batch_size=16, seed=0)
    model = GTransformer(scaled_config(), seed=0)
    start = time.perf_counter()
    result = fit(model, data(splits, "train"), data(splits, "val"), cfg)
    elapsed = time.perf_counter() - start
    X, y = data(splits, "test")
    report = ev.MetricsReport.from_predictions(y, predict(model, X), 4)
    train_oa = max(h["train_oa"] for h in result.history)
    record_property("detail", f"train OA {train_oa:.3f}, test OA {report.oa:.3f}, kappa {report.kappa:.3f}, "
                              f"best epoch {result.best_epoch}, {elapsed / 60:.1f} min")
    assert train_oa >= 0.95
    assert report.oa >= 0.80
    assert report.kappa > 0.7
    assert elapsed <= 30 * 60


# ------------------------------------------------------------------ 7

@pytest.mark.slow
@criterion(7, "ablation direction")
def test_ablation_direction(record_property, synthetic):
    splits, _, _ = synthetic
    variants = {"full": {}, "no_encoder": {"use_encoder": False},
                "no_gnn": {"use_gnn": False}, "no_ffn": {"use_ffn": False}}
    X, y = data(splits, "test")
    start = time.perf_counter()
    means = {}
    for name, flags in variants.items():
        oas = []
        for seed in ABLATION_SEEDS:
            cfg = TrainConfig(lr0=1.5e-3, decay_epoch=10, epochs=ABLATION_EPOCHS, batch_size=16, seed=seed)
            model = GTransformer(scaled_config(**flags), seed=seed)
            fit(model, data(splits, "train"), data(splits, "val"), cfg)
            oas.append(float(np.mean(predict(model, X) == y)))
        means[name] = float(np.mean(oas))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.3f}" for k, v in means.items())
                    + f", {ABLATION_EPOCHS} epochs x {len(ABLATION_SEEDS)} seeds, {elapsed / 60:.0f} min")
    for name in ("no_encoder", "no_gnn", "no_ffn"):
        assert means["full"] >= means[name] - 0.02, name
    assert elapsed <= 2 * 3600


# ------------------------------------------------------------------ 10

@pytest.mark.slow
@criterion(10, "determinism and checkpoint persistence")
def test_determinism_and_persistence(record_property, synthetic, tmp_path):
    splits, _, _ = synthetic
    cfg = TrainConfig(lr0=1.5e-3, decay_epoch=1, epochs=2, batch_size=16, seed=10)
    start = time.perf_counter()
    runs = []
    for d in ("a", "b"):
        model = GTransformer(scaled_config(), seed=10)
        runs.append((model, fit(model, data(splits, "train"), data(splits, "val"), cfg, out_dir=str(tmp_path / d))))
    drift = max(abs(ha[k] - hb[k]) for ha, hb in zip(runs[0][1].history, runs[1][1].history)
                for k in ("lr", "train_loss", "train_oa", "val_oa"))
    X, y = data(splits, "test")
    model, result = runs[0]
    oa_mem = float(np.mean(predict(model, X) == y))
    loaded, _ = load_checkpoint(result.checkpoint)
    oa_disk = float(np.mean(predict(loaded, X) == y))
    elapsed = time.perf_counter() - start
    record_property("detail", f"history drift {drift:.1e}, test OA {oa_mem!r} vs reloaded {oa_disk!r}, "
                              f"{elapsed / 60:.1f} min")
    assert len(runs[0][1].history) == len(runs[1][1].history) == 2
    assert drift <= 1e-6
    assert oa_mem == oa_disk
    assert np.array_equal(predict(model, X), predict(loaded, X))
    assert elapsed <= 10 * 60
