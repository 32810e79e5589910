import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from melgraph import evaluation as ev
from melgraph.gtransformer import GTransformer, ModelConfig, read_checkpoint, save_checkpoint

CM = np.array([[8, 2], [3, 7]])


def test_confusion_basic():
    assert ev.confusion([0, 1], [1, 0], 2).tolist() == [[0, 1], [1, 0]]
    y = [0, 2, 1, 2, 0]
    cm = ev.confusion(y, y, 3)
    assert np.array_equal(cm, np.diag(np.diag(cm)))
    assert cm.sum() == len(y)


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        ev.confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        ev.confusion([0, 1], [-1, 1], 3)


def test_hand_computed_matrix():
    assert ev.oa(CM) == pytest.approx(0.75, abs=1e-12)
    assert ev.aa(CM) == pytest.approx(0.75, abs=1e-12)
    assert ev.kappa(CM) == pytest.approx(0.5, abs=1e-12)
    assert ev.f1(CM) == pytest.approx((16 / 21 + 14 / 19) / 2, abs=1e-12)
    assert ev.f1(CM) == pytest.approx(0.7493734335839599, abs=1e-12)


def test_diagonal_and_zero_diagonal():
    d = np.diag([3, 4, 5])
    assert ev.oa(d) == ev.aa(d) == ev.kappa(d) == ev.f1(d) == 1.0
    assert ev.oa(np.array([[0, 4], [6, 0]])) == 0.0


def test_aa_empty_row_is_excluded_with_warning():
    cm = np.array([[5, 0], [0, 0]])
    with pytest.warns(ev.MetricWarning):
        assert ev.aa(cm) == 1.0
    assert ev.aa_with_flag(cm) == (1.0, True)


def test_kappa_single_predicted_column_is_zero():
    assert ev.kappa(np.array([[5, 0], [5, 0]])) == pytest.approx(0.0, abs=1e-15)


def test_kappa_single_class_degenerate():
    with pytest.warns(ev.MetricWarning):
        assert ev.kappa(np.array([[7, 0], [0, 0]])) == 0.0


def test_f1_single_class_value():
    # class 0 has TP=1, FP=1, FN=1
    cm = np.array([[1, 1], [1, 0]])
    assert ev.per_class_f1(cm)[0] == pytest.approx(0.5)


def test_aa_literal_is_one_vs_rest_mean():
    # class 0: TP 8 TN 7 -> 15/20; class 1 is symmetric
    assert ev.aa_literal(CM) == pytest.approx(0.75)


def test_paired_t_test_oracles():
    r = ev.paired_t_test([1, 1, 1, 1, 1], [1, 1, 1, 1, 1])
    assert r.degenerate and np.isnan(r.p)
    jitter = np.array([0.0, 1e-9, -1e-9, 2e-9, -2e-9])
    r = ev.paired_t_test(np.ones(5) + jitter, np.zeros(5))
    assert r.p < 1e-6 and r.dof == 4
    # mean 0.2, sd sqrt(1.2) = 1.0954 belong to [1, -1, 1, -1, 1]
    r = ev.paired_t_test([1, -1, 1, -1, 1], [0, 0, 0, 0, 0])
    assert r.t == pytest.approx(0.2 / (np.sqrt(1.2) / np.sqrt(5)), rel=1e-12)
    assert r.p == pytest.approx(0.7040, abs=5e-4)
    # the vector with a trailing 0 has mean 0 exactly
    r = ev.paired_t_test([1, -1, 1, -1, 0], [0, 0, 0, 0, 0])
    assert r.t == 0.0 and r.p == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1, 1)), arrays(np.float64, 5, elements=st.floats(-1, 1)))
def test_paired_t_antisymmetric(a, b):
    ab, ba = ev.paired_t_test(a, b), ev.paired_t_test(b, a)
    if ab.degenerate:
        assert ba.degenerate
    else:
        assert ab.t == -ba.t
        assert ab.p == ba.p


def test_paired_t_validation():
    with pytest.raises(ValueError):
        ev.paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        ev.paired_t_test([1.0, 2.0], [2.0])


cms = arrays(np.int64, st.tuples(st.integers(2, 6)).map(lambda t: (t[0], t[0])),
             elements=st.integers(0, 50)).filter(lambda m: m.sum() > 0)


@settings(max_examples=200, deadline=None)
@given(cms)
def test_metric_bounds(cm):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ev.MetricWarning)
        assert 0.0 <= ev.oa(cm) <= 1.0
        assert 0.0 <= ev.aa(cm) <= 1.0
        assert 0.0 <= ev.f1(cm) <= 1.0
        assert -1.0 <= ev.kappa(cm) <= 1.0


@settings(max_examples=200, deadline=None)
@given(cms, st.randoms(use_true_random=False))
def test_metrics_invariant_under_label_permutation(cm, rnd):
    perm = list(range(cm.shape[0]))
    rnd.shuffle(perm)
    permuted = cm[np.ix_(perm, perm)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ev.MetricWarning)
        for fn in (ev.oa, ev.aa, ev.kappa, ev.f1):
            assert fn(permuted) == pytest.approx(fn(cm), abs=1e-12)


def test_report_json_keys(tmp_path):
    rep = ev.MetricsReport.from_predictions([0, 1, 1, 0], [0, 1, 0, 0], 2)
    path = tmp_path / "m.json"
    rep.write(path, config={"a": 1}, seed=7)
    import json
    d = json.loads(path.read_text())
    for key in ("oa", "aa", "kappa", "f1", "per_class", "n", "config_hash", "seed"):
        assert key in d
    assert d["n"] == 4 and d["seed"] == 7 and d["oa"] == 0.75


def test_param_count_linear():
    from melgraph.autodiff import Tensor
    params = {"w": Tensor(np.zeros((96, 384))), "b": Tensor(np.zeros(384))}
    assert ev.param_count(params) == 37248


def test_param_count_matches_checkpoint_walk(tmp_path):
    m = GTransformer(ModelConfig.scaled(dim=16, depth=1, heads=2, n_classes=4))
    save_checkpoint(tmp_path / "m.gtck", m)
    _, _, records = read_checkpoint(tmp_path / "m.gtck")
    assert ev.param_count(m) == sum(a.size for kind, _, a in records if kind == 0)


def test_param_count_default_model():
    n = ev.param_count(GTransformer(ModelConfig(n_classes=5)))
    assert abs(n / 2.05e6 - 1) <= 0.05
