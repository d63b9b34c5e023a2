import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multiscale_wsi.classifier import (N_FEATURES, BaselineModel, ClassifierError,
                                       ExternalScorerError, TrainConfig, featurize, fit_features,
                                       predict, score_external, train_baseline,
                                       weighted_logistic_grad, weighted_logistic_loss)
from multiscale_wsi.raster import Raster, save_raster
from multiscale_wsi.stats import auc_roc as auc
from oracles import crop_features


def test_constant_crop():
    f = featurize(Raster.constant(40, 40, 77))
    assert f.shape == (N_FEATURES,)
    assert f[:3].tolist() == [77, 77, 77]
    assert f[3:6].tolist() == [0, 0, 0]
    assert f[6] == 1 and f[7:14].sum() == 0
    assert f[14] == 0 and f[15] == 0


def test_step_edge_matches_oracle():
    data = np.zeros((4, 4, 3), np.uint8)
    data[:, 2:] = 255
    got = featurize(Raster(data))
    assert np.allclose(got, crop_features(data.tolist()), rtol=1e-12, atol=1e-9)
    # the two columns at the edge see |dx| = 127.5, the outer ones 0
    assert got[6] == 0.5 and got[8] == 0.5


@given(st.tuples(st.integers(1, 11), st.integers(1, 11)).flatmap(
    lambda hw: arrays(np.uint8, (hw[0], hw[1], 3))))
def test_features_match_oracle(data):
    assert np.allclose(featurize(Raster(data)), crop_features(data.tolist()), rtol=1e-9, atol=1e-9)


def test_oracle_on_window_sized_crop():
    data = np.random.default_rng(4).integers(0, 256, (34, 33, 3), dtype=np.uint8)
    assert np.allclose(featurize(Raster(data)), crop_features(data.tolist()), rtol=1e-9)


@given(arrays(np.uint8, st.tuples(st.integers(1, 40), st.integers(1, 40), st.just(3))))
def test_flip_invariance(data):
    f = featurize(Raster(data))
    assert np.array_equal(f, featurize(Raster(np.ascontiguousarray(data[:, ::-1]))))
    assert np.array_equal(f, featurize(Raster(np.ascontiguousarray(data[::-1]))))


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        base = 60 if label else 190
        data = np.clip(rng.normal(base, 10, (12, 12, 3)), 0, 255).astype(np.uint8)
        out.append((Raster(data), "DN" if label else "CMB"))
    return out


def test_separable_toy_set():
    train = _toy(40, 1)
    model = train_baseline(train, TrainConfig(epochs=20, batch_size=8, learning_rate=0.1))
    test = _toy(30, 2)
    scores = [predict(model, r) for r, _ in test]
    assert auc([int(lab == "DN") for _, lab in test], scores) == 1.0


def test_separable_by_channel_mean_training_auc():
    crops = [(Raster.constant(10, 10, 50 if i % 2 else 200), "DN" if i % 2 else "CMB")
             for i in range(20)]
    model = train_baseline(crops, TrainConfig(epochs=50))
    scores = [predict(model, r) for r, _ in crops]
    assert auc([lab == "DN" for _, lab in crops], scores) == 1.0


def test_score_monotone_in_top_feature():
    m = train_baseline(_toy(20, 6), TrainConfig(epochs=5))
    k = int(np.argmax(m.weights))
    x = m.feature_mean.copy()
    scores = []
    for step in np.linspace(-3, 3, 7):
        x2 = x.copy()
        x2[k] += step * m.feature_std[k]
        scores.append(float(m.predict_features(x2)[0]))
    assert all(b > a for a, b in zip(scores, scores[1:]))
    assert all(0 < v < 1 for v in scores)


def test_training_deterministic():
    cfg = TrainConfig(epochs=3, seed=9)
    a, b = train_baseline(_toy(16, 3), cfg), train_baseline(_toy(16, 3), cfg)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias


def test_epochs_must_be_positive():
    with pytest.raises(ClassifierError):
        TrainConfig(epochs=0)


def test_needs_both_classes():
    only = [(r, "CMB") for r, _ in _toy(6, 0)]
    with pytest.raises(ClassifierError):
        train_baseline(only, TrainConfig(epochs=1))


def test_class_weighted_gradient_balances():
    # 3 negatives and 1 positive, all at the same point: weighted gradients cancel at b = 0
    x = np.zeros((4, 2))
    y = np.array([0.0, 0.0, 0.0, 1.0])
    sw = np.array([4 / 6, 4 / 6, 4 / 6, 2.0])
    gw, gb = weighted_logistic_grad(np.zeros(2), 0.0, x, y, sw)
    assert gb == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(gw, 0)


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(20, 5)), rng.normal(size=5)
    y = (rng.random(20) < 0.4).astype(float)
    sw = rng.uniform(0.5, 2, 20)
    gw, gb = weighted_logistic_grad(w, 0.3, x, y, sw)
    h = 1e-6
    for k in range(5):
        e = np.zeros(5)
        e[k] = h
        num = (weighted_logistic_loss(w + e, 0.3, x, y, sw)
               - weighted_logistic_loss(w - e, 0.3, x, y, sw)) / (2 * h)
        assert gw[k] == pytest.approx(num, rel=1e-6, abs=1e-9)
    num_b = (weighted_logistic_loss(w, 0.3 + h, x, y, sw)
             - weighted_logistic_loss(w, 0.3 - h, x, y, sw)) / (2 * h)
    assert gb == pytest.approx(num_b, rel=1e-6, abs=1e-9)


def test_full_batch_loss_non_increasing():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, N_FEATURES))
    y = (x[:, 0] + rng.normal(0, 0.5, 30) > 0).astype(int)
    losses = []
    for epochs in range(1, 15):
        m = fit_features([(x, y)] * epochs, TrainConfig(epochs=epochs, batch_size=30,
                                                         learning_rate=1e-3))
        xs = m.standardize(x)
        losses.append(weighted_logistic_loss(m.weights, m.bias, xs, y.astype(float),
                                             np.where(y == 1, 30 / (2 * y.sum()),
                                                      30 / (2 * (30 - y.sum())))))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_zero_variance_inputs_score_half():
    x = np.ones((10, N_FEATURES))
    y = [0, 1] * 5
    m = fit_features([(x, y)], TrainConfig(epochs=1))
    assert m.predict_features(x) == pytest.approx(0.5)


def test_zero_model_scores_half():
    m = BaselineModel(np.zeros(N_FEATURES), 0.0, np.zeros(N_FEATURES), np.ones(N_FEATURES))
    assert predict(m, Raster.constant(8, 8, 3)) == 0.5


def test_model_json_round_trip(tmp_path):
    m = train_baseline(_toy(10, 5), TrainConfig(epochs=2))
    m.save(tmp_path / "m.json")
    back = BaselineModel.load(tmp_path / "m.json")
    assert np.array_equal(back.weights, m.weights) and back.bias == m.bias
    assert np.array_equal(back.feature_std, m.feature_std) and back.meta == m.meta
    d = json.loads((tmp_path / "m.json").read_text())
    d["format_version"] = 99
    with pytest.raises(ClassifierError, match="format_version"):
        BaselineModel.from_dict(d)


# --- external scorers -----------------------------------------------------------------------


def _script(tmp_path, body):
    p = tmp_path / "scorer.py"
    p.write_text("import sys\npaths = [l.strip() for l in sys.stdin if l.strip()]\n" + body)
    return [sys.executable, str(p)]


@pytest.fixture
def crop_files(tmp_path):
    out = []
    for i in range(3):
        p = tmp_path / f"c{i}.png"
        save_raster(Raster.constant(4, 4, i), p)
        out.append(p)
    return out


def test_echo_stub(tmp_path, crop_files):
    assert score_external(crop_files, _script(tmp_path, "for p in paths: print(0.5)\n")) == [0.5] * 3


def test_external_scores_in_order(tmp_path, crop_files):
    cmd = _script(tmp_path, "for p in paths: print(int(p[-5]) / 4)\n")
    assert score_external(crop_files, cmd) == [0.0, 0.25, 0.5]


def test_external_receives_absolute_paths(tmp_path, crop_files):
    cmd = _script(tmp_path, "import os\nfor p in paths: print(1 if os.path.isabs(p) else 0)\n")
    assert score_external(crop_files, cmd) == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("body,match", [
    ("print(0.5)\n", "count mismatch"),
    ("for p in paths: print('nan?')\n", "malformed"),
    ("for p in paths: print(1.5)\n", "out of range"),
    ("sys.stderr.write('boom'); sys.exit(3)\n", "status 3"),
])
def test_external_failures(tmp_path, crop_files, body, match):
    with pytest.raises(ExternalScorerError, match=match):
        score_external(crop_files, _script(tmp_path, body))


def test_external_timeout(tmp_path, crop_files):
    cmd = _script(tmp_path, "import time; time.sleep(5)\n")
    with pytest.raises(ExternalScorerError):
        score_external(crop_files, cmd, timeout=0.5)


def test_missing_scorer_binary(crop_files):
    with pytest.raises(ExternalScorerError):
        score_external(crop_files, [str(Path("/nonexistent/scorer"))])
