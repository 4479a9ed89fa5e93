import numpy as np
import pytest

from transconv.errors import ConfigError, DataError
from transconv.utility import (LabeledSet, UtilityConfig, UtilityReport, classification_metrics, mix_counts,
                               percent_delta, render_utility_table, roc_auc, split_subjects, train_classifier,
                               window_sequences)

FAST = UtilityConfig(hidden=8, dense=8, max_epochs=30, patience=30, batch_size=32)


def _sets(seed, shuffle=False, n=160, L=12, C=2):
    rng = np.random.default_rng(seed)
    y = np.tile([0.0, 1.0], n // 2)
    x = rng.standard_normal((n, L, C)).astype(np.float32)
    x[y == 1] += 1.5
    if shuffle:
        y = rng.permutation(y)
    return LabeledSet(x[:n // 2], y[:n // 2]), LabeledSet(x[n // 2:], y[n // 2:])


def test_separable_data_is_learned():
    tr, va = _sets(0)
    _, hist = train_classifier(tr, va, seed=0, cfg=FAST)
    assert max(h["val_accuracy"] for h in hist) > 0.95


@pytest.mark.parametrize("seed", range(5))
def test_shuffled_labels_stay_near_chance(seed):
    tr, va = _sets(seed, shuffle=True)
    model, _ = train_classifier(tr, va, seed=seed, cfg=FAST)
    acc = np.mean((model.predict_proba(va.x) >= 0.5) == va.y)
    assert 0.4 <= acc <= 0.6


def test_training_history_is_seeded():
    tr, va = _sets(3)
    cfg = UtilityConfig(hidden=8, dense=8, max_epochs=4, patience=4)
    assert train_classifier(tr, va, 11, cfg)[1] == train_classifier(tr, va, 11, cfg)[1]


def test_single_class_training_set_rejected():
    tr, va = _sets(0)
    with pytest.raises(DataError):
        train_classifier(LabeledSet(tr.x, np.zeros(len(tr))), va, 0, FAST)


def test_perfect_predictor_scores_one():
    y = np.array([0, 1, 0, 1, 1, 0])
    m = classification_metrics(y, y.astype(float))
    for k in ("precision", "recall", "f1", "accuracy", "roc_auc"):
        assert m[k] == 1.0


def test_constant_predictor():
    y = np.array([0, 1] * 10)
    m = classification_metrics(y, np.full(20, 0.5))
    assert m["roc_auc"] == 0.5
    assert m["accuracy"] == 0.5


def test_fall_class_hand_confusion():
    # TP=3 FP=1 FN=2 TN=4
    y = np.array([1, 1, 1, 0, 1, 1, 0, 0, 0, 0])
    p = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=float)
    fall = classification_metrics(y, p)["per_class"]["fall"]
    assert fall[0] == 0.75 and fall[1] == 0.6
    assert fall[2] == pytest.approx(2 / 3, abs=1e-12)


def test_roc_auc_handles_ties_and_single_class():
    assert roc_auc([0, 1], [0.3, 0.3]) == 0.5
    assert np.isnan(roc_auc([1, 1], [0.1, 0.9]))
    assert classification_metrics([1, 1], [0.9, 0.1])["defined"] is False


def test_mix_counts():
    assert mix_counts((100, 40, 0), (0.6, 0.4, 0.0)) == (60, 40, 0)
    assert mix_counts((100, 40, 500), (0.6, 0.2, 0.2)) == (100, 33, 33)
    n = mix_counts((300, 300, 300), (0.6, 0.2, 0.2))
    assert n == (300, 100, 100)


def test_report_means_and_delta_rendering():
    per = {"baseline": {m: [0.6, 0.72] for m in ("precision", "recall", "f1", "accuracy", "roc_auc")},
           "aug": {m: [0.7, 0.8] for m in ("precision", "recall", "f1", "accuracy", "roc_auc")}}
    arms = {k: {m: float(np.mean(v)) for m, v in d.items()} for k, d in per.items()}
    assert arms["baseline"]["f1"] == pytest.approx((0.6 + 0.72) / 2, abs=1e-9)
    deltas = {"aug": {m: percent_delta(arms["baseline"][m], arms["aug"][m]) for m in arms["aug"]}}
    text = render_utility_table(UtilityReport(arms, per, deltas))
    assert "0.6600" in text and "0.7500 (+13.64%)" in text


def test_split_needs_enough_subjects():
    with pytest.raises(DataError, match="at least 5"):
        split_subjects(["a", "b", "c", "d"], 2, 2, np.random.default_rng(0))


def test_window_sequences_and_config_validation():
    seqs = np.arange(2 * 3 * 20, dtype=float).reshape(2, 3, 20)
    w = window_sequences(seqs, 8, 4)
    assert w.shape == (2 * 4, 3, 8)
    with pytest.raises(DataError):
        window_sequences(seqs, 30, 4)
    with pytest.raises(ConfigError):
        UtilityConfig(mix=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        UtilityConfig(baseline_mix=(0.6, 0.2, 0.2))
