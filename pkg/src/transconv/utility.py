"""Downstream fall-detection experiment: does adding synthetic falls help a classifier?

Both arms share each iteration's subject split. The baseline trains on real
ADL and real fall windows; the augmented arm swaps part of the real falls for
synthetic ones. Windows of validation and test subjects are always real.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .dataio import Dataset, Recipe, build_dataset, toy_windows, window_starts
from .errors import ConfigError, DataError, TransConvError
from .ndgrad import LSTM, Adam, BatchNorm1d, Linear, Module, Tensor, new_rng, no_grad, precision
from .ndgrad import functional as F

log = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1", "accuracy", "roc_auc")
METRIC_TITLES = ("Precision", "Recall", "F1-Score", "Accuracy", "ROC-AUC")


@dataclass
class UtilityConfig:
    window_length: int = 128
    window_step: int = 10
    mix: tuple = (0.6, 0.2, 0.2)
    baseline_mix: tuple = (0.6, 0.4, 0.0)
    iterations: int = 5
    threshold: float = 0.5
    val_subjects: int = 2
    test_subjects: int = 2
    batch_size: int = 64
    max_epochs: int = 250
    patience: int = 20
    learning_rate: float = 1e-3
    hidden: int = 128
    dense: int = 128
    seed: int = 0

    def __post_init__(self):
        self.mix = tuple(float(v) for v in self.mix)
        self.baseline_mix = tuple(float(v) for v in self.baseline_mix)
        for name, mix in (("mix", self.mix), ("baseline_mix", self.baseline_mix)):
            if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be three non-negative fractions summing to 1, got {mix}")
        if self.baseline_mix[2] != 0:
            raise ConfigError("the baseline arm cannot contain synthetic samples")
        if self.iterations < 1 or self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("iterations, max_epochs, patience and batch_size must be positive")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"], d["baseline_mix"] = list(self.mix), list(self.baseline_mix)
        return d


class FallClassifier(Module):
    """LSTM -> dense + ReLU + batch norm -> one logit (sigmoid gives the fall probability)."""

    def __init__(self, channels: int, hidden: int, dense: int, rng):
        super().__init__()
        self.lstm = LSTM(channels, hidden, rng)
        self.dense = Linear(hidden, dense, rng)
        self.bn = BatchNorm1d(dense)
        self.out = Linear(dense, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.lstm(x)[:, -1, :]
        h = self.bn(F.relu(self.dense(h)))
        return F.reshape(self.out(h), (x.shape[0],))

    def predict_proba(self, windows: np.ndarray, batch: int = 512) -> np.ndarray:
        self.eval()
        with no_grad():
            logits = [self(Tensor(windows[i:i + batch])).data for i in range(0, len(windows), batch)]
        return F._sigmoid(np.concatenate(logits).astype(np.float64))


@dataclass
class LabeledSet:
    x: np.ndarray  # [N, L, C] classifier layout
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def _check_two_classes(s: LabeledSet, name: str) -> None:
    if len(np.unique(s.y)) < 2:
        raise DataError(f"{name} set has a single class; both ADL and fall windows are required")


def _bce(model, s: LabeledSet) -> float:
    logits = []
    with no_grad():
        for i in range(0, len(s), 512):
            logits.append(model(Tensor(s.x[i:i + 512])).data)
    z = np.concatenate(logits).astype(np.float64)
    return float(np.mean(np.maximum(z, 0) - z * s.y + np.log1p(np.exp(-np.abs(z)))))


def train_classifier(train_set: LabeledSet, val_set: LabeledSet, seed: int, cfg: UtilityConfig = UtilityConfig()):
    """Adam + binary cross-entropy with early stopping on validation loss.

    Returns ``(model, history)``; the model carries the weights of the best
    validation epoch.
    """
    _check_two_classes(train_set, "training")
    _check_two_classes(val_set, "validation")
    rng = new_rng(seed)
    history = []
    with precision(32):
        model = FallClassifier(train_set.x.shape[2], cfg.hidden, cfg.dense, rng)
        opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
        best, best_state, waited = np.inf, model.state_dict(), 0
        y = train_set.y.astype(np.float32)
        for epoch in range(cfg.max_epochs):
            model.train()
            order = rng.permutation(len(train_set))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                if idx.size < 2:  # batch norm needs two samples
                    continue
                loss = F.bce_with_logits(model(Tensor(train_set.x[idx])), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.data))
            model.eval()
            val_loss = _bce(model, val_set)
            val_acc = float(np.mean((model.predict_proba(val_set.x) >= cfg.threshold) == val_set.y))
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                            "val_loss": val_loss, "val_accuracy": val_acc})
            if val_loss < best:
                best, best_state, waited = val_loss, model.state_dict(), 0
            else:
                waited += 1
                if waited >= cfg.patience:
                    break
        model.load_state_dict(best_state)
        model.eval()
    return model, history


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney form of the ROC area with average ranks for ties."""
    y = np.asarray(y_true).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def classification_metrics(y_true, prob, threshold: float = 0.5) -> dict:
    """Accuracy, ROC-AUC and macro precision/recall/F1 (fall = 1, predicted when ``prob >= threshold``)."""
    y = np.asarray(y_true).astype(int)
    pred = (np.asarray(prob) >= threshold).astype(int)
    out = {"accuracy": float(np.mean(pred == y)), "defined": True}
    if len(np.unique(y)) < 2:
        out.update({k: None for k in ("precision", "recall", "f1", "roc_auc")})
        out["defined"] = False
        return out
    per = {}
    for cls in (0, 1):
        tp = int(np.sum((pred == cls) & (y == cls)))
        fp = int(np.sum((pred == cls) & (y != cls)))
        fn = int(np.sum((pred != cls) & (y == cls)))
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        per[cls] = (p, r, _ratio(2 * p * r, p + r))
    out["per_class"] = {"adl": per[0], "fall": per[1]}
    out["precision"] = (per[0][0] + per[1][0]) / 2
    out["recall"] = (per[0][1] + per[1][1]) / 2
    out["f1"] = (per[0][2] + per[1][2]) / 2
    out["roc_auc"] = roc_auc(y, prob)
    return out


def evaluate_classifier(model: FallClassifier, test_set: LabeledSet, threshold: float = 0.5) -> dict:
    return classification_metrics(test_set.y, model.predict_proba(test_set.x), threshold)


# ---------------------------------------------------------------- splits and mixing

def split_subjects(subjects, n_val: int, n_test: int, rng) -> tuple:
    """Shuffle subject IDs into disjoint ``(train, val, test)`` lists."""
    uniq = sorted(set(subjects))
    if len(uniq) < n_val + n_test + 1:
        raise DataError(f"subject-independent split needs at least {n_val + n_test + 1} subjects "
                        f"({n_val} validation, {n_test} test, 1 training), found {len(uniq)}")
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    val, test, train = order[:n_val], order[n_val:n_val + n_test], order[n_val + n_test:]
    assert_subject_independent(train, val, test)
    return train, val, test


def assert_subject_independent(train, val, test) -> None:
    a, b, c = set(train), set(val), set(test)
    if a & b or a & c or b & c:
        raise TransConvError(f"subject leakage between splits: {sorted((a & b) | (a & c) | (b & c))}")


def mix_counts(pools: tuple, fractions: tuple) -> tuple:
    """Largest counts with the requested proportions that every pool can supply."""
    total = min(p / f for p, f in zip(pools, fractions) if f > 0)
    return tuple(int(np.floor(total * f + 1e-9)) for f in fractions)


def window_sequences(seqs: np.ndarray, length: int, step: int) -> np.ndarray:
    """Cut every ``[C, L]`` sequence with the overlapping-window policy."""
    seqs = np.asarray(seqs)
    starts = window_starts(seqs.shape[2], length, step)
    if not starts:
        raise DataError(f"sequences of length {seqs.shape[2]} are shorter than the {length}-step window")
    return np.concatenate([seqs[:, :, s:s + length] for s in starts])


def _standardize(train: np.ndarray, *others):
    mu = train.mean(axis=(0, 2), keepdims=True)
    sd = train.std(axis=(0, 2), keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return [((a - mu) / sd).transpose(0, 2, 1).astype(np.float32) for a in (train,) + others]


@dataclass
class UtilityReport:
    arms: dict
    per_iteration: dict
    deltas: dict
    splits: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def percent_delta(base: float, aug: float) -> float:
    return (aug - base) / base * 100.0


def run_utility_experiment(real: Dataset, synth: Optional[np.ndarray], cfg: UtilityConfig = UtilityConfig(),
                           arm_name: str = "augmented") -> UtilityReport:
    """Baseline vs augmented arms over ``cfg.iterations`` reshuffled subject splits.

    ``real`` windows carry per-file ``subject_id`` and ``label`` (1 = fall).
    ``synth`` holds synthetic fall sequences ``[M, C, L]`` in original units;
    they are windowed with the same policy as the real data.
    """
    subjects = real.file_field("subject_id")
    labels = real.file_field("label")
    if any(s is None for s in subjects) or any(v is None for v in labels):
        raise DataError("every source file needs subject_id and label", field="subject_id/label")
    labels = labels.astype(int)
    x_real = real.windows.astype(np.float64)
    if x_real.shape[2] != cfg.window_length:
        raise DataError(f"real windows have length {x_real.shape[2]}, config expects {cfg.window_length}")
    synth_w = None
    if synth is not None:
        synth_w = window_sequences(np.asarray(synth, dtype=np.float64), cfg.window_length, cfg.window_step)
        if synth_w.shape[1] != x_real.shape[1]:
            raise DataError("synthetic and real channel counts differ")
    arms = [("baseline", cfg.baseline_mix)]
    if synth_w is not None:
        arms.append((arm_name, cfg.mix))

    per_iter = {name: {m: [] for m in METRICS} for name, _ in arms}
    splits = []
    for it in range(cfg.iterations):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, it])))
        tr_s, va_s, te_s = split_subjects(subjects, cfg.val_subjects, cfg.test_subjects, rng)
        splits.append({"train": [str(s) for s in tr_s], "val": [str(s) for s in va_s], "test": [str(s) for s in te_s]})
        in_train = np.isin(subjects, tr_s)
        adl = np.flatnonzero(in_train & (labels == 0))
        fall = np.flatnonzero(in_train & (labels == 1))
        val_idx = np.flatnonzero(np.isin(subjects, va_s))
        test_idx = np.flatnonzero(np.isin(subjects, te_s))
        for arm_i, (name, mix) in enumerate(arms):
            pools = (adl.size, fall.size, 0 if synth_w is None else len(synth_w))
            n_adl, n_fall, n_syn = mix_counts(pools, mix)
            if min(n_adl, n_fall) < 1:
                raise DataError(f"iteration {it}: training subjects lack ADL or fall windows")
            parts = [x_real[rng.choice(adl, n_adl, replace=False)], x_real[rng.choice(fall, n_fall, replace=False)]]
            y_tr = [np.zeros(n_adl), np.ones(n_fall)]
            if n_syn:
                parts.append(synth_w[rng.choice(len(synth_w), n_syn, replace=False)])
                y_tr.append(np.ones(n_syn))
            xtr, xva, xte = _standardize(np.concatenate(parts), x_real[val_idx], x_real[test_idx])
            train_set = LabeledSet(xtr, np.concatenate(y_tr))
            val_set = LabeledSet(xva, labels[val_idx].astype(np.float64))
            test_set = LabeledSet(xte, labels[test_idx].astype(np.float64))
            seed = int(np.random.SeedSequence([cfg.seed, it, arm_i]).generate_state(1)[0])
            model, _ = train_classifier(train_set, val_set, seed, cfg)
            res = evaluate_classifier(model, test_set, cfg.threshold)
            for m in METRICS:
                per_iter[name][m].append(float("nan") if res[m] is None else float(res[m]))
            log.info("iteration %d arm %s: %s", it, name, {m: round(per_iter[name][m][-1], 4) for m in METRICS})

    means = {name: {m: float(np.mean(v)) for m, v in d.items()} for name, d in per_iter.items()}
    base = means["baseline"]
    deltas = {name: {m: percent_delta(base[m], vals[m]) if base[m] else float("nan") for m in METRICS}
              for name, vals in means.items() if name != "baseline"}
    return UtilityReport(means, per_iter, deltas, splits, cfg.to_dict())


def render_utility_table(report: UtilityReport, labels: Optional[dict] = None, digits: int = 4) -> str:
    """Rows of arm results; non-baseline rows show the signed percent change."""
    labels = labels or {}
    header = ["Training Data"] + list(METRIC_TITLES)
    rows = []
    for name, vals in report.arms.items():
        row = [labels.get(name, name)]
        for m in METRICS:
            cell = f"{vals[m]:.{digits}f}"
            if name in report.deltas:
                cell += f" ({report.deltas[name][m]:+.2f}%)"
            row.append(cell)
        rows.append(row)
    widths = [max(len(r[j]) for r in [header] + rows) for j in range(len(header))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda r: "| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |"  # noqa: E731
    return "\n".join([rule, fmt(header), rule] + [fmt(r) for r in rows] + [rule])


def toy_fall_dataset(n_subjects: int = 6, rows: int = 192, channels: int = 3, window_length: int = 128,
                     window_step: int = 10, files_per_class: int = 1, seed: int = 0) -> Dataset:
    """Subjects with smooth ADL recordings (label 0) and diverging fall recordings (label 1)."""
    windows, sources, files = [], [], []
    for s in range(n_subjects):
        for label, kind in ((0, "sines"), (1, "switching")):
            for rep in range(files_per_class):
                child = int(np.random.SeedSequence([seed, s, label, rep]).generate_state(1)[0])
                seq = toy_windows(kind, 1, rows, channels, child)[0]
                files.append({"path": f"toy:{kind}:subject={s}:rep={rep}", "subject_id": f"S{s:02d}", "label": label})
                for st in window_starts(rows, window_length, window_step):
                    windows.append(seq[:, st:st + window_length])
                    sources.append(len(files) - 1)
    recipe = Recipe(window_length, window_step, eval_fraction=0.0, split_seed=seed)
    return build_dataset("toy-fall", np.stack(windows), [f"ch{i}" for i in range(channels)], recipe, files, sources)
