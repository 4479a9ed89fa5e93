"""Post-hoc discriminative and predictive (train-on-synthetic, test-on-real) scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from ..ndgrad import GRU, Adam, Linear, Module, Tensor, new_rng, no_grad, precision
from ..ndgrad import functional as F

MIN_DISCRIMINATIVE_WINDOWS = 32


@dataclass
class HelperBudget:
    steps: int = 500
    learning_rate: float = 1e-3
    hidden: int = 32
    batch_size: int = 128


class SequenceClassifier(Module):
    """Stacked GRU whose last hidden state feeds a single logit."""

    def __init__(self, channels: int, hidden: int, layers: int, rng):
        super().__init__()
        self.rnn = GRU(channels, hidden, rng, num_layers=layers)
        self.head = Linear(hidden, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.rnn(x)
        return F.reshape(self.head(h[:, -1, :]), (x.shape[0],))


class NextStepRegressor(Module):
    def __init__(self, channels: int, hidden: int, rng):
        super().__init__()
        self.rnn = GRU(channels, hidden, rng, num_layers=1)
        self.head = Linear(hidden, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.rnn(x))


def _time_major(windows) -> np.ndarray:
    """``[N, C, L]`` -> ``[N, L, C]`` float32."""
    w = np.asarray(windows, dtype=np.float32)
    if w.ndim != 3:
        raise ShapeError("expected [N, C, L] windows", w.shape)
    if not np.all(np.isfinite(w)):
        raise DataError("metric input contains non-finite values")
    return np.ascontiguousarray(w.transpose(0, 2, 1))


def stratified_split(labels: np.ndarray, train_fraction: float, rng, groups: Optional[np.ndarray] = None) -> tuple:
    """Index arrays ``(train, test)`` keeping each class's share in both parts.

    Items sharing a ``groups`` id always land on the same side. Groups are
    stratified by the set of labels they contain.
    """
    labels = np.asarray(labels)
    groups = np.arange(labels.size) if groups is None else np.asarray(groups)
    ids, inverse = np.unique(groups, return_inverse=True)
    kinds = {}
    for g in range(ids.size):
        kinds.setdefault(tuple(np.unique(labels[inverse == g])), []).append(g)
    in_train = np.zeros(ids.size, dtype=bool)
    for kind in sorted(kinds):
        members = rng.permutation(np.asarray(kinds[kind]))
        in_train[members[:int(round(train_fraction * members.size))]] = True
    mask = in_train[inverse]
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def duplicate_groups(x: np.ndarray) -> np.ndarray:
    """Group id per window; bit-identical windows share an id."""
    flat = np.ascontiguousarray(x.reshape(len(x), -1))
    rows = flat.view(np.dtype((np.void, flat.dtype.itemsize * flat.shape[1]))).ravel()
    return np.unique(rows, return_inverse=True)[1].ravel()


def discriminative_score(real, synth, seed: int = 0, budget: HelperBudget = HelperBudget(),
                         layers: int = 2, train_fraction: float = 0.7) -> float:
    """Held-out accuracy of a GRU classifier telling real (1) from synthetic (0).

    0.5 means the two sets are indistinguishable to the classifier. Identical
    windows are kept on one side of the train/test split so a generator that
    copies its training data cannot leak labels into the test set.
    """
    r, s = _time_major(real), _time_major(synth)
    if min(len(r), len(s)) < MIN_DISCRIMINATIVE_WINDOWS:
        raise DataError(f"discriminative score needs at least {MIN_DISCRIMINATIVE_WINDOWS} windows per set, "
                        f"got {len(r)} real and {len(s)} synthetic")
    if r.shape[1:] != s.shape[1:]:
        raise ShapeError("real and synthetic windows differ", r.shape[1:], s.shape[1:])
    x = np.concatenate([r, s])
    y = np.concatenate([np.ones(len(r)), np.zeros(len(s))]).astype(np.float32)
    rng = new_rng(seed)
    tr, te = stratified_split(y, train_fraction, rng, duplicate_groups(x))
    with precision(32):
        model = SequenceClassifier(x.shape[2], budget.hidden, layers, rng)
        opt = Adam(model.named_parameters(), lr=budget.learning_rate)
        for _ in range(budget.steps):
            idx = tr[rng.integers(0, tr.size, size=min(budget.batch_size, tr.size))]
            loss = F.bce_with_logits(model(Tensor(x[idx])), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with no_grad():
            logits = model(Tensor(x[te])).data
    return float(np.mean((logits >= 0).astype(np.float32) == y[te]))


def _fit_regressor(train: np.ndarray, seed: int, budget: HelperBudget) -> NextStepRegressor:
    rng = new_rng(seed)
    model = NextStepRegressor(train.shape[2], budget.hidden, rng)
    opt = Adam(model.named_parameters(), lr=budget.learning_rate)
    for _ in range(budget.steps):
        idx = rng.integers(0, len(train), size=min(budget.batch_size, len(train)))
        batch = train[idx]
        loss = F.l1_loss(model(Tensor(batch[:, :-1])), batch[:, 1:])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def predictive_score(real_eval, synth_train, seed: int = 0, budget: HelperBudget = HelperBudget()) -> float:
    """Mean absolute next-step error on ``real_eval`` of a GRU fitted to ``synth_train``.

    Inputs are expected in normalized space and the score is reported there.
    """
    r, s = _time_major(real_eval), _time_major(synth_train)
    if r.shape[1] < 2 or s.shape[1] < 2:
        raise DataError("predictive score needs windows of length >= 2")
    if r.shape[2] != s.shape[2]:
        raise ShapeError("real and synthetic channel counts differ", r.shape, s.shape)
    if budget.steps < 0:
        raise ConfigError("steps must be >= 0")
    with precision(32):
        model = _fit_regressor(s, seed, budget)
        with no_grad():
            pred = model(Tensor(r[:, :-1])).data
    return float(np.mean(np.abs(pred - r[:, 1:])))
