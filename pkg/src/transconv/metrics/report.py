"""The four-metric report and its text-table rendering."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .divergence import jsd
from .fid import ContextEncoder, EncoderConfig, context_fid, train_context_encoder
from .scores import HelperBudget, discriminative_score, predictive_score

METRIC_LABELS = (
    ("context_fid", "Context-FID Score"),
    ("discriminative", "Discriminative Score"),
    ("predictive", "Predictive Score"),
    ("jsd", "JSD"),
)


@dataclass
class MetricConfig:
    seed: int = 0
    bins: int = 50
    per_channel_jsd: bool = False
    discriminative: HelperBudget = field(default_factory=HelperBudget)
    predictive: HelperBudget = field(default_factory=HelperBudget)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        d = dict(d)
        for key, kind in (("discriminative", HelperBudget), ("predictive", HelperBudget), ("encoder", EncoderConfig)):
            if isinstance(d.get(key), dict):
                sub = dict(d[key])
                if "dilations" in sub:
                    sub["dilations"] = tuple(sub["dilations"])
                d[key] = kind(**sub)
        return cls(**d)


@dataclass
class MetricReport:
    context_fid: float
    discriminative: float
    predictive: float
    jsd: float
    fid_degraded: bool = False
    config: dict = field(default_factory=dict)
    dataset_sha256: Optional[str] = None
    checkpoint_sha256: Optional[str] = None
    encoder_sha256: Optional[str] = None

    def values(self) -> dict:
        return {k: getattr(self, k) for k, _ in METRIC_LABELS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate(real_norm: np.ndarray, synth_norm: np.ndarray, real_raw: np.ndarray, synth_raw: np.ndarray,
             cfg: MetricConfig = MetricConfig(), encoder_train: Optional[np.ndarray] = None,
             dataset_sha256: Optional[str] = None, checkpoint_sha256: Optional[str] = None,
             encoder: Optional[ContextEncoder] = None) -> MetricReport:
    """Compute all four metrics.

    Learned metrics work on normalized windows, JSD on original units.
    Unless a trained ``encoder`` is passed, one is fitted to ``encoder_train``
    (default ``real_norm``).
    """
    seed = cfg.seed
    enc = encoder
    if enc is None:
        enc = train_context_encoder(real_norm if encoder_train is None else encoder_train, seed, cfg.encoder)
    fid, degraded = context_fid(real_norm, synth_norm, enc, with_flag=True)
    disc = discriminative_score(real_norm, synth_norm, seed, cfg.discriminative)
    pred = predictive_score(real_norm, synth_norm, seed, cfg.predictive)
    div = jsd(real_raw, synth_raw, cfg.bins, cfg.per_channel_jsd)
    return MetricReport(fid, disc, pred, div, degraded, asdict(cfg), dataset_sha256, checkpoint_sha256, enc.digest())


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v:.4f}"


def render_metric_table(columns: dict, row_title: str = "Methods") -> str:
    """Text table of metric groups x row labels, one column per key of ``columns``.

    ``columns`` maps a column name (a dataset) to ``{row label: report or value dict}``.
    """
    col_names = list(columns)
    row_labels = []
    for rows in columns.values():
        for label in rows:
            if label not in row_labels:
                row_labels.append(label)

    def cell(col, label, key):
        entry = columns[col].get(label)
        if entry is None:
            return None
        vals = entry.values() if isinstance(entry, MetricReport) else entry
        return vals.get(key)

    header = ["Evaluation Metric", row_title] + col_names
    body = []
    for key, title in METRIC_LABELS:
        for i, label in enumerate(row_labels):
            body.append([title if i == 0 else "", label] + [_fmt(cell(c, label, key)) for c in col_names])
    widths = [max(len(str(r[j])) for r in [header] + body) for j in range(len(header))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(r):
        return "| " + " | ".join(str(v).ljust(w) for v, w in zip(r, widths)) + " |"

    out = [rule, line(header), rule]
    for i, r in enumerate(body):
        out.append(line(r))
        if (i + 1) % len(row_labels) == 0:
            out.append(rule)
    return "\n".join(out)
