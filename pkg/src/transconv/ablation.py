"""Four-way architecture comparison: plain U-Net, +transformer, +multi-scale conv, full model."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional

import numpy as np

from .dataio import Dataset, denormalize
from .diffusion import SampleRequest, TrainConfig, sample, train
from .metrics import MetricConfig, MetricReport, evaluate, render_metric_table, train_context_encoder
from .ndgrad import new_rng
from .schedule import NoiseSchedule
from .unet import DenoiserModel, UNetConfig

log = logging.getLogger(__name__)

# label -> (use_msconv, use_transformer)
ABLATIONS = (
    ("Baseline DDPM", False, False),
    ("+ Transformer", False, True),
    ("+ Multi-Scale Convolution", True, False),
    ("Full Model", True, True),
)


def ablation_configs(base: UNetConfig) -> dict:
    return {label: replace(base, use_msconv=ms, use_transformer=tf) for label, ms, tf in ABLATIONS}


def run_ablation(data: Dataset, base: UNetConfig, sched: NoiseSchedule, train_cfg: TrainConfig,
                 metric_cfg: MetricConfig, samples: int, seed: int, run_dir=None) -> dict:
    """Train each configuration under the same budget and score its samples.

    Every configuration gets the same init seed, batch stream and sampling
    seed; one context encoder, trained on the real windows, scores them all.
    Returns ``{label: MetricReport}``.
    """
    real_norm = data.normalized()
    real_raw = data.windows
    scaler = data.manifest.scaler
    encoder = train_context_encoder(real_norm, metric_cfg.seed, metric_cfg.encoder)
    reports = {}
    for i, (label, cfg) in enumerate(ablation_configs(base).items()):
        model = DenoiserModel(cfg, new_rng(seed))
        sub = None if run_dir is None else f"{run_dir}/ablation/{i}"
        result = train(model, real_norm, train_cfg, sched, run_dir=sub, meta={"ablation": label})
        gen = sample(model, sched, SampleRequest(samples, cfg.length, cfg.in_channels, seed=seed))
        log.info("ablation %s: final loss %.4f", label, float(np.mean(result.losses[-50:])))
        report = evaluate(real_norm, gen, real_raw, denormalize(gen, scaler), metric_cfg, encoder=encoder,
                          dataset_sha256=data.manifest.store_sha256, checkpoint_sha256=result.checkpoint_sha256)
        reports[label] = report
    return reports


def render_ablation_table(reports: dict, dataset: str = "toy") -> str:
    return render_metric_table({dataset: reports}, row_title="Configuration")


def parameter_names(cfg: UNetConfig) -> set:
    return {n for n, _ in DenoiserModel(cfg, new_rng(0)).named_parameters()}


def name_diff(a: UNetConfig, b: UNetConfig) -> tuple:
    """``(only_in_a, only_in_b)`` parameter-name sets."""
    na, nb = parameter_names(a), parameter_names(b)
    return na - nb, nb - na


def reports_to_dict(reports: dict) -> dict:
    return {label: MetricReport.values(r) for label, r in reports.items()}
