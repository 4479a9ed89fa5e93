"""Noise-prediction training loop and ancestral sampler."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .ndgrad import Adam, Tensor, load_checkpoint, new_rng, precision, restore_model, save_checkpoint
from .ndgrad import functional as F
from .schedule import NoiseSchedule, q_sample, reverse_mean_coeffs, schedule_from_config
from .unet import DenoiserModel, UNetConfig

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "loss", "wallclock_ms")


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 32
    learning_rate: float = 8e-5
    seed: int = 0
    checkpoint_every: int = 500
    precision: int = 32
    ema_decay: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleRequest:
    count: int
    length: int
    channels: int
    seed: int = 0
    shard_size: int = 100

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.count}")
        if self.length < 1 or self.channels < 1 or self.shard_size < 1:
            raise ConfigError("length, channels and shard_size must be positive")


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list
    checkpoint: Optional[Path] = None
    checkpoint_sha256: Optional[str] = None
    ema: dict = field(default_factory=dict)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    inner = state["state"]
    return {"bit_generator": state["bit_generator"], "state": {k: str(v) for k, v in inner.items()},
            "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}


def _set_rng_state(rng: np.random.Generator, saved: dict) -> None:
    state = dict(saved)
    state["state"] = {k: int(v) for k, v in saved["state"].items()}
    rng.bit_generator.state = state


def checkpoint_meta(model: DenoiserModel, sched: NoiseSchedule, cfg: TrainConfig, extra=None) -> dict:
    meta = {"unet": model.cfg.to_dict(), "schedule": sched.to_dict(), "train": cfg.to_dict()}
    meta.update(extra or {})
    return meta


def _windows(data) -> np.ndarray:
    arr = getattr(data, "windows", data)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ShapeError("training windows must be [N, C, L]", arr.shape)
    return arr


def train(model: DenoiserModel, data, cfg: TrainConfig, sched: NoiseSchedule,
          run_dir: Union[str, Path, None] = None, resume: Union[str, Path, None] = None,
          meta: Optional[dict] = None) -> TrainResult:
    """Fit ``model`` to predict the injected noise on normalized windows ``data[N, C, L]``.

    When ``run_dir`` is given, the loss trace goes to ``logs/loss.csv`` and
    checkpoints to ``checkpoints/``. ``resume`` continues from a checkpoint,
    restoring weights, Adam moments and the batch RNG so the continued run
    matches an uninterrupted one.
    """
    windows = _windows(data)
    mcfg = model.cfg
    if windows.shape[1:] != (mcfg.in_channels, mcfg.length):
        raise ShapeError("windows do not match the model input", windows.shape[1:], (mcfg.in_channels, mcfg.length))
    dtype = np.float64 if cfg.precision == 64 else np.float32
    model.astype(dtype)
    windows = windows.astype(dtype, copy=False)
    model.train()

    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    rng = new_rng(cfg.seed)
    start = 0
    losses: list = []
    ema = {}
    if cfg.ema_decay > 0:
        ema = {n: p.data.copy() for n, p in model.named_parameters()}

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = trace_path = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        trace_path = run_dir / "logs" / "loss.csv"

    if resume is not None:
        ck = load_checkpoint(resume)
        restore_model(model, ck)
        model.astype(dtype)
        if ck.header.get("optimizer"):
            opt.load_state(ck.header["optimizer"], ck.adam_m, ck.adam_v)
        if ck.header.get("rng_state"):
            _set_rng_state(rng, ck.header["rng_state"])
        start = int(ck.header["global_step"])
        ema = {n: a.astype(dtype) for n, a in ck.extra.get("ema", {}).items()} or ema
        if trace_path is not None and trace_path.exists():
            with open(trace_path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) < start]
            losses = [float(r["loss"]) for r in rows]
            _write_trace(trace_path, rows)

    meta = checkpoint_meta(model, sched, cfg, meta)

    def save(tag: str, step: int):
        if ckpt_dir is None:
            return None, None
        path = ckpt_dir / f"{tag}.ckpt"
        extra = {"ema": ema} if ema else None
        digest = save_checkpoint(path, model, opt, meta, step, _rng_state(rng), extra)
        return path, digest

    if trace_path is not None and start == 0:
        _write_trace(trace_path, [])
    trace_fh = open(trace_path, "a", newline="") if trace_path is not None else None
    writer = csv.writer(trace_fh) if trace_fh is not None else None
    N = windows.shape[0]
    t0 = time.perf_counter()
    path = digest = None
    try:
        with precision(cfg.precision):
            for it in range(start, cfg.iterations):
                idx = rng.integers(0, N, size=cfg.batch_size)
                t = rng.integers(0, sched.T, size=cfg.batch_size)
                eps = rng.standard_normal(size=(cfg.batch_size,) + windows.shape[1:]).astype(dtype)
                x_t = q_sample(windows[idx], t, eps, sched)
                pred = model(Tensor(x_t, dtype=dtype), t)
                loss = F.mse_loss(pred, Tensor(eps, dtype=dtype))
                value = float(loss.data)
                if not np.isfinite(value):
                    save("emergency", it)
                    raise NumericalError(
                        f"non-finite loss {value} at iteration {it}; t values {t.tolist()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if ema:
                    d = cfg.ema_decay
                    for n, p in opt.params:
                        ema[n] *= d
                        ema[n] += (1.0 - d) * p.data
                losses.append(value)
                if writer is not None:
                    writer.writerow([it, repr(value), round((time.perf_counter() - t0) * 1000.0, 3)])
                step = it + 1
                if cfg.log_every and step % cfg.log_every == 0:
                    window = losses[-cfg.log_every:]
                    log.info("iteration %d/%d loss %.5f", step, cfg.iterations, sum(window) / len(window))
                if step % cfg.checkpoint_every == 0 and step < cfg.iterations:
                    save(f"step_{step:07d}", step)
        path, digest = save("final", max(cfg.iterations, start))
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return TrainResult(model, losses, path, digest, ema)


def _write_trace(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in LOSS_COLUMNS])


def read_loss_trace(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["loss"]) for r in csv.DictReader(fh)])


def load_denoiser(path, use_ema: bool = False):
    """Rebuild ``(model, schedule, checkpoint)`` from a training checkpoint."""
    ck = load_checkpoint(path)
    meta = ck.meta
    model = DenoiserModel(UNetConfig.from_dict(meta["unet"]), new_rng(0))
    restore_model(model, ck)
    if use_ema and "ema" in ck.extra:
        model.load_state_dict({**ck.extra["ema"], **ck.buffers})
    bits = meta.get("train", {}).get("precision", 32)
    model.astype(np.float64 if bits == 64 else np.float32)
    model.eval()
    return model, schedule_from_config(meta["schedule"]), ck


Denoiser = Union[DenoiserModel, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def sample(model: Denoiser, sched: NoiseSchedule, req: SampleRequest) -> np.ndarray:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``.

    ``model`` is a :class:`DenoiserModel` or any callable ``f(x, t) -> eps_hat``.
    The count is split into shards of ``req.shard_size``; shard ``i`` draws
    from its own stream seeded by ``(seed, i)``, so output does not depend on
    how shards are scheduled.
    """
    if isinstance(model, DenoiserModel):
        if (model.cfg.in_channels, model.cfg.length) != (req.channels, req.length):
            raise ShapeError("sample request does not match the model",
                             (req.channels, req.length), (model.cfg.in_channels, model.cfg.length))
        predict = model.predict_noise
        dtype = model.in_proj.w.dtype
    else:
        predict = model
        dtype = np.float64
    coeffs = [reverse_mean_coeffs(t, sched) for t in range(sched.T)]
    out = []
    for shard, lo in enumerate(range(0, req.count, req.shard_size)):
        n = min(req.shard_size, req.count - lo)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([req.seed, shard])))
        out.append(_sample_shard(predict, coeffs, n, req, rng, dtype))
    return np.concatenate(out, axis=0)


def _sample_shard(predict, coeffs, n, req, rng, dtype) -> np.ndarray:
    x = rng.standard_normal((n, req.channels, req.length)).astype(dtype)
    for t in range(len(coeffs) - 1, -1, -1):
        c_xt, c_eps, sigma = coeffs[t]
        eps_hat = np.asarray(predict(x, np.full(n, t, dtype=np.int64)))
        if not np.all(np.isfinite(eps_hat)):
            raise NumericalError(f"non-finite noise prediction at t={t}")
        x = c_xt * x - c_eps * eps_hat
        if t > 0:
            x = x + sigma * rng.standard_normal(x.shape)
        x = x.astype(dtype, copy=False)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sample at t={t}")
    return x


def analytic_gaussian_denoiser(sched: NoiseSchedule) -> Callable:
    """Exact noise predictor when the data are i.i.d. N(0, 1).

    Then ``x_t ~ N(0, 1)`` at every step and
    ``E[eps | x_t] = sqrt(1 - alpha_bar_t) * x_t``.
    """
    scale = np.sqrt(1.0 - sched.alpha_bar)

    def denoise(x, t):
        t = np.asarray(t)
        return scale[t].reshape((-1,) + (1,) * (np.ndim(x) - 1)) * x

    return denoise

