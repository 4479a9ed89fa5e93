"""U-Net noise predictor with multi-scale conv blocks and a bottleneck transformer."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionConfig, AttentionLayer
from .errors import ConfigError
from .msconv import DEFAULT_SCALES, MultiScaleBlock, MultiScaleConfig, SingleScaleBlock
from .ndgrad import Conv1d, Linear, Module, ModuleList, Tensor, new_rng, no_grad
from .ndgrad import functional as F


@dataclass
class UNetConfig:
    in_channels: int
    length: int
    base_dim: int = 64
    dim_mults: tuple = (1, 2, 4, 8)
    scales: tuple = DEFAULT_SCALES
    head_scale: int = 64
    time_embed_dim: Optional[int] = None
    use_msconv: bool = True
    use_transformer: bool = True
    lambda_init: float = 0.0
    positional_encoding: bool = False

    def __post_init__(self):
        self.dim_mults = tuple(int(m) for m in self.dim_mults)
        self.scales = tuple((int(k), int(d)) for k, d in self.scales)
        if not self.dim_mults or any(m < 1 for m in self.dim_mults):
            raise ConfigError("dim_mults must be a non-empty list of integers >= 1")
        if self.in_channels < 1 or self.base_dim < 1 or self.length < 1:
            raise ConfigError("in_channels, base_dim and length must be positive")
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_dim
        if self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        factor = 2 ** (len(self.dim_mults) - 1)
        if self.length % factor:
            lo = (self.length // factor) * factor
            hi = lo + factor
            raise ConfigError(
                f"length {self.length} is not divisible by {factor} (= 2^(levels-1)); "
                f"crop to {lo} or pad to {hi}")

    @property
    def dims(self) -> list:
        return [self.base_dim * m for m in self.dim_mults]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_mults"] = list(self.dim_mults)
        d["scales"] = [list(s) for s in self.scales]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown unet config keys: {sorted(unknown)}")
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t*f_0..f_{h-1}), cos(t*f_0..f_{h-1})]``, ``f_i = 10000^(-i/h)``."""
    if dim % 2:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


class TimeMLP(Module):
    def __init__(self, dim: int, rng):
        super().__init__()
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t, dtype) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.dim), dtype=dtype)
        return F.silu(self.fc2(F.silu(self.fc1(emb))))


class ConvBlock(Module):
    """Time-conditioned conv block: ``block(x + proj(temb)[..., None])``."""

    def __init__(self, cin: int, cout: int, cfg: UNetConfig, rng):
        super().__init__()
        self.tproj = Linear(cfg.time_embed_dim, cin, rng)
        ms = MultiScaleConfig(cin, cout, cfg.scales)
        if cfg.use_msconv:
            self.msconv = MultiScaleBlock(ms, rng)
        else:
            self.plain = SingleScaleBlock(ms, rng)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        shift = F.reshape(self.tproj(temb), (temb.shape[0], x.shape[1], 1))
        inner = self.msconv if "msconv" in self._modules else self.plain
        return inner(x + shift)


class DenoiserModel(Module):
    def __init__(self, cfg: UNetConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else new_rng(0)
        self.cfg = cfg
        dims = cfg.dims
        n = len(dims)
        self.time_mlp = TimeMLP(cfg.time_embed_dim, rng)
        self.in_proj = Conv1d(cfg.in_channels, cfg.base_dim, 3, rng)

        self.down = ModuleList()
        for i in range(n):
            level = Module()
            level.block = ConvBlock(cfg.base_dim if i == 0 else dims[i - 1], dims[i], cfg, rng)
            if i < n - 1:
                level.downsample = Conv1d(dims[i], dims[i], 3, rng, stride=2, padding=1)
            self.down.append(level)

        self.mid = ConvBlock(dims[-1], dims[-1], cfg, rng)
        if cfg.use_transformer:
            self.bottleneck = AttentionLayer(
                AttentionConfig(dims[-1], cfg.head_scale, cfg.lambda_init, cfg.positional_encoding), rng)

        self.up = ModuleList()
        for i in range(n):
            level = Module()
            cout = dims[i - 1] if i > 0 else dims[0]
            level.block = ConvBlock(2 * dims[i], cout, cfg, rng)
            if i > 0:
                level.upconv = Conv1d(cout, cout, 3, rng)
            self.up.append(level)

        self.out_proj = Conv1d(dims[0], cfg.in_channels, 1, rng, zero_init=True)

    def forward(self, x: Tensor, t, zero_skips: Sequence[int] = ()) -> Tensor:
        return denoise_forward(x, t, self, zero_skips)

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        """Eval-mode, tape-free noise prediction on a plain array."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = denoise_forward(Tensor(x, dtype=self.in_proj.w.dtype), np.broadcast_to(np.asarray(t), (x.shape[0],)), self)
        finally:
            self.train(was_training)
        return out.data


def denoise_forward(x_t: Tensor, t, model: DenoiserModel, zero_skips: Sequence[int] = ()) -> Tensor:
    cfg = model.cfg
    if x_t.ndim != 3 or x_t.shape[1] != cfg.in_channels:
        raise ConfigError(f"input shape {x_t.shape} does not match in_channels={cfg.in_channels}")
    factor = 2 ** (len(cfg.dim_mults) - 1)
    if x_t.shape[2] % factor:
        raise ConfigError(f"input length {x_t.shape[2]} not divisible by {factor}")
    t = np.asarray(t).reshape(-1)
    if t.size != x_t.shape[0]:
        raise ConfigError(f"{t.size} timesteps for a batch of {x_t.shape[0]}")
    temb = model.time_mlp(t, x_t.dtype)

    h = model.in_proj(x_t)
    skips = []
    for i, level in enumerate(model.down):
        h = level.block(h, temb)
        skips.append(h * 0.0 if i in zero_skips else h)
        if "downsample" in level._modules:
            h = level.downsample(h)

    h = model.mid(h, temb)
    if "bottleneck" in model._modules:
        h = model.bottleneck(h)

    for i in reversed(range(len(model.up))):
        level = model.up[i]
        h = level.block(F.concat([h, skips[i]], axis=1), temb)
        if "upconv" in level._modules:
            h = level.upconv(F.upsample_nearest(h, 2))
    return model.out_proj(h)


def count_parameters(cfg: UNetConfig) -> int:
    return DenoiserModel(cfg, new_rng(0)).num_parameters()
