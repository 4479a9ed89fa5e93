"""Multi-scale dilated convolution block.

``N`` parallel "same"-padded convolutions with their own kernel size and
dilation are mixed by softmax weights over learnable logits ``beta``, then
batch-normalized and passed through SiLU::

    y_i   = conv1d(x, w_i, b_i, dilation=d_i)
    a     = softmax(beta)
    y_out = silu(batchnorm(sum_i a_i * y_i))
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .ndgrad import BatchNorm1d, Conv1d, Module, Parameter, Tensor
from .ndgrad import functional as F

DEFAULT_SCALES = ((3, 1), (5, 2), (7, 4))


@dataclass
class MultiScaleConfig:
    in_channels: int
    out_channels: int
    scales: tuple = field(default=DEFAULT_SCALES)

    def __post_init__(self):
        self.scales = tuple((int(k), int(d)) for k, d in self.scales)
        if not self.scales:
            raise ConfigError("multi-scale block needs at least one scale")
        for k, d in self.scales:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel size {k} must be odd and positive for length-preserving padding")
            if d < 1:
                raise ConfigError(f"dilation {d} must be positive")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    def parameter_budget(self) -> int:
        n = len(self.scales)
        conv = sum(k * self.in_channels * self.out_channels + self.out_channels for k, _ in self.scales)
        return conv + n + 2 * self.out_channels


class MultiScaleBlock(Module):
    def __init__(self, cfg: MultiScaleConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        for i, (k, d) in enumerate(cfg.scales):
            setattr(self, f"scale{i}", Conv1d(cfg.in_channels, cfg.out_channels, k, rng, dilation=d))
        self.beta = Parameter(np.zeros(len(cfg.scales)))
        self.bn = BatchNorm1d(cfg.out_channels)

    def convs(self) -> list:
        return [getattr(self, f"scale{i}") for i in range(len(self.cfg.scales))]

    def forward(self, x: Tensor) -> Tensor:
        return msconv_forward(x, self)


def msconv_attention_weights(block: MultiScaleBlock) -> np.ndarray:
    """Softmax of the block's scale logits as a float64 probability vector."""
    b = block.beta.data.astype(np.float64)
    e = np.exp(b - b.max())
    return e / e.sum()


def msconv_forward(x: Tensor, block: MultiScaleBlock) -> Tensor:
    if x.ndim != 3 or x.shape[1] != block.cfg.in_channels:
        raise ShapeError("multi-scale block input channels", x.shape, (None, block.cfg.in_channels, None))
    weights = F.softmax(block.beta, axis=0)
    mixed = None
    for i, conv in enumerate(block.convs()):
        term = conv(x) * F.reshape(F.getitem(weights, slice(i, i + 1)), (1, 1, 1))
        mixed = term if mixed is None else mixed + term
    return F.silu(block.bn(mixed))


class SingleScaleBlock(Module):
    """Plain k=3, d=1 conv block sized to match a multi-scale block's budget.

    Two stacked k=3 convolutions through a hidden width chosen so the
    parameter count tracks :meth:`MultiScaleConfig.parameter_budget`.
    """

    def __init__(self, cfg: MultiScaleConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cin, cout = cfg.in_channels, cfg.out_channels
        hidden = matched_hidden_width(cfg)
        self.conv1 = Conv1d(cin, hidden, 3, rng)
        self.conv2 = Conv1d(hidden, cout, 3, rng)
        self.bn = BatchNorm1d(cout)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError("single-scale block input channels", x.shape, (None, self.cfg.in_channels, None))
        return F.silu(self.bn(self.conv2(F.silu(self.conv1(x)))))


def matched_hidden_width(cfg: MultiScaleConfig) -> int:
    cin, cout = cfg.in_channels, cfg.out_channels
    # 3*cin*H + H + 3*H*cout + cout + 2*cout == budget
    hidden = (cfg.parameter_budget() - 3 * cout) / (3 * cin + 3 * cout + 1)
    return max(1, int(round(hidden)))
