"""3D residual U-Net with deep supervision and the Dice + cross-entropy loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 16
    max_channels: int = 128
    ds_heads: int = 2
    in_channels: int = 2
    out_channels: int = 1
    negative_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if not 0 <= self.ds_heads < self.levels:
            raise ConfigError(f"ds_heads must be in [0, levels), got {self.ds_heads}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**l, self.max_channels) for l in range(self.levels)]

    def check_patch(self, size: Sequence[int]) -> None:
        div = 2 ** (self.levels - 1)
        for axis, n in zip("XYZ", size):
            if n % div:
                raise ConfigError(f"patch extent {n} along {axis} is not divisible by {div} ({self.levels} levels)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    w_dice: float = 1.0
    w_ce: float = 0.5
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if self.w_dice < 0 or self.w_ce < 0:
            raise ValueError("loss weights must be non-negative")


# -- parameter layout ---------------------------------------------------------


def _conv_shapes(prefix, cin, cout, k):
    return [(f"{prefix}.weight", (cout, cin, k, k, k), cin * k**3), (f"{prefix}.bias", (cout,), None)]


def _norm_shapes(prefix, c):
    return [(f"{prefix}.gamma", (c,), "one"), (f"{prefix}.beta", (c,), None)]


def _block_shapes(prefix, cin, cout):
    shapes = _conv_shapes(f"{prefix}.conv1", cin, cout, 3) + _norm_shapes(f"{prefix}.norm1", cout)
    shapes += _conv_shapes(f"{prefix}.conv2", cout, cout, 3) + _norm_shapes(f"{prefix}.norm2", cout)
    if cin != cout:
        shapes += _conv_shapes(f"{prefix}.proj", cin, cout, 1)
    return shapes


def parameter_layout(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], object]]:
    """``(name, shape, init)`` for every parameter, in a fixed order.

    ``init`` is the fan-in for weights, ``"one"`` for norm scales and ``None``
    for zero-initialised tensors.
    """
    ch = cfg.channels()
    shapes = []
    for l in range(cfg.levels):
        if l > 0:
            shapes += _conv_shapes(f"down{l}", ch[l - 1], ch[l], 3) + _norm_shapes(f"down{l}.norm", ch[l])
        shapes += _block_shapes(f"enc{l}", cfg.in_channels if l == 0 else ch[l], ch[l])
    for l in range(cfg.levels - 2, -1, -1):
        shapes += _conv_shapes(f"up{l}", ch[l + 1], ch[l], 1)
        shapes += _block_shapes(f"dec{l}", 2 * ch[l], ch[l])
    shapes += _conv_shapes("head", ch[0], cfg.out_channels, 1)
    for k in range(1, cfg.ds_heads + 1):
        shapes += _conv_shapes(f"ds{k}", ch[k], cfg.out_channels, 1)
    return shapes


class ResidualUNet:
    """Encoder/decoder of residual blocks with deep-supervision side heads.

    Decoder level ``l`` upsamples the coarser features after a 1x1x1 channel
    reduction; the two operations commute, and reducing first is cheaper.
    Side head ``k`` reads the decoder features at 1/2**k resolution (the
    bottleneck counts as the coarsest decoder level).
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys differ from the model: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- layers

    def _conv(self, name, x, stride=1, padding=0):
        return T.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, padding)

    def _norm(self, name, x):
        return T.instance_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.config.norm_eps)

    def _act(self, x):
        return T.leaky_relu(x, self.config.negative_slope)

    def block(self, prefix: str, x: Tensor) -> Tensor:
        h = self._act(self._norm(f"{prefix}.norm1", self._conv(f"{prefix}.conv1", x, padding=1)))
        h = self._norm(f"{prefix}.norm2", self._conv(f"{prefix}.conv2", h, padding=1))
        skip = self._conv(f"{prefix}.proj", x) if f"{prefix}.proj.weight" in self.params else x
        return T.add(h, skip)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise T.ShapeError(f"expected input [B, {cfg.in_channels}, X, Y, Z], got {x.shape}", "C")
        cfg.check_patch(x.shape[2:])
        h = x
        skips = []
        for l in range(cfg.levels):
            if l > 0:
                h = self._act(self._norm(f"down{l}.norm", self._conv(f"down{l}", h, stride=2, padding=1)))
            h = self.block(f"enc{l}", h)
            skips.append(h)
        feats = {cfg.levels - 1: h}
        for l in range(cfg.levels - 2, -1, -1):
            up = T.trilinear_upsample(self._conv(f"up{l}", h))
            h = self.block(f"dec{l}", T.channel_concat(up, skips[l]))
            feats[l] = h
        main = self._conv("head", feats[0])
        side = []
        for k in range(1, cfg.ds_heads + 1):
            y = self._conv(f"ds{k}", feats[k])
            for _ in range(k):
                y = T.trilinear_upsample(y)
            side.append(y)
        return main, side

    __call__ = forward


def build(config: NetworkConfig, seed=0, dtype=np.float32) -> ResidualUNet:
    """Create a network with He-normal weights, zero biases and unit norm scales."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in parameter_layout(config):
        if init is None:
            arr = np.zeros(shape)
        elif init == "one":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, np.sqrt(2.0 / init), size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ResidualUNet(config, params)


# -- loss ---------------------------------------------------------------------


def head_loss(logits: Tensor, target: np.ndarray, w: LossWeights = LossWeights()) -> Tensor:
    dice = T.soft_dice_loss(logits, target, w.dice_smooth)
    ce = T.bce_with_logits(logits, target)
    return T.add(T.scale(dice, w.w_dice), T.scale(ce, w.w_ce))


def loss(main_logits: Tensor, ds_logits: Sequence[Tensor], target, w: LossWeights = LossWeights()) -> Tensor:
    """Composite loss averaged (unweighted) over the main and side heads."""
    target = np.asarray(target)
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("segmentation target must be binary")
    heads = [main_logits, *ds_logits]
    for h in heads:
        if h.shape != target.shape:
            raise T.ShapeError(f"logits {h.shape} vs target {target.shape}")
    return T.stack_mean([head_loss(h, target, w) for h in heads])
