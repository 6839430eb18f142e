"""ConvNet-4 feature extractor.

Four blocks of conv3x3(pad 1) -> batchnorm -> relu -> maxpool2x2 with a
fixed channel width, mapping a 3xSxS image to a CxHxW basic feature map
(84 -> 5x5, 32 -> 2x2).
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .initutil import conv_param, ones_param, rng_from_seed, zeros_param

STAGES = ("basic", "multifreq", "context", "modulated", "final")


@dataclass
class FeatureMap:
    """CxHxW (or NxCxHxW batched) embedding with a pipeline stage tag."""

    tensor: T.Tensor
    stage: str = "basic"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class BackboneConfig:
    in_channels: int = 3
    block_channels: int = 64
    num_blocks: int = 4
    input_side: int = 84
    dtype: type = np.float32

    def output_side(self):
        side = self.input_side
        for _ in range(self.num_blocks):
            side = side // 2  # conv pad 1 keeps side, pool halves (floor)
        return side


@dataclass
class BackboneParams:
    config: BackboneConfig
    conv_w: list = field(default_factory=list)
    conv_b: list = field(default_factory=list)
    bn_gamma: list = field(default_factory=list)
    bn_beta: list = field(default_factory=list)
    bn_state: list = field(default_factory=list)

    def parameters(self):
        for group in (self.conv_w, self.conv_b, self.bn_gamma, self.bn_beta):
            yield from group


def init_params(config, rng_seed):
    """Deterministic per-seed initialization: Kaiming-uniform fan-in conv
    weights, zero biases, gamma=1, beta=0."""
    if config.output_side() < 2:
        raise ValueError(
            f"input side {config.input_side} pools below 2x2 output")
    rng = rng_from_seed(rng_seed) if np.isscalar(rng_seed) else rng_seed
    dt = config.dtype
    params = BackboneParams(config=config)
    cin = config.in_channels
    cout = config.block_channels
    for b in range(config.num_blocks):
        params.conv_w.append(
            conv_param(rng, f"backbone/block{b}/conv_w", (cout, cin, 3, 3), dt))
        params.conv_b.append(zeros_param(f"backbone/block{b}/conv_b", (cout,), dt))
        params.bn_gamma.append(ones_param(f"backbone/block{b}/bn_gamma", (cout,), dt))
        params.bn_beta.append(zeros_param(f"backbone/block{b}/bn_beta", (cout,), dt))
        params.bn_state.append(T.BatchNormState(cout, dtype=dt))
        cin = cout
    return params


def embed(image, params, training=False):
    """Map a 3xSxS image (or Nx3xSxS batch) to the basic feature map."""
    x = image.tensor if isinstance(image, FeatureMap) else image
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    cfg = params.config
    if x.shape[-1] != cfg.input_side or x.shape[-2] != cfg.input_side:
        raise T.ShapeError(
            f"expected input side {cfg.input_side}, got {x.shape[-2:]}")
    for b in range(cfg.num_blocks):
        x = T.conv2d(x, params.conv_w[b].value, params.conv_b[b].value,
                     stride=1, padding=1)
        x = T.batchnorm2d(x, params.bn_gamma[b].value, params.bn_beta[b].value,
                          params.bn_state[b], training)
        x = T.relu(x)
        x = T.maxpool2d(x, k=2, stride=2)
    if squeeze:
        x = T.reshape(x, x.shape[1:])
    return FeatureMap(x, stage="basic")
