"""Model components: residual Siamese encoder, MLP heads, change detector.

All modules share one weight-init convention: He-uniform fan-in bounds for
conv/linear weights, ones/zeros for batch-norm scale/shift, zeros for biases.
Construction takes an explicit rng so two models built from the same seed are
bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import nn_ops as ops
from . import tensor as tz
from .errors import ConfigInvalid, ShapeMismatch
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor with a stable name and an optimizer momentum slot."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer: Optional[np.ndarray] = None


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Container with recursive parameter/buffer discovery.

    Attributes that are Parameters, Modules, or lists of Modules are picked
    up automatically, in attribute insertion order, so walk order (and hence
    checkpoint record order) is deterministic.
    """

    def __init__(self):
        self.training = True

    def _children(self):
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[tuple]:
        out = []
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = f"{prefix}{attr}"
                out.append((value.name, value))
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[tuple]:
        out = []
        for attr, value in vars(self).items():
            if isinstance(value, np.ndarray):
                out.append((f"{prefix}{attr}", value))
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        d = {name: p.data.copy() for name, p in self.named_parameters()}
        d.update({name: b.copy() for name, b in self.named_buffers()})
        return d

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        """Copy arrays into matching parameters/buffers; unknown names raise."""
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in state.items():
            if not name.startswith(prefix):
                continue
            local = name[len(prefix):]
            if local in targets:
                dst = targets[local].data
            elif local in buffers:
                dst = buffers[local]
            else:
                raise ShapeMismatch(f"no parameter or buffer named {local!r}")
            if dst.shape != arr.shape:
                raise ShapeMismatch(f"{local}: stored shape {arr.shape} vs model {dst.shape}")
            dst[...] = arr


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(he_uniform(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = tz.add(out, tz.reshape(self.bias, (1, -1, 1, 1)))
        return out


class BatchNorm(Module):
    """Batch norm over 2-D (N,C) or 4-D (N,C,H,W) activations."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = Parameter(np.ones(channels, dtype=np.float32))
        self.shift = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter(he_uniform(rng, (cin, cout), cin))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = tz.matmul(x, self.weight)
        if self.bias is not None:
            out = tz.add(out, tz.reshape(self.bias, (1, -1)))
        return out


class ResidualBlock(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride=stride)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.skip_conv = Conv2d(rng, cin, cout, 1, stride=stride, padding=0)
            self.skip_bn = BatchNorm(cout)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = tz.relu(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        if self.skip_conv is not None:
            x = self.skip_bn.forward(self.skip_conv.forward(x))
        return tz.relu(tz.add(h, x))


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 64])
    blocks_per_stage: int = 2
    output_upsample_factor: int = 4
    out_channels: int = 64

    def validate(self) -> None:
        extents = [self.in_channels, self.blocks_per_stage, self.output_upsample_factor,
                   self.out_channels, *self.stage_channels]
        if not self.stage_channels or any(int(e) <= 0 for e in extents):
            raise ConfigInvalid(f"encoder extents must be positive: {self}")

    @property
    def total_stride(self) -> int:
        # stem /2, pool /2, stages 2..n each /2
        return 4 * (2 ** (len(self.stage_channels) - 1))


class Encoder(Module):
    """Residual encoder: 7x7/2 stem, 2x2 max pool, then one stage per entry
    of stage_channels (first stage stride 1, the rest stride 2). The dense
    output is the last stage bilinearly upsampled."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch0 = cfg.stage_channels[0]
        self.stem_conv = Conv2d(rng, cfg.in_channels, ch0, 7, stride=2, padding=3)
        self.stem_bn = BatchNorm(ch0)
        self.stages = []
        cin = ch0
        for i, ch in enumerate(cfg.stage_channels):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(ResidualBlock(rng, cin, ch, stride))
                cin = ch
            self.stages.append(blocks)
        if cfg.out_channels != cfg.stage_channels[-1]:
            self.out_proj = Conv2d(rng, cfg.stage_channels[-1], cfg.out_channels, 1, padding=0)
        else:
            self.out_proj = None

    def _children(self):
        yield "stem_conv", self.stem_conv
        yield "stem_bn", self.stem_bn
        for i, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield f"stages.{i}.{b}", block
        if self.out_proj is not None:
            yield "out_proj", self.out_proj

    def forward_stages(self, x: Tensor) -> List[Tensor]:
        if x.ndim != 4 or x.shape[2] % self.cfg.total_stride or x.shape[3] % self.cfg.total_stride:
            raise ShapeMismatch(
                f"encoder input {x.shape} must be NCHW with H,W divisible by {self.cfg.total_stride}")
        h = tz.relu(self.stem_bn.forward(self.stem_conv.forward(x)))
        h = ops.maxpool2d(h, 2)
        outs = []
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h)
            outs.append(h)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        h = self.forward_stages(x)[-1]
        if self.out_proj is not None:
            h = self.out_proj.forward(h)
        return ops.bilinear_upsample(h, self.cfg.output_upsample_factor)


@dataclass
class HeadConfig:
    projector_hidden: int = 128
    predictor_hidden: int = 32
    out_dim: int = 128

    def validate(self) -> None:
        if min(self.projector_hidden, self.predictor_hidden, self.out_dim) <= 0:
            raise ConfigInvalid(f"head extents must be positive: {self}")


class MLPHead(Module):
    """linear -> BN -> ReLU -> linear, on batches of row vectors."""

    def __init__(self, rng, cin: int, hidden: int, cout: int):
        super().__init__()
        # no fc1 bias: the batch norm right after would absorb it anyway,
        # leaving a parameter whose gradient is identically zero
        self.fc1 = Linear(rng, cin, hidden, bias=False)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(rng, hidden, cout)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise ShapeMismatch(f"head input must be (N, C), got {x.shape}")
        return self.fc2.forward(tz.relu(self.bn.forward(self.fc1.forward(x))))


class SSLModel(Module):
    """Siamese encoder plus projector/predictor heads for pre-training."""

    def __init__(self, enc_cfg: EncoderConfig, head_cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        head_cfg.validate()
        self.encoder = Encoder(enc_cfg, rng)
        self.head_cfg = head_cfg
        self.projector = MLPHead(rng, enc_cfg.out_channels, head_cfg.projector_hidden, head_cfg.out_dim)
        self.predictor = MLPHead(rng, head_cfg.out_dim, head_cfg.predictor_hidden, head_cfg.out_dim)

    def encode(self, images: Tensor) -> Tensor:
        return self.encoder.forward(images)

    def project(self, x: Tensor) -> Tensor:
        return self.projector.forward(x)

    def predict(self, z: Tensor) -> Tensor:
        return self.predictor.forward(z)


@dataclass
class CDNetConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fpn_channels: int = 32
    num_classes: int = 2

    def validate(self) -> None:
        self.encoder.validate()
        if self.fpn_channels <= 0:
            raise ConfigInvalid("fpn_channels must be positive")
        if self.num_classes != 2:
            raise ConfigInvalid("change detection is binary: num_classes must be 2")


class FPNDecoder(Module):
    """Light FPN: 1x1 laterals, top-down nearest+add, one 3x3 smooth, 1x1 classifier."""

    def __init__(self, rng, stage_channels: Sequence[int], fpn_channels: int, num_classes: int):
        super().__init__()
        self.laterals = [Conv2d(rng, ch, fpn_channels, 1, padding=0) for ch in stage_channels]
        self.smooth = Conv2d(rng, fpn_channels, fpn_channels, 3)
        self.classifier = Conv2d(rng, fpn_channels, num_classes, 1, padding=0, bias=True)

    def forward(self, stage_feats: Sequence[Tensor]) -> Tensor:
        tops = [lat.forward(f) for lat, f in zip(self.laterals, stage_feats)]
        h = tops[-1]
        for lower in reversed(tops[:-1]):
            h = tz.add(ops.nearest_resize(h, lower.shape[2:]), lower)
        h = tz.relu(self.smooth.forward(h))
        return self.classifier.forward(h)


class ChangeDetector(Module):
    """Siamese encoder, absolute-difference fusion, FPN decoder to per-pixel logits."""

    def __init__(self, cfg: CDNetConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, rng)
        self.decoder = FPNDecoder(rng, cfg.encoder.stage_channels, cfg.fpn_channels, cfg.num_classes)

    def forward(self, img_t1: Tensor, img_t2: Tensor) -> Tensor:
        if img_t1.shape != img_t2.shape:
            raise ShapeMismatch(f"bitemporal shapes differ: {img_t1.shape} vs {img_t2.shape}")
        feats1 = self.encoder.forward_stages(img_t1)
        feats2 = self.encoder.forward_stages(img_t2)
        diffs = [tz.absolute(tz.sub(a, b)) for a, b in zip(feats1, feats2)]
        logits = self.decoder.forward(diffs)
        factor = img_t1.shape[2] // logits.shape[2]
        return ops.bilinear_upsample(logits, factor)
