"""MobileNet-V2 style encoder returning the stride 4/8/16/32 stage outputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nnops import BatchNorm2d, Conv2d, ConvBNReLU, Module, Sequential
from .tensorcore import ShapeError, Tensor, add

# (expansion, out_channels, repeats, first_stride), grouped by the stride each
# stage ends at: 2, 4, 8, 16, 32.
MOBILENET_V2_STAGES = (
    ((1, 16, 1, 1),),
    ((6, 24, 2, 2),),
    ((6, 32, 3, 2),),
    ((6, 64, 4, 2), (6, 96, 3, 1)),
    ((6, 160, 3, 2), (6, 320, 1, 1)),
)


def make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass(frozen=True)
class BlockSpec:
    expansion: int
    out_channels: int
    stride: int


def _expand_stages(width: float) -> list[list[BlockSpec]]:
    stages = []
    for groups in MOBILENET_V2_STAGES:
        blocks = []
        for t, c, n, s in groups:
            c = make_divisible(c * width)
            blocks.extend(BlockSpec(t, c, s if i == 0 else 1) for i in range(n))
        stages.append(blocks)
    return stages


@dataclass
class BackboneConfig:
    preset: str = "paper"
    width_multiplier: float = 1.0
    stem_channels: int = 32
    stage_specs: list[list[BlockSpec]] = field(default_factory=list)

    def __post_init__(self):
        if not self.stage_specs:
            self.stage_specs = _expand_stages(self.width_multiplier)

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(preset="paper", width_multiplier=1.0, stem_channels=32)

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(preset="toy", width_multiplier=0.25, stem_channels=make_divisible(32 * 0.25))

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        return tuple(stage[-1].out_channels for stage in self.stage_specs[1:])

    def validate(self) -> None:
        if len(self.stage_specs) != 5:
            raise ValueError(f"expected 5 stages, got {len(self.stage_specs)}")
        stride = 2  # stem
        for k, stage in enumerate(self.stage_specs, start=1):
            for b in stage:
                stride *= b.stride
            if stride != 2**k:
                raise ValueError(f"stage {k} ends at stride {stride}, expected {2**k}")


class StageFeatures(NamedTuple):
    e1: Tensor
    e2: Tensor
    e3: Tensor
    e4: Tensor


class InvertedResidual(Module):
    def __init__(self, cin: int, cout: int, stride: int, expansion: float, rng=None):
        super().__init__()
        hidden = int(round(cin * expansion))
        self.use_residual = stride == 1 and cin == cout
        layers = []
        if hidden != cin:
            layers.append(ConvBNReLU(cin, hidden, 1, rng=rng))
        layers += [
            ConvBNReLU(hidden, hidden, 3, stride, groups=hidden, rng=rng),
            Conv2d(hidden, cout, 1, bias=False, rng=rng),
            BatchNorm2d(cout),
        ]
        self.conv = Sequential(*layers)

    def forward(self, x):
        y = self.conv(x)
        return add(x, y) if self.use_residual else y


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.stem = ConvBNReLU(3, cfg.stem_channels, 3, 2, rng=rng)
        cin = cfg.stem_channels
        for k, stage in enumerate(cfg.stage_specs, start=1):
            blocks = []
            for b in stage:
                blocks.append(InvertedResidual(cin, b.out_channels, b.stride, b.expansion, rng=rng))
                cin = b.out_channels
            setattr(self, f"stage{k}", Sequential(*blocks))

    @property
    def out_channels(self) -> tuple[int, int, int, int]:
        return self.cfg.stage_channels

    def forward(self, image: Tensor) -> StageFeatures:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input extents {h}x{w} must be divisible by 32")
        x = self.stem(image)
        x = self.stage1(x)
        e1 = self.stage2(x)
        e2 = self.stage3(e1)
        e3 = self.stage4(e2)
        e4 = self.stage5(e3)
        return StageFeatures(e1, e2, e3, e4)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(cfg, seed=seed)
