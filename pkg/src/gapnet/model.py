"""GAPNet assembly: encoder, global feature extractor, GPC/CSA decoder and heads.

Decoder wiring (all ``Up`` are bilinear, ``G`` a 1x1 conv + BN + ReLU):

    D_L = GPC(Concat(Up(G(E2)), G(E1)))              stride 4
    D_H = CSA(G(E3), G(E4))                          stride 16
    D_1 = GPC(Concat(Up(G_f), D_L))                  stride 4
    D_2 = CSA(D_H, G_f)                              stride 16
    D_3 = GPC(Concat(Up(D_2), D_1))                  stride 4
    p_i = sigmoid(Up(Conv1x1(D_i)))

CSA outputs are folded back to the finer of their two grids, see
:func:`gapnet.gapblocks.fold_tokens`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .backbone import Backbone, BackboneConfig
from .gapblocks import CSA, GFE, GPC, CSAConfig, GFEConfig, GPCConfig, fold_tokens
from .nnops import Conv2d, ConvBNReLU, Module, bilinear_upsample
from .tensorcore import MacCounter, ShapeError, Tensor, flatten_tokens

# supervision settings: output name -> target region
# F full, B boundary, C center, O others, CO center|others, BO boundary|others
SUPERVISION_SETTINGS: dict[str, dict[str, str]] = {
    "a": {"p3": "F", "dl": "F", "dh": "F", "gf": "F", "p2": "F", "p1": "F"},
    "b": {"p3": "F", "dl": "B", "dh": "C", "p2": "CO", "p1": "BO"},
    "c": {"p3": "F", "dl": "B", "dh": "O", "p2": "CO", "p1": "BO"},
    "d": {"p3": "F", "dl": "B", "dh": "CO", "p2": "CO", "p1": "BO"},
    "e": {"p3": "F", "gf": "C", "p1": "BO"},
    "f": {"p3": "F", "p2": "C", "p1": "BO"},
}
AUX_OUTPUTS = ("dl", "dh", "gf")

PAPER_PARAMS = 1.99e6
PAPER_MACS = 1.26e9
PAPER_CSA_PARAMS = 0.065e6
PAPER_GPC_PARAMS = 0.020e6

PARAM_GROUPS = ("backbone", "flow_backbone", "gfe", "gpc_sites", "csa_sites", "fusion", "reduce", "heads")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.paper)
    reduce_channels: tuple[int, int, int, int] = (16, 24, 32, 32)
    gf_channels: int = 32
    gpc: GPCConfig = field(default_factory=GPCConfig)
    csa: CSAConfig = field(default_factory=CSAConfig)
    gfe: GFEConfig = field(default_factory=GFEConfig)
    mode: str = "image"
    supervision_setting: str = "f"

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        bb = BackboneConfig.toy()
        cfg = cls(
            backbone=bb,
            reduce_channels=(8, 8, 16, 16),
            gf_channels=16,
            gpc=GPCConfig(channels=16, m=3),
            csa=CSAConfig(dim=16),
            gfe=GFEConfig(channels=bb.stage_channels[3], inner_dim=16, hidden=16),
        )
        return replace(cfg, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "paper":
            return cls.paper(**overrides)
        if name == "toy":
            return cls.toy(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    def validate(self) -> None:
        self.backbone.validate()
        if self.mode not in ("image", "video"):
            raise ValueError(f"mode must be image or video, got {self.mode!r}")
        if self.supervision_setting not in SUPERVISION_SETTINGS:
            raise ValueError(f"unknown supervision setting {self.supervision_setting!r}")
        if self.gfe.channels != self.backbone.stage_channels[3]:
            raise ValueError("GFE width must equal the stride-32 stage width")
        if len(self.reduce_channels) != 4 or min(self.reduce_channels) < 1:
            raise ValueError("reduce_channels needs four positive widths")
        if self.gpc.channels % 8:
            raise ValueError("GPC channels must be divisible by 8")


class ModelOutputs(NamedTuple):
    p1: Tensor
    p2: Tensor
    p3: Tensor
    d1: Tensor
    d2: Tensor
    d3: Tensor
    aux: dict

    def maps(self) -> dict[str, Tensor]:
        return {"p1": self.p1, "p2": self.p2, "p3": self.p3, **self.aux}


def fuse_low_video(rgb: Tensor, flow_feat: Tensor) -> Tensor:
    """rgb * sigmoid(flow) + rgb + flow."""
    if rgb.shape != flow_feat.shape:
        raise ShapeError(f"stream shapes differ: {rgb.shape} vs {flow_feat.shape}")
    return tc.add(tc.add(tc.mul(rgb, tc.sigmoid(flow_feat)), rgb), flow_feat)


def expand_flow_channels(flow2: np.ndarray) -> np.ndarray:
    """[N, 2, H, W] displacement -> [N, 3, H, W] with the magnitude appended."""
    mag = np.sqrt((flow2 * flow2).sum(axis=1, keepdims=True))
    return np.concatenate([flow2, mag], axis=1).astype(flow2.dtype)


def upsample_to(x: Tensor, ref: Tensor) -> Tensor:
    return bilinear_upsample(x, ref.shape[2:])


class GAPNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = cfg.backbone.stage_channels
        r1, r2, r3, r4 = cfg.reduce_channels
        cg, cd, gf = cfg.gpc.channels, cfg.csa.dim, cfg.gf_channels

        self.backbone = Backbone(cfg.backbone, rng=rng)
        self.gfe = GFE(cfg.gfe, rng=rng)
        self.reduce1 = ConvBNReLU(c1, r1, rng=rng)
        self.reduce2 = ConvBNReLU(c2, r2, rng=rng)
        self.reduce3 = ConvBNReLU(c3, r3, rng=rng)
        self.reduce4 = ConvBNReLU(c4, r4, rng=rng)
        self.reduce_gf = ConvBNReLU(c4, gf, rng=rng)

        self.proj_l = self._projection(r1 + r2, cg, rng)
        self.gpc_l = GPC(cfg.gpc, rng=rng)
        self.csa_h = CSA(cfg.csa, (r3, r4), rng=rng)
        self.proj_1 = self._projection(gf + cg, cg, rng)
        self.gpc_1 = GPC(cfg.gpc, rng=rng)
        self.csa_2 = CSA(cfg.csa, (cd, gf), rng=rng)
        self.proj_3 = self._projection(cd + cg, cg, rng)
        self.gpc_3 = GPC(cfg.gpc, rng=rng)

        self.head1 = Conv2d(cg, 1, rng=rng)
        self.head2 = Conv2d(cd, 1, rng=rng)
        self.head3 = Conv2d(cg, 1, rng=rng)

        # Built last so the main parameters do not depend on these choices.
        needed = set(SUPERVISION_SETTINGS[cfg.supervision_setting])
        if "dl" in needed:
            self.head_dl = Conv2d(cg, 1, rng=rng)
        if "dh" in needed:
            self.head_dh = Conv2d(cd, 1, rng=rng)
        if "gf" in needed:
            self.head_gf = Conv2d(gf, 1, rng=rng)

        if cfg.mode == "video":
            self.flow_backbone = Backbone(cfg.backbone, rng=rng)
            self.flow_reduce3 = ConvBNReLU(c3, r3, rng=rng)
            self.flow_reduce4 = ConvBNReLU(c4, r4, rng=rng)
            self.fuse3 = CSA(replace(cfg.csa, dim=r3), (r3, r3), rng=rng)
            self.fuse4 = CSA(replace(cfg.csa, dim=r4), (r4, r4), rng=rng)

    @staticmethod
    def _projection(cin: int, cout: int, rng) -> Module | None:
        return None if cin == cout else ConvBNReLU(cin, cout, rng=rng)

    def _site_in(self, proj: Module | None, x: Tensor) -> Tensor:
        return x if proj is None else proj(x)

    def _csa_map(self, block: CSA, fine: Tensor, coarse: Tensor) -> Tensor:
        tokens = block(flatten_tokens(fine), flatten_tokens(coarse))
        return fold_tokens(tokens, fine.shape[2:], coarse.shape[2:])

    def decode(self, e1: Tensor, e2: Tensor, s3: Tensor, s4: Tensor, e4: Tensor, out_size) -> ModelOutputs:
        """Decoder from E1/E2 (raw), reduced E3/E4 and raw E4 for the GFE."""
        r1 = self.reduce1(e1)
        r2 = self.reduce2(e2)
        d_l = self.gpc_l(self._site_in(self.proj_l, tc.concat([upsample_to(r2, r1), r1], axis=1)))
        d_h = self._csa_map(self.csa_h, s3, s4)

        g_f = self.reduce_gf(self.gfe(e4))
        d_1 = self.gpc_1(self._site_in(self.proj_1, tc.concat([upsample_to(g_f, d_l), d_l], axis=1)))
        d_2 = self._csa_map(self.csa_2, d_h, g_f)
        d_3 = self.gpc_3(self._site_in(self.proj_3, tc.concat([upsample_to(d_2, d_1), d_1], axis=1)))

        def head(conv, d):
            return tc.sigmoid(bilinear_upsample(conv(d), out_size))

        aux = {}
        for name, feat in (("dl", d_l), ("dh", d_h), ("gf", g_f)):
            conv = getattr(self, f"head_{name}", None)
            if conv is not None:
                aux[name] = head(conv, feat)
        return ModelOutputs(
            head(self.head1, d_1), head(self.head2, d_2), head(self.head3, d_3), d_1, d_2, d_3, aux
        )

    def forward_image(self, image: Tensor) -> ModelOutputs:
        e1, e2, e3, e4 = self.backbone(image)
        return self.decode(e1, e2, self.reduce3(e3), self.reduce4(e4), e4, image.shape[2:])

    def forward_video(self, rgb: Tensor, flow: Tensor, neutralize_flow: bool = False) -> ModelOutputs:
        """Two-stream forward; ``neutralize_flow`` skips the flow stream (debug)."""
        if self.cfg.mode != "video":
            raise ValueError("model was built for image mode")
        if rgb.shape[0] != flow.shape[0] or rgb.shape[2:] != flow.shape[2:]:
            raise ShapeError(f"stream extents differ: {rgb.shape} vs {flow.shape}")
        if neutralize_flow:
            return self.forward_image(rgb)
        if flow.shape[1] == 2:
            flow = Tensor(expand_flow_channels(flow.data))
        if flow.shape[1] != 3:
            raise ShapeError(f"flow input must have 2 or 3 channels, got {flow.shape[1]}")
        e1, e2, e3, e4 = self.backbone(rgb)
        f1, f2, f3, f4 = self.flow_backbone(flow)
        e1 = fuse_low_video(e1, f1)
        e2 = fuse_low_video(e2, f2)
        s3 = self._csa_map(self.fuse3, self.reduce3(e3), self.flow_reduce3(f3))
        s4 = self._csa_map(self.fuse4, self.reduce4(e4), self.flow_reduce4(f4))
        return self.decode(e1, e2, s3, s4, e4, rgb.shape[2:])

    def forward(self, image: Tensor, flow: Tensor | None = None) -> ModelOutputs:
        if flow is None:
            return self.forward_image(image)
        return self.forward_video(image, flow)


def build_model(cfg: ModelConfig, seed: int = 0) -> GAPNet:
    return GAPNet(cfg, seed=seed)


def _group_of(top: str) -> str:
    if top in ("backbone", "flow_backbone", "gfe"):
        return top
    if top.startswith("gpc_"):
        return "gpc_sites"
    if top.startswith("csa_"):
        return "csa_sites"
    if top.startswith("fuse") or top.startswith("flow_reduce"):
        return "fusion"
    if top.startswith("head"):
        return "heads"
    return "reduce"


def count_params(model: GAPNet) -> dict:
    """Exact parameter totals per component (running statistics excluded)."""
    out = {g: 0 for g in PARAM_GROUPS}
    sites: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        out[_group_of(top)] += p.size
        if top.startswith(("gpc_", "csa_")):
            sites[top] = sites.get(top, 0) + p.size
    out["total"] = sum(out[g] for g in PARAM_GROUPS)
    out["sites"] = sites
    return out


@dataclass
class MacReport:
    size: int
    total: int
    by_group: dict[str, int]
    by_site: dict[str, int]
    seconds: float

    @property
    def flops(self) -> int:
        return 2 * self.total


def count_macs(model: GAPNet, input_size: int = 384) -> MacReport:
    """Run one tape-free batch-1 forward under a :class:`MacCounter`."""
    if input_size % 32:
        raise ShapeError(f"input size {input_size} must be divisible by 32")
    was_training = model.training
    model.eval()
    dtype = model.backbone.stem.parameters()[0].dtype
    x = Tensor(np.zeros((1, 3, input_size, input_size), dtype=dtype))
    flow = Tensor(np.zeros((1, 3, input_size, input_size), dtype=dtype)) if model.cfg.mode == "video" else None
    t0 = time.perf_counter()
    try:
        with tc.no_tape(), MacCounter() as counter:
            model(x, flow)
    finally:
        model.train(was_training)
    by_group = {g: 0 for g in PARAM_GROUPS}
    by_site: dict[str, int] = {}
    for path, macs in counter.by_path.items():
        # path[0] is the model's own scope; components sit one level down
        top = path[1] if len(path) > 1 else "reduce"
        by_group[_group_of(top)] += macs
        if top.startswith(("gpc_", "csa_")):
            by_site[top] = by_site.get(top, 0) + macs
    return MacReport(input_size, counter.total, by_group, by_site, time.perf_counter() - t0)


def attention_matrix_macs(l_q: int, l_k: int, dim: int) -> int:
    """Q K^T plus weights @ V."""
    return l_q * l_k * dim * 2


def csa_token_lengths(input_size: int, strides: tuple[int, int] = (16, 32)) -> tuple[int, int]:
    """(query length, key/value length) of a CSA site fed stride-16/32 maps."""
    l1 = (input_size // strides[0]) ** 2
    l2 = (input_size // strides[1]) ** 2
    return l1 + l2, l2
