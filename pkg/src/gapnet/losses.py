"""BCE + Dice losses and the granularity-aware overall loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .model import SUPERVISION_SETTINGS, ModelOutputs
from .tensorcore import ShapeError, Tensor, primitive

EPS = 1e-7
DICE_SMOOTH = 1.0


def _target(g, p: Tensor) -> np.ndarray:
    g = np.asarray(g, dtype=p.dtype)
    if g.shape != p.shape:
        if g.size == p.size:
            g = g.reshape(p.shape)
        else:
            raise ShapeError(f"target shape {g.shape} does not match prediction {p.shape}")
    return g


def bce(p: Tensor, g, eps: float = EPS) -> Tensor:
    """Pixel-mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    g = _target(g, p)
    x = p.data
    pc = np.clip(x, eps, 1 - eps)
    n = x.size
    loss = -(g * np.log(pc) + (1 - g) * np.log1p(-pc))
    out = np.asarray(loss.sum() / n, dtype=x.dtype)
    inside = (x > eps) & (x < 1 - eps)

    def grad(gout):
        dp = (pc - g) / (pc * (1 - pc)) / n
        return (np.where(inside, dp, 0).astype(x.dtype) * gout,)

    return primitive(out, (p,), grad)


def dice(p: Tensor, g, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(gp) + s) / (sum(g) + sum(p) + s), per sample then batch-mean."""
    g = _target(g, p)
    x = p.data
    nb = x.shape[0] if x.ndim >= 3 else 1
    xs = x.reshape(nb, -1)
    gs = g.reshape(nb, -1)
    inter = (xs * gs).sum(axis=1)
    denom = gs.sum(axis=1) + xs.sum(axis=1) + smooth
    num = 2 * inter + smooth
    out = np.asarray(np.mean(1 - num / denom), dtype=x.dtype)

    def grad(gout):
        d = -(2 * gs * denom[:, None] - num[:, None]) / (denom[:, None] ** 2) / nb
        return ((d * gout).reshape(x.shape).astype(x.dtype),)

    return primitive(out, (p,), grad)


def bce_dice(p: Tensor, g) -> tuple[Tensor, Tensor, Tensor]:
    b = bce(p, g)
    d = dice(p, g)
    return b, d, tc.add(b, d)


@dataclass
class LossReport:
    overall: Tensor
    terms: dict[str, tuple[float, float, float]] = field(default_factory=dict)  # name -> (bce, dice, sum)

    def __float__(self) -> float:
        return self.overall.item()


def as_region_targets(targets) -> dict:
    """Accept either the (g1, g2, g3) trio or a region dict keyed F/B/C/O/CO/BO."""
    if isinstance(targets, dict):
        return targets
    g1, g2, g3 = targets
    return {"BO": g1, "C": g2, "F": g3}


def overall_loss(outputs: ModelOutputs, targets, setting: str = "f") -> LossReport:
    """Sum of BCE + Dice over the outputs supervised under ``setting``."""
    if setting not in SUPERVISION_SETTINGS:
        raise ValueError(f"unknown supervision setting {setting!r}")
    regions = as_region_targets(targets)
    maps = outputs.maps()
    total = None
    terms = {}
    for name, region in SUPERVISION_SETTINGS[setting].items():
        if name not in maps:
            raise ValueError(f"setting {setting!r} supervises {name!r} but the model has no such output")
        if region not in regions:
            raise ValueError(f"setting {setting!r} needs target region {region!r}")
        b, d, s = bce_dice(maps[name], regions[region])
        terms[name] = (b.item(), d.item(), s.item())
        total = s if total is None else tc.add(total, s)
    return LossReport(total, terms)
