"""Exact Euclidean distance transform and boundary/center/others decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

INF = np.iinfo(np.int64).max

BACKGROUND, BOUNDARY, CENTER, OTHERS = 0, 1, 2, 3
PALETTE = {BACKGROUND: 0, BOUNDARY: 85, OTHERS: 170, CENTER: 255}


def _column_pass(bg: np.ndarray, big: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest background row per column: (squared row offset, row index)."""
    h, w = bg.shape
    rows = np.arange(h)[:, None]
    above = np.where(bg, rows, -1)
    np.maximum.accumulate(above, axis=0, out=above)
    below = np.where(bg, rows, h + h)
    below = np.minimum.accumulate(below[::-1], axis=0)[::-1]
    d_above = np.where(above >= 0, rows - above, big)
    d_below = np.where(below < h, below - rows, big)
    take_above = d_above <= d_below  # ties go to the smaller row
    idx = np.where(take_above, above, below)
    d = np.minimum(d_above, d_below)
    f = np.where(d >= big, big, d * d)
    idx = np.where(d >= big, -1, idx)
    return f.astype(np.int64), idx


def _envelope_row(f: list[int]) -> tuple[list[int], list[int]]:
    """Lower envelope of parabolas f[q] + (x - q)^2 over integer x.

    Intersections are kept as exact fractions (numerator, denominator > 0).
    Returns the minimum value and the minimising q (smallest q on ties).
    """
    n = len(f)
    v = [0]
    z_num = [None]  # None stands for -inf
    k = 0
    for q in range(1, n):
        while True:
            p = v[k]
            num = (f[q] + q * q) - (f[p] + p * p)
            den = 2 * (q - p)
            zk = z_num[k]
            # pop while s <= z[k]
            if zk is not None and num * zk[1] <= zk[0] * den:
                v.pop()
                z_num.pop()
                k -= 1
                continue
            break
        v.append(q)
        z_num.append((num, den))
        k += 1
    vals = [0] * n
    arg = [0] * n
    k = 0
    for x in range(n):
        # advance while z[k+1] < x
        while k + 1 < len(v) and z_num[k + 1][0] < x * z_num[k + 1][1]:
            k += 1
        q = v[k]
        vals[x] = f[q] + (x - q) * (x - q)
        arg[x] = q
    return vals, arg


def edt_with_indices(mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Squared distance from each pixel to the nearest zero pixel, and its (row, col).

    Ties are broken by smallest column, then smallest row. Without any zero
    pixel every distance is ``INF`` and every index is -1.
    """
    m = np.asarray(mask)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {m.shape}")
    fg = m != 0
    bg = ~fg
    h, w = fg.shape
    if not bg.any():
        full = np.full((h, w), INF, dtype=np.int64)
        neg = np.full((h, w), -1, dtype=np.int64)
        return full, neg, neg.copy()
    big = (h + w) ** 2 + 1  # exceeds any finite squared distance
    f, row_idx = _column_pass(bg, big)
    dist = np.zeros((h, w), dtype=np.int64)
    ir = np.zeros((h, w), dtype=np.int64)
    ic = np.zeros((h, w), dtype=np.int64)
    for r in range(h):
        if not fg[r].any():
            dist[r] = 0
            ir[r] = r
            ic[r] = np.arange(w)
            continue
        vals, arg = _envelope_row(f[r].tolist())
        arg = np.asarray(arg)
        dist[r] = vals
        ic[r] = arg
        ir[r] = row_idx[r, arg]
    return dist, ir, ic


def edt_squared(mask) -> np.ndarray:
    """Integer squared Euclidean distance of each foreground pixel to the background."""
    return edt_with_indices(mask)[0]


@dataclass
class TriRegionLabel:
    region: np.ndarray  # uint8 codes BACKGROUND/BOUNDARY/CENTER/OTHERS
    dist2: np.ndarray

    def mask_of(self, *codes: int) -> np.ndarray:
        return np.isin(self.region, codes).astype(np.uint8)

    @property
    def boundary(self) -> np.ndarray:
        return self.mask_of(BOUNDARY)

    @property
    def center(self) -> np.ndarray:
        return self.mask_of(CENTER)

    @property
    def others(self) -> np.ndarray:
        return self.mask_of(OTHERS)

    def to_palette(self) -> np.ndarray:
        lut = np.zeros(4, dtype=np.uint8)
        for code, value in PALETTE.items():
            lut[code] = value
        return lut[self.region]


def center_count(n_foreground: int, center_frac: float) -> int:
    # exact ceil: 0.2 as a float is not 1/5
    return math.ceil(Fraction(str(center_frac)) * n_foreground)


def decompose(
    mask, boundary_thresh: int = 5, center_frac: float = 0.20, dist2: np.ndarray | None = None
) -> TriRegionLabel:
    """Split the foreground into boundary, center and others.

    Boundary: distance to background < ``boundary_thresh``. Center: the top
    ``ceil(center_frac * |fg|)`` foreground pixels by distance (row-major
    order on ties) that are not boundary. Others: the rest.
    """
    fg = np.asarray(mask) != 0
    if dist2 is None:
        dist2 = edt_squared(fg)
    region = np.zeros(fg.shape, dtype=np.uint8)
    n = int(fg.sum())
    if n == 0:
        return TriRegionLabel(region, dist2)
    boundary = fg & (dist2 < boundary_thresh * boundary_thresh)
    flat_idx = np.flatnonzero(fg)
    d = dist2.ravel()[flat_idx]
    # stable sort on -d keeps row-major order within equal distances
    order = np.argsort(-d, kind="stable")
    top = flat_idx[order[: center_count(n, center_frac)]]
    center = np.zeros(fg.size, dtype=bool)
    center[top] = True
    center = center.reshape(fg.shape) & ~boundary
    region[fg] = OTHERS
    region[boundary] = BOUNDARY
    region[center] = CENTER
    return TriRegionLabel(region, dist2)


def region_targets(mask, label: TriRegionLabel | None = None) -> dict[str, np.ndarray]:
    """Binary targets keyed F, B, C, O, CO, BO."""
    fg = (np.asarray(mask) != 0).astype(np.uint8)
    label = label if label is not None else decompose(fg)
    b, c, o = label.boundary, label.center, label.others
    return {"F": fg, "B": b, "C": c, "O": o, "CO": c | o, "BO": b | o}


def supervision_targets(mask, label: TriRegionLabel | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(g1 boundary|others, g2 center, g3 full)."""
    t = region_targets(mask, label)
    return t["BO"], t["C"], t["F"]
