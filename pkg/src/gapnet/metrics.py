"""Salient-object-detection metrics: MAE, F-measure curve, weighted F, S-measure, E-measure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import edt_with_indices

EPS = np.spacing(1)  # MATLAB eps, as used by the reference toolboxes
F_BETA2 = 0.3
N_THRESHOLDS = 256


class EmptyForegroundError(ValueError):
    pass


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g) != 0
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def prepare_prediction(p) -> np.ndarray:
    """Min-max normalise only if values fall outside [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if lo < 0 or hi > 1:
        p = (p - lo) / (hi - lo) if hi > lo else np.zeros_like(p)
    return p


def mae(p, g) -> float:
    p, g = _pair(p, g)
    return float(np.mean(np.abs(p - g)))


def f_thresholds() -> np.ndarray:
    return np.arange(N_THRESHOLDS) / 255.0


@dataclass
class FCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray

    @property
    def f_max(self) -> float:
        return float(self.f.max())


def f_curve(p, g, beta2: float = F_BETA2) -> FCurve:
    """Precision/recall/F at thresholds k/255 with ``p >= t`` binarisation."""
    p, g = _pair(p, g)
    n_fg = int(g.sum())
    if n_fg == 0:
        raise EmptyForegroundError("ground truth has no foreground")
    t = f_thresholds()
    pf, pb = np.sort(p[g]), np.sort(p[~g])
    tp = pf.size - np.searchsorted(pf, t, side="left")
    fp = pb.size - np.searchsorted(pb, t, side="left")
    pos = tp + fp
    precision = np.where(pos > 0, tp / np.maximum(pos, 1), 0.0)
    recall = tp / n_fg
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    f = np.where(num > 0, num / np.where(den > 0, den, 1), 0.0)
    return FCurve(t, precision, recall, f)


def f_max(p, g, beta2: float = F_BETA2) -> float:
    return f_curve(p, g, beta2).f_max


def matlab_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def filter_zero_padded(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-size correlation with zero padding (the kernel here is symmetric)."""
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape
    padded = np.zeros((h + 2 * ph, w + 2 * pw))
    padded[ph : ph + h, pw : pw + w] = x
    out = np.zeros((h, w))
    for i in range(kh):
        for j in range(kw):
            out += k[i, j] * padded[i : i + h, j : j + w]
    return out


def f_weighted(p, g, beta2: float = 1.0) -> float:
    p, g = _pair(p, g)
    if not g.any():
        raise EmptyForegroundError("ground truth has no foreground")
    # nearest foreground pixel for every background pixel
    d2, ir, ic = edt_with_indices(~g)
    dst = np.sqrt(d2.astype(np.float64))
    e = np.abs(p - g)
    et = e.copy()
    bg = ~g
    et[bg] = e[ir[bg], ic[bg]]
    ea = filter_zero_padded(et, matlab_gaussian(7, 5.0))
    min_e_ea = np.where(g & (ea < e), ea, e)
    b = np.where(bg, 2 - np.exp(np.log(0.5) / 5 * dst), 1.0)
    ew = min_e_ea * b
    tpw = g.sum() - ew[g].sum()
    fpw = ew[bg].sum()
    r = 1 - ew[g].mean()
    prec = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * r * prec / (r + beta2 * prec + EPS))


def _s_object(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(p, g, alpha: float = 0.5) -> float:
    p, g = _pair(p, g)
    y = g.mean()
    if y == 0:
        s = 1 - p.mean()
    elif y == 1:
        s = p.mean()
    else:
        gf = g.astype(np.float64)
        obj = _s_object(p[g]) * y + _s_object((1 - p)[~g]) * (1 - y)
        h, w = g.shape
        area = h * w
        cy, cx = np.argwhere(g).mean(axis=0).round()
        cy, cx = int(cy) + 1, int(cx) + 1
        w_lt = cx * cy / area
        w_rt = cy * (w - cx) / area
        w_lb = (h - cy) * cx / area
        w_rb = 1 - w_lt - w_rt - w_lb
        reg = (
            _ssim(p[:cy, :cx], gf[:cy, :cx]) * w_lt
            + _ssim(p[:cy, cx:], gf[:cy, cx:]) * w_rt
            + _ssim(p[cy:, :cx], gf[cy:, :cx]) * w_lb
            + _ssim(p[cy:, cx:], gf[cy:, cx:]) * w_rb
        )
        s = alpha * obj + (1 - alpha) * reg
    return float(min(max(s, 0.0), 1.0))


def e_thresholds() -> np.ndarray:
    # every level lies in (0, 1], so a binary map equal to g aligns at all levels
    return (np.arange(N_THRESHOLDS) + 1) / 256.0


def e_curve(p, g) -> np.ndarray:
    """Enhanced-alignment score per threshold (``p >= t``), mean over pixels."""
    p, g = _pair(p, g)
    n = g.size
    n_fg = int(g.sum())
    t = e_thresholds()
    pf, pb = np.sort(p[g]), np.sort(p[~g])
    tp = pf.size - np.searchsorted(pf, t, side="left")  # pred 1, gt 1
    fp = pb.size - np.searchsorted(pb, t, side="left")  # pred 1, gt 0
    pred_fg = tp + fp
    if n_fg == 0:
        return (n - pred_fg) / n
    if n_fg == n:
        return pred_fg / n
    fn = n_fg - tp
    tn = (n - n_fg) - fp
    mp = pred_fg / n
    mg = n_fg / n
    total = np.zeros(t.size)
    for count, phi_p, phi_g in (
        (tp, 1 - mp, 1 - mg),
        (fp, 1 - mp, -mg),
        (fn, -mp, 1 - mg),
        (tn, -mp, -mg),
    ):
        xi = 2 * phi_p * phi_g / (phi_p * phi_p + phi_g * phi_g)
        total += count * (1 + xi) ** 2 / 4
    return total / n


def e_measure(p, g) -> tuple[float, float]:
    c = e_curve(p, g)
    return float(c.max()), float(c.mean())


METRIC_KEYS = ("mae", "fmax", "fw", "sm", "emax", "emean")


@dataclass
class ImageMetrics:
    name: str
    mae: float
    f_max: float | None
    f_weighted: float | None
    s_measure: float | None
    e_max: float | None
    e_mean: float | None

    def values(self) -> tuple:
        return (self.mae, self.f_max, self.f_weighted, self.s_measure, self.e_max, self.e_mean)


def evaluate_pair(p, g, name: str = "", wf_beta2: float = 1.0) -> ImageMetrics:
    """All six metrics; the five structure metrics are None for an empty ground truth."""
    p = prepare_prediction(p)
    p, g = _pair(p, g)
    m = mae(p, g)
    if not g.any():
        return ImageMetrics(name, m, None, None, None, None, None)
    emax, emean = e_measure(p, g)
    return ImageMetrics(name, m, f_max(p, g), f_weighted(p, g, wf_beta2), s_measure(p, g), emax, emean)


@dataclass
class MetricReport:
    mae: float
    f_max: float
    f_weighted: float
    s_measure: float
    e_max: float
    e_mean: float
    count: int
    per_image: list[ImageMetrics] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)  # empty ground truth
    skipped: list[str] = field(default_factory=list)  # unreadable or unmatched

    def as_dict(self) -> dict[str, float]:
        vals = (self.mae, self.f_max, self.f_weighted, self.s_measure, self.e_max, self.e_mean)
        out = dict(zip(METRIC_KEYS, vals))
        out["count"] = self.count
        return out

    def to_keyvalue(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v}" if k == "count" else f"{k}={v:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'image':<24}" + "".join(f"{k:>9}" for k in METRIC_KEYS)
        rows = [head, "-" * len(head)]

        def fmt(v):
            return f"{'-':>9}" if v is None else f"{v:>9.4f}"

        for im in self.per_image:
            rows.append(f"{im.name:<24}" + "".join(fmt(v) for v in im.values()))
        rows.append("-" * len(head))
        rows.append(f"{'mean':<24}" + "".join(fmt(v) for v in list(self.as_dict().values())[:6]))
        rows.append(f"count={self.count} excluded={len(self.excluded)} skipped={len(self.skipped)}")
        return "\n".join(rows) + "\n"


def aggregate(per_image: list[ImageMetrics]) -> MetricReport:
    per_image = sorted(per_image, key=lambda m: m.name)

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else math.nan

    cols = list(zip(*(m.values() for m in per_image))) if per_image else [()] * 6
    excluded = [m.name for m in per_image if m.f_max is None]
    return MetricReport(*(mean(c) for c in cols), count=len(per_image), per_image=per_image, excluded=excluded)


def evaluate_dataset(pred_dir, gt_dir, wf_beta2: float = 1.0) -> MetricReport:
    """Score stem-matched prediction/mask pairs; predictions are resized to each mask."""
    from .dataio import IMAGE_SUFFIXES, DataError, load_mask, load_prediction

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {f.stem: f for f in sorted(pred_dir.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES}
    gts = {f.stem: f for f in sorted(gt_dir.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES}
    skipped = [f"{s}: no prediction" for s in sorted(set(gts) - set(preds))]
    skipped += [f"{s}: no ground truth" for s in sorted(set(preds) - set(gts))]
    results = []
    for stem in sorted(set(preds) & set(gts)):
        try:
            g = load_mask(gts[stem])
            p = load_prediction(preds[stem], g.shape)
        except DataError as exc:
            skipped.append(f"{stem}: {exc}")
            continue
        results.append(evaluate_pair(p, g, stem, wf_beta2))
    report = aggregate(results)
    report.skipped = skipped
    return report
