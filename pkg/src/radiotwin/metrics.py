"""Full-map and sparse-map error metrics and the per-site minimum validation MAE."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

SMAPE_EPS = 1e-8
SSIM_WINDOW = 8
SSIM_RANGE_DB = 100.0  # the [-140, -40] dBm dynamic range
SSIM_C1 = (0.01 * SSIM_RANGE_DB) ** 2
SSIM_C2 = (0.03 * SSIM_RANGE_DB) ** 2


@dataclass
class MetricReport:
    rmse: float
    mae: float
    smape: float
    pcc: float
    ssim: float | None
    n_points: int
    pcc_undefined: bool = False

    def as_row(self):
        return asdict(self)


def _pcc(p, t):
    dp = p - p.mean()
    dt = t - t.mean()
    denom = math.sqrt(float(dp @ dp)) * math.sqrt(float(dt @ dt))
    if denom == 0.0:
        return float("nan"), True
    return float(dp @ dt) / denom, False


def _report(p, t, ssim=None):
    err = p - t
    pcc, undefined = _pcc(p, t)
    return MetricReport(
        rmse=math.sqrt(float(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        smape=float(np.mean(np.abs(err) / (np.abs(p) + np.abs(t) + SMAPE_EPS))),
        pcc=pcc,
        ssim=ssim,
        n_points=int(p.size),
        pcc_undefined=undefined,
    )


def _box_mean(a, window):
    """Mean over every fully-contained window x window patch of the last two axes."""
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    w = window
    s = c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]
    return s / (w * w)


def ssim(x, y, window=SSIM_WINDOW, c1=SSIM_C1, c2=SSIM_C2) -> float:
    """Mean SSIM over all fully-contained ``window`` x ``window`` patches (uniform weights).

    Maps smaller than the window are scored as one patch.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("ssim inputs must share a shape")
    window = min(window, *x.shape[-2:])
    # centre first so the box moments do not cancel catastrophically
    shift = 0.5 * (x.mean() + y.mean())
    x, y = x - shift, y - shift
    mx, my = _box_mean(x, window), _box_mean(y, window)
    vx = _box_mean(x * x, window) - mx ** 2
    vy = _box_mean(y * y, window) - my ** 2
    cxy = _box_mean(x * y, window) - mx * my
    mx, my = mx + shift, my + shift
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def full_map_metrics(pred, truth) -> MetricReport:
    """Metrics over every cell. Accepts (H, W) maps or (N, H, W) batches."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return _report(p.ravel(), t.ravel(), ssim(p, t))


def sparse_map_metrics(pred, truth, mask=None) -> MetricReport:
    """Metrics over the valid cells only, pooled across a batch.

    ``mask`` defaults to the non-zero cells of ``truth``. Lists of maps are
    treated as a batch and may have different shapes.
    """
    if isinstance(pred, (list, tuple)):
        masks = mask if mask is not None else [None] * len(pred)
        ps, ts = [], []
        for p_n, t_n, m_n in zip(pred, truth, masks):
            p_n, t_n = np.asarray(p_n, float), np.asarray(t_n, float)
            m_n = (t_n != 0) if m_n is None else np.asarray(m_n, bool)
            ps.append(p_n[m_n])
            ts.append(t_n[m_n])
        p, t = np.concatenate(ps), np.concatenate(ts)
    else:
        pa, ta = np.asarray(pred, float), np.asarray(truth, float)
        if pa.shape != ta.shape:
            raise ValueError(f"shape mismatch {pa.shape} vs {ta.shape}")
        m = (ta != 0) if mask is None else np.asarray(mask, bool)
        p, t = pa[m], ta[m]
    if p.size == 0:
        raise ValueError("no valid cells")
    return _report(p, t)


def per_site_min_mae(trajectory) -> float:
    values = list(trajectory)
    if not values:
        raise ValueError("empty trajectory")
    return float(min(values))


def append_metric_rows(path, rows) -> None:
    """Append dict rows keyed by (scene, model, mode) plus metric columns to a CSV table."""
    path = Path(path)
    fields = ["scene", "model", "mode", "rmse", "mae", "smape", "pcc", "ssim", "n_points", "pcc_undefined"]
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)
